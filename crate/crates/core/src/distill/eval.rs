use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Frame;
use super::model::ModelState;
use crate::bev::{rasterize, GridSpec, Tensor3};
use crate::error::{Error, Result};
use crate::losses::{sigmoid, HEAD_OUTPUTS, NUM_CLASSES};
use crate::simlidar::{BoxLabel, ObjectClass};

pub const RECALL_POINTS: usize = 40;

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

/// Clips `subject` against the half-plane left of the directed edge `a -> b`.
fn clip(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(subject.len() + 2);
    for i in 0..subject.len() {
        let p = subject[i];
        let q = subject[(i + 1) % subject.len()];
        let (sp, sq) = (side(p), side(q));
        if sp >= 0.0 {
            out.push(p);
        }
        if (sp >= 0.0) != (sq >= 0.0) {
            let t = sp / (sp - sq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

/// Area of the intersection of two convex counter-clockwise polygons.
pub fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly = a.to_vec();
    for i in 0..b.len() {
        if poly.len() < 3 {
            return 0.0;
        }
        poly = clip(&poly, b[i], b[(i + 1) % b.len()]);
    }
    if poly.len() < 3 {
        0.0
    } else {
        polygon_area(&poly).max(0.0)
    }
}

/// Intersection over union of two yaw-rotated BEV rectangles.
pub fn bev_iou(a: &BoxLabel, b: &BoxLabel) -> f64 {
    let inter = convex_intersection_area(&a.bev_corners(), &b.bev_corners());
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub label: BoxLabel,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// BEV IoU match threshold per class, indexed by class id.
    pub iou_thresholds: [f64; NUM_CLASSES],
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Ground height in the sensor frame; decoded boxes rest on it.
    pub ground_z: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: [0.7, 0.5, 0.5],
            score_threshold: 0.3,
            nms_iou: 0.5,
            ground_z: -1.73,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.iou_thresholds.iter().all(|&t| unit(t) && t > 0.0)
            || !unit(self.score_threshold)
            || !unit(self.nms_iou)
            || !self.ground_z.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "invalid evaluation thresholds: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn threshold(&self, class: ObjectClass) -> f64 {
        self.iou_thresholds[class.id()]
    }
}

/// Class whose size prior is nearest in `(ln l, ln w)`.
pub fn nearest_class(ln_l: f64, ln_w: f64) -> ObjectClass {
    let dist = |c: ObjectClass| {
        let p = c.size_prior();
        (ln_l - p[0].ln()).powi(2) + (ln_w - p[1].ln()).powi(2)
    };
    ObjectClass::ALL
        .into_iter()
        .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .expect("non-empty")
}

const LOG_SIZE_RANGE: (f64, f64) = (-4.0, 4.0);

/// Box regressed at cell `(i, j)`. The head has no class channel, so the class
/// is the one whose size prior is nearest to the regressed footprint; the
/// vertical extent is the class prior resting on `ground_z`.
pub fn decode_cell(out: &[f64], spec: &GridSpec, i: usize, j: usize, ground_z: f64) -> Detection {
    let (cx, cy) = spec.cell_center(i, j);
    let ln_l = out[3].clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1);
    let ln_w = out[4].clamp(LOG_SIZE_RANGE.0, LOG_SIZE_RANGE.1);
    let class = nearest_class(ln_l, ln_w);
    let height = class.size_prior()[2];
    let heading = if out[5] == 0.0 && out[6] == 0.0 {
        0.0
    } else {
        out[5].atan2(out[6])
    };
    Detection {
        label: BoxLabel {
            class,
            center: [
                cx + out[1] * spec.cell,
                cy + out[2] * spec.cell,
                ground_z + 0.5 * height,
            ],
            dims: [ln_l.exp(), ln_w.exp(), height],
            heading: crate::simlidar::wrap_angle(heading),
        },
        score: sigmoid(out[0]),
    }
}

/// Greedy non-maximum suppression: highest score first (earlier index on
/// ties); a detection is dropped if its IoU with a kept one exceeds `nms_iou`.
pub fn nms(dets: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = dets[idx];
        if kept.iter().all(|k| bev_iou(&k.label, &d.label) <= nms_iou) {
            kept.push(d);
        }
    }
    kept
}

pub fn decode_head(
    head_out: &Tensor3,
    spec: &GridSpec,
    score_threshold: f64,
    ground_z: f64,
) -> Vec<Detection> {
    debug_assert_eq!(head_out.c, HEAD_OUTPUTS);
    let mut dets = Vec::new();
    for i in 0..head_out.h {
        for j in 0..head_out.w {
            let out = head_out.cell(i * head_out.w + j);
            if sigmoid(out[0]) >= score_threshold {
                dets.push(decode_cell(out, spec, i, j, ground_z));
            }
        }
    }
    dets
}

/// Detections for one frame, after score thresholding and NMS.
pub fn predict(
    model: &ModelState,
    grid: &Tensor3,
    spec: &GridSpec,
    config: &EvalConfig,
) -> Result<Vec<Detection>> {
    let fwd = model.forward(grid)?;
    let dets = decode_head(&fwd.head_out, spec, config.score_threshold, config.ground_z);
    Ok(nms(dets, config.nms_iou))
}

/// Interpolated average precision in percent: the mean over recall levels
/// `j/40, j = 1..40` of the best precision reached at recall at least that level.
pub fn average_precision(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(scored.len());
    for (rank, &(_, hit)) in scored.iter().enumerate() {
        if hit {
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    // Suffix maximum of precision, so interp(r) is a lookup.
    let mut best = vec![0.0f64; curve.len() + 1];
    for k in (0..curve.len()).rev() {
        best[k] = best[k + 1].max(curve[k].1);
    }
    let mut sum = 0.0;
    for j in 1..=RECALL_POINTS {
        let r = j as f64 / RECALL_POINTS as f64;
        if let Some(k) = curve.iter().position(|&(rec, _)| rec >= r - 1e-12) {
            sum += best[k];
        }
    }
    100.0 * sum / RECALL_POINTS as f64
}

/// Per-class AP over a set of frames. `predictions[f]` are the detections of
/// frame `f`, in that frame's output order. Predictions of a class are ranked
/// by score, ties broken by frame index then position in the frame's list;
/// each one is matched to the unmatched ground truth of its class and frame
/// with the highest IoU, counting as a true positive when that IoU reaches the
/// class threshold. Classes without ground truth are `None`.
pub fn class_aps(
    predictions: &[Vec<Detection>],
    ground_truth: &[Vec<BoxLabel>],
    config: &EvalConfig,
) -> Result<[Option<f64>; NUM_CLASSES]> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Mismatch(format!(
            "{} prediction lists for {} frames",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut out = [None; NUM_CLASSES];
    for class in ObjectClass::ALL {
        let n_gt: usize = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class == class).count())
            .sum();
        if n_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize, f64)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(f, dets)| {
                dets.iter()
                    .enumerate()
                    .filter(|(_, d)| d.label.class == class)
                    .map(move |(k, d)| (f, k, d.score))
            })
            .collect();
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut matched: Vec<Vec<bool>> =
            ground_truth.iter().map(|g| vec![false; g.len()]).collect();
        let thr = config.threshold(class);
        let scored: Vec<(f64, bool)> = ranked
            .iter()
            .map(|&(f, k, score)| {
                let det = &predictions[f][k].label;
                let mut best: Option<(usize, f64)> = None;
                for (g, gt) in ground_truth[f].iter().enumerate() {
                    if gt.class != class || matched[f][g] {
                        continue;
                    }
                    let iou = bev_iou(det, gt);
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                match best {
                    Some((g, iou)) if iou >= thr => {
                        matched[f][g] = true;
                        (score, true)
                    }
                    _ => (score, false),
                }
            })
            .collect();
        out[class.id()] = Some(average_precision(&scored, n_gt));
    }
    Ok(out)
}

/// Mean over the classes that have ground truth; 0 when none do.
pub fn mean_ap(aps: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = aps.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP in percent per class name; classes without ground truth are omitted.
    pub ap: Vec<(String, f64)>,
    pub map: f64,
    pub frames: usize,
    pub ground_truth: usize,
    pub predictions: usize,
}

impl EvalResult {
    pub fn from_aps(
        aps: &[Option<f64>; NUM_CLASSES],
        frames: usize,
        ground_truth: usize,
        predictions: usize,
    ) -> Self {
        EvalResult {
            ap: ObjectClass::ALL
                .iter()
                .filter_map(|c| aps[c.id()].map(|v| (c.name().to_string(), v)))
                .collect(),
            map: mean_ap(aps),
            frames,
            ground_truth,
            predictions,
        }
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("class,ap\n");
        for (name, ap) in &self.ap {
            s.push_str(&format!("{name},{ap}\n"));
        }
        s.push_str(&format!("mAP,{}\n", self.map));
        s
    }
}

/// Ground truth used for scoring: boxes whose center lies inside the grid.
pub fn in_grid(labels: &[BoxLabel], spec: &GridSpec) -> Vec<BoxLabel> {
    labels
        .iter()
        .filter(|b| spec.cell_of(b.center[0], b.center[1]).is_some())
        .copied()
        .collect()
}

/// Predicts every frame at full density and scores the detections.
pub fn evaluate(
    model: &ModelState,
    frames: &[Frame],
    spec: &GridSpec,
    config: &EvalConfig,
) -> Result<EvalResult> {
    config.validate()?;
    let predictions = frames
        .par_iter()
        .map(|f| predict(model, &rasterize(&f.cloud, spec), spec, config))
        .collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<BoxLabel>> = frames.iter().map(|f| in_grid(&f.labels, spec)).collect();
    let aps = class_aps(&predictions, &gt, config)?;
    Ok(EvalResult::from_aps(
        &aps,
        frames.len(),
        gt.iter().map(Vec::len).sum(),
        predictions.iter().map(Vec::len).sum(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x: f64, y: f64, l: f64, w: f64, h: f64) -> BoxLabel {
        BoxLabel::new(ObjectClass::Vehicle, [x, y, 0.0], [l, w, 1.0], h).unwrap()
    }

    #[test]
    fn iou_of_shifted_rectangles() {
        let a = rect(0.0, 0.0, 3.0, 1.0, 0.0);
        let b = rect(1.0, 0.0, 3.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 0.5).abs() < 1e-15);
        assert_eq!(bev_iou(&a, &a), 1.0);
        assert_eq!(bev_iou(&a, &rect(10.0, 0.0, 3.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn iou_of_crossed_squares() {
        // A unit square and the same square turned 45 degrees.
        let a = rect(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = rect(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0f64.sqrt() - 1.0);
        let expected = inter / (2.0 - inter);
        assert!((bev_iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_precision_recall() {
        // Ranked TP, FP, TP against two ground truths.
        let ap = average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - 250.0 / 3.0).abs() < 1e-9);
        assert_eq!(average_precision(&[], 3), 0.0);
        assert_eq!(average_precision(&[(0.5, true)], 1), 100.0);
    }

    #[test]
    fn nms_keeps_the_stronger_of_two_overlapping_boxes() {
        let a = Detection {
            label: rect(0.0, 0.0, 4.0, 2.0, 0.0),
            score: 0.8,
        };
        let b = Detection {
            label: rect(0.2, 0.0, 4.0, 2.0, 0.0),
            score: 0.9,
        };
        let far = Detection {
            label: rect(20.0, 0.0, 4.0, 2.0, 0.0),
            score: 0.4,
        };
        let kept = nms(vec![a, b, far], 0.5);
        assert_eq!(kept, vec![b, far]);
    }

    #[test]
    fn nearest_class_follows_size_priors() {
        for c in ObjectClass::ALL {
            let p = c.size_prior();
            assert_eq!(nearest_class(p[0].ln(), p[1].ln()), c);
        }
    }
}
