use std::f64::consts::{FRAC_PI_2, PI};

use crate::bev::{GridSpec, Tensor3};
use crate::error::{Error, Result};
use crate::simlidar::BoxLabel;

/// Head channels per cell: objectness logit, then `dx, dy, ln l, ln w, sin h, cos h`.
pub const HEAD_OUTPUTS: usize = 7;
const REG: usize = HEAD_OUTPUTS - 1;

/// Per-cell regression targets; `None` for negative cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<Option<[f64; REG]>>,
}

impl DetectionTargets {
    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }
}

/// Heading folded into `[-pi/2, pi/2)`. A BEV rectangle is unchanged by a
/// half turn, so this removes the front/back ambiguity from the target.
pub fn canonical_heading(h: f64) -> f64 {
    let folded = (h + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if folded >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        folded
    }
}

/// Regression target of a box relative to the center of a cell. Offsets are
/// in cell units.
pub fn encode_box(b: &BoxLabel, spec: &GridSpec, i: usize, j: usize) -> [f64; REG] {
    let (cx, cy) = spec.cell_center(i, j);
    let heading = canonical_heading(b.heading);
    [
        (b.center[0] - cx) / spec.cell,
        (b.center[1] - cy) / spec.cell,
        b.dims[0].ln(),
        b.dims[1].ln(),
        heading.sin(),
        heading.cos(),
    ]
}

/// Marks the cell containing each box center as positive. Boxes whose center
/// lies outside the grid are skipped; when two centers share a cell the box
/// listed first keeps it.
pub fn detection_targets(labels: &[BoxLabel], spec: &GridSpec) -> DetectionTargets {
    let (h, w) = (spec.h(), spec.w());
    let mut cells = vec![None; h * w];
    for b in labels {
        if let Some((i, j)) = spec.cell_of(b.center[0], b.center[1]) {
            let slot = &mut cells[i * w + j];
            if slot.is_none() {
                *slot = Some(encode_box(b, spec, i, j));
            }
        }
    }
    DetectionTargets { h, w, cells }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub value: f64,
    pub objectness: f64,
    pub regression: f64,
    /// Gradient with respect to the head output.
    pub grad: Tensor3,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on the objectness logit averaged over all cells, plus
/// the squared regression error averaged over positive cells and the six
/// regression channels. A frame without positives has a zero regression term.
pub fn detection_loss(head: &Tensor3, targets: &DetectionTargets) -> Result<DetectionLoss> {
    head.check_shape(targets.h, targets.w, HEAD_OUTPUTS, "detection head output")?;
    if head.cells() == 0 {
        return Err(Error::Shape("empty head output".into()));
    }
    let n_cells = head.cells() as f64;
    let n_pos = targets.positives();
    let reg_norm = (n_pos * REG) as f64;
    let mut grad = Tensor3::zeros(head.h, head.w, HEAD_OUTPUTS);
    let mut objectness = 0.0;
    let mut regression = 0.0;
    for (cell, target) in targets.cells.iter().enumerate() {
        let out = head.cell(cell);
        let g = grad.cell_mut(cell);
        let x = out[0];
        let y = if target.is_some() { 1.0 } else { 0.0 };
        // -[y ln s(x) + (1-y) ln(1-s(x))] = softplus(x) - y x
        objectness += softplus(x) - y * x;
        g[0] = (sigmoid(x) - y) / n_cells;
        if let Some(t) = target {
            for k in 0..REG {
                let r = out[k + 1] - t[k];
                regression += r * r;
                g[k + 1] = 2.0 * r / reg_norm;
            }
        }
    }
    objectness /= n_cells;
    if n_pos > 0 {
        regression /= reg_norm;
    }
    Ok(DetectionLoss {
        value: objectness + regression,
        objectness,
        regression,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simlidar::ObjectClass;

    fn spec() -> GridSpec {
        GridSpec {
            x_min: 0.0,
            x_max: 4.0,
            y_min: 0.0,
            y_max: 4.0,
            cell: 1.0,
        }
    }

    fn car(x: f64, y: f64) -> BoxLabel {
        BoxLabel::new(ObjectClass::Vehicle, [x, y, 0.0], [4.0, 2.0, 1.5], 0.3).unwrap()
    }

    #[test]
    fn zero_logits_give_log_two() {
        let head = Tensor3::zeros(4, 4, HEAD_OUTPUTS);
        let l = detection_loss(&head, &detection_targets(&[], &spec())).unwrap();
        assert!((l.objectness - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(l.regression, 0.0);
    }

    #[test]
    fn saturated_exact_head_has_tiny_loss() {
        let labels = [car(1.3, 2.6), car(3.1, 0.2)];
        let t = detection_targets(&labels, &spec());
        assert_eq!(t.positives(), 2);
        let mut head = Tensor3::zeros(4, 4, HEAD_OUTPUTS);
        for (cell, target) in t.cells.iter().enumerate() {
            let out = head.cell_mut(cell);
            match target {
                Some(r) => {
                    out[0] = 10.0;
                    out[1..].copy_from_slice(r);
                }
                None => out[0] = -10.0,
            }
        }
        let l = detection_loss(&head, &t).unwrap();
        assert!(l.value < 1e-4);
        assert_eq!(l.regression, 0.0);
    }

    #[test]
    fn first_box_keeps_a_shared_cell() {
        let t = detection_targets(&[car(1.2, 1.2), car(1.8, 1.8)], &spec());
        assert_eq!(t.positives(), 1);
        let r = t.cells[5].unwrap();
        assert!((r[0] + 0.3).abs() < 1e-12 && (r[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn heading_folds_to_half_turn() {
        for h in [-3.0, -1.0, 0.0, 0.5, 1.5, 2.0, PI] {
            let c = canonical_heading(h);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&c));
            let turns = (h - c) / PI;
            assert!((turns - turns.round()).abs() < 1e-12);
        }
        assert_eq!(canonical_heading(FRAC_PI_2), -FRAC_PI_2);
    }

    #[test]
    fn out_of_grid_boxes_are_skipped() {
        let t = detection_targets(&[car(-1.0, 1.0)], &spec());
        assert_eq!(t.positives(), 0);
    }
}
