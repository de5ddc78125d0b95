//! Pseudo low-beam generation.
//!
//! Points are grouped into beams by 1-D k-means over their inclination, then a
//! uniformly strided subset of beams is kept. Whole points are kept or dropped,
//! so the output is a verbatim subset of the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{inclination, PointCloud};
use crate::rng::{mix64, rng_from_seed, stream};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamModel {
    /// Beam inclinations in radians, strictly ascending.
    pub centers: Vec<f64>,
    /// Beam index of every input point, in input order.
    pub assignment: Vec<u32>,
    /// Sum of squared inclination deviations from the assigned center.
    pub inertia: f64,
    pub iterations: usize,
}

impl BeamModel {
    pub fn k(&self) -> usize {
        self.centers.len()
    }

    /// Number of points assigned to each beam.
    pub fn beam_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for &a in &self.assignment {
            counts[a as usize] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoCloud {
    pub cloud: PointCloud,
    pub kept_beams: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        KMeansParams {
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Result of clustering a plain slice of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering1d {
    pub centers: Vec<f64>,
    pub assignment: Vec<u32>,
    pub inertia: f64,
    pub iterations: usize,
}

/// k-means on scalars: Lloyd's algorithm followed by split/merge refinement.
///
/// Centers start at the `(j + 1/2) / k` quantiles of the sorted values (of the
/// distinct values when repeats make quantiles coincide), and a bisecting
/// start is refined alongside; the better of the two is kept. The result is
/// fully determined by the input. The seed only
/// matters when a cluster empties during iteration; it is then reseeded at a
/// point drawn with probability proportional to its squared distance from the
/// current centers. `max_iter` and `tol` bound each Lloyd run.
pub fn kmeans_1d(values: &[f64], k: usize, params: KMeansParams) -> Result<Clustering1d> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster an empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite value in clustering input".into(),
        ));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in [1, {}] (distinct values)",
            distinct.len()
        )));
    }

    let init = quantile_start(&sorted, &distinct, k);
    let mut rng = rng_from_seed(mix64(params.seed, stream::KMEANS));
    let (quantile, mut iterations) = lloyd(&sorted, init, params, &mut rng);
    let quantile = hartigan(&sorted, &quantile);
    let (bisected, it) = bisecting_start(&sorted, k, params, &mut rng);
    iterations += it;
    let (mut centers, mut inertia) = {
        let qi = sorted_inertia(&sorted, &quantile);
        let bi = sorted_inertia(&sorted, &bisected);
        if bi < qi {
            (bisected, bi)
        } else {
            (quantile, qi)
        }
    };

    // Lloyd only reaches a local optimum; in 1-D it typically strands several
    // centers inside one dense group while merging two others. Repeatedly move
    // the center that is cheapest to remove into the best two-way split of
    // another cluster, keeping the move only if inertia drops.
    for _ in 0..4 * k {
        if k < 2 || inertia == 0.0 {
            break;
        }
        let mut improved = false;
        for candidate in relocation_candidates(&sorted, &centers) {
            let (next, it) = lloyd(&sorted, candidate, params, &mut rng);
            let next = hartigan(&sorted, &next);
            iterations += it;
            let next_inertia = sorted_inertia(&sorted, &next);
            if next_inertia < inertia * (1.0 - 1e-12) {
                centers = next;
                inertia = next_inertia;
                improved = true;
                break;
            }
        }
        if !improved {
            break;
        }
    }

    let assignment: Vec<u32> = values
        .iter()
        .map(|&v| nearest(&centers, v) as u32)
        .collect();
    let inertia = values
        .iter()
        .zip(&assignment)
        .map(|(v, &a)| (v - centers[a as usize]).powi(2))
        .sum();
    Ok(Clustering1d {
        centers,
        assignment,
        inertia,
        iterations,
    })
}

/// Runs Lloyd iterations on sorted values from the given centers.
fn lloyd(
    sorted: &[f64],
    mut centers: Vec<f64>,
    params: KMeansParams,
    rng: &mut impl Rng,
) -> (Vec<f64>, usize) {
    let k = centers.len();
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let bounds = segment_bounds(sorted, &centers);
        let mut next = centers.clone();
        let mut empty = Vec::new();
        for j in 0..k {
            let seg = &sorted[bounds[j]..bounds[j + 1]];
            if seg.is_empty() {
                empty.push(j);
            } else {
                next[j] = shifted_mean(seg);
            }
        }
        for j in empty {
            next[j] = reseed(sorted, &next, rng);
        }
        next.sort_by(f64::total_cmp);
        let shift = centers
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        centers = next;
        if shift < params.tol {
            break;
        }
    }
    (centers, iterations)
}

/// Values at the `(j + 1/2) / k` quantiles of the sorted input. If repeated
/// values make two quantiles coincide, the quantiles of the distinct values
/// are used instead.
fn quantile_start(sorted: &[f64], distinct: &[f64], k: usize) -> Vec<f64> {
    let pick = |v: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|j| v[((2 * j + 1) * v.len()) / (2 * k)])
            .collect()
    };
    let init = pick(sorted);
    if init.windows(2).all(|w| w[0] < w[1]) {
        init
    } else {
        pick(distinct)
    }
}

/// Grows a solution one center at a time, always splitting the cluster with
/// the largest two-way split gain, refining after each insertion.
fn bisecting_start(
    sorted: &[f64],
    k: usize,
    params: KMeansParams,
    rng: &mut impl Rng,
) -> (Vec<f64>, usize) {
    let mut centers = vec![shifted_mean(sorted)];
    let mut iterations = 0;
    while centers.len() < k {
        let bounds = segment_bounds(sorted, &centers);
        let best = (0..centers.len())
            .filter_map(|j| best_split(&sorted[bounds[j]..bounds[j + 1]]).map(|s| (j, s)))
            .fold(None::<(usize, (f64, f64, f64))>, |acc, cur| match acc {
                Some(a) if a.1 .0 >= cur.1 .0 => Some(a),
                _ => Some(cur),
            });
        let Some((j, (_, lo, hi))) = best else {
            break;
        };
        centers.remove(j);
        centers.push(lo);
        centers.push(hi);
        centers.sort_by(f64::total_cmp);
        let (next, it) = lloyd(sorted, centers, params, rng);
        iterations += it;
        centers = hartigan(sorted, &next);
    }
    if centers.len() < k {
        // Fewer splittable runs than k: cannot happen when k <= distinct values,
        // but fall back to the quantile start to keep k centers.
        let mut distinct = sorted.to_vec();
        distinct.dedup();
        centers = quantile_start(sorted, &distinct, k);
    }
    (centers, iterations)
}

/// Local refinement of contiguous clusters: Hartigan single-point transfers
/// across each boundary (in 1-D the most profitable point to move is the one
/// next to it), then optimal re-splitting of each adjacent pair of runs and
/// of small triples of runs.
/// Returns the means of the refined runs.
fn hartigan(sorted: &[f64], centers: &[f64]) -> Vec<f64> {
    let k = centers.len();
    let mut bounds = segment_bounds(sorted, centers);
    // Empty clusters cannot be represented as runs; leave such solutions alone.
    if (0..k).any(|j| bounds[j] == bounds[j + 1]) {
        return centers.to_vec();
    }
    let base = sorted[0];
    let floor = resolution_floor(sorted);
    let mut count: Vec<f64> = (0..k).map(|j| (bounds[j + 1] - bounds[j]) as f64).collect();
    let mut sum: Vec<f64> = (0..k)
        .map(|j| {
            sorted[bounds[j]..bounds[j + 1]]
                .iter()
                .map(|v| v - base)
                .sum()
        })
        .collect();
    let mean = |s: f64, n: f64| s / n;
    for _sweep in 0..sorted.len().min(1000) {
        let mut moved = false;
        for j in 0..k.saturating_sub(1) {
            loop {
                let (na, nb) = (count[j], count[j + 1]);
                let (ca, cb) = (mean(sum[j], na), mean(sum[j + 1], nb));
                // Last point of j into j + 1.
                let x = sorted[bounds[j + 1] - 1] - base;
                if na > 1.0 {
                    let gain = nb / (nb + 1.0) * (x - cb).powi(2);
                    let loss = na / (na - 1.0) * (x - ca).powi(2);
                    if gain < loss * (1.0 - TRANSFER_MARGIN) - floor {
                        bounds[j + 1] -= 1;
                        count[j] -= 1.0;
                        count[j + 1] += 1.0;
                        sum[j] -= x;
                        sum[j + 1] += x;
                        moved = true;
                        continue;
                    }
                }
                // First point of j + 1 into j.
                let x = sorted[bounds[j + 1]] - base;
                if nb > 1.0 {
                    let gain = na / (na + 1.0) * (x - ca).powi(2);
                    let loss = nb / (nb - 1.0) * (x - cb).powi(2);
                    if gain < loss * (1.0 - TRANSFER_MARGIN) - floor {
                        bounds[j + 1] += 1;
                        count[j] += 1.0;
                        count[j + 1] -= 1.0;
                        sum[j] += x;
                        sum[j + 1] -= x;
                        moved = true;
                        continue;
                    }
                }
                break;
            }
        }
        if !moved {
            break;
        }
    }
    // Re-split each adjacent pair of runs optimally, sweeping until stable.
    for _sweep in 0..4 * k {
        let mut moved = false;
        for j in 0..k.saturating_sub(1) {
            let union = &sorted[bounds[j]..bounds[j + 2]];
            let current = segment_sse(&union[..bounds[j + 1] - bounds[j]])
                + segment_sse(&union[bounds[j + 1] - bounds[j]..]);
            if let Some((cut, sse)) = best_cut(union) {
                if sse < current * (1.0 - TRANSFER_MARGIN) - floor {
                    bounds[j + 1] = bounds[j] + cut;
                    moved = true;
                }
            }
        }
        // Small unions of three runs are re-split exactly as well.
        for j in 0..k.saturating_sub(2) {
            let union = &sorted[bounds[j]..bounds[j + 3]];
            if union.len() > TRIPLE_RESPLIT_MAX {
                continue;
            }
            let (a, b) = (bounds[j + 1] - bounds[j], bounds[j + 2] - bounds[j]);
            let current =
                segment_sse(&union[..a]) + segment_sse(&union[a..b]) + segment_sse(&union[b..]);
            if let Some((ca, cb, sse)) = best_two_cuts(union) {
                if sse < current * (1.0 - TRANSFER_MARGIN) - floor {
                    bounds[j + 1] = bounds[j] + ca;
                    bounds[j + 2] = bounds[j] + cb;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
    (0..k)
        .map(|j| shifted_mean(&sorted[bounds[j]..bounds[j + 1]]))
        .collect()
}

const TRIPLE_RESPLIT_MAX: usize = 512;
/// Relative improvement a transfer must make; rounding in the running sums
/// would otherwise let a point oscillate across a boundary.
const TRANSFER_MARGIN: f64 = 1e-9;

/// Squared-deviation changes below this are rounding noise for the data's span.
fn resolution_floor(sorted: &[f64]) -> f64 {
    let span = sorted[sorted.len() - 1] - sorted[0];
    (span * 1e-12).powi(2)
}
const RELOCATION_CANDIDATES: usize = 24;

/// Optimal cuts `0 < a < b < len` of a sorted segment into three non-empty
/// runs, with the resulting SSE. Quadratic in the segment length.
fn best_two_cuts(seg: &[f64]) -> Option<(usize, usize, f64)> {
    let n = seg.len();
    if n < 3 {
        return None;
    }
    let base = seg[0];
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in seg.iter().enumerate() {
        prefix[i + 1] = prefix[i] + (v - base);
    }
    // Maximizing sum(run_sum^2 / run_len) minimizes the total SSE.
    let explained = |a: usize, b: usize| {
        let s = prefix[b] - prefix[a];
        s * s / (b - a) as f64
    };
    let mut best: Option<(f64, usize, usize)> = None;
    for a in 1..n - 1 {
        if seg[a] == seg[a - 1] {
            continue;
        }
        for b in a + 1..n {
            if seg[b] == seg[b - 1] {
                continue;
            }
            let e = explained(0, a) + explained(a, b) + explained(b, n);
            if best.is_none_or(|(be, _, _)| e > be) {
                best = Some((e, a, b));
            }
        }
    }
    let (_, a, b) = best?;
    Some((
        a,
        b,
        segment_sse(&seg[..a]) + segment_sse(&seg[a..b]) + segment_sse(&seg[b..]),
    ))
}

fn sorted_inertia(sorted: &[f64], centers: &[f64]) -> f64 {
    let bounds = segment_bounds(sorted, centers);
    (0..centers.len())
        .map(|j| {
            sorted[bounds[j]..bounds[j + 1]]
                .iter()
                .map(|v| (v - centers[j]).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Sum of squared deviations from the segment mean.
fn segment_sse(seg: &[f64]) -> f64 {
    if seg.is_empty() {
        return 0.0;
    }
    let m = shifted_mean(seg);
    seg.iter().map(|v| (v - m).powi(2)).sum()
}

/// Optimal cut of a sorted segment into two non-empty runs: `(cut, total SSE)`.
fn best_cut(seg: &[f64]) -> Option<(usize, f64)> {
    if seg.len() < 2 || seg[0] == seg[seg.len() - 1] {
        return None;
    }
    let base = seg[0];
    let total: f64 = seg.iter().map(|v| v - base).sum();
    let n = seg.len() as f64;
    let mut left = 0.0;
    let mut best: Option<(f64, usize)> = None;
    for t in 1..seg.len() {
        left += seg[t - 1] - base;
        if seg[t] == seg[t - 1] {
            continue;
        }
        let nl = t as f64;
        let right = total - left;
        // SSE(left) + SSE(right) = const - left^2/nl - right^2/nr
        let explained = left * left / nl + right * right / (n - nl);
        if best.is_none_or(|(e, _)| explained > e) {
            best = Some((explained, t));
        }
    }
    let (_, t) = best?;
    Some((t, segment_sse(&seg[..t]) + segment_sse(&seg[t..])))
}

/// Best split of a sorted segment: `(SSE reduction, left mean, right mean)`.
fn best_split(seg: &[f64]) -> Option<(f64, f64, f64)> {
    let (t, after) = best_cut(seg)?;
    Some((
        segment_sse(seg) - after,
        shifted_mean(&seg[..t]),
        shifted_mean(&seg[t..]),
    ))
}

/// Candidate center sets that drop one center and split another cluster,
/// ordered by estimated net inertia reduction (best first).
fn relocation_candidates(sorted: &[f64], centers: &[f64]) -> Vec<Vec<f64>> {
    let k = centers.len();
    let bounds = segment_bounds(sorted, centers);
    let splits: Vec<Option<(f64, f64, f64)>> = (0..k)
        .map(|j| best_split(&sorted[bounds[j]..bounds[j + 1]]))
        .collect();
    let removal: Vec<f64> = (0..k)
        .map(|j| {
            let seg = &sorted[bounds[j]..bounds[j + 1]];
            let moved: f64 = seg
                .iter()
                .map(|&v| {
                    let left = (j > 0).then(|| (v - centers[j - 1]).powi(2));
                    let right = (j + 1 < k).then(|| (v - centers[j + 1]).powi(2));
                    match (left, right) {
                        (Some(a), Some(b)) => a.min(b),
                        (Some(a), None) | (None, Some(a)) => a,
                        (None, None) => f64::INFINITY,
                    }
                })
                .sum();
            moved - seg.iter().map(|v| (v - centers[j]).powi(2)).sum::<f64>()
        })
        .collect();
    let mut scored = Vec::new();
    for (m, split) in splits.iter().enumerate() {
        let Some((gain, lo, hi)) = *split else {
            continue;
        };
        for (j, &cost) in removal.iter().enumerate() {
            if j == m {
                continue;
            }
            let mut next: Vec<f64> = centers
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != j && i != m)
                .map(|(_, &c)| c)
                .collect();
            next.push(lo);
            next.push(hi);
            next.sort_by(f64::total_cmp);
            scored.push((gain - cost, m, j, next));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    scored
        .into_iter()
        .take(RELOCATION_CANDIDATES.max(2 * k))
        .map(|(_, _, _, c)| c)
        .collect()
}

/// Mean computed relative to the first element, exact for constant runs.
fn shifted_mean(seg: &[f64]) -> f64 {
    let base = seg[0];
    base + seg.iter().map(|v| v - base).sum::<f64>() / seg.len() as f64
}

/// Index of the nearest center; ties go to the lower index.
fn nearest(centers: &[f64], v: f64) -> usize {
    // Voronoi boundaries in 1-D are the midpoints of adjacent centers.
    let mut lo = 0;
    let mut hi = centers.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if v <= 0.5 * (centers[mid] + centers[mid + 1]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Start offsets of each center's Voronoi cell within sorted values, plus the end.
fn segment_bounds(sorted: &[f64], centers: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(centers.len() + 1);
    bounds.push(0);
    for w in centers.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        bounds.push(sorted.partition_point(|&v| v <= mid));
    }
    bounds.push(sorted.len());
    bounds
}

fn reseed(sorted: &[f64], centers: &[f64], rng: &mut impl Rng) -> f64 {
    let d2: Vec<f64> = sorted
        .iter()
        .map(|&v| {
            centers
                .iter()
                .map(|c| (v - c).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let total: f64 = d2.iter().sum();
    if total <= 0.0 {
        return sorted[0];
    }
    let mut target = rng.random::<f64>() * total;
    for (v, w) in sorted.iter().zip(&d2) {
        if *w > 0.0 {
            if target < *w {
                return *v;
            }
            target -= w;
        }
    }
    // Rounding left a remainder; fall back to the farthest point.
    let (i, _) = d2.iter().enumerate().fold(
        (0, -1.0),
        |best, (i, &w)| if w > best.1 { (i, w) } else { best },
    );
    sorted[i]
}

/// Clusters the points of `cloud` into `k` beams by inclination.
pub fn cluster_beams(cloud: &PointCloud, k: usize, params: KMeansParams) -> Result<BeamModel> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot cluster an empty cloud".into(),
        ));
    }
    let phi: Vec<f64> = cloud.points.iter().map(inclination).collect();
    let c = kmeans_1d(&phi, k, params)?;
    Ok(BeamModel {
        centers: c.centers,
        assignment: c.assignment,
        inertia: c.inertia,
        iterations: c.iterations,
    })
}

/// Beam indices `floor(j * k / target)` for `j = 0..target`.
pub fn select_beams(model: &BeamModel, target: usize) -> Result<Vec<u32>> {
    select_beam_indices(model.k(), target)
}

pub fn select_beam_indices(k: usize, target: usize) -> Result<Vec<u32>> {
    if target == 0 || target > k {
        return Err(Error::InvalidArgument(format!(
            "target beam count {target} must be in [1, {k}]"
        )));
    }
    Ok((0..target).map(|j| (j * k / target) as u32).collect())
}

pub fn downsample(cloud: &PointCloud, model: &BeamModel, target: usize) -> Result<PseudoCloud> {
    if model.assignment.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "beam model covers {} points, cloud has {}",
            model.assignment.len(),
            cloud.len()
        )));
    }
    let kept_beams = select_beams(model, target)?;
    let mut keep = vec![false; model.k()];
    for &b in &kept_beams {
        keep[b as usize] = true;
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (p, &a) in cloud.points.iter().zip(&model.assignment) {
        if keep[a as usize] {
            points.push(*p);
            labels.push(a);
        }
    }
    let cloud = PointCloud {
        points,
        beam_labels: Some(labels),
        frame_id: cloud.frame_id.clone(),
    };
    Ok(PseudoCloud { cloud, kept_beams })
}

/// Cluster into `source_beams` beams and keep `target_beams` of them.
pub fn generate_pseudo_low_beam(
    cloud: &PointCloud,
    source_beams: usize,
    target_beams: usize,
    params: KMeansParams,
) -> Result<(PseudoCloud, BeamModel)> {
    if target_beams == 0 || target_beams > source_beams {
        return Err(Error::InvalidArgument(format!(
            "need source_beams >= target_beams >= 1, got {source_beams} -> {target_beams}"
        )));
    }
    let model = cluster_beams(cloud, source_beams, params)?;
    let pseudo = downsample(cloud, &model, target_beams)?;
    Ok((pseudo, model))
}
