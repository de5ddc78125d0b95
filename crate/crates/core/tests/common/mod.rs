//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

/// Exact 1-D k-means SSE by dynamic programming over sorted values.
///
/// `cost[k][i]` is the optimal SSE of the first `i` sorted values in `k`
/// clusters; each cluster is a contiguous run of the sorted values.
pub fn optimal_sse_1d(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    // Segment SSE computed directly (no prefix-sum cancellation).
    let seg = |a: usize, b: usize| -> f64 {
        let s = &v[a..b];
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m) * (x - m)).sum()
    };
    let mut sse = vec![vec![0.0; n + 1]; n + 1];
    for a in 0..n {
        for b in a + 1..=n {
            sse[a][b] = seg(a, b);
        }
    }
    let inf = f64::INFINITY;
    let mut cost = vec![vec![inf; n + 1]; k + 1];
    cost[0][0] = 0.0;
    for c in 1..=k {
        for i in 1..=n {
            let mut best = inf;
            for j in (c - 1)..i {
                let cand = cost[c - 1][j] + sse[j][i];
                if cand < best {
                    best = cand;
                }
            }
            cost[c][i] = best;
        }
    }
    cost[k][n]
}

/// Relative error used by the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
