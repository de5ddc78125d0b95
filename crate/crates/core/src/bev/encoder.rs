//! Two-layer 3x3 convolutional BEV encoder with a hand-written backward pass.
//!
//! `F = conv2(relu(conv1(x)))`, stride 1, zero padding 1. Weights are stored
//! `[out][in][ky][kx]` where `(ky, kx) = (1, 1)` is the center tap and `ky`
//! runs along grid rows. The flat parameter order is `w1, b1, w2, b2`.

use rand::Rng;

use super::grid::INPUT_CHANNELS;
use super::tensor::Tensor3;
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub c_in: usize,
    pub hidden: usize,
    pub d: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderParams {
    pub const DEFAULT_HIDDEN: usize = 16;
    pub const DEFAULT_D: usize = 16;

    pub fn zeros(c_in: usize, hidden: usize, d: usize) -> Self {
        EncoderParams {
            c_in,
            hidden,
            d,
            w1: vec![0.0; hidden * c_in * TAPS],
            b1: vec![0.0; hidden],
            w2: vec![0.0; d * hidden * TAPS],
            b2: vec![0.0; d],
        }
    }

    /// Uniform fan-in initialization: every weight and bias of a layer is
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in = in * 9`.
    pub fn random(c_in: usize, hidden: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(c_in, hidden, d);
        let b1 = 1.0 / ((c_in * TAPS) as f64).sqrt();
        let b2 = 1.0 / ((hidden * TAPS) as f64).sqrt();
        for (v, bound) in
            p.w1.iter_mut()
                .chain(p.b1.iter_mut())
                .map(|v| (v, b1))
                .chain(p.w2.iter_mut().chain(p.b2.iter_mut()).map(|v| (v, b2)))
        {
            *v = rng.random_range(-bound..=bound);
        }
        p
    }

    pub fn default_shape(rng: &mut impl Rng) -> Self {
        Self::random(INPUT_CHANNELS, Self::DEFAULT_HIDDEN, Self::DEFAULT_D, rng)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_in, self.hidden, self.d)
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("w1".into(), vec![self.hidden, self.c_in, KERNEL, KERNEL]),
            ("b1".into(), vec![self.hidden]),
            ("w2".into(), vec![self.d, self.hidden, KERNEL, KERNEL]),
            ("b2".into(), vec![self.d]),
        ]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} encoder parameters",
                flat.len(),
                self.len()
            )));
        }
        for (p, v) in self.iter_mut().zip(flat) {
            *p = *v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    fn check(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.c_in * TAPS
            && self.b1.len() == self.hidden
            && self.w2.len() == self.d * self.hidden * TAPS
            && self.b2.len() == self.d;
        if !ok {
            return Err(Error::Shape(
                "encoder parameter lengths disagree with (c_in, hidden, d)".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediate activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub pre1: Tensor3,
    pub act1: Tensor3,
}

/// `[out][in][ky][kx]` to `[ky][kx][out][in]` so the inner loop is contiguous.
fn tap_major(w: &[f64], out_c: usize, in_c: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for o in 0..out_c {
        for c in 0..in_c {
            for tap in 0..TAPS {
                t[(tap * out_c + o) * in_c + c] = w[(o * in_c + c) * TAPS + tap];
            }
        }
    }
    t
}

fn from_tap_major(t: &[f64], out_c: usize, in_c: usize) -> Vec<f64> {
    let mut w = vec![0.0; t.len()];
    for o in 0..out_c {
        for c in 0..in_c {
            for tap in 0..TAPS {
                w[(o * in_c + c) * TAPS + tap] = t[(tap * out_c + o) * in_c + c];
            }
        }
    }
    w
}

/// Neighbor of `(i, j)` at tap `(ky, kx)`, if inside the grid.
#[inline]
fn neighbor(
    i: usize,
    j: usize,
    ky: usize,
    kx: usize,
    h: usize,
    w: usize,
) -> Option<(usize, usize)> {
    let ni = (i + ky).checked_sub(1)?;
    let nj = (j + kx).checked_sub(1)?;
    (ni < h && nj < w).then_some((ni, nj))
}

fn conv3x3(x: &Tensor3, weight: &[f64], bias: &[f64], out_c: usize) -> Tensor3 {
    let in_c = x.c;
    let wt = tap_major(weight, out_c, in_c);
    let mut y = Tensor3::zeros(x.h, x.w, out_c);
    for i in 0..x.h {
        for j in 0..x.w {
            let cell = i * x.w + j;
            let out = &mut y.data[cell * out_c..(cell + 1) * out_c];
            out.copy_from_slice(bias);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let Some((ni, nj)) = neighbor(i, j, ky, kx, x.h, x.w) else {
                        continue;
                    };
                    let xin = x.cell(ni * x.w + nj);
                    let tap = &wt[(ky * KERNEL + kx) * out_c * in_c..][..out_c * in_c];
                    for (o, acc) in out.iter_mut().enumerate() {
                        let row = &tap[o * in_c..(o + 1) * in_c];
                        *acc += row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    y
}

/// Gradients of a 3x3 convolution. Returns `(dW, db, dX)` with `dW` in
/// `[out][in][ky][kx]` layout; `dX` is skipped when `want_dx` is false.
fn conv3x3_backward(
    x: &Tensor3,
    weight: &[f64],
    dy: &Tensor3,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Tensor3>) {
    let (in_c, out_c) = (x.c, dy.c);
    let wt = tap_major(weight, out_c, in_c);
    let mut dwt = vec![0.0; wt.len()];
    let mut db = vec![0.0; out_c];
    let mut dx = want_dx.then(|| Tensor3::zeros(x.h, x.w, in_c));
    for i in 0..x.h {
        for j in 0..x.w {
            let g = dy.cell(i * x.w + j);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, v) in db.iter_mut().zip(g) {
                *b += v;
            }
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let Some((ni, nj)) = neighbor(i, j, ky, kx, x.h, x.w) else {
                        continue;
                    };
                    let ncell = ni * x.w + nj;
                    let xin = x.cell(ncell);
                    let base = (ky * KERNEL + kx) * out_c * in_c;
                    for (o, &go) in g.iter().enumerate() {
                        if go == 0.0 {
                            continue;
                        }
                        let drow = &mut dwt[base + o * in_c..base + (o + 1) * in_c];
                        for (dw, xv) in drow.iter_mut().zip(xin) {
                            *dw += go * xv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxc = dx.cell_mut(ncell);
                        for (o, &go) in g.iter().enumerate() {
                            let row = &wt[base + o * in_c..base + (o + 1) * in_c];
                            for (d, wv) in dxc.iter_mut().zip(row) {
                                *d += go * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    (from_tap_major(&dwt, out_c, in_c), db, dx)
}

pub fn encode_with_cache(
    grid: &Tensor3,
    params: &EncoderParams,
) -> Result<(Tensor3, EncoderCache)> {
    params.check()?;
    if grid.c != params.c_in {
        return Err(Error::Shape(format!(
            "grid has {} channels, encoder expects {}",
            grid.c, params.c_in
        )));
    }
    let pre1 = conv3x3(grid, &params.w1, &params.b1, params.hidden);
    let mut act1 = pre1.clone();
    act1.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let out = conv3x3(&act1, &params.w2, &params.b2, params.d);
    Ok((out, EncoderCache { pre1, act1 }))
}

pub fn encode(grid: &Tensor3, params: &EncoderParams) -> Result<Tensor3> {
    encode_with_cache(grid, params).map(|(f, _)| f)
}

/// Reverse-mode gradients of [`encode`] for an upstream gradient on its
/// output. ReLU passes gradient only where the pre-activation is strictly
/// positive.
pub fn encode_backward(
    grid: &Tensor3,
    params: &EncoderParams,
    cache: &EncoderCache,
    upstream: &Tensor3,
    want_grid_grad: bool,
) -> Result<(EncoderParams, Option<Tensor3>)> {
    params.check()?;
    upstream.check_shape(grid.h, grid.w, params.d, "encoder upstream gradient")?;
    cache
        .pre1
        .check_shape(grid.h, grid.w, params.hidden, "encoder cache")?;
    let (dw2, db2, dact1) = conv3x3_backward(&cache.act1, &params.w2, upstream, true);
    let mut dpre1 = dact1.expect("requested");
    for (g, &z) in dpre1.data.iter_mut().zip(&cache.pre1.data) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let (dw1, db1, dgrid) = conv3x3_backward(grid, &params.w1, &dpre1, want_grid_grad);
    let grads = EncoderParams {
        c_in: params.c_in,
        hidden: params.hidden,
        d: params.d,
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
    };
    Ok((grads, dgrid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn zero_weights_give_bias() {
        let mut p = EncoderParams::zeros(3, 4, 5);
        p.b1 = vec![0.3; 4];
        p.b2 = vec![1.0, -2.0, 0.5, 0.0, 3.0];
        let mut rng = rng_from_seed(1);
        let grid =
            Tensor3::from_vec(4, 3, 3, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap();
        let f = encode(&grid, &p).unwrap();
        for c in 0..f.cells() {
            assert_eq!(f.cell(c), &p.b2[..]);
        }
    }

    #[test]
    fn zero_input_zero_bias() {
        let mut rng = rng_from_seed(2);
        let mut p = EncoderParams::random(3, 4, 4, &mut rng);
        p.b1.iter_mut()
            .chain(p.b2.iter_mut())
            .for_each(|b| *b = 0.0);
        let f = encode(&Tensor3::zeros(5, 6, 3), &p).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = rng_from_seed(3);
        let p = EncoderParams::random(3, 4, 4, &mut rng);
        assert!(encode(&Tensor3::zeros(5, 6, 2), &p).is_err());
        let g = Tensor3::zeros(5, 6, 3);
        let (_, cache) = encode_with_cache(&g, &p).unwrap();
        assert!(encode_backward(&g, &p, &cache, &Tensor3::zeros(5, 6, 3), false).is_err());
    }

    #[test]
    fn init_bounds() {
        let mut rng = rng_from_seed(4);
        let p = EncoderParams::random(3, 16, 16, &mut rng);
        assert!(p
            .w1
            .iter()
            .chain(&p.b1)
            .all(|v| v.abs() <= 1.0 / 27f64.sqrt()));
        assert!(p
            .w2
            .iter()
            .chain(&p.b2)
            .all(|v| v.abs() <= 1.0 / 144f64.sqrt()));
        assert_eq!(p.len(), 16 * 27 + 16 + 16 * 144 + 16);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = rng_from_seed(5);
        let p = EncoderParams::random(3, 4, 2, &mut rng);
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0]).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = rng_from_seed(6);
        let p = EncoderParams::random(3, 4, 4, &mut rng);
        let g = Tensor3::from_vec(5, 5, 3, (0..75).map(|_| rng.random::<f64>()).collect()).unwrap();
        let (_, cache) = encode_with_cache(&g, &p).unwrap();
        let (dp, dg) = encode_backward(&g, &p, &cache, &Tensor3::zeros(5, 5, 4), true).unwrap();
        assert!(dp.iter().all(|&v| v == 0.0));
        assert!(dg.unwrap().data.iter().all(|&v| v == 0.0));
    }
}
