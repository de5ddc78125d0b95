use rand::Rng;

use crate::bev::{
    encode, encode_backward, encode_with_cache, EncoderCache, EncoderParams, Tensor3,
    INPUT_CHANNELS,
};
use crate::error::{Error, Result};
use crate::losses::HEAD_OUTPUTS;
use crate::rng::{mix64, rng_from_seed, stream};

/// Per-cell linear detection head (a 1x1 convolution from `d` to 7 channels).
/// Weights are stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Head {
    pub fn zeros(d: usize) -> Self {
        Head {
            d,
            w: vec![0.0; HEAD_OUTPUTS * d],
            b: vec![0.0; HEAD_OUTPUTS],
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn random(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut head = Head::zeros(d);
        for v in head.w.iter_mut().chain(head.b.iter_mut()) {
            *v = rng.random_range(-bound..=bound);
        }
        head
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(&self.b)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }

    pub fn check(&self) -> Result<()> {
        if self.w.len() != HEAD_OUTPUTS * self.d || self.b.len() != HEAD_OUTPUTS {
            return Err(Error::Shape(format!(
                "head with d = {} has {} weights and {} biases",
                self.d,
                self.w.len(),
                self.b.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, f: &Tensor3) -> Result<Tensor3> {
        self.check()?;
        if f.c != self.d {
            return Err(Error::Shape(format!(
                "head expects {} channels, features have {}",
                self.d, f.c
            )));
        }
        let mut out = Tensor3::zeros(f.h, f.w, HEAD_OUTPUTS);
        for cell in 0..f.cells() {
            let x = f.cell(cell);
            let y = out.cell_mut(cell);
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &self.w[o * self.d..(o + 1) * self.d];
                *yo = self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Gradients of `<upstream, forward(f)>` with respect to the head and to `f`.
    pub fn backward(&self, f: &Tensor3, upstream: &Tensor3) -> Result<(Head, Tensor3)> {
        self.check()?;
        upstream.check_shape(f.h, f.w, HEAD_OUTPUTS, "head upstream gradient")?;
        let mut grads = Head::zeros(self.d);
        let mut df = Tensor3::zeros(f.h, f.w, f.c);
        for cell in 0..f.cells() {
            let x = f.cell(cell);
            let u = upstream.cell(cell);
            let dx = df.cell_mut(cell);
            for (o, &uo) in u.iter().enumerate() {
                if uo == 0.0 {
                    continue;
                }
                grads.b[o] += uo;
                let row = &self.w[o * self.d..(o + 1) * self.d];
                let grow = &mut grads.w[o * self.d..(o + 1) * self.d];
                for k in 0..self.d {
                    grow[k] += uo * x[k];
                    dx[k] += uo * row[k];
                }
            }
        }
        Ok((grads, df))
    }
}

/// Encoder plus detection head. A frozen state is never updated by training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: EncoderParams,
    pub head: Head,
    pub frozen: bool,
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Tensor3,
    pub head_out: Tensor3,
    pub cache: EncoderCache,
}

impl ModelState {
    /// Fresh model: encoder and head drawn from the seed's init streams.
    pub fn random(seed: u64, hidden: usize, d: usize) -> Self {
        let encoder = EncoderParams::random(
            INPUT_CHANNELS,
            hidden,
            d,
            &mut rng_from_seed(mix64(seed, stream::ENCODER_INIT)),
        );
        let head = Head::random(d, &mut rng_from_seed(mix64(seed, stream::HEAD_INIT)));
        ModelState {
            encoder,
            head,
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn d(&self) -> usize {
        self.encoder.d
    }

    pub fn check(&self) -> Result<()> {
        if self.head.d != self.encoder.d {
            return Err(Error::Shape(format!(
                "encoder outputs {} channels, head expects {}",
                self.encoder.d, self.head.d
            )));
        }
        self.head.check()
    }

    pub fn features(&self, grid: &Tensor3) -> Result<Tensor3> {
        encode(grid, &self.encoder)
    }

    pub fn forward(&self, grid: &Tensor3) -> Result<Forward> {
        let (features, cache) = encode_with_cache(grid, &self.encoder)?;
        let head_out = self.head.forward(&features)?;
        Ok(Forward {
            features,
            head_out,
            cache,
        })
    }

    /// Parameter gradients given upstream gradients on the head output and,
    /// separately, on the BEV features.
    pub fn backward(
        &self,
        grid: &Tensor3,
        fwd: &Forward,
        d_head_out: &Tensor3,
        d_features: Option<&Tensor3>,
    ) -> Result<Gradients> {
        let (head, mut df) = self.head.backward(&fwd.features, d_head_out)?;
        if let Some(extra) = d_features {
            extra.check_shape(df.h, df.w, df.c, "feature gradient")?;
            df.add_scaled(extra, 1.0);
        }
        let (encoder, _) = encode_backward(grid, &self.encoder, &fwd.cache, &df, false)?;
        Ok(Gradients { encoder, head })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.encoder
            .iter()
            .chain(self.head.iter())
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.head.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: EncoderParams,
    pub head: Head,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Gradients {
            encoder: model.encoder.zeros_like(),
            head: Head::zeros(model.head.d),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.encoder.iter().chain(self.head.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.encoder.iter_mut().chain(self.head.iter_mut())
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }
}

/// Student initialization: the teacher's encoder copied exactly and a fresh
/// head drawn from `U(-1/sqrt(d), 1/sqrt(d))` with the seed's head stream.
pub fn init_student(teacher: &ModelState, seed: u64) -> ModelState {
    ModelState {
        encoder: teacher.encoder.clone(),
        head: Head::random(
            teacher.d(),
            &mut rng_from_seed(mix64(seed, stream::HEAD_INIT)),
        ),
        frozen: false,
    }
}
