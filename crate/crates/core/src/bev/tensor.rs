use crate::error::{Error, Result};

/// Dense `h x w x c` array, channel-fastest (row-major over `(i, j, k)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor3 {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{} values for a {h}x{w}x{c} tensor",
                data.len()
            )));
        }
        Ok(Tensor3 { h, w, c, data })
    }

    pub fn filled(h: usize, w: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(h * w * value.len());
        for _ in 0..h * w {
            data.extend_from_slice(value);
        }
        Tensor3 {
            h,
            w,
            c: value.len(),
            data,
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    /// Feature vector of the cell with flat index `cell = i * w + j`.
    #[inline]
    pub fn cell(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.c..(cell + 1) * self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [f64] {
        &mut self.data[cell * self.c..(cell + 1) * self.c]
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn check_shape(&self, h: usize, w: usize, c: usize, what: &str) -> Result<()> {
        if (self.h, self.w, self.c) != (h, w, c) {
            return Err(Error::Shape(format!(
                "{what}: expected {h}x{w}x{c}, got {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Tensor3, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}
