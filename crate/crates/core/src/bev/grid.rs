use serde::{Deserialize, Serialize};

use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

pub const INPUT_CHANNELS: usize = 3;

/// BEV raster extent. Rows (`i`, size `h`) run along x, columns (`j`, size
/// `w`) along y. Cells are half-open: `[x_min + i*cell, x_min + (i+1)*cell)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub cell: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 51.2,
            y_min: -25.6,
            y_max: 25.6,
            cell: 0.8,
        }
    }
}

fn cell_count(lo: f64, hi: f64, cell: f64) -> usize {
    // Tolerance absorbs representation error in e.g. 51.2 / 0.8.
    (((hi - lo) / cell) + 1e-9).floor().max(0.0) as usize
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max, self.cell]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.x_min >= self.x_max
            || self.y_min >= self.y_max
            || self.cell <= 0.0
            || self.h() * self.w() == 0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid grid spec {self:?}"
            )));
        }
        Ok(())
    }

    pub fn h(&self) -> usize {
        cell_count(self.x_min, self.x_max, self.cell)
    }

    pub fn w(&self) -> usize {
        cell_count(self.y_min, self.y_max, self.cell)
    }

    /// Cell `(i, j)` containing `(x, y)`, or `None` outside the raster.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let i = ((x - self.x_min) / self.cell).floor() as usize;
        let j = ((y - self.y_min) / self.cell).floor() as usize;
        (i < self.h() && j < self.w()).then_some((i, j))
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x_min + (i as f64 + 0.5) * self.cell,
            self.y_min + (j as f64 + 0.5) * self.cell,
        )
    }
}

/// Per-cell `[ln(1 + count), max z, mean intensity]`; empty cells are zero.
pub fn rasterize(cloud: &PointCloud, spec: &GridSpec) -> Tensor3 {
    let (h, w) = (spec.h(), spec.w());
    let mut count = vec![0u32; h * w];
    let mut max_z = vec![f64::NEG_INFINITY; h * w];
    let mut sum_i = vec![0.0; h * w];
    for p in &cloud.points {
        if let Some((i, j)) = spec.cell_of(p.x, p.y) {
            let c = i * w + j;
            count[c] += 1;
            max_z[c] = max_z[c].max(p.z);
            sum_i[c] += p.intensity;
        }
    }
    let mut grid = Tensor3::zeros(h, w, INPUT_CHANNELS);
    for c in 0..h * w {
        if count[c] > 0 {
            let n = count[c] as f64;
            grid.cell_mut(c)
                .copy_from_slice(&[n.ln_1p(), max_z[c], sum_i[c] / n]);
        }
    }
    grid
}
