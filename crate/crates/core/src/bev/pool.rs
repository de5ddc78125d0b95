//! Object feature pooling: the mean BEV feature over the cells whose centers
//! lie inside a box's rotated footprint.

use super::grid::GridSpec;
use super::tensor::Tensor3;
use crate::error::{Error, Result};
use crate::simlidar::{BoxLabel, ObjectClass};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeature {
    pub values: Vec<f64>,
    pub class: ObjectClass,
    /// Index of the source box in the frame's label list.
    pub box_index: usize,
}

/// Flat indices (`i * w + j`, ascending) of the cells a box pools from.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub cells: Vec<usize>,
    /// True when no cell center fell inside the box and the cell containing
    /// the box center was used instead.
    pub fallback: bool,
}

pub fn footprint(b: &BoxLabel, spec: &GridSpec) -> Result<Footprint> {
    let (h, w) = (spec.h(), spec.w());
    let Some((ci, cj)) = spec.cell_of(b.center[0], b.center[1]) else {
        return Err(Error::BoxOutsideGrid(format!(
            "{} at ({:.3}, {:.3})",
            b.class, b.center[0], b.center[1]
        )));
    };
    let corners = b.bev_corners();
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for [x, y] in corners {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    // Candidate index window, widened by one cell on each side; membership is
    // decided by the exact test below.
    let to_range = |lo: f64, hi: f64, origin: f64, n: usize| {
        let a = ((lo - origin) / spec.cell - 0.5).floor() - 1.0;
        let b = ((hi - origin) / spec.cell - 0.5).ceil() + 1.0;
        let a = a.max(0.0) as usize;
        let b = (b.max(-1.0) + 1.0).min(n as f64) as usize;
        a..b.max(a)
    };
    let rows = to_range(xlo, xhi, spec.x_min, h);
    let cols = to_range(ylo, yhi, spec.y_min, w);
    let mut cells = Vec::new();
    for i in rows {
        for j in cols.clone() {
            let (x, y) = spec.cell_center(i, j);
            if b.contains_bev(x, y) {
                cells.push(i * w + j);
            }
        }
    }
    if cells.is_empty() {
        return Ok(Footprint {
            cells: vec![ci * w + cj],
            fallback: true,
        });
    }
    Ok(Footprint {
        cells,
        fallback: false,
    })
}

fn check_features(f: &Tensor3, spec: &GridSpec) -> Result<()> {
    if f.h != spec.h() || f.w != spec.w() {
        return Err(Error::Shape(format!(
            "features are {}x{}, grid spec is {}x{}",
            f.h,
            f.w,
            spec.h(),
            spec.w()
        )));
    }
    Ok(())
}

/// Mean feature over the box footprint (summed in ascending cell order).
pub fn pool_object(f: &Tensor3, b: &BoxLabel, spec: &GridSpec) -> Result<Vec<f64>> {
    check_features(f, spec)?;
    let fp = footprint(b, spec)?;
    let mut z = vec![0.0; f.c];
    for &cell in &fp.cells {
        for (a, v) in z.iter_mut().zip(f.cell(cell)) {
            *a += v;
        }
    }
    let n = fp.cells.len() as f64;
    z.iter_mut().for_each(|v| *v /= n);
    Ok(z)
}

/// Adds the gradient of `<upstream, pool_object(F, b)>` with respect to `F` into `grad`.
pub fn pool_object_backward_into(
    grad: &mut Tensor3,
    upstream: &[f64],
    b: &BoxLabel,
    spec: &GridSpec,
) -> Result<()> {
    check_features(grad, spec)?;
    if upstream.len() != grad.c {
        return Err(Error::Shape(format!(
            "upstream has {} values, features have {}",
            upstream.len(),
            grad.c
        )));
    }
    let fp = footprint(b, spec)?;
    let n = fp.cells.len() as f64;
    for &cell in &fp.cells {
        for (g, u) in grad.cell_mut(cell).iter_mut().zip(upstream) {
            *g += u / n;
        }
    }
    Ok(())
}

pub fn pool_object_backward(upstream: &[f64], b: &BoxLabel, spec: &GridSpec) -> Result<Tensor3> {
    let mut grad = Tensor3::zeros(spec.h(), spec.w(), upstream.len());
    pool_object_backward_into(&mut grad, upstream, b, spec)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> GridSpec {
        GridSpec {
            x_min: 0.0,
            x_max: 8.0,
            y_min: -4.0,
            y_max: 4.0,
            cell: 1.0,
        }
    }

    fn ramp(spec: &GridSpec, d: usize) -> Tensor3 {
        let n = spec.h() * spec.w() * d;
        Tensor3::from_vec(spec.h(), spec.w(), d, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn uniform_features_pool_to_constant() {
        let spec = small_grid();
        let f = Tensor3::filled(spec.h(), spec.w(), &[1.5, -2.0]);
        let b = BoxLabel::new(ObjectClass::Vehicle, [4.1, 0.3, 0.0], [3.0, 1.7, 1.0], 0.7).unwrap();
        assert_eq!(pool_object(&f, &b, &spec).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn four_cell_box() {
        let spec = small_grid();
        let f = ramp(&spec, 2);
        // Cell centers at x = 3.5, 4.5 and y = -0.5, 0.5.
        let b = BoxLabel::new(ObjectClass::Vehicle, [4.0, 0.0, 0.0], [1.8, 1.8, 1.0], 0.0).unwrap();
        let fp = footprint(&b, &spec).unwrap();
        assert!(!fp.fallback);
        let w = spec.w();
        assert_eq!(fp.cells, vec![3 * w + 3, 3 * w + 4, 4 * w + 3, 4 * w + 4]);
        let z = pool_object(&f, &b, &spec).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|k| fp.cells.iter().map(|&c| f.cell(c)[k]).sum::<f64>() / 4.0)
            .collect();
        assert_eq!(z, expect);

        let g = pool_object_backward(&[4.0, -8.0], &b, &spec).unwrap();
        for c in 0..g.cells() {
            let want: &[f64] = if fp.cells.contains(&c) {
                &[1.0, -2.0]
            } else {
                &[0.0, 0.0]
            };
            assert_eq!(g.cell(c), want);
        }
    }

    #[test]
    fn sub_cell_box_falls_back() {
        let spec = small_grid();
        let f = ramp(&spec, 3);
        let b = BoxLabel::new(
            ObjectClass::Pedestrian,
            [2.2, 1.2, 0.0],
            [0.3, 0.3, 1.7],
            0.2,
        )
        .unwrap();
        let fp = footprint(&b, &spec).unwrap();
        assert!(fp.fallback);
        let cell = 2 * spec.w() + 5;
        assert_eq!(fp.cells, vec![cell]);
        assert_eq!(pool_object(&f, &b, &spec).unwrap(), f.cell(cell).to_vec());
        let g = pool_object_backward(&[1.0, 2.0, 3.0], &b, &spec).unwrap();
        assert_eq!(g.cell(cell), &[1.0, 2.0, 3.0]);
        assert_eq!(g.data.iter().filter(|&&v| v != 0.0).count(), 3);
    }

    #[test]
    fn center_outside_grid_is_an_error() {
        let spec = small_grid();
        let f = ramp(&spec, 1);
        let b = BoxLabel::new(ObjectClass::Vehicle, [9.0, 0.0, 0.0], [4.0, 2.0, 1.0], 0.0).unwrap();
        let err = pool_object(&f, &b, &spec).unwrap_err();
        assert!(err.to_string().contains("vehicle"));
    }

    #[test]
    fn box_clipped_by_grid_edge() {
        let spec = small_grid();
        let f = ramp(&spec, 1);
        let b = BoxLabel::new(ObjectClass::Vehicle, [0.2, 3.8, 0.0], [4.0, 4.0, 1.0], 0.3).unwrap();
        let fp = footprint(&b, &spec).unwrap();
        assert!(!fp.fallback);
        assert!(fp.cells.iter().all(|&c| c < spec.h() * spec.w()));
        pool_object(&f, &b, &spec).unwrap();
    }
}
