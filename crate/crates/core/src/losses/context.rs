use serde::{Deserialize, Serialize};

use super::{check_aligned, ClassGroup, LossConfig};
use crate::bev::Tensor3;
use crate::error::{Error, Result};
use crate::simlidar::ObjectClass;

/// Features the teacher's similarity map is computed against. `Student`
/// correlates the teacher's object query with the student's BEV features, so
/// the teacher's attended features carry student gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapSource {
    #[default]
    Student,
    Teacher,
}

/// Object-averaged grid similarity, row-major `h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl ContextMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

fn mean_query(z: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity map needs at least one object".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for zi in z {
        if zi.len() != d {
            return Err(Error::Shape(format!(
                "object feature of length {} against {d}-channel features",
                zi.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(zi) {
            *m += v;
        }
    }
    let n = z.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn map_from_query(q: &[f64], f: &Tensor3, scale: f64) -> ContextMap {
    let values = (0..f.cells())
        .map(|cell| scale * f.cell(cell).iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    ContextMap {
        h: f.h,
        w: f.w,
        values,
    }
}

/// `map(h, w) = scale * (1/N) sum_i <z_i, F(h, w)>`, computed through the mean
/// query. `scale` is 1 unless the `1/sqrt(d)` option is enabled.
pub fn context_similarity_map(z: &[Vec<f64>], f: &Tensor3, scale: f64) -> Result<ContextMap> {
    let q = mean_query(z, f.c)?;
    Ok(map_from_query(&q, f, scale))
}

/// `F ⊙ map`, the map broadcast over channels.
pub fn attend(f: &Tensor3, map: &ContextMap) -> Result<Tensor3> {
    if (f.h, f.w) != (map.h, map.w) {
        return Err(Error::Shape(format!(
            "{}x{} map against {}x{} features",
            map.h, map.w, f.h, f.w
        )));
    }
    let mut out = f.clone();
    for cell in 0..out.cells() {
        let m = map.values[cell];
        out.cell_mut(cell).iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}

pub fn attended_student(
    fs: &Tensor3,
    zs: &[ClassGroup],
    scale: f64,
) -> Result<Vec<(ObjectClass, Tensor3)>> {
    zs.iter()
        .map(|g| {
            let map = context_similarity_map(&g.features, fs, scale)?;
            Ok((g.class, attend(fs, &map)?))
        })
        .collect()
}

pub fn attended_teacher(
    ft: &Tensor3,
    zt: &[ClassGroup],
    fs: &Tensor3,
    source: MapSource,
    scale: f64,
) -> Result<Vec<(ObjectClass, Tensor3)>> {
    if !ft.same_shape(fs) {
        return Err(Error::Shape(format!(
            "teacher features {}x{}x{}, student features {}x{}x{}",
            ft.h, ft.w, ft.c, fs.h, fs.w, fs.c
        )));
    }
    let keys = match source {
        MapSource::Student => fs,
        MapSource::Teacher => ft,
    };
    zt.iter()
        .map(|g| {
            let map = context_similarity_map(&g.features, keys, scale)?;
            Ok((g.class, attend(ft, &map)?))
        })
        .collect()
}

/// Mean of squared elementwise differences.
pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    if !a.same_shape(b) || a.data.is_empty() {
        return Err(Error::Shape(format!(
            "mse of {}x{}x{} and {}x{}x{}",
            a.h, a.w, a.c, b.h, b.w, b.c
        )));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextLoss {
    pub value: f64,
    pub per_class: Vec<(ObjectClass, f64)>,
    /// Gradient with respect to the student's BEV features, through every
    /// place they occur.
    pub grad_fs: Tensor3,
    /// Gradient with respect to each student object feature.
    pub grad_zs: Vec<ClassGroup>,
}

/// Sum over classes of `mse(a_T, a_S)` with gradients for `F_S` and `z_S`.
/// Teacher features and teacher object features are constants.
pub fn context_similarity_loss(
    ft: &Tensor3,
    zt: &[ClassGroup],
    fs: &Tensor3,
    zs: &[ClassGroup],
    config: &LossConfig,
) -> Result<ContextLoss> {
    if !ft.same_shape(fs) {
        return Err(Error::Shape(format!(
            "teacher features {}x{}x{}, student features {}x{}x{}",
            ft.h, ft.w, ft.c, fs.h, fs.w, fs.c
        )));
    }
    check_aligned(zt, zs, Some(fs.c))?;
    let s = config.map_scale(fs.c);
    let n_entries = fs.data.len() as f64;
    let mut value = 0.0;
    let mut per_class = Vec::with_capacity(zs.len());
    let mut grad_fs = Tensor3::zeros(fs.h, fs.w, fs.c);
    let mut grad_zs = Vec::with_capacity(zs.len());
    for (t, st) in zt.iter().zip(zs) {
        let qs = mean_query(&st.features, fs.c)?;
        let qt = mean_query(&t.features, fs.c)?;
        let keys = match config.teacher_map_source {
            MapSource::Student => fs,
            MapSource::Teacher => ft,
        };
        let ms = map_from_query(&qs, fs, s);
        let mt = map_from_query(&qt, keys, s);
        let mut class_loss = 0.0;
        let mut dq = vec![0.0; fs.c];
        for cell in 0..fs.cells() {
            let (fsc, ftc) = (fs.cell(cell), ft.cell(cell));
            let (msv, mtv) = (ms.values[cell], mt.values[cell]);
            // g = dL/da_T = -dL/da_S at this cell.
            let mut dms = 0.0;
            let mut dmt = 0.0;
            let gcell = grad_fs.cell_mut(cell);
            for k in 0..fs.c {
                let diff = ftc[k] * mtv - fsc[k] * msv;
                class_loss += diff * diff;
                let g = 2.0 * diff / n_entries;
                gcell[k] -= g * msv;
                dms -= g * fsc[k];
                dmt += g * ftc[k];
            }
            for k in 0..fs.c {
                gcell[k] += dms * s * qs[k];
                dq[k] += dms * s * fsc[k];
            }
            if config.teacher_map_source == MapSource::Student {
                for k in 0..fs.c {
                    gcell[k] += dmt * s * qt[k];
                }
            }
        }
        let class_loss = class_loss / n_entries;
        value += class_loss;
        per_class.push((st.class, class_loss));
        let n = st.count() as f64;
        let gz: Vec<f64> = dq.iter().map(|v| v / n).collect();
        grad_zs.push(ClassGroup {
            class: st.class,
            features: vec![gz; st.count()],
        });
    }
    Ok(ContextLoss {
        value,
        per_class,
        grad_fs,
        grad_zs,
    })
}
