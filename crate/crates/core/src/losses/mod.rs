//! The distill-tuning objective and its analytic gradients.
//!
//! `total = l_det + lambda_c * l_c + lambda_o * l_o`, where `l_o` ties pooled
//! object features of teacher and student together, `l_c` compares the two
//! networks' context-attended BEV features, and `l_det` is the detection head
//! loss. Every term returns gradients with respect to the student-side inputs;
//! teacher quantities are constants.

mod context;
mod detection;
mod object;

use serde::{Deserialize, Serialize};

pub use context::{
    attend, attended_student, attended_teacher, context_similarity_loss, context_similarity_map,
    mse, ContextLoss, ContextMap, MapSource,
};
pub(crate) use detection::sigmoid;
pub use detection::{
    canonical_heading, detection_loss, detection_targets, encode_box, DetectionLoss,
    DetectionTargets, HEAD_OUTPUTS,
};
pub use object::{object_similarity_loss, ObjectLoss};

use crate::bev::ObjectFeature;
use crate::error::{Error, Result};
use crate::simlidar::ObjectClass;

pub const NUM_CLASSES: usize = ObjectClass::ALL.len();

/// Object features of one class, in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub class: ObjectClass,
    pub features: Vec<Vec<f64>>,
}

impl ClassGroup {
    pub fn count(&self) -> usize {
        self.features.len()
    }
}

/// Groups features by class in ascending class id, keeping label order inside
/// a class. Classes without objects are omitted.
pub fn group_by_class(features: &[ObjectFeature]) -> Vec<ClassGroup> {
    ObjectClass::ALL
        .iter()
        .filter_map(|&class| {
            let members: Vec<Vec<f64>> = features
                .iter()
                .filter(|f| f.class == class)
                .map(|f| f.values.clone())
                .collect();
            (!members.is_empty()).then_some(ClassGroup {
                class,
                features: members,
            })
        })
        .collect()
}

/// Per-class object counts `N_c` of a grouping.
pub fn class_counts(groups: &[ClassGroup]) -> Vec<(ObjectClass, usize)> {
    groups.iter().map(|g| (g.class, g.count())).collect()
}

pub(crate) fn check_aligned(
    teacher: &[ClassGroup],
    student: &[ClassGroup],
    d: Option<usize>,
) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Mismatch(format!(
            "teacher has {} classes, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.class != s.class {
            return Err(Error::Mismatch(format!(
                "class {} paired with {}",
                t.class, s.class
            )));
        }
        if t.count() != s.count() {
            return Err(Error::Mismatch(format!(
                "class {}: {} teacher objects, {} student objects",
                t.class,
                t.count(),
                s.count()
            )));
        }
        if t.count() == 0 {
            return Err(Error::InvalidArgument(format!(
                "class {} listed with no objects",
                t.class
            )));
        }
        let d = d.unwrap_or(t.features[0].len());
        for z in t.features.iter().chain(&s.features) {
            if z.len() != d {
                return Err(Error::Shape(format!(
                    "object feature of length {} where {d} expected",
                    z.len()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_c: f64,
    pub lambda_o: f64,
    /// Lower bound on the norm used in the L2-distance gradient.
    pub epsilon_norm: f64,
    /// Which features the teacher's similarity map is computed against.
    pub teacher_map_source: MapSource,
    /// Multiply similarity maps by `1/sqrt(d)`.
    pub scale_by_sqrt_d: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_c: 1.0,
            lambda_o: 1.0,
            epsilon_norm: 1e-12,
            teacher_map_source: MapSource::Student,
            scale_by_sqrt_d: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite())
            || !(self.lambda_o >= 0.0 && self.lambda_o.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative (lambda_c = {}, lambda_o = {})",
                self.lambda_c, self.lambda_o
            )));
        }
        if !(self.epsilon_norm > 0.0 && self.epsilon_norm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_norm must be positive, got {}",
                self.epsilon_norm
            )));
        }
        Ok(())
    }

    /// Similarity-map scale for feature width `d`.
    pub fn map_scale(&self, d: usize) -> f64 {
        if self.scale_by_sqrt_d {
            1.0 / (d as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn vanilla(&self) -> LossConfig {
        LossConfig {
            lambda_c: 0.0,
            lambda_o: 0.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_o: f64,
    pub l_c: f64,
    pub total: f64,
    /// Unweighted `l_o` contribution per class, indexed by class id.
    pub l_o_per_class: [f64; NUM_CLASSES],
    /// Unweighted `l_c` contribution per class, indexed by class id.
    pub l_c_per_class: [f64; NUM_CLASSES],
}

pub fn total_loss(l_det: f64, l_o: f64, l_c: f64, config: &LossConfig) -> LossBreakdown {
    LossBreakdown {
        l_det,
        l_o,
        l_c,
        total: l_det + config.lambda_c * l_c + config.lambda_o * l_o,
        ..Default::default()
    }
}

impl LossBreakdown {
    pub fn with_per_class(
        mut self,
        l_o: &[(ObjectClass, f64)],
        l_c: &[(ObjectClass, f64)],
    ) -> Self {
        for &(c, v) in l_o {
            self.l_o_per_class[c.id()] = v;
        }
        for &(c, v) in l_c {
            self.l_c_per_class[c.id()] = v;
        }
        self
    }

    /// Component-wise sum, used to average breakdowns over a batch or epoch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_det += other.l_det;
        self.l_o += other.l_o;
        self.l_c += other.l_c;
        self.total += other.total;
        for c in 0..NUM_CLASSES {
            self.l_o_per_class[c] += other.l_o_per_class[c];
            self.l_c_per_class[c] += other.l_c_per_class[c];
        }
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.l_det *= s;
        self.l_o *= s;
        self.l_c *= s;
        self.total *= s;
        self.l_o_per_class.iter_mut().for_each(|v| *v *= s);
        self.l_c_per_class.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn csv_header(first: &str) -> String {
        let mut cols = vec![
            first.to_string(),
            "l_det".into(),
            "l_o".into(),
            "l_c".into(),
            "total".into(),
        ];
        for prefix in ["l_o", "l_c"] {
            for c in ObjectClass::ALL {
                cols.push(format!("{prefix}_{}", c.name()));
            }
        }
        cols.join(",")
    }

    /// One CSV row; floats use Rust's shortest round-trip formatting.
    pub fn csv_row(&self, first: impl std::fmt::Display) -> String {
        let mut cols = vec![
            first.to_string(),
            self.l_det.to_string(),
            self.l_o.to_string(),
            self.l_c.to_string(),
            self.total.to_string(),
        ];
        cols.extend(self.l_o_per_class.iter().map(f64::to_string));
        cols.extend(self.l_c_per_class.iter().map(f64::to_string));
        cols.join(",")
    }
}
