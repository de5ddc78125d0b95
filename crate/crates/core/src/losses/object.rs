use super::{check_aligned, ClassGroup};
use crate::error::Result;
use crate::simlidar::ObjectClass;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLoss {
    pub value: f64,
    pub per_class: Vec<(ObjectClass, f64)>,
    /// Gradient with respect to each student feature, aligned with the input groups.
    pub grads: Vec<ClassGroup>,
}

/// Sum over classes of the mean L2 distance between matched teacher and
/// student object features.
pub fn object_similarity_loss(
    teacher: &[ClassGroup],
    student: &[ClassGroup],
    epsilon_norm: f64,
) -> Result<ObjectLoss> {
    check_aligned(teacher, student, None)?;
    let mut value = 0.0;
    let mut per_class = Vec::with_capacity(student.len());
    let mut grads = Vec::with_capacity(student.len());
    for (t, s) in teacher.iter().zip(student) {
        let n = s.count() as f64;
        let mut class_sum = 0.0;
        let mut class_grads = Vec::with_capacity(s.count());
        for (zt, zs) in t.features.iter().zip(&s.features) {
            let diff: Vec<f64> = zs.iter().zip(zt).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            class_sum += norm;
            let denom = n * norm.max(epsilon_norm);
            class_grads.push(diff.iter().map(|v| v / denom).collect());
        }
        let class_loss = class_sum / n;
        value += class_loss;
        per_class.push((s.class, class_loss));
        grads.push(ClassGroup {
            class: s.class,
            features: class_grads,
        });
    }
    Ok(ObjectLoss {
        value,
        per_class,
        grads,
    })
}
