use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::Frame;
use super::eval::{in_grid, EvalConfig};
use super::model::{init_student, Gradients, ModelState};
use crate::beam::{generate_pseudo_low_beam, KMeansParams};
use crate::bev::{
    pool_object, pool_object_backward_into, rasterize, EncoderParams, GridSpec, ObjectFeature,
    Tensor3,
};
use crate::error::{Error, Result};
use crate::losses::{
    context_similarity_loss, detection_loss, detection_targets, group_by_class,
    object_similarity_loss, total_loss, ClassGroup, DetectionTargets, LossBreakdown, LossConfig,
};
use crate::rng::{mix64, rng_from_seed, stream};
use crate::simlidar::{BoxLabel, ObjectClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Detection loss only.
    Vanilla,
    /// Detection loss plus the teacher-student similarity terms.
    Dadt,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Dadt => "dadt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub source_beams: usize,
    /// Beam count of the teacher's pseudo low-beam input.
    pub target_beams: usize,
    pub grid: GridSpec,
    pub eval: EvalConfig,
    /// Encoder widths for a model trained from scratch.
    pub hidden: usize,
    pub d: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dadt,
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            loss: LossConfig::default(),
            source_beams: 64,
            target_beams: 40,
            grid: GridSpec::default(),
            eval: EvalConfig::default(),
            hidden: EncoderParams::DEFAULT_HIDDEN,
            d: EncoderParams::DEFAULT_D,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} is not usable",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.target_beams == 0 || self.target_beams > self.source_beams {
            return Err(Error::InvalidArgument(format!(
                "need source_beams >= target_beams >= 1, got {} -> {}",
                self.source_beams, self.target_beams
            )));
        }
        if self.hidden == 0 || self.d == 0 {
            return Err(Error::InvalidArgument(
                "encoder widths must be positive".into(),
            ));
        }
        self.loss.validate()?;
        self.grid.validate()?;
        self.eval.validate()
    }

    /// Loss weights actually applied: vanilla mode zeroes both similarity terms.
    pub fn effective_loss(&self) -> LossConfig {
        match self.mode {
            Mode::Vanilla => self.loss.vanilla(),
            Mode::Dadt => self.loss,
        }
    }

    /// Starting student: the teacher's encoder with a fresh head, or a fully
    /// random model when there is no teacher.
    pub fn initial_student(&self, teacher: Option<&ModelState>) -> ModelState {
        match teacher {
            Some(t) => init_student(t, self.seed),
            None => ModelState::random(self.seed, self.hidden, self.d),
        }
    }
}

/// Teacher-side quantities of a frame; constant during training.
#[derive(Debug, Clone)]
pub struct TeacherView {
    pub grid: Tensor3,
    pub features: Tensor3,
    pub objects: Vec<ClassGroup>,
    pub kept_beams: Vec<u32>,
}

/// A frame with everything that does not depend on the student precomputed.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub id: String,
    pub grid: Tensor3,
    /// Ground truth with centers inside the grid, in label order.
    pub boxes: Vec<BoxLabel>,
    pub targets: DetectionTargets,
    pub teacher: Option<TeacherView>,
}

/// Pools one feature per box, in box order.
pub fn pool_boxes(f: &Tensor3, boxes: &[BoxLabel], spec: &GridSpec) -> Result<Vec<ObjectFeature>> {
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(ObjectFeature {
                values: pool_object(f, b, spec)?,
                class: b.class,
                box_index: i,
            })
        })
        .collect()
}

/// Boxes grouped like [`group_by_class`] groups their features.
pub fn boxes_by_class(boxes: &[BoxLabel]) -> Vec<(ObjectClass, Vec<BoxLabel>)> {
    ObjectClass::ALL
        .iter()
        .filter_map(|&c| {
            let members: Vec<BoxLabel> = boxes.iter().filter(|b| b.class == c).copied().collect();
            (!members.is_empty()).then_some((c, members))
        })
        .collect()
}

pub fn teacher_view(
    frame: &Frame,
    boxes: &[BoxLabel],
    teacher: &ModelState,
    config: &TrainConfig,
) -> Result<TeacherView> {
    let params = KMeansParams {
        seed: mix64(config.seed, stream::KMEANS),
        ..KMeansParams::default()
    };
    let (pseudo, _) = generate_pseudo_low_beam(
        &frame.cloud,
        config.source_beams,
        config.target_beams,
        params,
    )?;
    let grid = rasterize(&pseudo.cloud, &config.grid);
    let features = teacher.features(&grid)?;
    let objects = group_by_class(&pool_boxes(&features, boxes, &config.grid)?);
    Ok(TeacherView {
        grid,
        features,
        objects,
        kept_beams: pseudo.kept_beams,
    })
}

/// Rasterizes the student input and, in dadt mode, runs the frozen teacher on
/// the pseudo low-beam version of the frame.
pub fn prepare_frames(
    frames: &[Frame],
    teacher: Option<&ModelState>,
    config: &TrainConfig,
) -> Result<Vec<PreparedFrame>> {
    if config.mode == Mode::Dadt && teacher.is_none() {
        return Err(Error::InvalidArgument("dadt mode needs a teacher".into()));
    }
    frames
        .par_iter()
        .map(|frame| {
            let boxes = in_grid(&frame.labels, &config.grid);
            let teacher = match (config.mode, teacher) {
                (Mode::Dadt, Some(t)) => Some(teacher_view(frame, &boxes, t, config)?),
                _ => None,
            };
            Ok(PreparedFrame {
                id: frame.id.clone(),
                grid: rasterize(&frame.cloud, &config.grid),
                targets: detection_targets(&boxes, &config.grid),
                boxes,
                teacher,
            })
        })
        .collect()
}

/// Loss breakdown and parameter gradients of one frame.
pub fn frame_loss_and_grad(
    student: &ModelState,
    frame: &PreparedFrame,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let loss_cfg = config.effective_loss();
    let fwd = student.forward(&frame.grid)?;
    let det = detection_loss(&fwd.head_out, &frame.targets)?;
    let mut l_o = 0.0;
    let mut l_c = 0.0;
    let mut per_o = Vec::new();
    let mut per_c = Vec::new();
    let mut d_features: Option<Tensor3> = None;
    if config.mode == Mode::Dadt {
        let t = frame.teacher.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("frame {} has no teacher view", frame.id))
        })?;
        let zs = group_by_class(&pool_boxes(&fwd.features, &frame.boxes, &config.grid)?);
        let obj = object_similarity_loss(&t.objects, &zs, loss_cfg.epsilon_norm)?;
        let ctx = context_similarity_loss(&t.features, &t.objects, &fwd.features, &zs, &loss_cfg)?;
        l_o = obj.value;
        l_c = ctx.value;
        per_o = obj.per_class.clone();
        per_c = ctx.per_class.clone();
        if loss_cfg.lambda_o > 0.0 || loss_cfg.lambda_c > 0.0 {
            let mut df = Tensor3::zeros(fwd.features.h, fwd.features.w, fwd.features.c);
            if loss_cfg.lambda_c > 0.0 {
                df.add_scaled(&ctx.grad_fs, loss_cfg.lambda_c);
            }
            let groups = boxes_by_class(&frame.boxes);
            for (gi, (_, boxes)) in groups.iter().enumerate() {
                for (k, b) in boxes.iter().enumerate() {
                    let go = &obj.grads[gi].features[k];
                    let gc = &ctx.grad_zs[gi].features[k];
                    let up: Vec<f64> = go
                        .iter()
                        .zip(gc)
                        .map(|(a, c)| loss_cfg.lambda_o * a + loss_cfg.lambda_c * c)
                        .collect();
                    pool_object_backward_into(&mut df, &up, b, &config.grid)?;
                }
            }
            d_features = Some(df);
        }
    }
    let breakdown = total_loss(det.value, l_o, l_c, &loss_cfg).with_per_class(&per_o, &per_c);
    let grads = student.backward(&frame.grid, &fwd, &det.grad, d_features.as_ref())?;
    Ok((breakdown, grads))
}

/// SGD with momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(model: &ModelState, learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) -> Result<()> {
        if model.frozen {
            return Err(Error::InvalidArgument(
                "refusing to update a frozen model".into(),
            ));
        }
        for (v, g) in self.velocity.iter_mut().zip(grads.iter()) {
            *v = self.momentum * *v + g;
        }
        let lr = self.learning_rate;
        let params = model.encoder.iter_mut().chain(model.head.iter_mut());
        for (p, v) in params.zip(self.velocity.iter()) {
            *p -= lr * v;
        }
        Ok(())
    }
}

/// One update from a batch: per-frame gradients (computed in parallel) are
/// averaged in batch order, then applied once. Returns the batch-mean losses
/// of the pre-update student.
pub fn train_step(
    batch: &[&PreparedFrame],
    student: &mut ModelState,
    opt: &mut Sgd,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results = batch
        .par_iter()
        .map(|f| frame_loss_and_grad(student, f, config))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(student);
    let mut losses = LossBreakdown::default();
    for (l, g) in &results {
        grads.add_scaled(g, scale);
        losses.accumulate(l);
    }
    opt.step(student, &grads)?;
    Ok(losses.scaled(scale))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ModelState,
    /// Pre-update batch losses, one per step.
    pub steps: Vec<LossBreakdown>,
    /// Frame-weighted mean of the step losses of each epoch.
    pub epochs: Vec<LossBreakdown>,
}

/// Visiting order for `epoch`, shuffled with the config seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(mix64(mix64(seed, stream::SHUFFLE), epoch as u64));
    order.shuffle(&mut rng);
    order
}

pub fn train_prepared(
    frames: &[PreparedFrame],
    mut student: ModelState,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    student.check()?;
    student.frozen = false;
    let mut opt = Sgd::new(&student, config.learning_rate, config.momentum);
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(frames.len(), config.seed, epoch);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedFrame> = chunk.iter().map(|&i| &frames[i]).collect();
            let l = train_step(&batch, &mut student, &mut opt, config)?;
            sum.accumulate(&l.scaled(chunk.len() as f64));
            steps.push(l);
        }
        epochs.push(sum.scaled(1.0 / frames.len() as f64));
        if !student.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "training diverged in epoch {}; lower the learning rate",
                epoch + 1
            )));
        }
    }
    Ok(TrainOutput {
        model: student,
        steps,
        epochs,
    })
}

/// Full training run: the student starts from the teacher (or from scratch
/// without one) and the teacher is never modified.
pub fn train(
    frames: &[Frame],
    teacher: Option<&ModelState>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let prepared = prepare_frames(frames, teacher, config)?;
    train_prepared(&prepared, config.initial_student(teacher), config)
}
