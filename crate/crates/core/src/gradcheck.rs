//! Central finite-difference verification of every hand-written gradient.
//!
//! Each component draws random small instances (grids up to 12x12, feature
//! width up to 8), compares the analytic gradient against central differences
//! with step [`EPS`], and reports the largest relative error (see [`rel_err`])
//! over the instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bev::{
    encode, encode_backward, encode_with_cache, pool_object, pool_object_backward, EncoderParams,
    GridSpec, Tensor3, INPUT_CHANNELS,
};
use crate::distill::model::{Head, ModelState};
use crate::distill::train::boxes_by_class;
use crate::error::Result;
use crate::losses::{
    context_similarity_loss, detection_loss, detection_targets, object_similarity_loss, ClassGroup,
    DetectionTargets, LossConfig, MapSource, HEAD_OUTPUTS,
};
use crate::rng::{mix64, rng_from_seed};
use crate::simlidar::{BoxLabel, ObjectClass};

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
const REL_FLOOR: f64 = 1e-12;
/// Instances whose ReLU pre-activations come this close to zero are redrawn,
/// so a finite-difference step never crosses the kink.
const KINK_MARGIN: f64 = 5e-3;

pub const COMPONENTS: [&str; 8] = [
    "encoder",
    "pooling",
    "head",
    "detection",
    "object_similarity",
    "context_similarity",
    "context_similarity_teacher_map",
    "total",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentReport {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub eps: f64,
    pub tolerance: f64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`: the worst coordinate
/// error relative to the gradient's scale. Coordinates several orders of
/// magnitude below the largest entry would otherwise be judged on
/// finite-difference truncation error alone.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(REL_FLOOR)
}

/// Central difference of `f` with respect to `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + EPS;
    let plus = f(x);
    x[i] = orig - EPS;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * EPS)
}

/// Relative error of `analytic` against the finite differences of `f` at `x`.
pub fn max_error(x: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut work = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let n = central_difference(&mut work, i, &mut f);
        numeric.push(n);
    }
    rel_err(analytic, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..=scale)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_vec(h, w, c, uniform(rng, h * w * c, 1.0)).expect("sized")
}

fn small_spec(h: usize, w: usize) -> GridSpec {
    GridSpec {
        x_min: 0.0,
        x_max: h as f64,
        y_min: 0.0,
        y_max: w as f64,
        cell: 1.0,
    }
}

fn random_box(rng: &mut ChaCha8Rng, spec: &GridSpec, class: ObjectClass) -> BoxLabel {
    let cx = rng.random_range(spec.x_min + 0.01..spec.x_max - 0.01);
    let cy = rng.random_range(spec.y_min + 0.01..spec.y_max - 0.01);
    let l = rng.random_range(0.3..4.0);
    let w = rng.random_range(0.3..2.5);
    let heading = rng.random_range(-3.1..3.1);
    BoxLabel::new(class, [cx, cy, 0.0], [l, w, 1.5], heading).expect("valid box")
}

/// Boxes covering at least two classes, with one class holding several objects.
fn random_boxes(rng: &mut ChaCha8Rng, spec: &GridSpec) -> Vec<BoxLabel> {
    let n = rng.random_range(2..=5);
    (0..n)
        .map(|i| {
            let class = if i == 0 {
                ObjectClass::Pedestrian
            } else {
                ObjectClass::ALL[rng.random_range(0..3)]
            };
            random_box(rng, spec, class)
        })
        .collect()
}

fn pool_groups(f: &Tensor3, boxes: &[BoxLabel], spec: &GridSpec) -> Vec<ClassGroup> {
    boxes_by_class(boxes)
        .into_iter()
        .map(|(class, members)| ClassGroup {
            class,
            features: members
                .iter()
                .map(|b| pool_object(f, b, spec).expect("box in grid"))
                .collect(),
        })
        .collect()
}

/// Adds the pooling backward of per-object gradients (aligned with
/// `boxes_by_class`) into `grad`.
fn pool_back(grad: &mut Tensor3, groups: &[ClassGroup], boxes: &[BoxLabel], spec: &GridSpec) {
    for (g, (_, members)) in groups.iter().zip(boxes_by_class(boxes)) {
        for (z, b) in g.features.iter().zip(&members) {
            let dz = pool_object_backward(z, b, spec).expect("box in grid");
            grad.add_scaled(&dz, 1.0);
        }
    }
}

fn min_abs_preactivation(grid: &Tensor3, params: &EncoderParams) -> f64 {
    let (_, cache) = encode_with_cache(grid, params).expect("shapes");
    cache
        .pre1
        .data
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Encoder instance away from ReLU kinks.
fn encoder_instance(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    hidden: usize,
    d: usize,
) -> (Tensor3, EncoderParams) {
    loop {
        let grid = random_tensor(rng, h, w, INPUT_CHANNELS);
        let params = EncoderParams::random(INPUT_CHANNELS, hidden, d, rng);
        if min_abs_preactivation(&grid, &params) > KINK_MARGIN {
            return (grid, params);
        }
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(3..=12),
        rng.random_range(3..=12),
        rng.random_range(2..=8),
    )
}

struct Tally {
    coordinates: usize,
    worst: f64,
}

impl Tally {
    fn add(&mut self, coords: usize, err: f64) {
        self.coordinates += coords;
        self.worst = self.worst.max(err);
    }
}

/// Optional deliberate corruption of one component's analytic gradient, used
/// to show that the check can fail.
fn corrupt(v: &mut [f64], on: bool) {
    if on {
        v.iter_mut().for_each(|g| *g *= 1.01);
    }
}

fn check_encoder(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (h, w, d) = dims(rng);
    let hidden = rng.random_range(2..=8);
    let (grid, params) = encoder_instance(rng, h, w, hidden, d);
    let up = random_tensor(rng, h, w, d);
    let dot = |f: &Tensor3| f.data.iter().zip(&up.data).map(|(a, b)| a * b).sum::<f64>();
    let (_, cache) = encode_with_cache(&grid, &params)?;
    let (g, gx) = encode_backward(&grid, &params, &cache, &up, true)?;
    let mut ga = g.to_flat();
    corrupt(&mut ga, fault);
    let err_p = max_error(&params.to_flat(), &ga, |x| {
        let mut p = params.clone();
        p.set_flat(x).expect("sized");
        dot(&encode(&grid, &p).expect("shapes"))
    });
    let gx = gx.expect("requested");
    let err_x = max_error(&grid.data, &gx.data, |x| {
        let g2 = Tensor3::from_vec(h, w, INPUT_CHANNELS, x.to_vec()).expect("sized");
        dot(&encode(&g2, &params).expect("shapes"))
    });
    t.add(ga.len() + gx.data.len(), err_p.max(err_x));
    Ok(())
}

fn check_pooling(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (h, w, d) = dims(rng);
    let spec = small_spec(h, w);
    let f = random_tensor(rng, h, w, d);
    let b = random_box(rng, &spec, ObjectClass::Vehicle);
    let up = uniform(rng, d, 1.0);
    let mut g = pool_object_backward(&up, &b, &spec)?.data;
    corrupt(&mut g, fault);
    let err = max_error(&f.data, &g, |x| {
        let f2 = Tensor3::from_vec(h, w, d, x.to_vec()).expect("sized");
        let z = pool_object(&f2, &b, &spec).expect("in grid");
        z.iter().zip(&up).map(|(a, b)| a * b).sum()
    });
    t.add(g.len(), err);
    Ok(())
}

fn check_head(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (h, w, d) = dims(rng);
    let f = random_tensor(rng, h, w, d);
    let head = Head::random(d, rng);
    let up = random_tensor(rng, h, w, HEAD_OUTPUTS);
    let dot = |y: &Tensor3| y.data.iter().zip(&up.data).map(|(a, b)| a * b).sum::<f64>();
    let (gh, gf) = head.backward(&f, &up)?;
    let mut ga: Vec<f64> = gh.iter().copied().collect();
    corrupt(&mut ga, fault);
    let flat: Vec<f64> = head.iter().copied().collect();
    let err_p = max_error(&flat, &ga, |x| {
        let mut hh = head.clone();
        for (p, v) in hh.iter_mut().zip(x) {
            *p = *v;
        }
        dot(&hh.forward(&f).expect("shapes"))
    });
    let err_f = max_error(&f.data, &gf.data, |x| {
        let f2 = Tensor3::from_vec(h, w, d, x.to_vec()).expect("sized");
        dot(&head.forward(&f2).expect("shapes"))
    });
    t.add(ga.len() + gf.data.len(), err_p.max(err_f));
    Ok(())
}

fn random_targets(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DetectionTargets {
    let spec = small_spec(h, w);
    let boxes = random_boxes(rng, &spec);
    detection_targets(&boxes, &spec)
}

fn check_detection(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (h, w, _) = dims(rng);
    let targets = random_targets(rng, h, w);
    let mut out = random_tensor(rng, h, w, HEAD_OUTPUTS);
    out.scale(3.0);
    let mut g = detection_loss(&out, &targets)?.grad.data;
    corrupt(&mut g, fault);
    let err = max_error(&out.data, &g, |x| {
        let o = Tensor3::from_vec(h, w, HEAD_OUTPUTS, x.to_vec()).expect("sized");
        detection_loss(&o, &targets).expect("shapes").value
    });
    t.add(g.len(), err);
    Ok(())
}

/// Teacher features, boxes and the student feature tensor of a random
/// similarity-loss instance.
fn similarity_instance(rng: &mut ChaCha8Rng) -> (GridSpec, Tensor3, Vec<BoxLabel>, Tensor3) {
    let (h, w, d) = dims(rng);
    let spec = small_spec(h, w);
    let ft = random_tensor(rng, h, w, d);
    let boxes = random_boxes(rng, &spec);
    let fs = random_tensor(rng, h, w, d);
    (spec, ft, boxes, fs)
}

fn check_object(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (spec, ft, boxes, fs) = similarity_instance(rng);
    let zt = pool_groups(&ft, &boxes, &spec);
    let loss = |f: &Tensor3| {
        let zs = pool_groups(f, &boxes, &spec);
        object_similarity_loss(&zt, &zs, 1e-12).expect("aligned")
    };
    let l = loss(&fs);
    let mut g = Tensor3::zeros(fs.h, fs.w, fs.c);
    pool_back(&mut g, &l.grads, &boxes, &spec);
    corrupt(&mut g.data, fault);
    let err = max_error(&fs.data, &g.data, |x| {
        loss(&Tensor3::from_vec(fs.h, fs.w, fs.c, x.to_vec()).expect("sized")).value
    });
    t.add(g.data.len(), err);
    Ok(())
}

fn check_context(
    rng: &mut ChaCha8Rng,
    fault: bool,
    source: MapSource,
    t: &mut Tally,
) -> Result<()> {
    let (spec, ft, boxes, fs) = similarity_instance(rng);
    let zt = pool_groups(&ft, &boxes, &spec);
    let cfg = LossConfig {
        teacher_map_source: source,
        scale_by_sqrt_d: rng.random_bool(0.5),
        ..LossConfig::default()
    };
    let eval = |f: &Tensor3| {
        let zs = pool_groups(f, &boxes, &spec);
        context_similarity_loss(&ft, &zt, f, &zs, &cfg).expect("aligned")
    };
    let l = eval(&fs);
    let mut g = l.grad_fs.clone();
    pool_back(&mut g, &l.grad_zs, &boxes, &spec);
    corrupt(&mut g.data, fault);
    let err = max_error(&fs.data, &g.data, |x| {
        eval(&Tensor3::from_vec(fs.h, fs.w, fs.c, x.to_vec()).expect("sized")).value
    });
    t.add(g.data.len(), err);
    Ok(())
}

/// Full objective with respect to the student encoder and head parameters,
/// through pooling, both similarity losses and the detection loss.
fn check_total(rng: &mut ChaCha8Rng, fault: bool, t: &mut Tally) -> Result<()> {
    let (h, w, d) = dims(rng);
    let hidden = rng.random_range(2..=6);
    let spec = small_spec(h, w);
    let (grid, encoder) = encoder_instance(rng, h, w, hidden, d);
    let model = ModelState {
        encoder,
        head: Head::random(d, rng),
        frozen: false,
    };
    let boxes = random_boxes(rng, &spec);
    let targets = detection_targets(&boxes, &spec);
    let ft = random_tensor(rng, h, w, d);
    let zt = pool_groups(&ft, &boxes, &spec);
    let cfg = LossConfig {
        lambda_c: rng.random_range(0.5..2.0),
        lambda_o: rng.random_range(0.5..2.0),
        ..LossConfig::default()
    };
    let objective = |m: &ModelState| -> f64 {
        let fwd = m.forward(&grid).expect("shapes");
        let zs = pool_groups(&fwd.features, &boxes, &spec);
        let det = detection_loss(&fwd.head_out, &targets)
            .expect("shapes")
            .value;
        let o = object_similarity_loss(&zt, &zs, cfg.epsilon_norm)
            .expect("aligned")
            .value;
        let c = context_similarity_loss(&ft, &zt, &fwd.features, &zs, &cfg)
            .expect("aligned")
            .value;
        det + cfg.lambda_o * o + cfg.lambda_c * c
    };
    let fwd = model.forward(&grid)?;
    let zs = pool_groups(&fwd.features, &boxes, &spec);
    let det = detection_loss(&fwd.head_out, &targets)?;
    let obj = object_similarity_loss(&zt, &zs, cfg.epsilon_norm)?;
    let ctx = context_similarity_loss(&ft, &zt, &fwd.features, &zs, &cfg)?;
    let mut df = ctx.grad_fs.clone();
    df.scale(cfg.lambda_c);
    let mut dz = obj.grads.clone();
    for (a, b) in dz.iter_mut().zip(&ctx.grad_zs) {
        for (za, zb) in a.features.iter_mut().zip(&b.features) {
            for (x, y) in za.iter_mut().zip(zb) {
                *x = cfg.lambda_o * *x + cfg.lambda_c * y;
            }
        }
    }
    pool_back(&mut df, &dz, &boxes, &spec);
    let grads = model.backward(&grid, &fwd, &det.grad, Some(&df))?;
    let mut ga: Vec<f64> = grads.iter().copied().collect();
    corrupt(&mut ga, fault);
    let n_enc = model.encoder.len();
    let err = max_error(&model.to_flat(), &ga, |x| {
        let mut m = model.clone();
        m.encoder.set_flat(&x[..n_enc]).expect("sized");
        for (p, v) in m.head.iter_mut().zip(&x[n_enc..]) {
            *p = *v;
        }
        objective(&m)
    });
    t.add(ga.len(), err);
    Ok(())
}

/// Runs every component on [`INSTANCES`] random instances. `fault` names a
/// component whose analytic gradient is deliberately scaled by 1.01.
pub fn run(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut components = Vec::with_capacity(COMPONENTS.len());
    for (ci, &name) in COMPONENTS.iter().enumerate() {
        let mut rng = rng_from_seed(mix64(seed, 1000 + ci as u64));
        let faulty = fault == Some(name);
        let mut tally = Tally {
            coordinates: 0,
            worst: 0.0,
        };
        for _ in 0..INSTANCES {
            match name {
                "encoder" => check_encoder(&mut rng, faulty, &mut tally)?,
                "pooling" => check_pooling(&mut rng, faulty, &mut tally)?,
                "head" => check_head(&mut rng, faulty, &mut tally)?,
                "detection" => check_detection(&mut rng, faulty, &mut tally)?,
                "object_similarity" => check_object(&mut rng, faulty, &mut tally)?,
                "context_similarity" => {
                    check_context(&mut rng, faulty, MapSource::Student, &mut tally)?
                }
                "context_similarity_teacher_map" => {
                    check_context(&mut rng, faulty, MapSource::Teacher, &mut tally)?
                }
                "total" => check_total(&mut rng, faulty, &mut tally)?,
                _ => unreachable!("listed component"),
            }
        }
        components.push(ComponentReport {
            name: name.to_string(),
            instances: INSTANCES,
            coordinates: tally.coordinates,
            max_rel_err: tally.worst,
            passed: tally.worst <= TOLERANCE,
        });
    }
    Ok(GradcheckReport {
        seed,
        eps: EPS,
        tolerance: TOLERANCE,
        components,
    })
}
