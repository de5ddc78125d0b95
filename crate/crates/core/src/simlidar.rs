//! Synthetic scenes and LiDAR raycasting.
//!
//! The world is a flat ground plane plus yawed cuboids. The sensor sits at
//! height `sensor_height` above the world origin; emitted points and box labels
//! are expressed in the sensor-centered frame (world z minus `sensor_height`),
//! matching the frame convention of [`crate::pointcloud`].
//!
//! Beams are evenly spaced in inclination over `[phi_min, phi_max]`. Rays are
//! cast for every `(azimuth, beam)` pair, azimuth-major, and the nearest hit is
//! returned with Gaussian range noise applied along the ray.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::pointcloud::{write_frame, write_labels, Point, PointCloud};
use crate::rng::{mix64, rng_from_seed, stream};

pub const GROUND_INTENSITY: f64 = 0.5;
pub const BOX_INTENSITY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [
        ObjectClass::Vehicle,
        ObjectClass::Pedestrian,
        ObjectClass::Cyclist,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Nominal (length, width, height) in meters.
    pub fn size_prior(self) -> [f64; 3] {
        match self {
            ObjectClass::Vehicle => [4.5, 1.9, 1.6],
            ObjectClass::Pedestrian => [0.8, 0.8, 1.7],
            ObjectClass::Cyclist => [1.8, 0.8, 1.7],
        }
    }
}

impl std::fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLabel {
    pub class: ObjectClass,
    pub center: [f64; 3],
    /// (length, width, height); length runs along the heading direction.
    pub dims: [f64; 3],
    pub heading: f64,
}

impl BoxLabel {
    pub fn new(class: ObjectClass, center: [f64; 3], dims: [f64; 3], heading: f64) -> Result<Self> {
        let ok = center.iter().chain(&dims).all(|v| v.is_finite())
            && dims.iter().all(|&d| d > 0.0)
            && heading.is_finite()
            && heading > -PI
            && heading <= PI;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid box: center {center:?} dims {dims:?} heading {heading}"
            )));
        }
        Ok(BoxLabel {
            class,
            center,
            dims,
            heading,
        })
    }

    /// Point-in-footprint test in the BEV plane (closed rectangle).
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.to_local_bev(x, y);
        u.abs() <= 0.5 * self.dims[0] && v.abs() <= 0.5 * self.dims[1]
    }

    /// BEV coordinates of `(x, y)` in the box frame (u along heading).
    pub fn to_local_bev(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (dx * c + dy * s, -dx * s + dy * c)
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (0.5 * self.dims[0], 0.5 * self.dims[1]);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| {
            [
                self.center[0] + u * c - v * s,
                self.center[1] + u * s + v * c,
            ]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    /// Ray parameter of the first entry into the box, if any, for a ray from
    /// `origin` along `dir`. Slab method in the yaw-rotated box frame.
    pub fn ray_entry(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let (s, c) = self.heading.sin_cos();
        let ox = origin[0] - self.center[0];
        let oy = origin[1] - self.center[1];
        let o = [
            ox * c + oy * s,
            -ox * s + oy * c,
            origin[2] - self.center[2],
        ];
        let d = [dir[0] * c + dir[1] * s, -dir[0] * s + dir[1] * c, dir[2]];
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            let half = 0.5 * self.dims[axis];
            if d[axis] == 0.0 {
                if o[axis].abs() > half {
                    return None;
                }
                continue;
            }
            let t1 = (-half - o[axis]) / d[axis];
            let t2 = (half - o[axis]) / d[axis];
            t_near = t_near.max(t1.min(t2));
            t_far = t_far.min(t1.max(t2));
        }
        (t_near <= t_far && t_near > 0.0).then_some(t_near)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub sensor_height: f64,
    /// World height of the ground plane.
    pub ground_z: f64,
    /// Boxes in the sensor-centered frame.
    pub boxes: Vec<BoxLabel>,
    pub beams: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub azimuth_step: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.sensor_height,
            self.ground_z,
            self.phi_min,
            self.phi_max,
            self.azimuth_step,
            self.noise_sigma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || self.beams == 0
            || self.phi_min >= self.phi_max
            || self.azimuth_step <= 0.0
            || self.noise_sigma < 0.0
            || self.phi_min < -PI / 2.0
            || self.phi_max > PI / 2.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid scene spec: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn beam_inclination(&self, beam: usize) -> f64 {
        if self.beams == 1 {
            return self.phi_min;
        }
        self.phi_min + (self.phi_max - self.phi_min) * beam as f64 / (self.beams - 1) as f64
    }

    pub fn azimuth_count(&self) -> usize {
        ((TAU / self.azimuth_step) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn azimuth(&self, index: usize) -> f64 {
        -PI + index as f64 * self.azimuth_step
    }

    pub fn ray_direction(&self, beam: usize, azimuth_index: usize) -> [f64; 3] {
        let (sp, cp) = self.beam_inclination(beam).sin_cos();
        let (sa, ca) = self.azimuth(azimuth_index).sin_cos();
        [cp * ca, cp * sa, sp]
    }

    /// Ground height in the sensor frame.
    pub fn ground_sensor_z(&self) -> f64 {
        self.ground_z - self.sensor_height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitTarget {
    Ground,
    Box(usize),
}

/// Per-point record of how a return was generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub beam: usize,
    pub azimuth_index: usize,
    /// Noise-free range along the ray.
    pub range: f64,
    pub target: HitTarget,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cloud: PointCloud,
    pub boxes: Vec<BoxLabel>,
    pub hits: Vec<Hit>,
}

/// Nearest hit along a ray from the sensor. Ties prefer the smaller index,
/// and the ground loses ties against boxes.
pub fn cast_ray(spec: &SceneSpec, dir: [f64; 3]) -> Option<(f64, HitTarget)> {
    let mut best: Option<(f64, HitTarget)> = None;
    for (i, b) in spec.boxes.iter().enumerate() {
        if let Some(t) = b.ray_entry([0.0; 3], dir) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, HitTarget::Box(i)));
            }
        }
    }
    if dir[2] < 0.0 {
        let t = spec.ground_sensor_z() / dir[2];
        if t > 0.0 && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, HitTarget::Ground));
        }
    }
    best
}

pub fn simulate_with_hits(spec: &SceneSpec) -> Result<Simulation> {
    spec.validate()?;
    let mut rng = rng_from_seed(mix64(spec.seed, stream::SCENE));
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let n_az = spec.azimuth_count();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut hits = Vec::new();
    for az in 0..n_az {
        for beam in 0..spec.beams {
            let dir = spec.ray_direction(beam, az);
            let Some((t, target)) = cast_ray(spec, dir) else {
                continue;
            };
            let noisy = if spec.noise_sigma > 0.0 {
                t + noise.sample(&mut rng)
            } else {
                t
            };
            if noisy <= 0.0 {
                continue;
            }
            let intensity = match target {
                HitTarget::Ground => GROUND_INTENSITY,
                HitTarget::Box(_) => BOX_INTENSITY,
            };
            points.push(Point {
                x: noisy * dir[0],
                y: noisy * dir[1],
                z: noisy * dir[2],
                intensity,
            });
            labels.push(beam as u32);
            hits.push(Hit {
                beam,
                azimuth_index: az,
                range: t,
                target,
            });
        }
    }
    let cloud = PointCloud::new(String::new(), points).with_beam_labels(labels)?;
    Ok(Simulation {
        cloud,
        boxes: spec.boxes.clone(),
        hits,
    })
}

pub fn simulate(spec: &SceneSpec) -> Result<(PointCloud, Vec<BoxLabel>)> {
    let sim = simulate_with_hits(spec)?;
    Ok((sim.cloud, sim.boxes))
}

/// Sensor parameters plus the ranges random boxes are drawn from.
///
/// Per frame: box count uniform in `[min_boxes, max_boxes]`; class uniform
/// over vehicle/pedestrian/cyclist; each dimension is the class prior times
/// `U(1 - size_jitter, 1 + size_jitter)`; center x, y uniform in the ranges;
/// heading uniform in `(-pi, pi]`; boxes rest on the ground. Boxes whose
/// footprints could overlap (center distance below the sum of half diagonals
/// plus `min_gap`) are redrawn, up to 100 attempts each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneTemplate {
    pub sensor_height: f64,
    pub ground_z: f64,
    pub beams: usize,
    pub phi_min: f64,
    pub phi_max: f64,
    pub azimuth_step: f64,
    pub noise_sigma: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub size_jitter: f64,
    pub min_gap: f64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        SceneTemplate {
            sensor_height: 1.73,
            ground_z: 0.0,
            beams: 64,
            phi_min: (-24.9f64).to_radians(),
            phi_max: (-2.0f64).to_radians(),
            azimuth_step: (0.4f64).to_radians(),
            noise_sigma: 0.02,
            min_boxes: 4,
            max_boxes: 10,
            x_range: [6.0, 46.0],
            y_range: [-20.0, 20.0],
            size_jitter: 0.1,
            min_gap: 0.5,
        }
    }
}

impl SceneTemplate {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_boxes <= self.max_boxes
            && self.x_range[0] <= self.x_range[1]
            && self.y_range[0] <= self.y_range[1]
            && (0.0..1.0).contains(&self.size_jitter)
            && self.min_gap >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid scene template: {self:?}"
            )));
        }
        self.scene(Vec::new(), 0).validate()
    }

    pub fn scene(&self, boxes: Vec<BoxLabel>, seed: u64) -> SceneSpec {
        SceneSpec {
            sensor_height: self.sensor_height,
            ground_z: self.ground_z,
            boxes,
            beams: self.beams,
            phi_min: self.phi_min,
            phi_max: self.phi_max,
            azimuth_step: self.azimuth_step,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }

    pub fn sample_boxes(&self, rng: &mut impl Rng) -> Vec<BoxLabel> {
        let n = rng.random_range(self.min_boxes..=self.max_boxes);
        let ground = self.ground_z - self.sensor_height;
        let mut boxes: Vec<BoxLabel> = Vec::with_capacity(n);
        for _ in 0..n {
            for _attempt in 0..100 {
                let class = ObjectClass::ALL[rng.random_range(0..3)];
                let prior = class.size_prior();
                let dims = prior
                    .map(|p| p * rng.random_range(1.0 - self.size_jitter..=1.0 + self.size_jitter));
                let cx = rng.random_range(self.x_range[0]..=self.x_range[1]);
                let cy = rng.random_range(self.y_range[0]..=self.y_range[1]);
                let heading = wrap_angle(PI - rng.random::<f64>() * TAU);
                let half_diag = 0.5 * dims[0].hypot(dims[1]);
                let clear = boxes.iter().all(|b| {
                    let other = 0.5 * b.dims[0].hypot(b.dims[1]);
                    (b.center[0] - cx).hypot(b.center[1] - cy) >= half_diag + other + self.min_gap
                });
                if clear {
                    boxes.push(BoxLabel {
                        class,
                        center: [cx, cy, ground + 0.5 * dims[2]],
                        dims,
                        heading,
                    });
                    break;
                }
            }
        }
        boxes
    }

    /// Scene for frame `index` of a dataset generated with `seed`.
    pub fn frame_scene(&self, seed: u64, index: usize) -> SceneSpec {
        let frame_seed = mix64(seed, index as u64);
        let mut rng = rng_from_seed(frame_seed);
        let boxes = self.sample_boxes(&mut rng);
        self.scene(boxes, frame_seed)
    }
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub beams: usize,
    pub seed: u64,
    pub points: usize,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub seed_rule: String,
    pub n_frames: usize,
    pub template: SceneTemplate,
    pub class_size_priors: std::collections::BTreeMap<String, [f64; 3]>,
    pub frames: Vec<FrameEntry>,
}

pub fn frame_id(index: usize) -> String {
    format!("{index:06}")
}

/// Writes `frames/<id>.bin`, `labels/<id>.json` and `manifest.json` under `out`.
pub fn make_dataset(
    template: &SceneTemplate,
    n_frames: usize,
    seed: u64,
    out: &Path,
) -> Result<Manifest> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    template.validate()?;
    for sub in ["frames", "labels"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let frames = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let spec = template.frame_scene(seed, i);
            let (mut cloud, boxes) = simulate(&spec)?;
            let id = frame_id(i);
            cloud.frame_id = id.clone();
            write_frame(&cloud, &out.join("frames").join(format!("{id}.bin")))?;
            write_labels(&boxes, &out.join("labels").join(format!("{id}.json")))?;
            Ok(FrameEntry {
                id,
                beams: spec.beams,
                seed: spec.seed,
                points: cloud.len(),
                boxes: boxes.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        seed_rule:
            "frame_seed = splitmix64_finalize(seed + (frame_index + 1) * 0x9E3779B97F4A7C15)".into(),
        n_frames,
        template: template.clone(),
        class_size_priors: ObjectClass::ALL
            .iter()
            .map(|c| (c.name().to_string(), c.size_prior()))
            .collect(),
        frames,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
