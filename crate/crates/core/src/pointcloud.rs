//! Point-cloud data model, Cartesian to spherical conversion and the binary
//! frame format.
//!
//! Frames on disk are headerless little-endian `f32` quadruples
//! `(x, y, z, intensity)`, 16 bytes per point. Coordinates are sensor-centered
//! meters. Geometry is carried in `f64` in memory.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::simlidar::{BoxLabel, ObjectClass};

pub const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Result<Self> {
        let p = Point { x, y, z, intensity };
        if !p.is_valid() {
            return Err(Error::InvalidArgument(format!("invalid point {p:?}")));
        }
        Ok(p)
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && self.intensity.is_finite()
            && (0.0..=1.0).contains(&self.intensity)
    }
}

/// Range, inclination above the horizontal plane, and the arcsin azimuth.
///
/// `theta = asin(y / sqrt(x^2 + y^2))` lies in `[-pi/2, pi/2]` and does not
/// separate the forward and backward hemispheres: `(1, 1, 0)` and `(-1, 1, 0)`
/// share the same `theta`. Nothing downstream reads `theta`; beam clustering
/// uses `phi` only and resampling keeps the original Cartesian points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub r: f64,
    pub phi: f64,
    pub theta: f64,
}

/// Cartesian to spherical. Total on finite input: on the z axis
/// `phi = sign(z) * pi/2` (zero at the origin) and `theta = 0`.
pub fn to_spherical(p: &Point) -> SphericalCoord {
    let rho2 = p.x * p.x + p.y * p.y;
    let r = (rho2 + p.z * p.z).sqrt();
    if rho2 == 0.0 {
        let phi = if p.z > 0.0 {
            FRAC_PI_2
        } else if p.z < 0.0 {
            -FRAC_PI_2
        } else {
            0.0
        };
        return SphericalCoord { r, phi, theta: 0.0 };
    }
    let rho = rho2.sqrt();
    let phi = (p.z / rho).atan();
    let theta = (p.y / rho).clamp(-1.0, 1.0).asin();
    SphericalCoord { r, phi, theta }
}

/// Inclination only; the quantity beam clustering consumes.
pub fn inclination(p: &Point) -> f64 {
    to_spherical(p).phi
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub beam_labels: Option<Vec<u32>>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(frame_id: impl Into<String>, points: Vec<Point>) -> Self {
        PointCloud {
            points,
            beam_labels: None,
            frame_id: frame_id.into(),
        }
    }

    pub fn with_beam_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} beam labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.beam_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks point validity and, for labeled clouds, that every label is below `k`.
    pub fn validate(&self, k: Option<u32>) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_valid()) {
            return Err(Error::NonFinite { index: i });
        }
        if let Some(labels) = &self.beam_labels {
            if labels.len() != self.points.len() {
                return Err(Error::Shape(
                    "beam label count differs from point count".into(),
                ));
            }
            if let Some(k) = k {
                if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                    return Err(Error::InvalidArgument(format!(
                        "beam label {bad} not below {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    /// Headerless 16-byte `(x, y, z, intensity)` little-endian `f32` records.
    Bin,
}

pub fn decode_frame(bytes: &[u8], frame_id: impl Into<String>) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format {
            path: Default::default(),
            reason: format!("length {} is not a multiple of {RECORD_BYTES}", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (index, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        let p = Point {
            x: f(0),
            y: f(4),
            z: f(8),
            intensity: f(12),
        };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite() && p.intensity.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if !(0.0..=1.0).contains(&p.intensity) {
            return Err(Error::InvalidArgument(format!(
                "record {index}: intensity {} outside [0, 1]",
                p.intensity
            )));
        }
        points.push(p);
    }
    Ok(PointCloud::new(frame_id, points))
}

pub fn encode_frame(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Reads a frame; the frame id is the file stem.
pub fn load_frame(path: &Path, format: FrameFormat) -> Result<PointCloud> {
    match format {
        FrameFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            decode_frame(&bytes, id).map_err(|e| match e {
                Error::Format { reason, .. } => Error::Format {
                    path: path.to_path_buf(),
                    reason,
                },
                other => other,
            })
        }
    }
}

pub fn write_frame(cloud: &PointCloud, path: &Path) -> Result<()> {
    write_atomic(path, &encode_frame(cloud))
}

/// One entry of a label sidecar file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRecord {
    pub class: String,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub heading: f64,
}

impl From<&BoxLabel> for LabelRecord {
    fn from(b: &BoxLabel) -> Self {
        LabelRecord {
            class: b.class.name().to_string(),
            cx: b.center[0],
            cy: b.center[1],
            cz: b.center[2],
            l: b.dims[0],
            w: b.dims[1],
            h: b.dims[2],
            heading: b.heading,
        }
    }
}

impl TryFrom<&LabelRecord> for BoxLabel {
    type Error = Error;

    fn try_from(r: &LabelRecord) -> Result<Self> {
        let class = ObjectClass::from_name(&r.class)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class {:?}", r.class)))?;
        BoxLabel::new(class, [r.cx, r.cy, r.cz], [r.l, r.w, r.h], r.heading)
    }
}

pub fn write_labels(labels: &[BoxLabel], path: &Path) -> Result<()> {
    let records: Vec<LabelRecord> = labels.iter().map(LabelRecord::from).collect();
    crate::io::write_json(path, &records)
}

pub fn load_labels(path: &Path) -> Result<Vec<BoxLabel>> {
    let records: Vec<LabelRecord> = crate::io::read_json(path)?;
    records.iter().map(BoxLabel::try_from).collect()
}
