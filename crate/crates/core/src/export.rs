//! Context heatmaps as 8-bit PGM images and pooled object features as CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::{rasterize, GridSpec};
use crate::distill::eval::in_grid;
use crate::distill::train::pool_boxes;
use crate::distill::{Frame, ModelState};
use crate::error::{Error, Result};
use crate::losses::{context_similarity_map, ContextMap};
use crate::pointcloud::PointCloud;
use crate::simlidar::{BoxLabel, ObjectClass};

/// Normalization bounds written next to a heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBounds {
    pub class: String,
    pub min: f64,
    pub max: f64,
    pub height: usize,
    pub width: usize,
    pub objects: usize,
}

/// Context map of `class` on a frame: the mean pooled feature of that class's
/// in-grid boxes dotted with every cell of the model's features.
pub fn context_heatmap(
    model: &ModelState,
    cloud: &PointCloud,
    labels: &[BoxLabel],
    class: ObjectClass,
    spec: &GridSpec,
    scale: f64,
) -> Result<(ContextMap, usize)> {
    let boxes: Vec<BoxLabel> = in_grid(labels, spec)
        .into_iter()
        .filter(|b| b.class == class)
        .collect();
    if boxes.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {class} box inside the grid"
        )));
    }
    let f = model.features(&rasterize(cloud, spec))?;
    let z: Vec<Vec<f64>> = pool_boxes(&f, &boxes, spec)?
        .into_iter()
        .map(|o| o.values)
        .collect();
    Ok((context_similarity_map(&z, &f, scale)?, boxes.len()))
}

/// Binary PGM (P5, maxval 255). Image row `i` is grid row `i` (x), column `j`
/// is grid column `j` (y). Values are min-max scaled and rounded; a map with
/// no range renders as all zeros.
pub fn encode_pgm(map: &ContextMap) -> (Vec<u8>, f64, f64) {
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend(map.values.iter().map(|&v| {
        if range > 0.0 {
            (255.0 * (v - lo) / range).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    (out, lo, hi)
}

/// Parses a binary PGM back into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        reason: format!("pgm: {m}"),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not text"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = &bytes[(pos + 1).min(bytes.len())..];
    if pixels.len() != w * h {
        return Err(bad(&format!("{} pixels for {w}x{h}", pixels.len())));
    }
    Ok((w, h, pixels.to_vec()))
}

pub fn features_csv_header(d: usize) -> String {
    let mut s = String::from("frame_id,class");
    for k in 0..d {
        write!(s, ",z{k}").unwrap();
    }
    s
}

/// One row per in-grid box, frames in order, boxes in label order. Values use
/// the shortest round-trip formatting.
pub fn features_csv(model: &ModelState, frames: &[Frame], spec: &GridSpec) -> Result<String> {
    let mut s = features_csv_header(model.d());
    s.push('\n');
    for frame in frames {
        let boxes = in_grid(&frame.labels, spec);
        if boxes.is_empty() {
            continue;
        }
        let f = model.features(&rasterize(&frame.cloud, spec))?;
        for obj in pool_boxes(&f, &boxes, spec)? {
            write!(s, "{},{}", frame.id, obj.class).unwrap();
            for v in &obj.values {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f64>, h: usize, w: usize) -> ContextMap {
        ContextMap { h, w, values }
    }

    #[test]
    fn pgm_spans_full_range() {
        let (bytes, lo, hi) = encode_pgm(&map(vec![-1.0, 0.0, 1.0, 3.0, 1.0, -1.0], 2, 3));
        assert_eq!((lo, hi), (-1.0, 3.0));
        let (w, h, px) = decode_pgm(&bytes, Path::new("t.pgm")).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 64, 128, 255, 128, 0]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    }

    #[test]
    fn flat_map_is_black() {
        let (bytes, lo, hi) = encode_pgm(&map(vec![0.0; 4], 2, 2));
        assert_eq!((lo, hi), (0.0, 0.0));
        assert_eq!(
            decode_pgm(&bytes, Path::new("t.pgm")).unwrap().2,
            vec![0; 4]
        );
        let (bytes, ..) = encode_pgm(&map(vec![2.5; 4], 2, 2));
        assert_eq!(
            decode_pgm(&bytes, Path::new("t.pgm")).unwrap().2,
            vec![0; 4]
        );
    }

    #[test]
    fn pgm_rejects_short_payload() {
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00\x01", Path::new("t.pgm")).is_err());
        assert!(decode_pgm(b"P6\n1 1\n255\n\x00", Path::new("t.pgm")).is_err());
    }

    #[test]
    fn header_names_every_component() {
        assert_eq!(features_csv_header(3), "frame_id,class,z0,z1,z2");
    }
}
