use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::pointcloud::{load_frame, load_labels, FrameFormat, PointCloud};
use crate::simlidar::{BoxLabel, Manifest};

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<BoxLabel>,
}

/// Frame ids of a dataset directory: the manifest order when `manifest.json`
/// exists, otherwise the sorted stems of `frames/*.bin`.
pub fn frame_ids(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let m: Manifest = read_json(&manifest)?;
        return Ok(m.frames.into_iter().map(|f| f.id).collect());
    }
    let frames = dir.join("frames");
    let entries = fs::read_dir(&frames).map_err(|e| Error::io(&frames, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&frames, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Frame>> {
    let ids = frame_ids(dir)?;
    ids.par_iter()
        .map(|id| {
            let cloud = load_frame(
                &dir.join("frames").join(format!("{id}.bin")),
                FrameFormat::Bin,
            )?;
            let labels = load_labels(&dir.join("labels").join(format!("{id}.json")))?;
            Ok(Frame {
                id: id.clone(),
                cloud,
                labels,
            })
        })
        .collect()
}
