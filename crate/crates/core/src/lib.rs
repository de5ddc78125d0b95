//! Distill-tuning of LiDAR bird's-eye-view encoders.
//!
//! The pipeline: simulate or load LiDAR frames ([`simlidar`], [`pointcloud`]),
//! emulate a lower-beam sensor by clustering inclinations ([`beam`]),
//! rasterize and encode BEV features ([`bev`]), and finetune a student
//! encoder against a frozen teacher with object and context similarity
//! regularizers ([`losses`], [`distill`]).

pub mod beam;
pub mod bev;
pub mod distill;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod pointcloud;
pub mod rng;
pub mod simlidar;

pub use error::{Error, Result};
