//! Teacher-student finetuning, the vanilla baseline, checkpoints and
//! rotated-box BEV evaluation.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod recipe;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use dataset::{load_dataset, Frame};
pub use eval::{
    average_precision, bev_iou, evaluate, nms, predict, Detection, EvalConfig, EvalResult,
};
pub use model::{init_student, Gradients, Head, ModelState};
pub use train::{
    frame_loss_and_grad, prepare_frames, train, train_prepared, train_step, Mode, PreparedFrame,
    Sgd, TrainConfig, TrainOutput,
};

use crate::losses::LossBreakdown;

/// Summary of a training and/or evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub eval: Option<EvalResult>,
    pub epoch_losses: Vec<LossBreakdown>,
    pub wall_clock_seconds: f64,
}

/// Loss curve CSV, one row per entry, indexed from 1.
pub fn loss_csv(first: &str, rows: &[LossBreakdown]) -> String {
    let mut s = LossBreakdown::csv_header(first);
    s.push('\n');
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&r.csv_row(i + 1));
        s.push('\n');
    }
    s
}
