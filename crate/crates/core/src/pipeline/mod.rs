//! Training orchestration: flow pre-training, detection fine-tuning, the
//! four-stage alternation, checkpoints, run configuration and metrics.

mod alternate;
mod checkpoint;
mod config;
mod metrics;
mod train;

pub use alternate::{alternate_train, AlternateOutcome, AuditEntry, STAGE_TAGS};
pub use checkpoint::{
    apply_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION,
    MAGIC,
};
pub use config::{
    DataConfig, DetectTrainConfig, FlowTrainConfig, RunConfig, Stage, TEST_ID_BASE, VAL_ID_BASE,
};
pub use metrics::{MetricsLog, MetricsRow};
pub use train::{
    collect_detections, detect_boxes, evaluate_detection, evaluate_flow, fresh_params,
    pretrain_flow, report_map, train_detect, train_detection, train_flow, SceneSource,
    StageOutcome,
};

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Version stamp written next to every run.
pub fn version_stamp() -> String {
    format!(
        "flowdet {} (git {})\n",
        env!("CARGO_PKG_VERSION"),
        option_env!("FLOWDET_GIT_REV").unwrap_or("unknown")
    )
}

/// Writes the resolved configuration and the version stamp into `out_dir`.
pub fn write_run_header(run: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("resolved_config.toml"), run.to_toml())?;
    fs::write(out_dir.join("version.txt"), version_stamp())?;
    Ok(())
}
