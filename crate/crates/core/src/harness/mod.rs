//! Experiment orchestration: configs, checkpoints, run logs and the commands
//! the CLI exposes.

mod checkpoint;
mod commands;
mod config;
mod run;
mod study;

pub use checkpoint::{Checkpoint, RoleModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    compare, distill, distill_with_cache, eval_checkpoint, generate_data, grad_check,
    grad_check_state, init_seeds, load_dataset, read_report, resolve_output_root, train_baseline,
    train_teacher, DataSummary, GradCheckCase, GradCheckConfig, GradCheckSummary, RunOutcome,
    RunRequest, DATA_DIR, GRAD_CHECK_MAX_PARAMS, MANIFEST_FILE, OUTPUT_ROOT_ENV, TEST_DATASET,
};
pub use config::{ExperimentConfig, Mode, RunKind};
pub use run::{
    read_jsonl, validate_loss_log, EvalRecord, LossRecord, RunManifest, WallClock, CHECKPOINT_FILE,
    CONFIG_FILE, EVAL_LOG, LOSS_LOG, REPORT_JSON, REPORT_TEXT,
};
pub use study::{distillation_study, median, StudyReport, StudyRow};
