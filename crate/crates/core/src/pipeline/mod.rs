//! End-to-end orchestration: configuration, preprocessing, training,
//! evaluation and sweeps.

pub mod check;
pub mod config;
pub mod eval;
pub mod prep;
pub mod sweep;
pub mod train;

pub use check::grad_check;
pub use config::{ModelKind, OptimizerChoice, PseudoConfig, QueryMode, RunConfig, Task, TrainConfig};
pub use eval::{evaluate_params, evaluate_trained, merge_reports, quantized, rouge_l, EvalReport, RougeScore, SeedMetrics};
pub use prep::{build_sample, corruption_mask, prepare_gaze, FrameGaze, OwnedSample, QuerySource};
pub use sweep::{sweep, Runner, SweepAxis, SweepRow, SweepTable};
pub use train::{load_data, load_trained, save_trained, split_loss, train, LoadedCheckpoint, StepLog, TrainLog, Trained};
