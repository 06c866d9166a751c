//! Configuration, checkpoints, metrics, the optimizer and the two-stage
//! training and evaluation loops.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Ablation, Config, DataSource, EmaCadence, LossWeights};
pub use metrics::{read_metrics, LossBreakdown, MetricsRecord, MetricsSink};
pub use optim::Adam;
pub use train::{init_model, run_eval, run_metatrain, run_pretrain, Domains, EvalReport, StageOutcome};
