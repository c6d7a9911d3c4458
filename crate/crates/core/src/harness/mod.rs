//! Synthetic data, training, checkpoints, evaluation and the ablation runner.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod gradsuite;
pub mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{generate_dataset, split_sizes, Dataset, SampleRecord, Split};
pub use gradsuite::{run_grad_suite, GradCase};
pub use evaluate::{evaluate, EvalOptions, Evaluation, Generation};
pub use train::{build_model, load_graph, train, EpochStats, LossCurve};
