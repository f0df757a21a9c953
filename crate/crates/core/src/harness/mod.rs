//! Training, evaluation, the click-placement sweep, checkpoints and the
//! self-test used by the command-line tool.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod selftest;
pub mod train;

pub use ablate::{ablate_prompts, ablation_csv, AblationRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::TrainConfig;
pub use data::{generate_split, load_split, prepare_all, save_split, PreparedScene, Vocabulary};
pub use evaluate::{evaluate, Evaluation, Protocol};
pub use selftest::{run_selftest, Check};
pub use train::{finetune_trick, train, TrainOutcome};
