//! Dataset synthesis, the train/eval loop, ablations, benchmarks,
//! checkpointing, and the run configuration that ties them together.

pub mod ablate;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod pnm;
pub mod train;

pub use ablate::{fixation_grid_ablation, AblationMatrix};
pub use bench::{linear_fit_r2, runtime_bench, sampler_walltimes, BenchRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Placement, RunConfig, TrainMode};
pub use dataset::{derive_seed, generate_glyph_dataset, load_image_folder, Dataset, Sample};
pub use eval::{evaluate, evaluate_with_options, EvalMode, EvalOptions, EvalReport};
pub use model::{FixationSource, ForwardOptions, SaccaderModel, SaccadicForward};
pub use train::{init_threads, train, write_metrics_csv, EpochRecord, History, OptimizerState};
