//! Datasets, run configuration, training runners, rate-distortion sweeps,
//! latent export, and file artifacts (CSV, SVG, binary checkpoints).

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod dataset;
pub mod rd;
pub mod runner;
pub mod svg;

pub use checkpoint::{Checkpoint, FinalEval};
pub use config::{Algorithm, DatasetKind, DecoderKind, ModelKind, RunConfig};
pub use dataset::{downsample, load_mnist_idx, synthetic_digits, Dataset};
pub use rd::{rd_sweep, RdPoint};
pub use runner::{
    build_state, evaluate, export_latents, prepare_data, restore, run_training, snapshot,
    ModelState, SplitData, TrainOutcome,
};
