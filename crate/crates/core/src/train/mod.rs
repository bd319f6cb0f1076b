//! Optimization: Adam, the learning-rate schedule, the alternating
//! critic/generator step, checkpoints and the resumable training loop.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod engine;

pub use adam::Adam;
pub use checkpoint::{
    decode_rgck, encode_rgck, inspect, load_generator_pair, read_rgck, write_rgck, CheckpointInfo, Entries,
};
pub use config::{lr_schedule, DatasetSpec, TrainConfig};
pub use engine::{fit, train_step, FitOutcome, Optimizers, StepParams, Trainer};
