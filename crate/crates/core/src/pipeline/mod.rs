//! Model assembly, training and checkpoints.

mod check;
mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use check::model_gradcheck;
pub use config::{Ablation, ModelConfig};
pub use model::{Architecture, ForwardOutput, Head, Model, ModalityGraphs, Representation, SampleAttention};
pub use train::{evaluate, evaluate_samples, score, thread_pool, Adam, EpochStats, Metrics, TrainConfig, Trainer};

#[cfg(test)]
mod tests;
