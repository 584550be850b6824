//! Neural drift `f_θ(x, t)`: time embedding, MLP, training and checkpoints.

mod checkpoint;
mod embedding;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingManifest, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use embedding::SinusoidalEmbedding;
pub use net::{Architecture, DriftNet, TrainingBatch};
pub use train::{sample_learned, train, train_on_pool, EpochProgress, Optimizer, TrainOptions, TrainReport, TrainingPool};
