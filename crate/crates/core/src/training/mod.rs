//! Losses, optimizers, the learning-rate schedule, the staged training
//! pipeline and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod pipeline;
pub mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{focal_loss, focal_loss_graph, FocalLossConfig};
pub use norm::EmbeddingNorm;
pub use optim::{AdamW, Optimizer, Sgd};
pub use pipeline::{
    embed_clips, fit_embeddings, predict_sequences, resolve_stacks, train_decoder, train_encoders, train_pipeline, EmbeddedClip,
    EpochRecord, History, Stage1Config, Stage3Config, TrainConfig, TrainedEncoders, TrainedModel,
};
pub use schedule::cosine_lr;
