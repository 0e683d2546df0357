//! Training: configuration, the block data pipeline, losses, the optimiser
//! and the main/finetune loops.

pub mod config;
pub mod data;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use config::TrainConfig;
pub use data::{make_dataset, BlockSampler};
pub use loss::{loss_rec, loss_select, LossReport};
pub use optim::Adam;
pub use trainer::{finetune_deblock, finetune_noise, train, EpochLog, Phase, Trainer};
