//! Triplet objective, sampling, augmentation, optimizer and training loop.

pub mod adam;
pub mod augment;
pub mod loss;
pub mod sampler;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, AugmentConfig, AugmentParams};
pub use loss::triplet_loss;
pub use sampler::{Triplet, TripletSampler};
pub use trainer::{train, EpochLog, TrainConfig, Trainer};
