//! Optimiser, schedule, augmentation, synthetic data and the training loop.

mod adam;
mod augment;
mod schedule;
mod synth;
mod trainer;

pub use adam::Adam;
pub use augment::{augment, Transform};
pub use schedule::PlateauScheduler;
pub use synth::{synth_texture_layers, synth_textures, TextureImage, TextureSpec, PALETTE_LEVELS};
pub use trainer::{
    center_crops, load_images, loss_csv, train, train_model, validation_psnr, write_loss_csv, Artifacts, DataSource,
    LogRow, PairSet, TrainConfig, TrainOutcome,
};
