//! From-scratch 3D U-net for single-step susceptibility inversion from total phase.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{sample_patches, simulate_subject, SimulatedSubject, TrainingPair};
pub use model::{build_unet, loss_masked_mse, UNetModel};
pub use optim::{Adam, LrSchedule};
pub use tensor::Tensor;
pub use train::{predict_volume, train, TrainConfig, TrainReport};
pub use unet::{SkipMode, UNet, UNetConfig};
