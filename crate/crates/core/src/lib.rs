//! Quantitative susceptibility mapping on synthetic phantoms: dipole physics,
//! phase preprocessing, background removal, classical inversions, a from-scratch
//! 3D U-net for single-step inversion, and reconstruction metrics.

pub mod background;
pub mod cli;
pub mod error;
pub mod inversion;
pub mod io;
pub mod metrics;
pub mod neural;
pub mod phantom;
pub mod preprocess;
pub mod spectral;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, Mask, Unit, Volume3D};
