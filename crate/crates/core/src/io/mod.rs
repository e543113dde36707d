//! On-disk volume formats.

pub mod nifti;
pub mod raw;

pub use nifti::{load_nifti, save_nifti};
pub use raw::{load_raw, read_raw, save_raw, write_raw};
