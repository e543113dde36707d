//! JSON configuration for the end-to-end `pipeline` subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::slices::{Axis, DEFAULT_WINDOW};
use crate::background::SmvConfig;
use crate::error::{Error, Result};
use crate::inversion::{CgConfig, TkdConfig};
use crate::neural::{TrainConfig, UNetConfig};
use crate::phantom::{EchoTrain, PhantomSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// JSON phantom spec; when absent the reference phantom is used.
    pub spec_path: Option<PathBuf>,
    /// Jitter the reference phantom with this seed instead.
    pub randomized: Option<u64>,
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection { spec_path: None, randomized: None, dims: [64; 3], voxel_size: [1.0; 3] }
    }
}

impl PhantomSection {
    pub fn spec(&self) -> Result<PhantomSpec> {
        let spec = match (&self.spec_path, self.randomized) {
            (Some(_), Some(_)) => return Err(Error::Invalid("phantom: give spec_path or randomized, not both".into())),
            (Some(p), None) => serde_json::from_slice(&fs::read(p)?)?,
            (None, Some(seed)) => PhantomSpec::randomized(self.dims, self.voxel_size, seed),
            (None, None) => PhantomSpec::reference(self.dims, self.voxel_size),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Load this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Randomized phantoms simulated for training and for validation.
    pub subjects: usize,
    pub val_subjects: usize,
    /// SNR of the simulated training acquisitions; `null` is noiseless.
    pub snr: Option<f64>,
    pub config: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { checkpoint: None, subjects: 10, val_subjects: 2, snr: Some(50.0), config: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicesSection {
    pub axis: Axis,
    /// Empty means the centre slice.
    pub indices: Vec<usize>,
    pub window: (f64, f64),
}

impl Default for SlicesSection {
    fn default() -> Self {
        SlicesSection { axis: Axis::Z, indices: Vec::new(), window: DEFAULT_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives echo noise, training subjects and network initialization. Required.
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub echoes: EchoTrain,
    /// SNR of the evaluated acquisition; `null` is noiseless.
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default)]
    pub smv: SmvConfig,
    #[serde(default)]
    pub tkd: TkdConfig,
    #[serde(default)]
    pub cg: CgConfig,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub slices: SlicesSection,
}

impl PipelineConfig {
    /// Parses a config file; relative paths inside it are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(p) = cfg.phantom.spec_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.train.checkpoint.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.phantom.spec_path.iter().chain(&self.train.checkpoint) {
            if !p.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("{} does not exist", p.display()),
                )));
            }
        }
        self.echoes.validate()?;
        for snr in [self.snr, self.train.snr].into_iter().flatten() {
            if !(snr > 0.0 && snr.is_finite()) {
                return Err(Error::Invalid(format!("snr must be positive, got {snr}")));
            }
        }
        self.smv.validate()?;
        self.tkd.validate()?;
        self.cg.validate()?;
        self.unet.validate()?;
        self.train.config.validate()?;
        if self.train.checkpoint.is_none() && (self.train.subjects == 0 || self.train.val_subjects == 0) {
            return Err(Error::Invalid("training needs at least one training and one validation subject".into()));
        }
        if self.phantom.dims.iter().any(|&n| n < self.unet.patch_size) {
            return Err(Error::Invalid(format!(
                "phantom dims {:?} smaller than the network patch {}",
                self.phantom.dims, self.unet.patch_size
            )));
        }
        if !(self.slices.window.0 < self.slices.window.1) {
            return Err(Error::Invalid("slice window needs lo < hi".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let r: std::result::Result<PipelineConfig, _> = serde_json::from_str(r#"{"out_dir": "x"}"#);
        assert!(r.is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"out_dir": "x", "seed": 3}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.phantom.dims, [64; 3]);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_missing_files_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"out_dir": "x", "seed": 3, "sed": 1}"#).is_err());
        let mut c: PipelineConfig = serde_json::from_str(r#"{"out_dir": "x", "seed": 3}"#).unwrap();
        c.train.checkpoint = Some("/nonexistent/model.qsmn".into());
        assert!(matches!(c.validate(), Err(Error::Io(_))));
    }
}
