//! Stage implementations shared by the individual subcommands and `pipeline`,
//! so both produce identical files. Every stage reads its inputs from disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::background::{vsharp_remove, SmvConfig};
use crate::error::{Error, Result};
use crate::io::{load_raw, save_raw};
use crate::metrics::MetricReport;
use crate::neural::{simulate_subject, train, TrainConfig, TrainReport, TrainingPair, UNetConfig, UNetModel};
use crate::phantom::{synthesize_echoes, EchoTrain, Phantom, PhantomSpec};
use crate::preprocess::{normalize_phase, unwrap_laplacian, NormalizedPhase};
use crate::volume::{Mask, Volume3D};

pub const CHI: &str = "chi.qsmv";
pub const BRAIN_MASK: &str = "brain_mask.qsmv";
pub const HEAD_MASK: &str = "head_mask.qsmv";
pub const LABELS: &str = "labels.qsmv";

/// Saves `v` and returns what a later stage will read back (values narrowed to f32).
pub fn persist(v: &Volume3D, path: &Path) -> Result<Volume3D> {
    save_raw(v, path)?;
    load_raw(path)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_volume(&load_raw(path)?))
}

pub fn save_mask(m: &Mask, like: &Volume3D, path: &Path) -> Result<()> {
    save_raw(&m.to_volume(like.voxel_size()), path)
}

pub fn write_phantom(ph: &Phantom, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_raw(&ph.chi, &dir.join(CHI))?;
    save_mask(&ph.brain_mask, &ph.chi, &dir.join(BRAIN_MASK))?;
    save_mask(&ph.head_mask, &ph.chi, &dir.join(HEAD_MASK))?;
    save_raw(&ph.labels, &dir.join(LABELS))
}

pub fn echo_path(dir: &Path, i: usize, kind: &str) -> PathBuf {
    dir.join(format!("echo{i:02}_{kind}.qsmv"))
}

/// Simulated wrapped phase and magnitude per echo; returns the phase paths.
pub fn write_echoes(
    field: &Volume3D,
    support: &Mask,
    train: &EchoTrain,
    snr: Option<f64>,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let echoes = synthesize_echoes(field, support, train, snr, seed)?;
    let mut phases = Vec::with_capacity(echoes.len());
    for (i, e) in echoes.iter().enumerate() {
        let p = echo_path(dir, i, "phase");
        save_raw(&e.phase, &p)?;
        save_raw(&e.magnitude, &echo_path(dir, i, "magnitude"))?;
        phases.push(p);
    }
    Ok(phases)
}

pub fn unwrap_files(inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    if inputs.len() != outputs.len() || inputs.is_empty() {
        return Err(Error::Invalid(format!("{} inputs but {} outputs", inputs.len(), outputs.len())));
    }
    for (i, o) in inputs.iter().zip(outputs) {
        save_raw(&unwrap_laplacian(&load_raw(i)?)?, o)?;
    }
    Ok(())
}

pub fn normalize_files(unwrapped: &[PathBuf], train: &EchoTrain, out: &Path) -> Result<Volume3D> {
    let vols = unwrapped.iter().map(load_raw).collect::<Result<Vec<_>>>()?;
    persist(&normalize_phase(&vols, train)?.psi, out)
}

pub fn bgremove_files(psi: &Path, mask: &Path, cfg: &SmvConfig, out: &Path, reliable_out: &Path) -> Result<(Volume3D, Mask)> {
    let psi = NormalizedPhase::from_field(load_raw(psi)?);
    let lf = vsharp_remove(&psi, &load_mask(mask)?, cfg)?;
    save_mask(&lf.reliable_mask, &lf.local, reliable_out)?;
    Ok((persist(&lf.local, out)?, load_mask(reliable_out)?))
}

/// Phantom seeds of simulated training subject `i`: geometry, then echo noise.
pub fn subject_seeds(seed: u64, i: usize) -> (u64, u64) {
    (seed.wrapping_add(1000 + i as u64), seed.wrapping_add(2000 + i as u64))
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub echoes: EchoTrain,
    pub snr: Option<f64>,
    pub subjects: usize,
    pub val_subjects: usize,
}

pub fn synthetic_pairs(d: &SyntheticData, seed: u64) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    let mut pairs = Vec::with_capacity(d.subjects + d.val_subjects);
    for i in 0..d.subjects + d.val_subjects {
        let (geo, noise) = subject_seeds(seed, i);
        let spec = PhantomSpec::randomized(d.dims, d.voxel_size, geo);
        pairs.push(simulate_subject(&spec, &d.echoes, d.snr, noise)?.training_pair()?);
    }
    let val = pairs.split_off(d.subjects);
    Ok((pairs, val))
}

/// Trains on freshly simulated randomized phantoms; `seed` overrides the one in `tcfg`.
pub fn train_synthetic(d: &SyntheticData, ucfg: &UNetConfig, tcfg: &TrainConfig, seed: u64) -> Result<(UNetModel, TrainReport)> {
    let (tr, va) = synthetic_pairs(d, seed)?;
    train(&tr, &va, ucfg, &TrainConfig { seed, ..tcfg.clone() })
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method,rmse_pct,hfen_pct,ssim\n");
    for r in reports {
        writeln!(s, "{},{},{},{}", r.method, r.rmse_pct, r.hfen_pct, r.ssim).expect("string write");
    }
    s
}

pub fn roi_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method,label,mean,sd,count\n");
    for r in reports {
        for (label, st) in &r.rois {
            writeln!(s, "{},{},{},{},{}", r.method, label, st.mean, st.sd, st.count).expect("string write");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Unit};
    use std::collections::BTreeMap;

    #[test]
    fn persist_returns_the_stored_values() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::from_fn(Dims(3, 2, 2), [1.0; 3], Unit::Ppm, |x, y, z| 0.1 * (x + y + z) as f64).unwrap();
        let back = persist(&v, &dir.path().join("v.qsmv")).unwrap();
        assert_eq!(back, load_raw(dir.path().join("v.qsmv")).unwrap());
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| *a == *b as f32 as f64));
    }

    #[test]
    fn csv_rows() {
        let r = MetricReport { method: "tkd".into(), rmse_pct: 50.0, hfen_pct: 40.5, ssim: 0.75, rois: BTreeMap::new() };
        assert_eq!(metrics_csv(&[r]), "method,rmse_pct,hfen_pct,ssim\ntkd,50,40.5,0.75\n");
    }
}
