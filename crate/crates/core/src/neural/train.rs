//! Training loop and patch-wise whole-volume prediction.

use std::f64::consts::PI;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{copy_patch, extract_batch, sample_patches, TrainingPair};
use super::model::{build_unet, loss_masked_mse, UNetModel};
use super::optim::{Adam, LrSchedule};
use super::tensor::Tensor;
use super::unet::UNetConfig;
use crate::error::{Error, Result};
use crate::preprocess::{standardize_input, NormalizedPhase, Standardization};
use crate::volume::{Dims, Unit, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Patches drawn per epoch.
    pub patches_per_epoch: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    /// Steps between learning-rate decays.
    pub decay_steps: u64,
    /// Per-period decay factor; derived from the training horizon when absent.
    pub lr_decay: Option<f64>,
    /// Minimum fraction of patch voxels inside the mask.
    pub min_mask_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 20,
            patches_per_epoch: 64,
            lr_initial: 1e-3,
            lr_floor: 1e-7,
            decay_steps: 600,
            lr_decay: None,
            min_mask_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Invalid("batch_size, epochs and patches_per_epoch must be at least 1".into()));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return Err(Error::Invalid(format!("need 0 < lr_floor <= lr_initial, got {} and {}", self.lr_floor, self.lr_initial)));
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::Invalid(format!("lr_decay {d} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.min_mask_fraction) {
            return Err(Error::Invalid("min_mask_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.patches_per_epoch.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self) -> LrSchedule {
        let horizon = self.steps_per_epoch() * self.epochs as u64;
        let mut s = LrSchedule::for_horizon(self.lr_initial, self.lr_floor, self.decay_steps, horizon);
        if let Some(d) = self.lr_decay {
            s.decay = d;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked MSE over the training batches of each epoch.
    pub train_loss: Vec<f64>,
    /// Masked MSE of whole-volume predictions on the validation pairs after each epoch.
    pub val_loss: Vec<f64>,
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    /// Validation loss of predicting zero everywhere.
    pub zero_val_loss: f64,
    /// Epoch (0-based) whose weights are returned.
    pub best_epoch: usize,
}

fn snapshot(model: &mut UNetModel) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.net.visit_params(&mut |p| out.push(p.value.clone()));
    model.net.visit_buffers(&mut |p| out.push(p.value.clone()));
    out
}

fn restore(model: &mut UNetModel, snap: &[Vec<f64>]) {
    let mut i = 0;
    let mut put = |p: &mut super::layers::Param| {
        p.value.copy_from_slice(&snap[i]);
        i += 1;
    };
    model.net.visit_params(&mut put);
    model.net.visit_buffers(&mut put);
}

/// Pooled masked MSE of whole-volume predictions.
fn validation_loss(model: &mut UNetModel, pairs: &[TrainingPair]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for p in pairs {
        let pred = predict_standardized(model, &p.input)?;
        for ((a, b), &m) in pred.data().iter().zip(p.label.data()).zip(p.mask.bits()) {
            if m {
                sum += (a - b).powi(2);
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn zero_loss(pairs: &[TrainingPair]) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for p in pairs {
        for (v, &m) in p.label.data().iter().zip(p.mask.bits()) {
            if m {
                sum += v * v;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Trains a fresh model and returns the weights with the lowest validation loss.
pub fn train(
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
    ucfg: &UNetConfig,
    tcfg: &TrainConfig,
) -> Result<(UNetModel, TrainReport)> {
    tcfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Invalid("training needs at least one training and one validation pair".into()));
    }
    let mut model = build_unet(ucfg, tcfg.seed)?;
    let n = train_pairs.len() as f64;
    model.standardization = Standardization {
        mean: train_pairs.iter().map(|p| p.standardization.mean).sum::<f64>() / n,
        std: train_pairs.iter().map(|p| p.standardization.std).sum::<f64>() / n,
    };
    let schedule = tcfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    let mut adam = Adam::new();
    let p = ucfg.patch_size;

    let initial_val_loss = validation_loss(&mut model, val_pairs)?;
    let zero_val_loss = zero_loss(val_pairs);
    info!("initial validation loss {initial_val_loss:.6e}, zero predictor {zero_val_loss:.6e}");
    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        initial_val_loss,
        zero_val_loss,
        best_epoch: 0,
    };
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for epoch in 0..tcfg.epochs {
        let origins = sample_patches(train_pairs, tcfg.patches_per_epoch, p, tcfg.min_mask_fraction, &mut rng)?;
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in origins.chunks(tcfg.batch_size) {
            let (x, y, mask) = extract_batch(train_pairs, chunk, p);
            let pred = model.forward(&x, true, &mut rng)?;
            let (loss, grad) = loss_masked_mse(&pred, &y, &mask);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}, step {}", model.step)));
            }
            model.net.zero_grad();
            model.backward(&grad);
            let lr = schedule.lr(model.step);
            adam.step(&mut model.net, lr);
            model.step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val = validation_loss(&mut model, val_pairs)?;
        if !val.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        info!("epoch {epoch}: train {train_loss:.6e} validation {val:.6e} lr {:.3e}", schedule.lr(model.step));
        report.train_loss.push(train_loss);
        report.val_loss.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, snapshot(&mut model)));
            report.best_epoch = epoch;
        }
    }
    let (_, snap) = best.expect("at least one epoch");
    restore(&mut model, &snap);
    Ok((model, report))
}

/// Tile origins along one axis: stride `p / 2`, last tile flush with the end.
pub fn tile_starts(n: usize, p: usize) -> Vec<usize> {
    let stride = (p / 2).max(1);
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + p <= n).collect();
    if v.last().is_some_and(|&o| o + p < n) {
        v.push(n - p);
    }
    v
}

/// Raised-cosine blending window, strictly positive on the patch.
pub fn blend_window(p: usize) -> Vec<f64> {
    (0..p).map(|i| (PI * (i as f64 + 0.5) / p as f64).sin().powi(2)).collect()
}

/// Sum over tiles of each tile's normalized blending weight (1 everywhere by construction).
pub fn blend_coverage(dims: Dims, p: usize) -> Result<Vec<f64>> {
    let tiles = tile_grid(dims, p)?;
    let w = blend_window(p);
    let total = accumulate(dims, p, &tiles, &w, |_, _| 1.0);
    let mut out = vec![0.0; dims.len()];
    for t in &tiles {
        for_each_in_tile(dims, p, *t, |vi, [x, y, z]| out[vi] += w[x] * w[y] * w[z] / total[vi]);
    }
    Ok(out)
}

fn tile_grid(dims: Dims, p: usize) -> Result<Vec<[usize; 3]>> {
    let d = dims.as_array();
    if d.iter().any(|&n| n < p) {
        return Err(Error::Invalid(format!("volume {d:?} smaller than patch size {p}")));
    }
    let (xs, ys, zs) = (tile_starts(d[0], p), tile_starts(d[1], p), tile_starts(d[2], p));
    let mut v = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                v.push([x, y, z]);
            }
        }
    }
    Ok(v)
}

fn for_each_in_tile(dims: Dims, p: usize, o: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                f(dims.index(o[0] + x, o[1] + y, o[2] + z), [x, y, z]);
            }
        }
    }
}

fn accumulate(dims: Dims, p: usize, tiles: &[[usize; 3]], w: &[f64], value: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut acc = vec![0.0; dims.len()];
    for (ti, t) in tiles.iter().enumerate() {
        for_each_in_tile(dims, p, *t, |vi, [x, y, z]| {
            acc[vi] += w[x] * w[y] * w[z] * value(ti, (z * p + y) * p + x)
        });
    }
    acc
}

/// Prediction (ppm) from an already standardized full-FOV input.
pub fn predict_standardized(model: &mut UNetModel, input: &Volume3D) -> Result<Volume3D> {
    let p = model.config().patch_size;
    let dims = input.dims();
    let tiles = tile_grid(dims, p)?;
    let mut outputs = Vec::with_capacity(tiles.len());
    let mut buf = vec![0.0; p.pow(3)];
    for t in &tiles {
        copy_patch(input.data(), dims, *t, p, &mut buf);
        let x = Tensor::from_vec([1, 1, p, p, p], buf.clone())?;
        outputs.push(model.infer(&x)?.into_data());
    }
    if tiles.len() == 1 {
        let mut out = vec![0.0; dims.len()];
        for_each_in_tile(dims, p, tiles[0], |vi, [x, y, z]| out[vi] = outputs[0][(z * p + y) * p + x]);
        return input.with_data(Unit::Ppm, out);
    }
    let w = blend_window(p);
    let num = accumulate(dims, p, &tiles, &w, |ti, j| outputs[ti][j]);
    let den = accumulate(dims, p, &tiles, &w, |_, _| 1.0);
    input.with_data(Unit::Ppm, num.iter().zip(&den).map(|(a, b)| a / b).collect())
}

/// Full-FOV susceptibility prediction from the normalized total phase.
///
/// The input is standardized with its own whole-volume statistics, as in training.
pub fn predict_volume(model: &mut UNetModel, psi: &NormalizedPhase) -> Result<Volume3D> {
    let (input, _) = standardize_input(psi)?;
    predict_standardized(model, &input)
}
