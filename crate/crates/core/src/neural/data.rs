//! Training pairs, random patch sampling and synthetic subject generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::phantom::{forward_field, synthesize_echoes, EchoTrain, Phantom, PhantomSpec};
use crate::preprocess::{standardize_input, total_field_from_echoes, NormalizedPhase, Standardization};
use crate::volume::{Dims, Mask, Volume3D};

/// Standardized network input, susceptibility label (ppm) and loss mask.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub input: Volume3D,
    pub label: Volume3D,
    pub mask: Mask,
    pub standardization: Standardization,
    /// Summed-volume table of the mask, `(nx+1)(ny+1)(nz+1)` entries.
    mask_table: Vec<u32>,
}

impl TrainingPair {
    pub fn new(psi: &NormalizedPhase, label: Volume3D, mask: Mask) -> Result<Self> {
        label.check_same_dims(psi.psi.dims())?;
        label.check_same_dims(mask.dims())?;
        let (input, standardization) = standardize_input(psi)?;
        let mask_table = summed_table(&mask);
        Ok(TrainingPair { input, label, mask, standardization, mask_table })
    }

    pub fn dims(&self) -> Dims {
        self.input.dims()
    }

    /// Number of mask voxels inside the cube of edge `p` at `origin`.
    pub fn mask_count(&self, origin: [usize; 3], p: usize) -> u32 {
        let d = self.dims();
        let (sx, sy) = (d.0 + 1, d.1 + 1);
        let at = |x: usize, y: usize, z: usize| self.mask_table[x + sx * (y + sy * z)] as i64;
        let [x0, y0, z0] = origin;
        let [x1, y1, z1] = origin.map(|o| o + p);
        let v = at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) + at(x0, y1, z0)
            + at(x1, y0, z0)
            - at(x0, y0, z0);
        v as u32
    }
}

fn summed_table(mask: &Mask) -> Vec<u32> {
    let d = mask.dims();
    let (sx, sy, sz) = (d.0 + 1, d.1 + 1, d.2 + 1);
    let mut t = vec![0u32; sx * sy * sz];
    for z in 1..sz {
        for y in 1..sy {
            for x in 1..sx {
                let v = u32::from(mask.get(x - 1, y - 1, z - 1));
                let i = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
                t[i(x, y, z)] = v + t[i(x - 1, y, z)] + t[i(x, y - 1, z)] + t[i(x, y, z - 1)]
                    - t[i(x - 1, y - 1, z)]
                    - t[i(x - 1, y, z - 1)]
                    - t[i(x, y - 1, z - 1)]
                    + t[i(x - 1, y - 1, z - 1)];
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub pair: usize,
    /// Corner voxel `(x, y, z)`.
    pub origin: [usize; 3],
}

const MAX_ATTEMPTS: usize = 100_000;

/// Draws `n` patch origins uniformly over pairs and positions, rejecting patches
/// with less than `min_fraction` of their voxels inside the mask.
pub fn sample_patches(
    pairs: &[TrainingPair],
    n: usize,
    patch: usize,
    min_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchOrigin>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    for p in pairs {
        let d = p.dims();
        if d.0 < patch || d.1 < patch || d.2 < patch {
            return Err(Error::Invalid(format!("volume {:?} smaller than patch size {patch}", d.as_array())));
        }
    }
    let needed = (min_fraction * patch.pow(3) as f64).ceil() as u32;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let pair = rng.random_range(0..pairs.len());
            let d = pairs[pair].dims().as_array();
            let origin = [0, 1, 2].map(|a| rng.random_range(0..=d[a] - patch));
            if pairs[pair].mask_count(origin, patch) >= needed {
                found = Some(PatchOrigin { pair, origin });
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Invalid(format!("no patch with mask coverage >= {min_fraction} found in {MAX_ATTEMPTS} draws"))
        })?);
    }
    Ok(out)
}

/// Copies a cube of edge `p` at `origin` into `dst` in `[D, H, W]` order.
pub fn copy_patch(src: &[f64], dims: Dims, origin: [usize; 3], p: usize, dst: &mut [f64]) {
    let mut j = 0;
    for z in 0..p {
        for y in 0..p {
            let i = dims.index(origin[0], origin[1] + y, origin[2] + z);
            dst[j..j + p].copy_from_slice(&src[i..i + p]);
            j += p;
        }
    }
}

/// Input, label and mask tensors `[B, 1, p, p, p]` for a list of origins.
pub fn extract_batch(pairs: &[TrainingPair], origins: &[PatchOrigin], p: usize) -> (Tensor, Tensor, Vec<bool>) {
    let vol = p.pow(3);
    let shape = [origins.len(), 1, p, p, p];
    let mut input = vec![0.0; origins.len() * vol];
    let mut label = vec![0.0; origins.len() * vol];
    let mut mask = vec![0.0; origins.len() * vol];
    for (b, o) in origins.iter().enumerate() {
        let pair = &pairs[o.pair];
        let d = pair.dims();
        let r = b * vol..(b + 1) * vol;
        copy_patch(pair.input.data(), d, o.origin, p, &mut input[r.clone()]);
        copy_patch(pair.label.data(), d, o.origin, p, &mut label[r.clone()]);
        let m: Vec<f64> = pair.mask.bits().iter().map(|&b| f64::from(u8::from(b))).collect();
        copy_patch(&m, d, o.origin, p, &mut mask[r]);
    }
    (
        Tensor::from_vec(shape, input).expect("batch shape"),
        Tensor::from_vec(shape, label).expect("batch shape"),
        mask.into_iter().map(|v| v > 0.5).collect(),
    )
}

/// A simulated acquisition of a phantom.
#[derive(Debug, Clone)]
pub struct SimulatedSubject {
    pub phantom: Phantom,
    /// Noiseless total field (ppm).
    pub delta: Volume3D,
    /// Normalized total phase recovered from the simulated echoes.
    pub psi: NormalizedPhase,
}

impl SimulatedSubject {
    /// Network training pair: total phase in, ground-truth susceptibility out, brain-masked loss.
    pub fn training_pair(&self) -> Result<TrainingPair> {
        TrainingPair::new(&self.psi, self.phantom.chi.clone(), self.phantom.brain_mask.clone())
    }
}

/// Phantom, forward field, multi-echo signal over the head (optionally noisy), unwrap and normalize.
pub fn simulate_subject(spec: &PhantomSpec, train: &EchoTrain, snr: Option<f64>, seed: u64) -> Result<SimulatedSubject> {
    let phantom = spec.build()?;
    let delta = forward_field(&phantom.chi)?;
    let echoes = synthesize_echoes(&delta, &phantom.head_mask, train, snr, seed)?;
    let psi = total_field_from_echoes(&echoes, train)?;
    Ok(SimulatedSubject { phantom, delta, psi })
}
