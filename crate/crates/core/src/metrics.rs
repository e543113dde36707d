//! Reconstruction quality metrics evaluated inside a mask.
//!
//! HFEN uses a zero-sum Laplacian-of-Gaussian (sigma 1.5 voxels, 15^3 support).
//! SSIM uses a Gaussian window (sigma 1.5 voxels, 11^3 support) with K1 = 0.01,
//! K2 = 0.03 and dynamic range taken from the truth inside the mask. Filtering is
//! periodic, matching the spectral operators elsewhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::Fft3;
use crate::volume::{Dims, Mask, Volume3D};

pub const HFEN_SIGMA: f64 = 1.5;
pub const HFEN_SUPPORT: usize = 15;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_SUPPORT: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(recon: &Volume3D, truth: &Volume3D, mask: &Mask) -> Result<()> {
    recon.check_same_dims(truth.dims())?;
    recon.check_same_dims(mask.dims())
}

fn masked_norm(values: impl Iterator<Item = f64>, mask: &Mask) -> f64 {
    values.zip(mask.bits()).filter(|(_, &m)| m).map(|(v, _)| v * v).sum::<f64>().sqrt()
}

/// `100 * ||M (recon - truth)|| / ||M truth||`.
pub fn rmse(recon: &Volume3D, truth: &Volume3D, mask: &Mask) -> Result<f64> {
    check(recon, truth, mask)?;
    let denom = masked_norm(truth.data().iter().cloned(), mask);
    if denom == 0.0 {
        return Err(Error::ZeroNorm("truth inside mask"));
    }
    let num = masked_norm(recon.data().iter().zip(truth.data()).map(|(a, b)| a - b), mask);
    Ok(100.0 * num / denom)
}

/// Zero-sum 3D Laplacian-of-Gaussian of odd `support`, laid out x-fastest.
pub fn log_kernel(sigma: f64, support: usize) -> Vec<f64> {
    let h = (support / 2) as i64;
    let s2 = sigma * sigma;
    let mut g = Vec::with_capacity(support.pow(3));
    let mut r2s = Vec::with_capacity(support.pow(3));
    for z in -h..=h {
        for y in -h..=h {
            for x in -h..=h {
                let r2 = (x * x + y * y + z * z) as f64;
                g.push((-r2 / (2.0 * s2)).exp());
                r2s.push(r2);
            }
        }
    }
    let gsum: f64 = g.iter().sum();
    let mut k: Vec<f64> = g.iter().zip(&r2s).map(|(gi, r2)| gi / gsum * (r2 - 3.0 * s2) / (s2 * s2)).collect();
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    k
}

/// Embeds a centred cubic stencil into the grid (periodic) and returns its spectrum's real part.
fn stencil_spectrum(plan: &Fft3, stencil: &[f64], support: usize) -> Vec<f64> {
    let dims = plan.dims();
    let h = (support / 2) as i64;
    let mut grid = vec![0.0; dims.len()];
    let mut i = 0;
    for z in -h..=h {
        for y in -h..=h {
            for x in -h..=h {
                let w = |o: i64, n: usize| o.rem_euclid(n as i64) as usize;
                grid[dims.index(w(x, dims.0), w(y, dims.1), w(z, dims.2))] += stencil[i];
                i += 1;
            }
        }
    }
    plan.forward_real(&grid).into_iter().map(|c| c.re).collect()
}

/// `100 * ||M LoG(recon - truth)|| / ||M LoG(truth)||`.
pub fn hfen(recon: &Volume3D, truth: &Volume3D, mask: &Mask) -> Result<f64> {
    check(recon, truth, mask)?;
    let plan = Fft3::new(truth.dims());
    let k = stencil_spectrum(&plan, &log_kernel(HFEN_SIGMA, HFEN_SUPPORT), HFEN_SUPPORT);
    let diff: Vec<f64> = recon.data().iter().zip(truth.data()).map(|(a, b)| a - b).collect();
    let fd = plan.apply_real_kernel(&diff, &k);
    let ft = plan.apply_real_kernel(truth.data(), &k);
    let denom = masked_norm(ft.into_iter(), mask);
    if denom == 0.0 {
        return Err(Error::ZeroNorm("filtered truth inside mask"));
    }
    Ok(100.0 * masked_norm(fd.into_iter(), mask) / denom)
}

fn gaussian_taps(sigma: f64, support: usize) -> Vec<f64> {
    let h = (support / 2) as i64;
    let taps: Vec<f64> = (-h..=h).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable periodic filtering with a symmetric 1D stencil along each axis.
fn separable_filter(dims: Dims, data: &[f64], taps: &[f64]) -> Vec<f64> {
    let h = (taps.len() / 2) as i64;
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];
    let n = dims.as_array();
    let strides = [1, n[0], n[0] * n[1]];
    for axis in 0..3 {
        for i in 0..cur.len() {
            let c = [i % n[0], (i / n[0]) % n[1], i / (n[0] * n[1])];
            let pos = c[axis] as i64;
            let base = i - c[axis] * strides[axis];
            let mut acc = 0.0;
            for (t, &w) in taps.iter().enumerate() {
                let p = (pos + t as i64 - h).rem_euclid(n[axis] as i64) as usize;
                acc += w * cur[base + p * strides[axis]];
            }
            next[i] = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Mean local SSIM over mask voxels.
pub fn ssim(recon: &Volume3D, truth: &Volume3D, mask: &Mask) -> Result<f64> {
    check(recon, truth, mask)?;
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &m) in truth.data().iter().zip(mask.bits()) {
        if m {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::ZeroNorm("dynamic range of truth inside mask"));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let dims = truth.dims();
    let taps = gaussian_taps(SSIM_SIGMA, SSIM_SUPPORT);
    let x = recon.data();
    let y = truth.data();
    let f = |v: Vec<f64>| separable_filter(dims, &v, &taps);
    let mx = f(x.to_vec());
    let my = f(y.to_vec());
    let sxx = f(x.iter().map(|a| a * a).collect());
    let syy = f(y.iter().map(|a| a * a).collect());
    let sxy = f(x.iter().zip(y).map(|(a, b)| a * b).collect());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..dims.len() {
        if !mask.bits()[i] {
            continue;
        }
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        count += 1;
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiStat {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Population mean and SD of `vol` over each nonzero integer label.
pub fn roi_stats(vol: &Volume3D, labels: &Volume3D) -> Result<BTreeMap<u32, RoiStat>> {
    vol.check_same_dims(labels.dims())?;
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&v, &l) in vol.data().iter().zip(labels.data()) {
        let id = l.round();
        if (l - id).abs() > 1e-6 || id < 0.0 {
            return Err(Error::Invalid(format!("label value {l} is not a nonnegative integer")));
        }
        if id > 0.0 {
            groups.entry(id as u32).or_default().push(v);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(id, vals)| {
            // Mean taken relative to the first sample so constant regions come out exact.
            let anchor = vals[0];
            let n = vals.len() as f64;
            let mean = anchor + vals.iter().map(|v| v - anchor).sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            (id, RoiStat { mean, sd, count: vals.len() })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rmse_pct: f64,
    pub hfen_pct: f64,
    pub ssim: f64,
    pub rois: BTreeMap<u32, RoiStat>,
}

/// All metrics of `recon` against `truth` inside `mask`; ROI statistics restricted to the mask.
pub fn evaluate(method: &str, recon: &Volume3D, truth: &Volume3D, mask: &Mask, labels: Option<&Volume3D>) -> Result<MetricReport> {
    let rois = match labels {
        Some(l) => roi_stats(recon, &l.masked(mask)?)?,
        None => BTreeMap::new(),
    };
    Ok(MetricReport {
        method: method.to_string(),
        rmse_pct: rmse(recon, truth, mask)?,
        hfen_pct: hfen(recon, truth, mask)?,
        ssim: ssim(recon, truth, mask)?,
        rois,
    })
}
