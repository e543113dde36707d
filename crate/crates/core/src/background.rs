//! Variable-radius spherical-mean-value background field removal.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::NormalizedPhase;
use crate::spectral::{Fft3, KGrid, KSpaceKernel};
use crate::volume::{distance_to_boundary, Dims, Mask, Unit, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmvConfig {
    /// Smallest kernel radius in voxels, used at the mask boundary.
    pub r_min: usize,
    /// Largest kernel radius in voxels, used deep inside the mask.
    pub r_max: usize,
    /// Deconvolution modes with `|1 - S| < truncation` are zeroed.
    pub truncation: f64,
}

impl Default for SmvConfig {
    fn default() -> Self {
        SmvConfig { r_min: 1, r_max: 25, truncation: 0.05 }
    }
}

impl SmvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_min < 1 || self.r_min > self.r_max || !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(Error::Invalid(format!("invalid SMV config {self:?}")));
        }
        Ok(())
    }
}

/// Spectrum of a normalized digital ball of radius `r` (in units of the smallest voxel edge).
pub fn smv_kernel(r: f64, grid: &KGrid) -> Result<KSpaceKernel> {
    let dims = grid.dims();
    if !(r > 0.0) || 2.0 * r > dims.min_axis() as f64 {
        return Err(Error::Invalid(format!("SMV radius {r} must be positive and at most half of {:?}", dims)));
    }
    let vs = grid.voxel_size();
    let unit = vs.iter().cloned().fold(f64::INFINITY, f64::min);
    let reach = |a: usize| (r * unit / vs[a]).floor() as i64;
    let mut ball = vec![0.0; dims.len()];
    let mut count = 0usize;
    for dz in -reach(2)..=reach(2) {
        for dy in -reach(1)..=reach(1) {
            for dx in -reach(0)..=reach(0) {
                let d2 = (dx as f64 * vs[0]).powi(2) + (dy as f64 * vs[1]).powi(2) + (dz as f64 * vs[2]).powi(2);
                if d2 <= (r * unit).powi(2) {
                    let w = |o: i64, n: usize| o.rem_euclid(n as i64) as usize;
                    ball[dims.index(w(dx, dims.0), w(dy, dims.1), w(dz, dims.2))] += 1.0;
                    count += 1;
                }
            }
        }
    }
    ball.iter_mut().for_each(|b| *b /= count as f64);
    let spec = Fft3::new(dims).forward_real(&ball);
    KSpaceKernel::new(dims, spec.into_iter().map(|c| c.re).collect())
}

#[derive(Debug, Clone)]
pub struct LocalField {
    pub local: Volume3D,
    pub reliable_mask: Mask,
    /// Radius used for the deconvolution kernel.
    pub deconvolution_radius: usize,
}

/// Largest integer radius whose ball around each voxel stays inside the mask.
pub fn admissible_radius(mask: &Mask, r_max: usize) -> Result<Vec<usize>> {
    let d = distance_to_boundary(mask)?;
    Ok(d.data()
        .iter()
        .map(|&dist| if dist <= 0.0 { 0 } else { ((dist.ceil() as usize).saturating_sub(1)).min(r_max) })
        .collect())
}

/// Removes harmonic background fields inside `mask`.
///
/// Each voxel is high-passed with the largest admissible ball radius in
/// `[r_min, r_max]`; the result is deconvolved by `1 - S` of the largest radius used,
/// with truncated modes zeroed, and restricted to the reliable mask.
pub fn vsharp_remove(psi: &NormalizedPhase, mask: &Mask, cfg: &SmvConfig) -> Result<LocalField> {
    cfg.validate()?;
    let field = &psi.psi;
    field.check_same_dims(mask.dims())?;
    let dims: Dims = field.dims();
    let radius = admissible_radius(mask, cfg.r_max)?;
    let reliable: Vec<bool> = radius.iter().map(|&r| r >= cfg.r_min).collect();
    let r_top = radius.iter().cloned().filter(|&r| r >= cfg.r_min).max().ok_or_else(|| {
        Error::Invalid(format!("mask too thin: no voxel admits an SMV radius of {}", cfg.r_min))
    })?;

    let grid = KGrid::for_volume(field);
    let plan = Fft3::new(dims);
    let spectrum = plan.forward_real(field.data());
    let mut high = vec![0.0; dims.len()];
    let mut top_kernel = None;
    for r in cfg.r_min..=r_top {
        if !radius.iter().any(|&v| v == r) {
            continue;
        }
        let s = smv_kernel(r as f64, &grid)?;
        let mut buf: Vec<Complex64> = spectrum.iter().zip(s.values()).map(|(c, k)| c * k).collect();
        plan.inverse(&mut buf);
        for i in 0..dims.len() {
            if radius[i] == r {
                high[i] = field.data()[i] - buf[i].re;
            }
        }
        if r == r_top {
            top_kernel = Some(s);
        }
    }
    let s_top = top_kernel.expect("top radius is always used");

    let mut buf = plan.forward_real(&high);
    for (c, &s) in buf.iter_mut().zip(s_top.values()) {
        let denom = 1.0 - s;
        *c = if denom.abs() < cfg.truncation { Complex64::new(0.0, 0.0) } else { *c / denom };
    }
    plan.inverse(&mut buf);
    let local: Vec<f64> = buf.iter().zip(&reliable).map(|(c, &keep)| if keep { c.re } else { 0.0 }).collect();
    Ok(LocalField {
        local: field.with_data(Unit::Ppm, local)?,
        reliable_mask: Mask::new(dims, reliable)?,
        deconvolution_radius: r_top,
    })
}
