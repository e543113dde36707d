//! Classical dipole inversion baselines.
//!
//! `invert_tkd` is thresholded k-space division. `invert_cg` is a masked
//! Tikhonov least-squares solver (gradient penalty) run as conjugate gradients
//! on the normal equations; it stands in for iLSQR in comparisons.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{dipole_kernel, Fft3, KGrid, KSpaceKernel};
use crate::volume::{Dims, Mask, Unit, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TkdConfig {
    pub threshold: f64,
    /// Zero sub-threshold bins instead of dividing by `sign(D) * threshold`.
    pub zero_below_threshold: bool,
}

impl Default for TkdConfig {
    fn default() -> Self {
        TkdConfig { threshold: 0.2, zero_below_threshold: false }
    }
}

impl TkdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 2.0 / 3.0) {
            return Err(Error::Invalid(format!("TKD threshold must lie in (0, 2/3), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// Reciprocal multiplier used by TKD for each dipole value.
pub fn tkd_multiplier(d: f64, cfg: &TkdConfig) -> f64 {
    if d == 0.0 {
        0.0
    } else if d.abs() >= cfg.threshold {
        1.0 / d
    } else if cfg.zero_below_threshold {
        0.0
    } else {
        1.0 / (d.signum() * cfg.threshold)
    }
}

pub fn invert_tkd(local: &Volume3D, cfg: &TkdConfig) -> Result<Volume3D> {
    cfg.validate()?;
    let d = dipole_kernel(&KGrid::for_volume(local), [0.0, 0.0, 1.0])?;
    let inv: Vec<f64> = d.values().iter().map(|&v| tkd_multiplier(v, cfg)).collect();
    let plan = Fft3::new(local.dims());
    local.with_data(Unit::Ppm, plan.apply_real_kernel(local.data(), &inv))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CgConfig {
    /// Weight of the squared-gradient penalty.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop when the normal-equation residual falls below `rtol` relative to its start.
    pub rtol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { lambda: 1e-2, max_iters: 100, rtol: 1e-6 }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || self.max_iters < 1 || !(self.rtol > 0.0) {
            return Err(Error::Invalid(format!("invalid CG config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgReport {
    pub chi: Volume3D,
    pub iterations: usize,
    pub converged: bool,
    /// Least-squares residual `||b - A x||` after each iteration, starting with the initial one.
    pub residuals: Vec<f64>,
}

/// The stacked operator `A = [M D; sqrt(lambda) grad]` and its adjoint.
struct TikhonovOperator<'a> {
    plan: Fft3,
    dipole: KSpaceKernel,
    mask: &'a Mask,
    dims: Dims,
    inv_voxel: [f64; 3],
    sqrt_lambda: f64,
}

impl TikhonovOperator<'_> {
    fn dipole(&self, x: &[f64]) -> Vec<f64> {
        self.plan.apply_real_kernel(x, self.dipole.values())
    }

    /// Forward differences with periodic wrap, one block per axis.
    fn grad(&self, x: &[f64]) -> [Vec<f64>; 3] {
        let Dims(nx, ny, nz) = self.dims;
        let mut g = [vec![0.0; x.len()], vec![0.0; x.len()], vec![0.0; x.len()]];
        for z in 0..nz {
            for y in 0..ny {
                for xi in 0..nx {
                    let i = self.dims.index(xi, y, z);
                    g[0][i] = (x[self.dims.index((xi + 1) % nx, y, z)] - x[i]) * self.inv_voxel[0];
                    g[1][i] = (x[self.dims.index(xi, (y + 1) % ny, z)] - x[i]) * self.inv_voxel[1];
                    g[2][i] = (x[self.dims.index(xi, y, (z + 1) % nz)] - x[i]) * self.inv_voxel[2];
                }
            }
        }
        g
    }

    /// Adjoint of [`Self::grad`] (negative backward divergence).
    fn grad_adjoint(&self, g: &[Vec<f64>; 3]) -> Vec<f64> {
        let Dims(nx, ny, nz) = self.dims;
        let mut out = vec![0.0; self.dims.len()];
        for z in 0..nz {
            for y in 0..ny {
                for xi in 0..nx {
                    let i = self.dims.index(xi, y, z);
                    let px = self.dims.index((xi + nx - 1) % nx, y, z);
                    let py = self.dims.index(xi, (y + ny - 1) % ny, z);
                    let pz = self.dims.index(xi, y, (z + nz - 1) % nz);
                    out[i] = (g[0][px] - g[0][i]) * self.inv_voxel[0]
                        + (g[1][py] - g[1][i]) * self.inv_voxel[1]
                        + (g[2][pz] - g[2][i]) * self.inv_voxel[2];
                }
            }
        }
        out
    }

    fn apply(&self, x: &[f64]) -> (Vec<f64>, Option<[Vec<f64>; 3]>) {
        let mut data = self.dipole(x);
        data.iter_mut().zip(self.mask.bits()).for_each(|(v, &m)| if !m { *v = 0.0 });
        let reg = (self.sqrt_lambda > 0.0).then(|| {
            let mut g = self.grad(x);
            g.iter_mut().for_each(|c| c.iter_mut().for_each(|v| *v *= self.sqrt_lambda));
            g
        });
        (data, reg)
    }

    fn adjoint(&self, data: &[f64], reg: Option<&[Vec<f64>; 3]>) -> Vec<f64> {
        let masked: Vec<f64> = data.iter().zip(self.mask.bits()).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let mut out = self.dipole(&masked);
        if let Some(g) = reg {
            let ga = self.grad_adjoint(g);
            out.iter_mut().zip(ga).for_each(|(o, v)| *o += self.sqrt_lambda * v);
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(data: &[f64], reg: Option<&[Vec<f64>; 3]>) -> f64 {
    dot(data, data) + reg.map_or(0.0, |g| g.iter().map(|c| dot(c, c)).sum())
}

/// Solves `min ||M (D chi - local)||^2 + lambda ||grad chi||^2`.
///
/// Runs CG on the normal equations in least-squares form, so the residual
/// `||b - A x||` is non-increasing. A residual above 10x its best value is reported
/// as divergence.
pub fn invert_cg(local: &Volume3D, mask: &Mask, cfg: &CgConfig) -> Result<CgReport> {
    cfg.validate()?;
    local.check_same_dims(mask.dims())?;
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let dims = local.dims();
    let op = TikhonovOperator {
        plan: Fft3::new(dims),
        dipole: dipole_kernel(&KGrid::for_volume(local), [0.0, 0.0, 1.0])?,
        mask,
        dims,
        inv_voxel: local.voxel_size().map(|d| 1.0 / d),
        sqrt_lambda: cfg.lambda.sqrt(),
    };

    let n = dims.len();
    let mut x = vec![0.0; n];
    // r = b - A x with x = 0; the regularization block of b is zero.
    let mut r_data: Vec<f64> = local.data().iter().zip(mask.bits()).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let mut r_reg: Option<[Vec<f64>; 3]> = (cfg.lambda > 0.0).then(|| [vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
    let mut s = op.adjoint(&r_data, r_reg.as_ref());
    let mut gamma = dot(&s, &s);
    let gamma0 = gamma;
    let mut residuals = vec![norm2(&r_data, r_reg.as_ref()).sqrt()];
    if gamma0 == 0.0 {
        return Ok(CgReport { chi: local.with_data(Unit::Ppm, x)?, iterations: 0, converged: true, residuals });
    }
    let mut p = s.clone();
    let mut best = residuals[0];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        iterations = it;
        let (q_data, q_reg) = op.apply(&p);
        let qq = norm2(&q_data, q_reg.as_ref());
        if !(qq > 0.0) || !qq.is_finite() {
            return Err(Error::Numerical(format!("degenerate search direction at iteration {it}")));
        }
        let alpha = gamma / qq;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r_data.iter_mut().zip(&q_data).for_each(|(ri, qi)| *ri -= alpha * qi);
        if let (Some(rr), Some(qr)) = (r_reg.as_mut(), q_reg.as_ref()) {
            for (rc, qc) in rr.iter_mut().zip(qr) {
                rc.iter_mut().zip(qc).for_each(|(ri, qi)| *ri -= alpha * qi);
            }
        }
        let res = norm2(&r_data, r_reg.as_ref()).sqrt();
        residuals.push(res);
        if !res.is_finite() || res > 10.0 * best {
            return Err(Error::Divergence { iteration: it, residual: res, best });
        }
        best = best.min(res);

        s = op.adjoint(&r_data, r_reg.as_ref());
        let gamma_new = dot(&s, &s);
        if (gamma_new / gamma0).sqrt() <= cfg.rtol {
            converged = true;
            break;
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    Ok(CgReport { chi: local.with_data(Unit::Ppm, x)?, iterations, converged, residuals })
}

/// Spectrum of `chi` projected onto bins where `|D| >= threshold`; everything else zeroed.
pub fn passband_spectrum(v: &Volume3D, threshold: f64) -> Result<Vec<Complex64>> {
    let d = dipole_kernel(&KGrid::for_volume(v), [0.0, 0.0, 1.0])?;
    let mut spec = Fft3::new(v.dims()).forward_real(v.data());
    for (c, &dv) in spec.iter_mut().zip(d.values()) {
        if dv.abs() < threshold {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    Ok(spec)
}

/// Largest passband spectral difference between `recon` and `truth`, relative to the truth spectrum norm.
pub fn passband_error(recon: &Volume3D, truth: &Volume3D, threshold: f64) -> Result<f64> {
    recon.check_same_dims(truth.dims())?;
    let a = passband_spectrum(recon, threshold)?;
    let b = passband_spectrum(truth, threshold)?;
    let scale = b.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::ZeroNorm("passband spectrum of truth"));
    }
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale)
}
