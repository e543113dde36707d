//! FFT-domain machinery: 3D transforms, frequency grids and real even kernels.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::volume::{Dims, Unit, Volume3D};

/// Planned forward and inverse 3D transforms for one grid shape.
///
/// The forward transform is unnormalized; the inverse carries the `1/N` factor.
pub struct Fft3 {
    dims: Dims,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let n = dims.as_array();
        Fft3 {
            dims,
            forward: n.map(|k| planner.plan_fft_forward(k)),
            inverse: n.map(|k| planner.plan_fft_inverse(k)),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / self.dims.len() as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }

    fn run(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>; 3]) {
        assert_eq!(data.len(), self.dims.len(), "buffer does not match planned dims");
        let Dims(nx, ny, nz) = self.dims;
        plans[0].process(data);

        let mut scratch = vec![Complex64::new(0.0, 0.0); data.len()];
        // y lines: gather so every (x, z) line is contiguous.
        for z in 0..nz {
            for x in 0..nx {
                let line = (z * nx + x) * ny;
                for y in 0..ny {
                    scratch[line + y] = data[x + nx * (y + ny * z)];
                }
            }
        }
        plans[1].process(&mut scratch);
        for z in 0..nz {
            for x in 0..nx {
                let line = (z * nx + x) * ny;
                for y in 0..ny {
                    data[x + nx * (y + ny * z)] = scratch[line + y];
                }
            }
        }
        // z lines.
        let plane = nx * ny;
        for p in 0..plane {
            for z in 0..nz {
                scratch[p * nz + z] = data[p + plane * z];
            }
        }
        plans[2].process(&mut scratch);
        for p in 0..plane {
            for z in 0..nz {
                data[p + plane * z] = scratch[p * nz + z];
            }
        }
    }

    /// Forward transform of a real volume.
    pub fn forward_real(&self, v: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// `real(ifft(K . fft(v)))` for a real multiplier `K`.
    pub fn apply_real_kernel(&self, v: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut buf = self.forward_real(v);
        for (c, &k) in buf.iter_mut().zip(kernel) {
            *c *= k;
        }
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

pub fn fft3(dims: Dims, data: &[Complex64]) -> Vec<Complex64> {
    let mut buf = data.to_vec();
    Fft3::new(dims).forward(&mut buf);
    buf
}

pub fn ifft3(dims: Dims, data: &[Complex64]) -> Vec<Complex64> {
    let mut buf = data.to_vec();
    Fft3::new(dims).inverse(&mut buf);
    buf
}

/// Signed DFT index for position `i` of an `n`-point transform.
/// The Nyquist bin of an even `n` maps to `-n/2`.
pub fn signed_index(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Frequency coordinates (cycles/mm) of a grid in standard DFT order.
#[derive(Debug, Clone, PartialEq)]
pub struct KGrid {
    dims: Dims,
    voxel_size: [f64; 3],
    kx: Vec<f64>,
    ky: Vec<f64>,
    kz: Vec<f64>,
}

impl KGrid {
    pub fn new(dims: Dims, voxel_size: [f64; 3]) -> Self {
        let axis = |n: usize, d: f64| (0..n).map(|i| signed_index(i, n) as f64 / (n as f64 * d)).collect();
        KGrid {
            dims,
            voxel_size,
            kx: axis(dims.0, voxel_size[0]),
            ky: axis(dims.1, voxel_size[1]),
            kz: axis(dims.2, voxel_size[2]),
        }
    }

    pub fn for_volume(v: &Volume3D) -> Self {
        KGrid::new(v.dims(), v.voxel_size())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn axis(&self, a: usize) -> &[f64] {
        match a {
            0 => &self.kx,
            1 => &self.ky,
            _ => &self.kz,
        }
    }

    /// Evaluates `f(kx, ky, kz)` over the grid in storage order.
    pub fn map(&self, f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.len());
        for &kz in &self.kz {
            for &ky in &self.ky {
                for &kx in &self.kx {
                    out.push(f(kx, ky, kz));
                }
            }
        }
        out
    }
}

/// A real multiplier on the DFT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceKernel {
    dims: Dims,
    values: Vec<f64>,
}

impl KSpaceKernel {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::Invalid(format!("kernel length {} does not match {:?}", values.len(), dims)));
        }
        Ok(KSpaceKernel { dims, values })
    }

    pub fn constant(dims: Dims, c: f64) -> Self {
        KSpaceKernel { dims, values: vec![c; dims.len()] }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Whether `K(k) == K(-k)` on the DFT grid.
    pub fn is_even(&self, tol: f64) -> bool {
        let Dims(nx, ny, nz) = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let a = self.values[self.dims.index(x, y, z)];
                    let b = self.values[self.dims.index((nx - x) % nx, (ny - y) % ny, (nz - z) % nz)];
                    if (a - b).abs() > tol {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// `D(k) = 1/3 - (k.b)^2 / |k|^2` with `D(0) = 0`.
pub fn dipole_kernel(grid: &KGrid, b0_axis: [f64; 3]) -> Result<KSpaceKernel> {
    let norm = b0_axis.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Invalid("B0 axis must be a nonzero finite vector".into()));
    }
    let b = b0_axis.map(|c| c / norm);
    let values = grid.map(|kx, ky, kz| {
        let k2 = kx * kx + ky * ky + kz * kz;
        if k2 == 0.0 {
            0.0
        } else {
            let kb = kx * b[0] + ky * b[1] + kz * b[2];
            1.0 / 3.0 - kb * kb / k2
        }
    });
    KSpaceKernel::new(grid.dims(), values)
}

/// Continuous-Fourier Laplacian `-4 pi^2 |k|^2`.
pub fn laplacian_kernel(grid: &KGrid) -> KSpaceKernel {
    let values = grid.map(|kx, ky, kz| -4.0 * PI * PI * (kx * kx + ky * ky + kz * kz));
    KSpaceKernel { dims: grid.dims(), values }
}

/// Pseudo-inverse of a kernel: reciprocal where nonzero, zero elsewhere.
pub fn pseudo_inverse(k: &KSpaceKernel) -> KSpaceKernel {
    KSpaceKernel {
        dims: k.dims,
        values: k.values.iter().map(|&v| if v == 0.0 { 0.0 } else { 1.0 / v }).collect(),
    }
}

/// `real(ifft3(K . fft3(v)))`.
pub fn convolve_k(v: &Volume3D, k: &KSpaceKernel) -> Result<Volume3D> {
    v.check_same_dims(k.dims())?;
    let out = Fft3::new(v.dims()).apply_real_kernel(v.data(), k.values());
    v.with_data(v.unit(), out)
}

/// Same as [`convolve_k`] but with a caller-provided plan and an explicit output unit.
pub fn convolve_with(plan: &Fft3, v: &Volume3D, k: &KSpaceKernel, unit: Unit) -> Result<Volume3D> {
    v.check_same_dims(k.dims())?;
    v.check_same_dims(plan.dims())?;
    v.with_data(unit, plan.apply_real_kernel(v.data(), k.values()))
}
