//! Python bindings. Volumes cross the boundary as flat x-fastest sequences of
//! floats plus a `(nx, ny, nz)` dims tuple; masks are any sequence whose nonzero
//! entries mark voxels inside.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use qsm_core::background::{vsharp_remove, SmvConfig};
use qsm_core::inversion::{invert_cg, invert_tkd, passband_error as tkd_passband_error, CgConfig, TkdConfig};
use qsm_core::io::{load_raw, save_raw};
use qsm_core::metrics::evaluate;
use qsm_core::neural::{load_checkpoint, predict_volume};
use qsm_core::phantom::{forward_field as dipole_field, PhantomSpec};
use qsm_core::preprocess::NormalizedPhase;
use qsm_core::{Dims, Error, Mask, Unit, Volume3D};

type Shape = (usize, usize, usize);
type Spacing = (f64, f64, f64);

pub fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::DimensionOverflow(_)
        | Error::Truncated { .. }
        | Error::UnsupportedDatatype(_)
        | Error::NotThreeD(_) => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } | Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn volume(data: Vec<f64>, dims: Shape, voxel_size: Spacing, unit: Unit) -> PyResult<Volume3D> {
    Volume3D::new(Dims(dims.0, dims.1, dims.2), [voxel_size.0, voxel_size.1, voxel_size.2], unit, data).map_err(to_py)
}

fn mask(data: Vec<f64>, dims: Shape) -> PyResult<Mask> {
    Mask::new(Dims(dims.0, dims.1, dims.2), data.iter().map(|&v| v != 0.0).collect()).map_err(to_py)
}

fn bits(m: &Mask) -> Vec<bool> {
    m.bits().to_vec()
}

/// Builds the reference phantom, or a randomized one when `seed` is given.
#[pyfunction]
#[pyo3(signature = (size=64, voxel=1.0, seed=None))]
pub fn phantom(py: Python<'_>, size: usize, voxel: f64, seed: Option<u64>) -> PyResult<Bound<'_, PyDict>> {
    let spec = match seed {
        Some(s) => PhantomSpec::randomized([size; 3], [voxel; 3], s),
        None => PhantomSpec::reference([size; 3], [voxel; 3]),
    };
    let ph = spec.build().map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("dims", (size, size, size))?;
    d.set_item("chi", ph.chi.data().to_vec())?;
    d.set_item("brain_mask", bits(&ph.brain_mask))?;
    d.set_item("head_mask", bits(&ph.head_mask))?;
    d.set_item("labels", ph.labels.data().to_vec())?;
    Ok(d)
}

/// Field shift (ppm) of a susceptibility map (ppm), B0 along z.
#[pyfunction]
#[pyo3(signature = (chi, dims, voxel_size=(1.0, 1.0, 1.0)))]
pub fn forward_field(chi: Vec<f64>, dims: Shape, voxel_size: Spacing) -> PyResult<Vec<f64>> {
    Ok(dipole_field(&volume(chi, dims, voxel_size, Unit::Ppm)?).map_err(to_py)?.into_data())
}

#[pyfunction]
#[pyo3(signature = (local, dims, voxel_size=(1.0, 1.0, 1.0), threshold=0.2))]
pub fn tkd(local: Vec<f64>, dims: Shape, voxel_size: Spacing, threshold: f64) -> PyResult<Vec<f64>> {
    let cfg = TkdConfig { threshold, ..Default::default() };
    Ok(invert_tkd(&volume(local, dims, voxel_size, Unit::Ppm)?, &cfg).map_err(to_py)?.into_data())
}

/// Largest relative spectral error of `recon` against `truth` on bins with |D| >= threshold.
#[pyfunction]
#[pyo3(signature = (recon, truth, dims, voxel_size=(1.0, 1.0, 1.0), threshold=0.2))]
pub fn passband_error(recon: Vec<f64>, truth: Vec<f64>, dims: Shape, voxel_size: Spacing, threshold: f64) -> PyResult<f64> {
    let (r, t) = (volume(recon, dims, voxel_size, Unit::Ppm)?, volume(truth, dims, voxel_size, Unit::Ppm)?);
    tkd_passband_error(&r, &t, threshold).map_err(to_py)
}

/// V-SHARP background removal; returns `(local_field, reliable_mask)`.
#[pyfunction]
#[pyo3(signature = (psi, brain_mask, dims, voxel_size=(1.0, 1.0, 1.0), r_min=1, r_max=25, truncation=0.05))]
pub fn vsharp(
    psi: Vec<f64>,
    brain_mask: Vec<f64>,
    dims: Shape,
    voxel_size: Spacing,
    r_min: usize,
    r_max: usize,
    truncation: f64,
) -> PyResult<(Vec<f64>, Vec<bool>)> {
    let psi = NormalizedPhase::from_field(volume(psi, dims, voxel_size, Unit::Ppm)?);
    let cfg = SmvConfig { r_min, r_max, truncation };
    let out = vsharp_remove(&psi, &mask(brain_mask, dims)?, &cfg).map_err(to_py)?;
    Ok((out.local.into_data(), bits(&out.reliable_mask)))
}

/// Regularized least-squares inversion; returns `(chi, iterations, converged)`.
#[pyfunction]
#[pyo3(signature = (local, brain_mask, dims, voxel_size=(1.0, 1.0, 1.0), lam=1e-2, max_iters=100, rtol=1e-6))]
pub fn cg(
    local: Vec<f64>,
    brain_mask: Vec<f64>,
    dims: Shape,
    voxel_size: Spacing,
    lam: f64,
    max_iters: usize,
    rtol: f64,
) -> PyResult<(Vec<f64>, usize, bool)> {
    let cfg = CgConfig { lambda: lam, max_iters, rtol };
    let rep = invert_cg(&volume(local, dims, voxel_size, Unit::Ppm)?, &mask(brain_mask, dims)?, &cfg).map_err(to_py)?;
    Ok((rep.chi.into_data(), rep.iterations, rep.converged))
}

/// `(rmse_pct, hfen_pct, ssim)` of `recon` against `truth` inside the mask.
#[pyfunction]
#[pyo3(signature = (recon, truth, mask_values, dims, voxel_size=(1.0, 1.0, 1.0)))]
pub fn metrics(recon: Vec<f64>, truth: Vec<f64>, mask_values: Vec<f64>, dims: Shape, voxel_size: Spacing) -> PyResult<(f64, f64, f64)> {
    let (r, t) = (volume(recon, dims, voxel_size, Unit::Ppm)?, volume(truth, dims, voxel_size, Unit::Ppm)?);
    let rep = evaluate("recon", &r, &t, &mask(mask_values, dims)?, None).map_err(to_py)?;
    Ok((rep.rmse_pct, rep.hfen_pct, rep.ssim))
}

/// Runs a saved network on a total field map (ppm).
#[pyfunction]
#[pyo3(signature = (model_path, psi, dims, voxel_size=(1.0, 1.0, 1.0)))]
pub fn predict(model_path: &str, psi: Vec<f64>, dims: Shape, voxel_size: Spacing) -> PyResult<Vec<f64>> {
    let mut model = load_checkpoint(model_path).map_err(to_py)?;
    let psi = NormalizedPhase::from_field(volume(psi, dims, voxel_size, Unit::Ppm)?);
    Ok(predict_volume(&mut model, &psi).map_err(to_py)?.into_data())
}

/// Reads a raw volume file; returns `(data, dims, voxel_size)`.
#[pyfunction]
pub fn read_volume(path: &str) -> PyResult<(Vec<f64>, Shape, Spacing)> {
    let v = load_raw(path).map_err(to_py)?;
    let (d, s) = (v.dims(), v.voxel_size());
    Ok((v.into_data(), (d.0, d.1, d.2), (s[0], s[1], s[2])))
}

#[pyfunction]
#[pyo3(signature = (path, data, dims, voxel_size=(1.0, 1.0, 1.0)))]
pub fn write_volume(path: &str, data: Vec<f64>, dims: Shape, voxel_size: Spacing) -> PyResult<()> {
    save_raw(&volume(data, dims, voxel_size, Unit::Ppm)?, path).map_err(to_py)
}

/// Runs the command-line tool in-process; returns `(exit_code, stdout, stderr)`.
#[pyfunction]
pub fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("qsmkit".to_string()).chain(args);
    let code = qsm_core::cli::run(argv, &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

#[pymodule]
fn qsmkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(forward_field, m)?)?;
    m.add_function(wrap_pyfunction!(tkd, m)?)?;
    m.add_function(wrap_pyfunction!(passband_error, m)?)?;
    m.add_function(wrap_pyfunction!(vsharp, m)?)?;
    m.add_function(wrap_pyfunction!(cg, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
