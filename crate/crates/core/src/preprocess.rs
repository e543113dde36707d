//! Laplacian phase unwrapping and multi-echo phase normalization.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{wrap, Echo, EchoTrain};
use crate::spectral::{laplacian_kernel, pseudo_inverse, Fft3, KGrid};
use crate::volume::{Unit, Volume3D};

/// Total field shift (ppm) combined from all echoes, with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPhase {
    pub psi: Volume3D,
    pub echo_count: usize,
    pub b0: f64,
    pub sum_te: f64,
}

impl NormalizedPhase {
    /// Wraps an existing field map (ppm) that did not come from `normalize_phase`.
    pub fn from_field(psi: Volume3D) -> Self {
        let psi = psi.map(Unit::Ppm, |v| v).expect("finite field");
        NormalizedPhase { psi, echo_count: 0, b0: 0.0, sum_te: 0.0 }
    }
}

/// Zero-mean, unit-variance affine map and its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn of(values: &[f64]) -> Result<Self> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::ZeroVariance);
        }
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Laplacian-based unwrapping:
/// `L+[cos(p) L[sin(p)] - sin(p) L[cos(p)]]`, followed by a constant shift that
/// makes the residual against the wrapped input closest to a multiple of 2 pi in median.
pub fn unwrap_laplacian(wrapped: &Volume3D) -> Result<Volume3D> {
    let dims = wrapped.dims();
    let plan = Fft3::new(dims);
    let lap = laplacian_kernel(&KGrid::for_volume(wrapped));
    let inv = pseudo_inverse(&lap);

    let sin: Vec<f64> = wrapped.data().iter().map(|p| p.sin()).collect();
    let cos: Vec<f64> = wrapped.data().iter().map(|p| p.cos()).collect();
    let lap_sin = plan.apply_real_kernel(&sin, lap.values());
    let lap_cos = plan.apply_real_kernel(&cos, lap.values());
    let source: Vec<f64> = (0..dims.len()).map(|i| cos[i] * lap_sin[i] - sin[i] * lap_cos[i]).collect();
    let mut omega = plan.apply_real_kernel(&source, inv.values());

    let shift = congruence_shift(&omega, wrapped.data());
    omega.iter_mut().for_each(|w| *w += shift);
    wrapped.with_data(Unit::Radians, omega)
}

/// Constant `c` such that `omega + c - wrapped` sits closest to 2 pi multiples in median.
fn congruence_shift(omega: &[f64], wrapped: &[f64]) -> f64 {
    let phasor: Complex64 = omega.iter().zip(wrapped).map(|(w, p)| Complex64::from_polar(1.0, w - p)).sum();
    let coarse = -phasor.arg();
    let mut residual: Vec<f64> = omega.iter().zip(wrapped).map(|(w, p)| wrap(w - p + coarse)).collect();
    residual.sort_by(|a, b| a.total_cmp(b));
    let n = residual.len();
    let median = if n % 2 == 1 { residual[n / 2] } else { 0.5 * (residual[n / 2 - 1] + residual[n / 2]) };
    let c = coarse - median;
    // Keep the shift in (-pi, pi]; any 2 pi multiple is equally congruent.
    if c > PI || c <= -PI {
        wrap(c)
    } else {
        c
    }
}

/// `psi = sum(omega_i) / (gamma * B0 * sum(TE_i))`, in ppm.
pub fn normalize_phase(unwrapped: &[Volume3D], train: &EchoTrain) -> Result<NormalizedPhase> {
    train.validate()?;
    if unwrapped.len() != train.tes.len() {
        return Err(Error::Invalid(format!(
            "{} unwrapped echoes for an echo train of {}",
            unwrapped.len(),
            train.tes.len()
        )));
    }
    let first = &unwrapped[0];
    let mut sum = vec![0.0; first.dims().len()];
    for w in unwrapped {
        w.check_same_dims(first.dims())?;
        sum.iter_mut().zip(w.data()).for_each(|(s, v)| *s += v);
    }
    let sum_te: f64 = train.tes.iter().sum();
    let scale = 1e6 / (train.gamma * train.b0 * sum_te);
    let psi = first.with_data(Unit::Ppm, sum.into_iter().map(|s| s * scale).collect())?;
    Ok(NormalizedPhase { psi, echo_count: unwrapped.len(), b0: train.b0, sum_te })
}

/// Unwraps every echo phase and combines them into the normalized total field.
pub fn total_field_from_echoes(echoes: &[Echo], train: &EchoTrain) -> Result<NormalizedPhase> {
    let unwrapped = echoes.iter().map(|e| unwrap_laplacian(&e.phase)).collect::<Result<Vec<_>>>()?;
    normalize_phase(&unwrapped, train)
}

/// Zero mean, unit standard deviation over the full field of view.
pub fn standardize_input(psi: &NormalizedPhase) -> Result<(Volume3D, Standardization)> {
    let st = Standardization::of(psi.psi.data())?;
    let v = psi.psi.map(Unit::Dimensionless, |x| st.apply(x))?;
    Ok((v, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{synthesize_echoes, GAMMA};
    use crate::spectral::convolve_k;
    use crate::volume::{erode_mask, Dims, Mask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_bump(n: usize, amp: f64, sigma: f64) -> Volume3D {
        let c = n as f64 / 2.0;
        Volume3D::from_fn(Dims(n, n, n), [1.0; 3], Unit::Radians, |x, y, z| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
            amp * (-r2 / (2.0 * sigma * sigma)).exp()
        })
        .unwrap()
    }

    #[test]
    fn constant_phase_is_preserved() {
        for c in [-3.0, -1.2, 0.0, 0.7, 3.1] {
            let v = Volume3D::filled(Dims(8, 8, 8), [1.0; 3], Unit::Radians, c);
            let u = unwrap_laplacian(&v).unwrap();
            assert!(u.data().iter().all(|&w| (w - c).abs() < 1e-9), "c = {c}");
        }
    }

    #[test]
    fn smooth_phase_without_wraps_is_harmonic_residual() {
        // Smooth under periodic extension, as the spectral operators assume.
        let n = 32;
        let w = 2.0 * PI / n as f64;
        let v = Volume3D::from_fn(Dims(n, n, n), [1.0; 3], Unit::Radians, |x, y, z| {
            1.5 * (w * x as f64).sin() * (w * y as f64).cos() + 1.2 * (2.0 * w * z as f64).sin()
        })
        .unwrap();
        let u = unwrap_laplacian(&v).unwrap();
        let diff = u.with_data(Unit::Radians, u.data().iter().zip(v.data()).map(|(a, b)| a - b).collect()).unwrap();
        let lap = convolve_k(&diff, &laplacian_kernel(&KGrid::for_volume(&diff))).unwrap();
        let interior = erode_mask(&Mask::full(diff.dims()), 4);
        let scale = v.max();
        for (l, &b) in lap.data().iter().zip(interior.bits()) {
            if b {
                assert!(l.abs() < 1e-6 * scale, "{l} vs {scale}");
            }
        }
    }

    #[test]
    fn wrapped_bump_unwraps() {
        let truth = gaussian_bump(64, 4.0 * PI, 8.0);
        let wrapped = truth.map(Unit::Radians, wrap).unwrap();
        let u = unwrap_laplacian(&wrapped).unwrap();
        let interior = erode_mask(&Mask::full(truth.dims()), 2);
        let diffs: Vec<f64> = u.data().iter().zip(truth.data()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let worst = diffs
            .iter()
            .zip(interior.bits())
            .filter(|(_, &b)| b)
            .map(|(d, _)| (d - mean).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "max interior error {worst}");
    }

    #[test]
    fn single_echo_normalization() {
        let train = EchoTrain::uniform(1, 20e-3, 1e-3, 3.0);
        let omega = GAMMA * 3.0 * 0.1e-6 * 20e-3;
        let v = Volume3D::filled(Dims(3, 3, 3), [1.0; 3], Unit::Radians, omega);
        let psi = normalize_phase(&[v], &train).unwrap();
        assert!(psi.psi.data().iter().all(|&p| (p - 0.1).abs() < 1e-12));
        assert_eq!(psi.psi.unit(), Unit::Ppm);
    }

    #[test]
    fn zero_phases_and_count_mismatch() {
        let train = EchoTrain::default();
        let zeros = vec![Volume3D::zeros(Dims(2, 2, 2), [1.0; 3], Unit::Radians); 8];
        assert!(normalize_phase(&zeros, &train).unwrap().psi.data().iter().all(|&p| p == 0.0));
        assert!(normalize_phase(&zeros[..3], &train).is_err());
    }

    #[test]
    fn normalization_is_linear() {
        let train = EchoTrain::uniform(2, 5e-3, 3e-3, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rand_vol = || {
            Volume3D::new(Dims(3, 3, 3), [1.0; 3], Unit::Radians, (0..27).map(|_| rng.random_range(-9.0..9.0)).collect())
                .unwrap()
        };
        let (a, b, c, d) = (rand_vol(), rand_vol(), rand_vol(), rand_vol());
        let combo = |x: &Volume3D, y: &Volume3D| {
            x.with_data(Unit::Radians, x.data().iter().zip(y.data()).map(|(p, q)| 2.0 * p - 0.5 * q).collect()).unwrap()
        };
        let lhs = normalize_phase(&[combo(&a, &c), combo(&b, &d)], &train).unwrap();
        let p1 = normalize_phase(&[a, b], &train).unwrap();
        let p2 = normalize_phase(&[c, d], &train).unwrap();
        for i in 0..27 {
            let rhs = 2.0 * p1.psi.data()[i] - 0.5 * p2.psi.data()[i];
            assert!((lhs.psi.data()[i] - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn eight_echo_train_recovers_smooth_field() {
        // Smooth periodic field of about 1 ppm: the later echoes wrap several times.
        let n = 48;
        let dims = Dims(n, n, n);
        let w = 2.0 * PI / n as f64;
        let delta = Volume3D::from_fn(dims, [1.0; 3], Unit::Ppm, |x, y, z| {
            0.6 * (w * x as f64).sin() + 0.4 * (w * y as f64 + 0.3).cos() * (w * z as f64).cos()
        })
        .unwrap();
        let train = EchoTrain::default();
        let support = Mask::full(dims);
        let echoes = synthesize_echoes(&delta, &support, &train, None, 0).unwrap();
        assert!(echoes.last().unwrap().phase.data().iter().zip(delta.data()).any(|(p, d)| (p - d * train.radians_per_ppm(7)).abs() > 1.0));
        let unwrapped: Vec<Volume3D> = echoes.iter().map(|e| unwrap_laplacian(&e.phase).unwrap()).collect();
        let psi = normalize_phase(&unwrapped, &train).unwrap();
        let worst = psi.psi.data().iter().zip(delta.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn standardization_definition_and_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..512).map(|_| rng.random_range(-2.0..3.0)).collect();
        let psi = NormalizedPhase::from_field(Volume3D::new(Dims(8, 8, 8), [1.0; 3], Unit::Ppm, data).unwrap());
        let (s, _) = standardize_input(&psi).unwrap();
        let n = s.data().len() as f64;
        let mean = s.data().iter().sum::<f64>() / n;
        let sd = (s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);

        let shifted = NormalizedPhase::from_field(psi.psi.map(Unit::Ppm, |v| 3.5 * v - 1.25).unwrap());
        let (s2, _) = standardize_input(&shifted).unwrap();
        assert!(s.data().iter().zip(s2.data()).all(|(a, b)| (a - b).abs() < 1e-12));

        let flat = NormalizedPhase::from_field(Volume3D::filled(Dims(2, 2, 2), [1.0; 3], Unit::Ppm, 4.0));
        assert!(matches!(standardize_input(&flat), Err(Error::ZeroVariance)));
    }
}
