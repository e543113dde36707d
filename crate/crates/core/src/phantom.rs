//! Synthetic head phantoms and the forward signal model.
//!
//! Geometry is procedural (ellipsoids, spheres, boxes); only the susceptibility
//! values of the default phantom carry physical meaning. World coordinates are
//! millimetres with the origin at voxel `n / 2` (integer division) on each axis,
//! so a centred sphere is centred on a voxel for any grid size.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{dipole_kernel, Fft3, KGrid};
use crate::volume::{Dims, Mask, Unit, Volume3D};

/// Susceptibility values (ppm) of the reference brain phantom.
pub mod values {
    pub const HIPPOCAMPUS: f64 = 0.05;
    pub const HYPOTHALAMUS: f64 = 0.05;
    pub const MEDULLA_OBLONGATA: f64 = 0.05;
    pub const WHITE_MATTER: f64 = -0.03;
    pub const CEREBELLUM: f64 = -0.0065;
    pub const PONS: f64 = -0.0065;
    pub const THALAMUS: f64 = -0.0065;
    pub const MIDBRAIN: f64 = -0.0065;
    pub const CSF: f64 = 0.0;
    pub const SKULL: f64 = -2.1;
    pub const FAT: f64 = 0.6;
    pub const AIR: f64 = 9.2;
}

/// Proton gyromagnetic ratio in rad/s/T.
pub const GAMMA: f64 = 2.675e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Ellipsoid,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub shape: Shape,
    /// Centre in mm.
    pub center: [f64; 3],
    /// Semi-axes (ellipsoid, box half-widths) in mm; spheres use the first entry as radius.
    pub semi_axes: [f64; 3],
    pub susceptibility: f64,
    pub label: u32,
    /// When set, only the outer shell of this thickness (mm) is filled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shell_thickness: Option<f64>,
}

impl Structure {
    pub fn ellipsoid(name: &str, center: [f64; 3], semi_axes: [f64; 3], chi: f64, label: u32) -> Self {
        Structure {
            name: name.into(),
            shape: Shape::Ellipsoid,
            center,
            semi_axes,
            susceptibility: chi,
            label,
            shell_thickness: None,
        }
    }

    pub fn sphere(name: &str, center: [f64; 3], radius: f64, chi: f64, label: u32) -> Self {
        Structure { shape: Shape::Sphere, ..Structure::ellipsoid(name, center, [radius; 3], chi, label) }
    }

    pub fn shell(mut self, thickness: f64) -> Self {
        self.shell_thickness = Some(thickness);
        self
    }

    fn axes(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere => [self.semi_axes[0]; 3],
            _ => self.semi_axes,
        }
    }

    fn solid_contains(&self, p: [f64; 3], axes: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.shape {
            Shape::Box => (0..3).all(|i| d[i].abs() <= axes[i]),
            _ => (0..3).map(|i| (d[i] / axes[i]).powi(2)).sum::<f64>() <= 1.0,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let axes = self.axes();
        if !self.solid_contains(p, axes) {
            return false;
        }
        match self.shell_thickness {
            Some(t) => {
                let inner = axes.map(|a| a - t);
                inner.iter().any(|&a| a <= 0.0) || !self.solid_contains(p, inner)
            }
            None => true,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.axes().iter().all(|a| a.is_finite() && *a > 0.0)
            && self.center.iter().all(|c| c.is_finite())
            && self.susceptibility.is_finite()
            && self.shell_thickness.is_none_or(|t| t.is_finite() && t > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("structure '{}' has non-finite or non-positive geometry", self.name)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm
    pub voxel_size: [f64; 3],
    /// Region inside which the default value is CSF (0 ppm); outside it is air.
    pub head: Structure,
    #[serde(default = "default_outside")]
    pub outside_susceptibility: f64,
    pub structures: Vec<Structure>,
    #[serde(default)]
    pub background_structures: Vec<Structure>,
    #[serde(default)]
    pub seed: u64,
}

fn default_outside() -> f64 {
    values::AIR
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub chi: Volume3D,
    pub brain_mask: Mask,
    /// Voxels inside the head outline, used as signal support.
    pub head_mask: Mask,
    pub labels: Volume3D,
}

impl PhantomSpec {
    pub fn grid_dims(&self) -> Dims {
        Dims::from(self.dims)
    }

    pub fn world(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let c = |i: usize, a: usize| (i as f64 - (self.dims[a] / 2) as f64) * self.voxel_size[a];
        [c(x, 0), c(y, 1), c(z, 2)]
    }

    fn check_fits(&self, s: &Structure) -> Result<()> {
        s.validate()?;
        let axes = s.axes();
        for a in 0..3 {
            let half = self.dims[a] as f64 * self.voxel_size[a] / 2.0;
            if s.center[a] - axes[a] < -half - 1e-9 || s.center[a] + axes[a] > half + 1e-9 {
                return Err(Error::OutOfBounds(s.name.clone()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) || self.voxel_size.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Invalid("phantom grid must have positive dims and voxel sizes".into()));
        }
        self.check_fits(&self.head)?;
        let mut labels: Vec<u32> = Vec::new();
        for s in self.structures.iter().chain(&self.background_structures) {
            self.check_fits(s)?;
            if s.label == 0 || labels.contains(&s.label) {
                return Err(Error::Invalid(format!("label {} of '{}' is zero or not unique", s.label, s.name)));
            }
            labels.push(s.label);
        }
        Ok(())
    }

    /// The reference phantom with the published susceptibility values, scaled to the field of view.
    pub fn reference(dims: [usize; 3], voxel_size: [f64; 3]) -> Self {
        let fov = (0..3).map(|a| dims[a] as f64 * voxel_size[a]).fold(f64::INFINITY, f64::min);
        let s = fov / 192.0;
        let v = |p: [f64; 3]| p.map(|c| c * s);
        use values::*;
        let structures = vec![
            Structure::ellipsoid("white matter", [0.0; 3], v([72.0, 78.0, 70.0]), WHITE_MATTER, 1),
            Structure::ellipsoid("cerebellum", v([0.0, -45.0, -40.0]), v([30.0, 18.0, 16.0]), CEREBELLUM, 2),
            Structure::ellipsoid("pons", v([0.0, -20.0, -35.0]), v([9.0, 9.0, 10.0]), PONS, 3),
            Structure::ellipsoid("medulla oblongata", v([0.0, -22.0, -55.0]), v([6.0, 6.0, 10.0]), MEDULLA_OBLONGATA, 4),
            Structure::ellipsoid("midbrain", v([0.0, -15.0, -15.0]), v([10.0, 9.0, 8.0]), MIDBRAIN, 5),
            Structure::ellipsoid("thalamus left", v([-13.0, -5.0, 5.0]), v([8.0, 12.0, 8.0]), THALAMUS, 6),
            Structure::ellipsoid("thalamus right", v([13.0, -5.0, 5.0]), v([8.0, 12.0, 8.0]), THALAMUS, 7),
            Structure::sphere("hypothalamus", v([0.0, 10.0, -12.0]), 6.0 * s, HYPOTHALAMUS, 8),
            Structure::ellipsoid("hippocampus left", v([-28.0, -10.0, -20.0]), v([6.0, 16.0, 6.0]), HIPPOCAMPUS, 9),
            Structure::ellipsoid("hippocampus right", v([28.0, -10.0, -20.0]), v([6.0, 16.0, 6.0]), HIPPOCAMPUS, 10),
            Structure::ellipsoid("ventricle left", v([-8.0, 14.0, 18.0]), v([5.0, 18.0, 6.0]), CSF, 11),
            Structure::ellipsoid("ventricle right", v([8.0, 14.0, 18.0]), v([5.0, 18.0, 6.0]), CSF, 12),
        ];
        let background_structures = vec![
            Structure::ellipsoid("subcutaneous fat", [0.0; 3], v([92.0, 94.0, 90.0]), FAT, 20).shell(6.0 * s),
            Structure::ellipsoid("skull", [0.0; 3], v([86.0, 88.0, 84.0]), SKULL, 21).shell(6.0 * s),
            Structure::ellipsoid("nasal air", v([0.0, 78.0, -50.0]), v([10.0, 10.0, 12.0]), AIR, 22),
        ];
        PhantomSpec {
            dims,
            voxel_size,
            head: Structure::ellipsoid("head", [0.0; 3], v([92.0, 94.0, 90.0]), CSF, 0),
            outside_susceptibility: AIR,
            structures,
            background_structures,
            seed: 0,
        }
    }

    /// The reference phantom with every structure jittered in position and size,
    /// plus a few extra blobs carrying reference values. Retries until the
    /// brain and background groups are disjoint.
    pub fn randomized(dims: [usize; 3], voxel_size: [f64; 3], seed: u64) -> Self {
        let base = PhantomSpec::reference(dims, voxel_size);
        let fov = (0..3).map(|a| dims[a] as f64 * voxel_size[a]).fold(f64::INFINITY, f64::min);
        let s = fov / 192.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..64 {
            let mut spec = base.clone();
            spec.seed = seed;
            let brain_scale = rng.random_range(0.92..1.04);
            for (i, st) in spec.structures.iter_mut().enumerate() {
                if i == 0 {
                    st.semi_axes = st.semi_axes.map(|a| a * brain_scale * rng.random_range(0.97..1.03));
                    continue;
                }
                st.center = st.center.map(|c| c * brain_scale + rng.random_range(-8.0..8.0) * s);
                st.semi_axes = st.semi_axes.map(|a| a * rng.random_range(0.75..1.3));
            }
            let palette = [values::HIPPOCAMPUS, values::CEREBELLUM, values::CSF, values::WHITE_MATTER];
            let wm = spec.structures[0].semi_axes;
            for k in 0..rng.random_range(3..7) {
                let dir: [f64; 3] = [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
                let center = [dir[0] * wm[0], dir[1] * wm[1], dir[2] * wm[2]];
                let r = rng.random_range(4.0..11.0) * s;
                let chi = palette[rng.random_range(0..palette.len())];
                let shape = if rng.random_bool(0.5) { Shape::Ellipsoid } else { Shape::Box };
                let axes = [r * rng.random_range(0.6..1.4), r * rng.random_range(0.6..1.4), r * rng.random_range(0.6..1.4)];
                spec.structures.push(Structure {
                    name: format!("blob {k}"),
                    shape,
                    center,
                    semi_axes: axes,
                    susceptibility: chi,
                    label: 30 + k,
                    shell_thickness: None,
                });
            }
            let air = &mut spec.background_structures[2];
            air.center = [rng.random_range(-20.0..20.0) * s, rng.random_range(70.0..80.0) * s, rng.random_range(-60.0..-35.0) * s];
            air.semi_axes = air.semi_axes.map(|a| a * rng.random_range(0.7..1.2));
            if spec.build().is_ok() {
                return spec;
            }
        }
        base
    }

    pub fn build(&self) -> Result<Phantom> {
        build_phantom(self)
    }
}

/// Rasterizes a phantom: susceptibility (ppm), true brain mask and label volume.
pub fn build_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.grid_dims();
    let mut chi = vec![0.0; dims.len()];
    let mut labels = vec![0.0; dims.len()];
    let mut brain = vec![false; dims.len()];
    let mut background = vec![false; dims.len()];
    let mut head = vec![false; dims.len()];
    for z in 0..dims.2 {
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let i = dims.index(x, y, z);
                let p = spec.world(x, y, z);
                head[i] = spec.head.contains(p);
                chi[i] = if head[i] { values::CSF } else { spec.outside_susceptibility };
                for s in &spec.background_structures {
                    if s.contains(p) {
                        chi[i] = s.susceptibility;
                        labels[i] = s.label as f64;
                        background[i] = true;
                    }
                }
                for s in &spec.structures {
                    if s.contains(p) {
                        if background[i] {
                            return Err(Error::Invalid(format!("brain structure '{}' overlaps a background structure", s.name)));
                        }
                        chi[i] = s.susceptibility;
                        labels[i] = s.label as f64;
                        brain[i] = true;
                    }
                }
            }
        }
    }
    let brain_mask = Mask::new(dims, brain)?;
    if brain_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(Phantom {
        chi: Volume3D::new(dims, spec.voxel_size, Unit::Ppm, chi)?,
        brain_mask,
        head_mask: Mask::new(dims, head)?,
        labels: Volume3D::new(dims, spec.voxel_size, Unit::Dimensionless, labels)?,
    })
}

/// Relative field shift (ppm) over the whole field of view, B0 along the third axis.
pub fn forward_field(chi: &Volume3D) -> Result<Volume3D> {
    let d = dipole_kernel(&KGrid::for_volume(chi), [0.0, 0.0, 1.0])?;
    let plan = Fft3::new(chi.dims());
    chi.with_data(Unit::Ppm, plan.apply_real_kernel(chi.data(), d.values()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoTrain {
    /// Echo times in seconds, strictly increasing.
    pub tes: Vec<f64>,
    /// Field strength in tesla.
    pub b0: f64,
    /// rad/s/T
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_gamma() -> f64 {
    GAMMA
}

impl Default for EchoTrain {
    /// 8 echoes from 5.468 ms with 3 ms spacing at 3 T.
    fn default() -> Self {
        EchoTrain::uniform(8, 5.468e-3, 3e-3, 3.0)
    }
}

impl EchoTrain {
    pub fn uniform(n: usize, te1: f64, spacing: f64, b0: f64) -> Self {
        EchoTrain { tes: (0..n).map(|i| te1 + spacing * i as f64).collect(), b0, gamma: GAMMA }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = self.tes.windows(2).all(|w| w[1] > w[0]);
        if self.tes.is_empty() || !increasing || self.tes[0] <= 0.0 || !(self.b0 > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::Invalid("echo train needs positive increasing TEs, B0 > 0 and gamma > 0".into()));
        }
        Ok(())
    }

    /// Phase (rad) accrued per ppm of field shift at echo `i`.
    pub fn radians_per_ppm(&self, i: usize) -> f64 {
        self.gamma * self.b0 * 1e-6 * self.tes[i]
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap(x: f64) -> f64 {
    let w = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if w <= -PI {
        w + 2.0 * PI
    } else if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone)]
pub struct Echo {
    pub phase: Volume3D,
    pub magnitude: Volume3D,
}

/// Multi-echo wrapped phase and magnitude. Magnitude is the support indicator;
/// with `snr` set, complex Gaussian noise of sigma `peak / snr` is added per channel.
pub fn synthesize_echoes(
    delta: &Volume3D,
    support: &Mask,
    train: &EchoTrain,
    snr: Option<f64>,
    seed: u64,
) -> Result<Vec<Echo>> {
    train.validate()?;
    delta.check_same_dims(support.dims())?;
    if let Some(s) = snr {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Invalid(format!("snr must be positive, got {s}")));
        }
    }
    let mag: Vec<f64> = support.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let sigma = snr.map(|s| 1.0 / s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut echoes = Vec::with_capacity(train.tes.len());
    for i in 0..train.tes.len() {
        let scale = train.radians_per_ppm(i);
        let (phase, magnitude): (Vec<f64>, Vec<f64>) = match sigma {
            None => delta.data().iter().zip(&mag).map(|(&d, &m)| (wrap(scale * d), m)).unzip(),
            Some(sd) => delta
                .data()
                .iter()
                .zip(&mag)
                .map(|(&d, &m)| {
                    let phi = scale * d;
                    let nr: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
                    let ni: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
                    let (re, im) = (m * phi.cos() + nr, m * phi.sin() + ni);
                    (wrap(im.atan2(re)), re.hypot(im))
                })
                .unzip(),
        };
        echoes.push(Echo {
            phase: delta.with_data(Unit::Radians, phase)?,
            magnitude: delta.with_data(Unit::Arbitrary, magnitude)?,
        });
    }
    Ok(echoes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values_are_the_published_ones() {
        let spec = PhantomSpec::reference([64, 64, 64], [3.0; 3]);
        let chi_of = |name: &str| {
            spec.structures.iter().chain(&spec.background_structures).find(|s| s.name.starts_with(name)).unwrap().susceptibility
        };
        assert_eq!(chi_of("hippocampus"), 0.05);
        assert_eq!(chi_of("hypothalamus"), 0.05);
        assert_eq!(chi_of("medulla"), 0.05);
        assert_eq!(chi_of("white matter"), -0.03);
        assert_eq!(chi_of("cerebellum"), -0.0065);
        assert_eq!(chi_of("pons"), -0.0065);
        assert_eq!(chi_of("thalamus"), -0.0065);
        assert_eq!(chi_of("midbrain"), -0.0065);
        assert_eq!(chi_of("ventricle"), 0.0);
        assert_eq!(chi_of("skull"), -2.1);
        assert_eq!(chi_of("subcutaneous fat"), 0.6);
        assert_eq!(chi_of("nasal air"), 9.2);
        let p = spec.build().unwrap();
        assert!(p.brain_mask.count() > 1000);
        // Outside the head envelope the default is air.
        assert_eq!(p.chi.get(0, 0, 0), 9.2);
    }

    #[test]
    fn randomized_specs_build_and_differ() {
        let a = PhantomSpec::randomized([48, 48, 48], [4.0; 3], 1);
        let b = PhantomSpec::randomized([48, 48, 48], [4.0; 3], 2);
        assert_ne!(a, b);
        assert!(a.build().is_ok() && b.build().is_ok());
        assert_eq!(a, PhantomSpec::randomized([48, 48, 48], [4.0; 3], 1));
    }

    #[test]
    fn empty_structure_list_has_no_brain() {
        let mut spec = PhantomSpec::reference([16, 16, 16], [12.0; 3]);
        spec.structures.clear();
        assert!(matches!(spec.build(), Err(Error::EmptyMask)));
    }

    #[test]
    fn out_of_bounds_structure() {
        let mut spec = PhantomSpec::reference([16, 16, 16], [12.0; 3]);
        spec.structures[1].center = [500.0, 0.0, 0.0];
        assert!(matches!(spec.build(), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn duplicate_labels_rejected() {
        let mut spec = PhantomSpec::reference([16, 16, 16], [12.0; 3]);
        spec.structures[2].label = 1;
        assert!(spec.build().is_err());
    }

    #[test]
    fn sphere_volume_matches_analytic() {
        let spec = PhantomSpec {
            dims: [32, 32, 32],
            voxel_size: [1.0; 3],
            head: Structure::ellipsoid("head", [0.0; 3], [15.0; 3], 0.0, 0),
            outside_susceptibility: 0.0,
            structures: vec![Structure::sphere("ball", [0.0; 3], 5.0, 1.0, 1)],
            background_structures: vec![],
            seed: 0,
        };
        let p = spec.build().unwrap();
        let analytic = 4.0 / 3.0 * PI * 125.0;
        let count = p.brain_mask.count() as f64;
        assert!((count - analytic).abs() / analytic < 0.05, "{count} vs {analytic}");
        assert!(p.chi.data().iter().filter(|&&v| v == 1.0).count() as f64 == count);
    }

    #[test]
    fn zero_and_uniform_chi_give_zero_field() {
        let dims = Dims(8, 8, 8);
        let zero = forward_field(&Volume3D::zeros(dims, [1.0; 3], Unit::Ppm)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let uni = forward_field(&Volume3D::filled(dims, [1.0; 3], Unit::Ppm, 0.7)).unwrap();
        assert!(uni.data().iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn wrap_definition() {
        assert!((wrap(2.0 * PI + 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(wrap(PI), PI);
        assert_eq!(wrap(-PI), PI);
        assert!((wrap(-7.0) - (-7.0 + 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn echo_phase_quarter_turn_and_wrap() {
        let train = EchoTrain::uniform(1, 10e-3, 1e-3, 3.0);
        let per_ppm = train.radians_per_ppm(0);
        let dims = Dims(2, 2, 2);
        let delta = Volume3D::from_fn(dims, [1.0; 3], Unit::Ppm, |x, _, _| {
            if x == 0 {
                (PI / 2.0) / per_ppm
            } else {
                (2.0 * PI + 0.1) / per_ppm
            }
        })
        .unwrap();
        let e = synthesize_echoes(&delta, &Mask::full(dims), &train, None, 0).unwrap();
        assert!((e[0].phase.get(0, 0, 0) - PI / 2.0).abs() < 1e-12);
        assert!((e[0].phase.get(1, 0, 0) - 0.1).abs() < 1e-12);
        assert!(e[0].magnitude.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn noisy_echoes_are_reproducible() {
        let dims = Dims(6, 6, 6);
        let delta = Volume3D::filled(dims, [1.0; 3], Unit::Ppm, 0.02);
        let support = Mask::from_fn(dims, |x, _, _| x > 1);
        let train = EchoTrain::default();
        let a = synthesize_echoes(&delta, &support, &train, Some(50.0), 9).unwrap();
        let b = synthesize_echoes(&delta, &support, &train, Some(50.0), 9).unwrap();
        let c = synthesize_echoes(&delta, &support, &train, Some(50.0), 10).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.phase.data().iter().zip(y.phase.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(a[0].phase.data(), c[0].phase.data());
        assert!(a[0].phase.data().iter().all(|&p| p > -PI && p <= PI));
        assert!(synthesize_echoes(&delta, &support, &train, Some(0.0), 9).is_err());
    }
}
