//! Volumes, masks and the morphology used by background removal and metrics.
//!
//! Storage is x-fastest: the linear index of `(x, y, z)` is `x + nx * (y + ny * z)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical meaning of the values stored in a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ppm,
    Radians,
    Dimensionless,
    Arbitrary,
}

impl Unit {
    pub fn tag(self) -> u16 {
        match self {
            Unit::Ppm => 0,
            Unit::Radians => 1,
            Unit::Dimensionless => 2,
            Unit::Arbitrary => 3,
        }
    }

    pub fn from_tag(tag: u16) -> Option<Unit> {
        match tag {
            0 => Some(Unit::Ppm),
            1 => Some(Unit::Radians),
            2 => Some(Unit::Dimensionless),
            3 => Some(Unit::Arbitrary),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub usize, pub usize, pub usize);

impl Dims {
    pub fn len(&self) -> usize {
        self.0 * self.1 * self.2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.0, self.1, self.2]
    }

    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0 * (y + self.1 * z)
    }

    #[inline(always)]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.0;
        let yz = i / self.0;
        (x, yz % self.1, yz / self.1)
    }

    pub fn min_axis(&self) -> usize {
        self.0.min(self.1).min(self.2)
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Dims(d[0], d[1], d[2])
    }
}

/// A 3D scalar field with voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    voxel_size: [f64; 3],
    unit: Unit,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, voxel_size: [f64; 3], unit: Unit, data: Vec<f64>) -> Result<Self> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Invalid(format!("dims must be positive, got {dims:?}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if voxel_size.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Invalid(format!("voxel size must be positive and finite, got {voxel_size:?}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume3D { dims, voxel_size, unit, data })
    }

    pub fn zeros(dims: Dims, voxel_size: [f64; 3], unit: Unit) -> Self {
        Self::filled(dims, voxel_size, unit, 0.0)
    }

    pub fn filled(dims: Dims, voxel_size: [f64; 3], unit: Unit, value: f64) -> Self {
        Volume3D::new(dims, voxel_size, unit, vec![value; dims.len()]).expect("valid constant volume")
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel index.
    pub fn from_fn(
        dims: Dims,
        voxel_size: [f64; 3],
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume3D::new(dims, voxel_size, unit, data)
    }

    /// Same geometry as `self`, new payload.
    pub fn with_data(&self, unit: Unit, data: Vec<f64>) -> Result<Self> {
        Volume3D::new(self.dims, self.voxel_size, unit, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn map(&self, unit: Unit, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(unit, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn check_same_dims(&self, other: Dims) -> Result<()> {
        if self.dims != other {
            return Err(Error::DimMismatch(self.dims.as_array(), other.as_array()));
        }
        Ok(())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Values with `mask` applied: zero outside.
    pub fn masked(&self, mask: &Mask) -> Result<Self> {
        self.check_same_dims(mask.dims())?;
        let data = self.data.iter().zip(mask.bits()).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
        self.with_data(self.unit, data)
    }
}

/// Binary region of support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::Invalid(format!("mask length {} does not match dims {:?}", bits.len(), dims)));
        }
        Ok(Mask { dims, bits })
    }

    pub fn full(dims: Dims) -> Self {
        Mask { dims, bits: vec![true; dims.len()] }
    }

    pub fn empty(dims: Dims) -> Self {
        Mask { dims, bits: vec![false; dims.len()] }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(dims.len());
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    bits.push(f(x, y, z));
                }
            }
        }
        Mask { dims, bits }
    }

    /// Voxels whose value is nonzero.
    pub fn from_volume(v: &Volume3D) -> Self {
        Mask { dims: v.dims(), bits: v.data().iter().map(|&x| x != 0.0).collect() }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(self.dims.as_array(), other.dims.as_array()));
        }
        Ok(Mask { dims: self.dims, bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect() })
    }

    pub fn not(&self) -> Mask {
        Mask { dims: self.dims, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn to_volume(&self, voxel_size: [f64; 3]) -> Volume3D {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Volume3D::new(self.dims, voxel_size, Unit::Dimensionless, data).expect("mask volume")
    }
}

/// Squared Euclidean distance (in voxels) from every voxel to the nearest voxel
/// for which `is_outside` holds. Voxels beyond the grid count as outside.
fn squared_edt(dims: Dims, is_outside: &[bool]) -> Vec<f64> {
    let Dims(nx, ny, nz) = dims;
    let mut d: Vec<f64> = is_outside.iter().map(|&o| if o { 0.0 } else { f64::INFINITY }).collect();

    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let (n, stride, others): (usize, usize, Vec<usize>) = match axis {
            0 => (nx, 1, (0..ny * nz).map(|yz| yz * nx).collect()),
            1 => (ny, nx, (0..nz).flat_map(|z| (0..nx).map(move |x| x + nx * ny * z)).collect()),
            _ => (nz, nx * ny, (0..nx * ny).collect()),
        };
        for base in others {
            line.clear();
            line.extend((0..n).map(|i| d[base + i * stride]));
            lower_envelope_1d(&line, &mut out);
            for (i, v) in out.iter().enumerate() {
                d[base + i * stride] = *v;
            }
        }
    }
    d
}

/// One pass of the Felzenszwalb-Huttenlocher squared distance transform,
/// with implicit zero-cost samples at positions -1 and n (outside the grid).
fn lower_envelope_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    // Sample positions shifted by one so the padding sits at 0 and n + 1.
    let m = n + 2;
    let value = |q: usize| -> f64 {
        if q == 0 || q == m - 1 {
            0.0
        } else {
            f[q - 1]
        }
    };
    let mut v = vec![0usize; m];
    let mut z = vec![0.0f64; m + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..m {
        let fq = value(q);
        if fq.is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let fp = value(p);
            let s = ((fq + (q * q) as f64) - (fp + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    out.clear();
    let mut k = 0usize;
    for q in 1..m - 1 {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out.push(dq * dq + value(p));
    }
}

/// Euclidean distance (voxels) from each mask voxel to the nearest voxel
/// outside the mask; zero outside. The grid border counts as outside.
pub fn distance_to_boundary(m: &Mask) -> Result<Volume3D> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let outside: Vec<bool> = m.bits().iter().map(|b| !b).collect();
    let d2 = squared_edt(m.dims(), &outside);
    let data = d2.into_iter().map(f64::sqrt).collect();
    Volume3D::new(m.dims(), [1.0; 3], Unit::Dimensionless, data)
}

/// Erosion by a digital Euclidean ball of radius `r` voxels.
///
/// A voxel survives iff every voxel within distance `r` of it lies in `m`.
pub fn erode_mask(m: &Mask, r: usize) -> Mask {
    if r == 0 || m.is_empty() {
        return m.clone();
    }
    let outside: Vec<bool> = m.bits().iter().map(|b| !b).collect();
    let d2 = squared_edt(m.dims(), &outside);
    let r2 = (r * r) as f64;
    Mask { dims: m.dims(), bits: d2.iter().map(|&d| d > r2).collect() }
}

/// Dilation by a digital Euclidean ball of radius `r` voxels (clipped to the grid).
pub fn dilate_mask(m: &Mask, r: usize) -> Mask {
    if r == 0 || m.is_empty() {
        return m.clone();
    }
    let d2 = squared_edt_inner(m.dims(), m.bits());
    let r2 = (r * r) as f64;
    Mask { dims: m.dims(), bits: d2.iter().map(|&d| d <= r2).collect() }
}

// Distance to the nearest `true` voxel, without treating the border as a source.
fn squared_edt_inner(dims: Dims, sources: &[bool]) -> Vec<f64> {
    let Dims(nx, ny, nz) = dims;
    let mut d: Vec<f64> = sources.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        let (n, stride, bases): (usize, usize, Vec<usize>) = match axis {
            0 => (nx, 1, (0..ny * nz).map(|yz| yz * nx).collect()),
            1 => (ny, nx, (0..nz).flat_map(|z| (0..nx).map(move |x| x + nx * ny * z)).collect()),
            _ => (nz, nx * ny, (0..nx * ny).collect()),
        };
        for base in bases {
            let line: Vec<f64> = (0..n).map(|i| d[base + i * stride]).collect();
            for (i, slot) in (0..n).map(|i| base + i * stride).enumerate() {
                let mut best = f64::INFINITY;
                for (j, &f) in line.iter().enumerate() {
                    if f.is_finite() {
                        let dj = i as f64 - j as f64;
                        best = best.min(f + dj * dj);
                    }
                }
                d[slot] = best;
            }
        }
    }
    d
}

/// Threshold at `frac * max(v)` and keep the largest 6-connected component.
pub fn threshold_mask(v: &Volume3D, frac: f64) -> Result<Mask> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Invalid(format!("threshold fraction must lie in (0, 1), got {frac}")));
    }
    let peak = v.max();
    if peak <= 0.0 {
        return Err(Error::Invalid("threshold_mask needs a volume with a positive maximum".into()));
    }
    let level = frac * peak;
    let dims = v.dims();
    let above: Vec<bool> = v.data().iter().map(|&x| x >= level).collect();
    Ok(Mask { dims, bits: largest_component(dims, &above) })
}

/// Largest 6-connected component of `bits`; ties go to the component found first in index order.
pub fn largest_component(dims: Dims, bits: &[bool]) -> Vec<bool> {
    let mut label = vec![0u32; bits.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in face_neighbors(dims, i) {
                if bits[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| best.1 > 0 && l == best.0).collect()
}

fn face_neighbors(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let (x, y, z) = dims.coords(i);
    let Dims(nx, ny, nz) = dims;
    let cands = [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - nx * ny),
        (z + 1 < nz).then(|| i + nx * ny),
    ];
    cands.into_iter().flatten()
}
