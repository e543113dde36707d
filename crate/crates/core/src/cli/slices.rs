//! 8-bit grayscale slice rendering (binary PGM).
//!
//! Gray level is `min(255, floor(256 * (v - lo) / (hi - lo)))` after clamping
//! `v` to `[lo, hi]`: `lo` maps to 0, `hi` to 255, the window midpoint to 128.
//! Values that differ by at least `(hi - lo) / 256` inside the window always get
//! different levels. Files are named `{stem}_{axis}{index:04}.pgm`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Default display window for susceptibility maps, ppm.
pub const DEFAULT_WINDOW: (f64, f64) = (-0.15, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(format!("axis must be x, y or z, got '{s}'")),
        }
    }
}

pub fn gray_level(v: f64, (lo, hi): (f64, f64)) -> u8 {
    let t = (v.clamp(lo, hi) - lo) / (hi - lo);
    (256.0 * t).floor().min(255.0) as u8
}

/// A single 8-bit slice, row-major with the lower-numbered remaining axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl SliceImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn check_window((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Invalid(format!("window needs finite lo < hi, got [{lo}, {hi}]")));
    }
    Ok(())
}

pub fn render_slice(v: &Volume3D, axis: Axis, index: usize, window: (f64, f64)) -> Result<SliceImage> {
    check_window(window)?;
    let d = v.dims().as_array();
    let a = axis.index();
    if index >= d[a] {
        return Err(Error::Invalid(format!("slice index {index} outside axis {axis} of length {}", d[a])));
    }
    let (u, w) = match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    };
    let mut pixels = Vec::with_capacity(d[u] * d[w]);
    for j in 0..d[w] {
        for i in 0..d[u] {
            let mut p = [0; 3];
            p[a] = index;
            p[u] = i;
            p[w] = j;
            pixels.push(gray_level(v.get(p[0], p[1], p[2]), window));
        }
    }
    Ok(SliceImage { width: d[u], height: d[w], pixels })
}

pub fn slice_filename(stem: &str, axis: Axis, index: usize) -> String {
    format!("{stem}_{axis}{index:04}.pgm")
}

/// Writes one PGM per index into `out_dir` and returns the paths.
pub fn emit_slices(
    v: &Volume3D,
    axis: Axis,
    indices: &[usize],
    window: (f64, f64),
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    check_window(window)?;
    let images = indices.iter().map(|&i| render_slice(v, axis, i, window)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(images.len());
    for (img, &i) in images.iter().zip(indices) {
        let p = out_dir.join(slice_filename(stem, axis, i));
        fs::write(&p, img.to_pgm())?;
        paths.push(p);
    }
    Ok(paths)
}
