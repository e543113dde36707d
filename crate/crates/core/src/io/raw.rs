//! Self-describing little-endian raw volume format.
//!
//! ```text
//! "QSMV" | version u16 = 1 | unit_tag u16 | nx ny nz u32 | dx dy dz f32 | payload f32 (x fastest)
//! ```
//!
//! Payloads are 32-bit; volumes are 64-bit in memory, so a save narrows each
//! value to the nearest `f32`. Values already representable in `f32` round trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, Unit, Volume3D};

pub const MAGIC: &[u8; 4] = b"QSMV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 2 + 12 + 12;

/// Largest voxel count accepted when reading (2^31 samples).
const MAX_VOXELS: u64 = 1 << 31;

pub fn write_raw<W: Write>(v: &Volume3D, mut w: W) -> Result<()> {
    let Dims(nx, ny, nz) = v.dims();
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&v.unit().tag().to_le_bytes());
    for n in [nx, ny, nz] {
        let n = u32::try_from(n).map_err(|_| Error::DimensionOverflow([nx as u64, ny as u64, nz as u64]))?;
        header.extend_from_slice(&n.to_le_bytes());
    }
    for d in v.voxel_size() {
        header.extend_from_slice(&(d as f32).to_le_bytes());
    }
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(v.data().len() * 4);
    for &x in v.data() {
        payload.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_raw<R: Read>(mut r: R) -> Result<Volume3D> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_fully(&mut r, &mut header)?;
    if got < 4 || &header[..4] != MAGIC {
        return Err(Error::BadMagic {
            expected: "QSMV".into(),
            found: String::from_utf8_lossy(&header[..got.min(4)]).into_owned(),
        });
    }
    if got < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN, found: got });
    }
    let u16_at = |o: usize| u16::from_le_bytes([header[o], header[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(header[o..o + 4].try_into().unwrap());

    let version = u16_at(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    let unit = Unit::from_tag(u16_at(6)).ok_or_else(|| Error::Parse(format!("unknown unit tag {}", u16_at(6))))?;
    let raw_dims = [u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64];
    let count = raw_dims
        .iter()
        .try_fold(1u64, |acc, &n| acc.checked_mul(n))
        .filter(|&c| c > 0 && c <= MAX_VOXELS)
        .ok_or(Error::DimensionOverflow(raw_dims))?;
    let dims = Dims(raw_dims[0] as usize, raw_dims[1] as usize, raw_dims[2] as usize);
    let voxel_size = [f32_at(20) as f64, f32_at(24) as f64, f32_at(28) as f64];

    let expected = count as usize * 4;
    let mut payload = vec![0u8; expected];
    let got = read_fully(&mut r, &mut payload)?;
    if got < expected {
        return Err(Error::Truncated { expected, found: got });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Volume3D::new(dims, voxel_size, unit, data)
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

pub fn save_raw(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_raw(v, BufWriter::new(File::create(path)?))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_raw(BufReader::new(File::open(path)?))
}
