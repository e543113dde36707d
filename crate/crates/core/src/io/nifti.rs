//! Minimal single-file NIfTI-1 support: 3D float32/int16 in, float32 out.
//! Orientation (qform/sform) is ignored.

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::volume::{Dims, Unit, Volume3D};

const HEADER_SIZE: usize = 348;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, o: usize) -> i16 {
        let b = [self.bytes[o], self.bytes[o + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, o: usize) -> i32 {
        let b: [u8; 4] = self.bytes[o..o + 4].try_into().unwrap();
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, o: usize) -> f32 {
        f32::from_bits(self.i32(o) as u32)
    }
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume3D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated { expected: HEADER_SIZE, found: bytes.len() });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::BadMagic { expected: "n+1\\0".into(), found: String::from_utf8_lossy(magic).into_owned() });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match le {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(Error::Parse(format!("sizeof_hdr is {other}, expected 348"))),
    };
    let h = Fields { bytes, big_endian };

    let ndim = h.i16(40).max(0) as usize;
    let dim: Vec<i64> = (1..8).map(|i| h.i16(40 + 2 * i) as i64).collect();
    let extra_frames = (3..ndim.min(7)).any(|i| dim[i] > 1);
    if ndim < 3 || extra_frames {
        return Err(Error::NotThreeD(ndim));
    }
    if dim[..3].iter().any(|&d| d <= 0) {
        return Err(Error::DimensionOverflow([dim[0] as u64, dim[1] as u64, dim[2] as u64]));
    }
    let dims = Dims(dim[0] as usize, dim[1] as usize, dim[2] as usize);

    let datatype = h.i16(70);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let pixdim = [h.f32(80) as f64, h.f32(84) as f64, h.f32(88) as f64];
    let voxel_size = pixdim.map(|p| if p.is_finite() && p > 0.0 { p } else { 1.0 });
    let offset = h.f32(108).max(HEADER_SIZE as f32) as usize;
    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    if h.i16(252) != 0 || h.i16(254) != 0 {
        warn!("NIfTI orientation (qform/sform) present but ignored");
    }

    let expected = dims.len() * width;
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::Truncated { expected, found: available });
    }
    let payload = &bytes[offset..offset + expected];
    let raw: Vec<f64> = match datatype {
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                (if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
        _ => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f64
            })
            .collect(),
    };
    let data = if slope != 0.0 && slope.is_finite() {
        raw.into_iter().map(|v| v * slope + inter).collect()
    } else {
        raw
    };
    Volume3D::new(dims, voxel_size, Unit::Arbitrary, data)
}

pub fn load_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    parse_nifti(&fs::read(path)?)
}

/// Encodes a float32 single-file NIfTI-1 image with identity scaling.
pub fn encode_nifti(v: &Volume3D) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE + 4];
    let put_i16 = |h: &mut Vec<u8>, o: usize, x: i16| h[o..o + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, o: usize, x: f32| h[o..o + 4].copy_from_slice(&x.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let Dims(nx, ny, nz) = v.dims();
    put_i16(&mut h, 40, 3);
    for (i, n) in [nx, ny, nz, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut h, 42 + 2 * i, n as i16);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    put_f32(&mut h, 76, 1.0);
    for (i, d) in v.voxel_size().into_iter().enumerate() {
        put_f32(&mut h, 80 + 4 * i, d as f32);
    }
    put_f32(&mut h, 108, (HEADER_SIZE + 4) as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // xyzt_units: mm
    h[344..348].copy_from_slice(b"n+1\0");
    for &x in v.data() {
        h.extend_from_slice(&(x as f32).to_le_bytes());
    }
    h
}

pub fn save_nifti(v: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    if [v.dims().0, v.dims().1, v.dims().2].iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::DimensionOverflow(v.dims().as_array().map(|n| n as u64)));
    }
    fs::write(path, encode_nifti(v))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Volume3D {
        Volume3D::from_fn(Dims(2, 2, 2), [0.5, 1.0, 2.0], Unit::Arbitrary, |x, y, z| (x + 2 * y + 4 * z) as f64 - 3.5)
            .unwrap()
    }

    #[test]
    fn own_writer_round_trips() {
        let v = tiny();
        let back = parse_nifti(&encode_nifti(&v)).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.voxel_size(), v.voxel_size());
        assert_eq!(back.data(), v.data());
    }

    #[test]
    fn scaling_is_applied() {
        let v = Volume3D::filled(Dims(2, 2, 2), [1.0; 3], Unit::Arbitrary, 3.0);
        let mut bytes = encode_nifti(&v);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        let back = parse_nifti(&bytes).unwrap();
        assert!(back.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn int16_payload() {
        let mut bytes = encode_nifti(&Volume3D::zeros(Dims(2, 1, 1), [1.0; 3], Unit::Arbitrary));
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes.truncate(352);
        bytes.extend_from_slice(&(-5i16).to_le_bytes());
        bytes.extend_from_slice(&(9i16).to_le_bytes());
        assert_eq!(parse_nifti(&bytes).unwrap().data(), &[-5.0, 9.0]);
    }

    #[test]
    fn uint8_is_unsupported() {
        let mut bytes = encode_nifti(&tiny());
        bytes[70..72].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes), Err(Error::UnsupportedDatatype(2))));
    }

    #[test]
    fn four_d_is_rejected() {
        let mut bytes = encode_nifti(&tiny());
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&3i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes), Err(Error::NotThreeD(4))));
    }

    #[test]
    fn magic_mismatch() {
        let mut bytes = encode_nifti(&tiny());
        bytes[345] = b'i';
        assert!(matches!(parse_nifti(&bytes), Err(Error::BadMagic { .. })));
    }
}
