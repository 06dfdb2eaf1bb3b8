//! Single-file, uncompressed, little-endian NIfTI-1 subset.

use std::path::Path;

use super::{decode, encode, widen, Dtype, VolumeData};
use crate::grid::Grid;
use crate::{Error, Result};

pub const NIFTI_HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const INTENT_VECTOR: i16 = 1007;

fn put_i16(h: &mut [u8], at: usize, v: i16) {
    h[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(h: &mut [u8], at: usize, v: f32) {
    h[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(h: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([h[at], h[at + 1]])
}

fn get_f32(h: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([h[at], h[at + 1], h[at + 2], h[at + 3]])
}

pub fn write_nifti(path: &Path, data: &VolumeData) -> Result<()> {
    let grid = data.grid();
    let dtype = data.dtype();
    let vector = matches!(data, VolumeData::Vector(_));
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let mut dim = [1i16; 8];
    dim[0] = if vector { 5 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = i16::try_from(grid.dims[a]).map_err(|_| Error::UnsupportedFile {
            path: path.into(),
            reason: format!("dimension {} exceeds the NIfTI-1 limit", grid.dims[a]),
        })?;
    }
    if vector {
        dim[5] = 3;
    }
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    if vector {
        put_i16(&mut h, 68, INTENT_VECTOR);
    }
    let (code, bitpix) = match dtype {
        Dtype::Float32 => (DT_FLOAT32, 32),
        Dtype::Uint8 => (DT_UINT8, 8),
    };
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 252, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
    }
    let tag = data.kind_tag().as_bytes();
    h[328..328 + tag.len()].copy_from_slice(tag);
    h[344..348].copy_from_slice(MAGIC);
    h.extend(encode(&data.planar_values(), dtype));
    std::fs::write(path, h).map_err(|e| Error::io(path, e))
}

pub fn read_nifti(path: &Path) -> Result<VolumeData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let unsupported = |reason: String| Error::UnsupportedFile {
        path: path.into(),
        reason,
    };
    if bytes.len() < NIFTI_HEADER_SIZE || &bytes[344..348] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let h = &bytes[..NIFTI_HEADER_SIZE];
    if i32::from_le_bytes([h[0], h[1], h[2], h[3]]) != NIFTI_HEADER_SIZE as i32 {
        return Err(unsupported("header size is not 348 (big-endian files are not supported)".into()));
    }
    let dim: Vec<i16> = (0..8).map(|i| get_i16(h, 40 + 2 * i)).collect();
    let vector = match dim[0] {
        3 => false,
        4 if dim[4] == 1 => false,
        5 if dim[4] == 1 && dim[5] == 3 => true,
        _ => return Err(unsupported(format!("dim {dim:?} is neither a 3-d volume nor a 3-vector field"))),
    };
    if dim[1..4].iter().any(|&d| d < 2) {
        return Err(unsupported(format!("spatial dims {:?} must be at least 2", &dim[1..4])));
    }
    let dtype = match get_i16(h, 70) {
        DT_FLOAT32 => Dtype::Float32,
        DT_UINT8 => Dtype::Uint8,
        code => return Err(Error::UnsupportedDatatype { path: path.into(), code }),
    };
    let (slope, inter) = (get_f32(h, 112), get_f32(h, 116));
    if !((slope == 0.0 || slope == 1.0) && inter == 0.0) {
        return Err(unsupported(format!("intensity scaling {slope}x + {inter} is not supported")));
    }
    let vox_offset = get_f32(h, 108);
    if !(vox_offset >= VOX_OFFSET as f32 && vox_offset.fract() == 0.0 && (vox_offset as usize) <= bytes.len()) {
        return Err(unsupported(format!("vox_offset {vox_offset} is invalid")));
    }
    let dims = [0, 1, 2].map(|a| dim[a + 1] as usize);
    let spacing = [0, 1, 2].map(|a| widen(get_f32(h, 80 + 4 * a)));
    let origin = if get_i16(h, 252) > 0 {
        [0, 1, 2].map(|a| widen(get_f32(h, 268 + 4 * a)))
    } else if get_i16(h, 254) > 0 {
        [0, 1, 2].map(|a| widen(get_f32(h, 280 + 16 * a + 12)))
    } else {
        [0.0; 3]
    };
    let grid = Grid::new(dims, spacing, origin)?;
    let count = grid.len() * if vector { 3 } else { 1 };
    let payload = &bytes[vox_offset as usize..];
    let expected = count * dtype.size();
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            actual: payload.len(),
        });
    }
    let name_end = h[328..344].iter().position(|&b| b == 0).unwrap_or(16);
    let tag = std::str::from_utf8(&h[328..328 + name_end]).unwrap_or("");
    let kind = if tag.is_empty() && dtype == Dtype::Uint8 { "mask" } else { tag };
    VolumeData::from_planar(grid, decode(payload, dtype), vector, kind)
}
