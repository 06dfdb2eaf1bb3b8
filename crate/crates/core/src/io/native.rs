//! JSON header plus raw little-endian payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{decode, encode, read_json, write_json, Dtype, VolumeData};
use crate::grid::Grid;
use crate::{Error, Result};

pub const NATIVE_FORMAT: &str = "cycreg-volume-1";
const LAYOUT_SCALAR: &str = "scalar_x_fastest";
const LAYOUT_VECTOR: &str = "vector_planar_x_fastest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NativeHeader {
    pub format: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: Dtype,
    pub layout: String,
    pub kind: String,
    /// Payload file name, relative to the header.
    pub payload: String,
}

fn payload_path(header_path: &Path, name: &str) -> PathBuf {
    header_path.parent().unwrap_or(Path::new(".")).join(name)
}

pub fn write_native(path: &Path, data: &VolumeData) -> Result<()> {
    let grid = data.grid();
    let dtype = data.dtype();
    let payload = path.with_extension("raw");
    let header = NativeHeader {
        format: NATIVE_FORMAT.into(),
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype,
        layout: match data {
            VolumeData::Scalar(_) => LAYOUT_SCALAR,
            VolumeData::Vector(_) => LAYOUT_VECTOR,
        }
        .into(),
        kind: data.kind_tag().into(),
        payload: payload
            .file_name()
            .expect("path has a file name")
            .to_string_lossy()
            .into_owned(),
    };
    std::fs::write(&payload, encode(&data.planar_values(), dtype)).map_err(|e| Error::io(&payload, e))?;
    write_json(path, &header)
}

pub fn read_native(path: &Path) -> Result<VolumeData> {
    let header: NativeHeader = read_json(path)?;
    if header.format != NATIVE_FORMAT {
        return Err(Error::BadMagic { path: path.into() });
    }
    let vector = match header.layout.as_str() {
        LAYOUT_SCALAR => false,
        LAYOUT_VECTOR => true,
        other => {
            return Err(Error::UnsupportedFile {
                path: path.into(),
                reason: format!("unknown layout {other}"),
            })
        }
    };
    let grid = Grid::new(header.dims, header.spacing, header.origin)?;
    let payload = payload_path(path, &header.payload);
    let bytes = std::fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = grid.len() * if vector { 3 } else { 1 } * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: payload,
            expected,
            actual: bytes.len(),
        });
    }
    VolumeData::from_planar(grid, decode(&bytes, header.dtype), vector, &header.kind)
}
