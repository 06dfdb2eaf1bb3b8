//! Volume files, run manifests and slice renders.

mod native;
mod nifti;
mod render;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{FieldKind, Grid, Vec3, VectorField3, Volume3, VolumeKind};
use crate::{Error, Result};

pub use native::{read_native, write_native, NativeHeader, NATIVE_FORMAT};
pub use nifti::{read_nifti, write_nifti, NIFTI_HEADER_SIZE};
pub use render::{parse_color, render_slice, Overlay};
pub use run::{load_run, replay, run_register, RegisterInputs, RunManifest, RunOutputs, TOOL_NAME};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

/// What a volume file holds.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Scalar(Volume3),
    Vector(VectorField3),
}

impl VolumeData {
    pub fn grid(&self) -> &Grid {
        match self {
            VolumeData::Scalar(v) => v.grid(),
            VolumeData::Vector(f) => f.grid(),
        }
    }

    /// Binary masks are stored as bytes, everything else as float32.
    fn dtype(&self) -> Dtype {
        match self {
            VolumeData::Scalar(v) if v.kind() == VolumeKind::Mask && v.data().iter().all(|&x| x == 0.0 || x == 1.0) => {
                Dtype::Uint8
            }
            _ => Dtype::Float32,
        }
    }

    fn kind_tag(&self) -> &'static str {
        match self {
            VolumeData::Scalar(v) => match v.kind() {
                VolumeKind::Mask => "mask",
                VolumeKind::Intensity => "intensity",
            },
            VolumeData::Vector(f) => match f.kind() {
                FieldKind::Displacement => "displacement",
                FieldKind::Velocity => "velocity",
            },
        }
    }

    /// Voxel values in file order: x-fastest, and for vectors one full
    /// component plane after another.
    fn planar_values(&self) -> Vec<f64> {
        match self {
            VolumeData::Scalar(v) => v.data().to_vec(),
            VolumeData::Vector(f) => (0..3).flat_map(|c| f.data().iter().map(move |v| v[c])).collect(),
        }
    }

    fn from_planar(grid: Grid, values: Vec<f64>, vector: bool, kind: &str) -> Result<Self> {
        if vector {
            let n = grid.len();
            let data: Vec<Vec3> = (0..n).map(|i| [values[i], values[n + i], values[2 * n + i]]).collect();
            let kind = if kind == "velocity" {
                FieldKind::Velocity
            } else {
                FieldKind::Displacement
            };
            Ok(VolumeData::Vector(VectorField3::new(grid, data, kind)?))
        } else {
            let mask_like = values.iter().all(|v| (0.0..=1.0).contains(v));
            let kind = if kind == "mask" && mask_like {
                VolumeKind::Mask
            } else {
                VolumeKind::Intensity
            };
            Ok(VolumeData::Scalar(Volume3::new(grid, values, kind)?))
        }
    }
}

fn encode(values: &[f64], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::Float32 => values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::Uint8 => values.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::Uint8 => bytes.iter().map(|&b| b as f64).collect(),
    }
}

/// Widens a stored float32 to the shortest decimal that round-trips it, so
/// geometry such as a 1.37 mm spacing reads back as exactly 1.37.
fn widen(x: f32) -> f64 {
    x.to_string().parse().expect("float display parses")
}

fn is_nifti(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "nii")
}

fn is_native(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Reads a `.nii` file or a native `.json` header with its raw payload.
pub fn read_volume(path: &Path) -> Result<VolumeData> {
    if is_nifti(path) {
        read_nifti(path)
    } else if is_native(path) {
        read_native(path)
    } else {
        Err(Error::UnsupportedFile {
            path: path.into(),
            reason: "expected a .nii or .json volume".into(),
        })
    }
}

pub fn write_volume(path: &Path, data: &VolumeData) -> Result<()> {
    if is_nifti(path) {
        write_nifti(path, data)
    } else if is_native(path) {
        write_native(path, data)
    } else {
        Err(Error::UnsupportedFile {
            path: path.into(),
            reason: "expected a .nii or .json volume".into(),
        })
    }
}

pub fn read_scalar(path: &Path) -> Result<Volume3> {
    match read_volume(path)? {
        VolumeData::Scalar(v) => Ok(v),
        VolumeData::Vector(_) => Err(Error::UnsupportedFile {
            path: path.into(),
            reason: "expected a scalar volume, found a vector field".into(),
        }),
    }
}

pub fn read_field(path: &Path) -> Result<VectorField3> {
    match read_volume(path)? {
        VolumeData::Vector(f) => Ok(f),
        VolumeData::Scalar(_) => Err(Error::UnsupportedFile {
            path: path.into(),
            reason: "expected a vector field, found a scalar volume".into(),
        }),
    }
}

pub fn write_scalar(path: &Path, vol: &Volume3) -> Result<()> {
    write_volume(path, &VolumeData::Scalar(vol.clone()))
}

pub fn write_field(path: &Path, field: &VectorField3) -> Result<()> {
    write_volume(path, &VolumeData::Vector(field.clone()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
