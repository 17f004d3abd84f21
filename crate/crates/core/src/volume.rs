//! 3D scalar volumes and their on-disk representation.
//!
//! On disk a volume is a raw little-endian `f32` file (x-fastest) next to a
//! JSON sidecar with the same stem: `{"dims": [x,y,z], "voxel_mm": [..], "dtype": "f32le"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a standard-space T1w grid after resampling to 1 mm.
pub const STANDARD_DIMS: [usize; 3] = [182, 218, 182];

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_mm: [f64; 3],
    data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    pub dtype: String,
}

pub const DTYPE_F32LE: &str = "f32le";

impl Volume {
    pub fn new(dims: [usize; 3], voxel_mm: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {dims:?}")));
        }
        if voxel_mm.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Shape(format!(
                "voxel size must be strictly positive, got {voxel_mm:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Shape(format!(
                "volume data length {} does not match dims {dims:?} ({n})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Volume { dims, voxel_mm, data })
    }

    /// Isotropic 1 mm volume.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        Self::new(dims, [1.0; 3], data)
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Volume {
            dims,
            voxel_mm: [1.0; 3],
            data: vec![0.0; n],
        }
    }

    /// Build a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            voxel_mm: [1.0; 3],
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> [f64; 3] {
        self.voxel_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub(crate) fn from_parts_unchecked(dims: [usize; 3], voxel_mm: [f64; 3], data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Volume { dims, voxel_mm, data }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            dims: self.dims,
            voxel_mm: self.voxel_mm,
            dtype: DTYPE_F32LE.to_string(),
        }
    }

    /// Write `raw_path` and its sidecar (same stem, `.json`).
    pub fn write(&self, raw_path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(raw_path, bytes).map_err(|e| Error::io(raw_path, e))?;
        let side = sidecar_path(raw_path);
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn read(raw_path: &Path) -> Result<Self> {
        let side = read_sidecar(raw_path)?;
        let bytes = fs::read(raw_path).map_err(|e| Error::io(raw_path, e))?;
        let n: usize = side.dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Shape(format!(
                "{}: expected {} bytes for dims {:?}, found {}",
                raw_path.display(),
                n * 4,
                side.dims,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(side.dims, side.voxel_mm, data)
    }
}

pub fn sidecar_path(raw_path: &Path) -> PathBuf {
    raw_path.with_extension("json")
}

/// Read and validate a sidecar without loading voxel data.
pub fn read_sidecar(raw_path: &Path) -> Result<Sidecar> {
    let side_path = sidecar_path(raw_path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    if side.dtype != DTYPE_F32LE {
        return Err(Error::Schema(format!(
            "{}: unsupported dtype `{}`",
            side_path.display(),
            side.dtype
        )));
    }
    if side.dims.contains(&0) || side.voxel_mm.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Schema(format!("{}: invalid geometry", side_path.display())));
    }
    Ok(side)
}
