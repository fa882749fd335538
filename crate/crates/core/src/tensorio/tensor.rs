//! Minimal little-endian tensor container (`.ovot`).
//!
//! Layout:
//!
//! ```text
//! offset  size       field
//! 0       4          magic "OVOT"
//! 4       1          version (1)
//! 5       1          dtype (1 = f32 little-endian)
//! 6       1          ndim (1..=4)
//! 7       8 * ndim   dims, u64 little-endian
//! ...     4 * prod   payload, row-major
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::TensorIoError;

pub const MAGIC: [u8; 4] = *b"OVOT";
pub const VERSION: u8 = 1;
pub const MAX_NDIM: usize = 4;
const HEADER_FIXED: usize = 7;

/// Element type code stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorFile {
    dims: Vec<u64>,
    data: Vec<f32>,
}

impl PartialEq for TensorFile {
    /// Bitwise comparison, so NaN payloads compare equal to themselves.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl TensorFile {
    pub fn new(dims: Vec<u64>, data: Vec<f32>) -> Result<Self, TensorIoError> {
        validate_dims(&dims)?;
        let expected = element_count(&dims)?;
        if data.len() as u64 != expected {
            return Err(TensorIoError::ShapeMismatch {
                expected,
                actual: data.len() as u64,
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        DType::F32
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Build a rank-2 tensor from a matrix (stored row-major).
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)] as f32);
            }
        }
        Self {
            dims: vec![m.nrows() as u64, m.ncols() as u64],
            data,
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            dims: vec![v.len() as u64],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    /// Interpret a rank-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>, TensorIoError> {
        if self.dims.len() != 2 {
            return Err(TensorIoError::RankMismatch {
                expected: 2,
                actual: self.dims.len(),
            });
        }
        let (rows, cols) = (self.dims[0] as usize, self.dims[1] as usize);
        Ok(DMatrix::from_row_iterator(
            rows,
            cols,
            self.data.iter().map(|&x| f64::from(x)),
        ))
    }

    /// Interpret a rank-1 tensor (or a rank-2 tensor with one row) as a vector.
    pub fn to_vector(&self) -> Result<DVector<f64>, TensorIoError> {
        match self.dims.as_slice() {
            [_] | [1, _] => Ok(DVector::from_iterator(
                self.data.len(),
                self.data.iter().map(|&x| f64::from(x)),
            )),
            _ => Err(TensorIoError::RankMismatch {
                expected: 1,
                actual: self.dims.len(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(DType::F32 as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < HEADER_FIXED {
            return Err(TensorIoError::TruncatedHeader);
        }
        if bytes[0..4] != MAGIC {
            return Err(TensorIoError::BadMagic([
                bytes[0], bytes[1], bytes[2], bytes[3],
            ]));
        }
        if bytes[4] != VERSION {
            return Err(TensorIoError::UnsupportedVersion(bytes[4]));
        }
        let dtype = DType::from_code(bytes[5]).ok_or(TensorIoError::UnsupportedDType(bytes[5]))?;
        let ndim = bytes[6] as usize;
        if !(1..=MAX_NDIM).contains(&ndim) {
            return Err(TensorIoError::BadRank(ndim));
        }
        let header_len = HEADER_FIXED + 8 * ndim;
        if bytes.len() < header_len {
            return Err(TensorIoError::TruncatedHeader);
        }
        let dims: Vec<u64> = bytes[HEADER_FIXED..header_len]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        validate_dims(&dims)?;
        let count = element_count(&dims)?;
        let expected = count
            .checked_mul(dtype.size() as u64)
            .ok_or(TensorIoError::Overflow)?;
        let actual = (bytes.len() - header_len) as u64;
        if actual < expected {
            return Err(TensorIoError::TruncatedPayload { expected, actual });
        }
        if actual > expected {
            return Err(TensorIoError::TrailingBytes {
                expected,
                actual,
            });
        }
        let data = bytes[header_len..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { dims, data })
    }
}

fn validate_dims(dims: &[u64]) -> Result<(), TensorIoError> {
    if !(1..=MAX_NDIM).contains(&dims.len()) {
        return Err(TensorIoError::BadRank(dims.len()));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(TensorIoError::ZeroDim { axis });
    }
    Ok(())
}

fn element_count(dims: &[u64]) -> Result<u64, TensorIoError> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or(TensorIoError::Overflow)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    TensorFile::from_bytes(&bytes).map_err(|e| e.at(path))
}

pub fn write_tensor(t: &TensorFile, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}
