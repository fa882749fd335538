//! Per-frame camera records, stored one JSON object per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::TensorIoError;

/// Tolerance on `RᵀR = I` and `det R = 1` for rotations read from disk.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame_index: u64,
    /// World-to-camera rotation, row-major.
    pub rotation_w2c: [[f64; 3]; 3],
    pub translation_w2c: [f64; 3],
    pub intrinsics: Intrinsics,
    /// False when the upstream pose model failed on this frame.
    pub valid: bool,
}

impl PoseRecord {
    pub fn rotation(&self) -> Matrix3<f64> {
        let r = &self.rotation_w2c;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation_w2c)
    }

    pub fn from_parts(
        frame_index: u64,
        rotation_w2c: &Matrix3<f64>,
        translation_w2c: &Vector3<f64>,
        intrinsics: Intrinsics,
    ) -> Self {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rotation_w2c[(r, c)];
            }
        }
        Self {
            frame_index,
            rotation_w2c: rows,
            translation_w2c: [translation_w2c.x, translation_w2c.y, translation_w2c.z],
            intrinsics,
            valid: true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation_w2c.iter().flatten().all(|v| v.is_finite())
            && self.translation_w2c.iter().all(|v| v.is_finite())
            && [
                self.intrinsics.fx,
                self.intrinsics.fy,
                self.intrinsics.cx,
                self.intrinsics.cy,
            ]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Schema check. Records flagged invalid are accepted as-is; the scorer
    /// marks their frames invalid instead.
    pub fn validate(&self) -> Result<(), TensorIoError> {
        if !self.valid {
            return Ok(());
        }
        let bad = |reason: String| TensorIoError::InvalidPose {
            frame_index: self.frame_index,
            reason,
        };
        if !self.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        if self.intrinsics.fx <= 0.0 || self.intrinsics.fy <= 0.0 {
            return Err(bad("focal lengths must be positive".into()));
        }
        let dev = rotation_deviation(&self.rotation());
        if dev > ROTATION_TOLERANCE {
            return Err(bad(format!("rotation not orthonormal (deviation {dev:.3e})")));
        }
        Ok(())
    }
}

/// Largest of `max |RᵀR − I|` and `|det R − 1|`; infinite for non-finite input.
pub fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    if !r.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>, TensorIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_poses(&text).map_err(|e| e.at(path))
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseRecord>, TensorIoError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord =
            serde_json::from_str(line).map_err(|e| TensorIoError::PoseSyntax {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_poses(poses: &[PoseRecord], path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let io_err = |source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    for p in poses {
        serde_json::to_writer(&mut buf, p).expect("pose records always serialize");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}
