//! On-disk formats shared with the feature/geometry exporters.
//!
//! Directory convention:
//!
//! ```text
//! <video_id>/depth_<frame>.ovot    H × W depth map
//! <video_id>/poses.txt             one PoseRecord JSON object per line
//! <video_id>/features.ovot         views × d pooled features
//! model/lora_B_<layer>.ovot        d_out × r
//! model/classifier_W.ovot          C × d
//! model/classifier_b.ovot          C
//! model/classes.txt                one class name per line, row order of W
//! ```

mod manifest;
mod pose;
mod tensor;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{
    load_manifest, save_manifest, Manifest, ManifestRow, Origin, ReviewFlag, Split, COLUMNS,
};
pub use pose::{
    parse_poses, read_poses, rotation_deviation, write_poses, Intrinsics, PoseRecord,
    ROTATION_TOLERANCE,
};
pub use tensor::{read_tensor, write_tensor, DType, TensorFile, MAGIC, MAX_NDIM, VERSION};

pub fn depth_path(root: &Path, video_id: &str, frame_index: u64) -> PathBuf {
    root.join(video_id).join(format!("depth_{frame_index}.ovot"))
}

pub fn poses_path(root: &Path, video_id: &str) -> PathBuf {
    root.join(video_id).join("poses.txt")
}

pub fn features_path(root: &Path, video_id: &str) -> PathBuf {
    root.join(video_id).join("features.ovot")
}

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {inner}")]
    InFile {
        path: PathBuf,
        #[source]
        inner: Box<TensorIoError>,
    },
    #[error("bad magic {0:?}, expected \"OVOT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDType(u8),
    #[error("ndim {0} outside 1..=4")]
    BadRank(usize),
    #[error("dimension {axis} is zero")]
    ZeroDim { axis: usize },
    #[error("header truncated")]
    TruncatedHeader,
    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },
    #[error("payload has trailing bytes: expected {expected}, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("element count overflows")]
    Overflow,
    #[error("shape holds {expected} elements but {actual} were given")]
    ShapeMismatch { expected: u64, actual: u64 },
    #[error("expected a rank-{expected} tensor, found rank {actual}")]
    RankMismatch { expected: usize, actual: usize },
    #[error("pose line {line}: {message}")]
    PoseSyntax { line: usize, message: String },
    #[error("pose frame {frame_index}: {reason}")]
    InvalidPose { frame_index: u64, reason: String },
    #[error("manifest line {line}: {message}")]
    ManifestSyntax { line: usize, message: String },
    #[error("manifest has unknown column {0:?}")]
    UnknownColumn(String),
    #[error("manifest is missing column {0:?}")]
    MissingColumn(String),
    #[error("duplicate video_id {0:?}")]
    DuplicateVideoId(String),
    #[error("video {video_id:?}: {message}")]
    ManifestConstraint { video_id: String, message: String },
}

impl TensorIoError {
    pub(crate) fn at(self, path: &Path) -> Self {
        match self {
            e @ (TensorIoError::Io { .. } | TensorIoError::InFile { .. }) => e,
            inner => TensorIoError::InFile {
                path: path.to_path_buf(),
                inner: Box::new(inner),
            },
        }
    }

    /// The underlying error with any file context stripped.
    pub fn kind(&self) -> &TensorIoError {
        match self {
            TensorIoError::InFile { inner, .. } => inner.kind(),
            other => other,
        }
    }
}
