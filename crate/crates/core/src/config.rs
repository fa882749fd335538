//! TOML configuration shared by the command-line tools.
//!
//! Every section and field is optional; missing values take the defaults.
//!
//! ```toml
//! [scoring]
//! timestamp_pattern = '^(?P<key>\d{8}_\d{4})_'
//! seed = 7
//!
//! [later]
//! alpha = 1.0
//! queue_capacity = 256
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::later::{DEFAULT_ALPHA, DEFAULT_SV_THRESHOLD};
use crate::ovosplit::SplitConfig;
use crate::viewgeom::GeometryConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Regex with a capture group (preferably named `key`) that extracts the
    /// timestamp key from a video id. Unset: use the manifest column.
    pub timestamp_pattern: Option<String>,
    pub seed: u64,
}

/// Which source features feed the source center.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFeatures {
    /// The designated (first) view of each training video.
    #[default]
    FirstView,
    AllViews,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaterConfig {
    pub alpha: f64,
    pub sv_threshold_rel: f64,
    /// Sliding-window size; unset keeps a cumulative mean.
    pub queue_capacity: Option<usize>,
    pub source_features: SourceFeatures,
}

impl Default for LaterConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            sv_threshold_rel: DEFAULT_SV_THRESHOLD,
            queue_capacity: None,
            source_features: SourceFeatures::FirstView,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OvoConfig {
    pub geometry: GeometryConfig,
    pub scoring: ScoringConfig,
    pub split: SplitConfig,
    pub later: LaterConfig,
}

impl OvoConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Default config when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
