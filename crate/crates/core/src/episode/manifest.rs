use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Episode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema { path: PathBuf, found: u32 },
}

impl Episode {
    /// Pretty JSON with a trailing newline; stable for a given episode.
    pub fn to_manifest_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("episode serializes");
        s.push('\n');
        s
    }

    pub fn from_manifest_str(text: &str, origin: &Path) -> Result<Episode, ManifestError> {
        let ep: Episode = serde_json::from_str(text).map_err(|source| ManifestError::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        if ep.schema_version != SCHEMA_VERSION {
            return Err(ManifestError::UnsupportedSchema {
                path: origin.to_path_buf(),
                found: ep.schema_version,
            });
        }
        Ok(ep)
    }

    pub fn load_manifest(path: &Path) -> Result<Episode, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_manifest_str(&text, path)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_manifest_string()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Loads every `*.json` manifest in `dir`, sorted by file name.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Episode>, ManifestError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| ManifestError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| Episode::load_manifest(p)).collect()
}
