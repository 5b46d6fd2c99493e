//! Experiment plumbing around the algorithms: configuration, on-disk formats
//! and run directories. The command-line front end is a thin layer over
//! [`run`].

pub mod config;
pub mod container;
pub mod emit;
pub mod problem;
pub mod run;
pub mod store;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use config::{ExperimentConfig, ProblemConfig, ProblemKind, SeedConfig, StylizedConfig, SCHEMA_VERSION, SEED_ENV};
pub use container::TensorContainer;
pub use problem::Problem;
pub use store::{ArtifactKind, Manifest};

/// Writes through a sibling temporary file and a rename, so readers never
/// see a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}
