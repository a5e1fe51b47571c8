pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod encoder;
pub mod error;
pub mod localization;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod params;
pub mod srnet;
pub mod trainer;

use std::path::{Path, PathBuf};

pub use error::{Error, Result};

/// Environment variable naming the directory that relative weight paths resolve against.
pub const HOME_ENV: &str = "SEMGUIDE_HOME";

/// Relative paths are joined onto `$SEMGUIDE_HOME` when it is set.
pub fn resolve_weights_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Some(home) = std::env::var_os(HOME_ENV) {
            return PathBuf::from(home).join(p);
        }
    }
    p.to_path_buf()
}
