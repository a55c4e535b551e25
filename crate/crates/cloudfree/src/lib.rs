//! Reconstruction of cloud-free optical satellite images from short multi-temporal,
//! multi-modal input series, with per-pixel aleatoric uncertainty.
//!
//! The crate is organised around six parts:
//!
//! - [`model`] — the reconstruction network: a shared full-resolution spatial encoder
//!   applied to every date, attention-based temporal aggregation, and a decoding head
//!   that emits the reconstruction together with per-pixel variances.
//! - [`losses`] — L2 regression and Gaussian negative log-likelihood under diagonal
//!   and isotropic covariance models, with analytic gradients.
//! - [`uncertainty`] — calibration measurement (UCE, RMV binning), deep-ensemble
//!   fusion of means and variances, and discard curves.
//! - [`metrics`] — image-quality metrics: MAE, RMSE, PSNR, SSIM, SAM.
//! - [`data`] — synthetic multi-temporal scene generation with parametric cloud,
//!   haze and shadow corruption, SAR-like auxiliary channels, and dataset persistence.
//! - [`harness`] — training loop, evaluation pipeline, ensembles, and report emission.
//!
//! All data-parallel inner loops run on rayon when the `parallel` feature is enabled
//! (default) and fall back to sequential execution otherwise. Both paths share one
//! fixed chunk decomposition for floating-point reductions, so results are bitwise
//! identical either way; see [`par`].

pub mod data;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod plot;
pub mod uncertainty;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameters, inconsistent shapes declared up front).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid runtime input (empty batch, mismatched array shapes, non-finite values).
    #[error("input error: {0}")]
    Input(String),
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A computation produced a non-finite or otherwise invalid numerical result.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A requested item does not exist.
    #[error("not found: {0}")]
    NotFound(String),
    /// A file could not be loaded or failed validation.
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    /// One ensemble member failed; carries which one and why.
    #[error("ensemble member {member}: {source}")]
    Ensemble { member: usize, source: Box<Error> },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub mod cfgfile {
    //! Small helpers for the human-readable `key = value` config files (TOML).

    use crate::{Error, Result};
    use std::path::Path;

    pub fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(value)
            .map_err(|e| Error::Config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_string<T: serde::Serialize>(value: &T) -> Result<String> {
        toml::to_string_pretty(value).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
        toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))
    }
}
