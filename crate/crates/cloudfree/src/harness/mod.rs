//! Experiment orchestration: the training loop with checkpointing and loss
//! logging ([`train`], [`train_ensemble`]), and the evaluation pipeline that
//! turns predictions into metric/calibration/discard reports
//! ([`evaluate`], [`evaluate_ensemble`], [`write_report`]).

mod adam;
mod eval;
mod train;

pub use adam::Adam;
pub use eval::{
    evaluate, evaluate_ensemble, write_report, Calibration, EnsemblePredictor, EvalOptions,
    EvalReport, ImageRow, NetPredictor, Panel, PerfectOracle, Predictor,
};
pub use train::{train, train_ensemble, train_with, EpochStats, TrainReport};

use crate::model::CovMode;
use crate::nn::{Feat, Scalar};
use crate::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

/// Which objective drives the gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Plain mean squared error on the reconstruction.
    L2,
    /// Gaussian negative log-likelihood; the covariance shape follows the
    /// model's `cov_mode`.
    Nll,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::Nll => "nll",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "nll" => Ok(LossKind::Nll),
            other => Err(Error::Input(format!("unknown loss `{other}` (expected l2 or nll)"))),
        }
    }
}

/// Training hyperparameters. Everything that influences the result is in
/// here or in the model config, so (config, seed, dataset) fully determines
/// the run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplicative learning-rate factor per epoch: epoch e runs at
    /// `lr · lr_decay^e`.
    pub lr_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub checkpoint_dir: PathBuf,
    /// Validate (and consider checkpointing) every this many epochs; the
    /// final epoch always validates.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 4,
            epochs: 20,
            lr_decay: 0.8,
            seed: 0,
            loss: LossKind::Nll,
            checkpoint_dir: PathBuf::from("checkpoints"),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive and finite", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay = {} outside (0, 1]", self.lr_decay));
        }
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Reject loss/covariance combinations that cannot work before any data is
/// touched.
fn check_loss_model(loss: LossKind, cov: CovMode) -> Result<()> {
    if loss == LossKind::Nll && cov == CovMode::None {
        return Err(Error::Config(
            "nll loss needs a variance head; set cov_mode to isotropic or diagonal \
             (or train with l2)"
                .into(),
        ));
    }
    Ok(())
}

/// `[B, C, H, W]` activations → `(B·H·W, C)` pixel rows, the layout the
/// loss functions work in.
pub fn pixel_rows<F: Scalar>(a: &Feat<F>) -> Array2<F> {
    let (b, c, h, w) = a.dim();
    a.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((b * h * w, c))
        .expect("same element count")
}

/// Single-image variant: `[C, H, W]` → `(H·W, C)`.
pub fn pixel_rows3<F: Scalar>(a: &Array3<F>) -> Array2<F> {
    pixel_rows(&a.clone().insert_axis(Axis(0)))
}

/// Inverse of [`pixel_rows`]: `(B·H·W, C)` rows back onto the `[B, C, H, W]`
/// grid.
pub fn pixel_grid<F: Scalar>(rows: Array2<F>, b: usize, h: usize, w: usize) -> Feat<F> {
    let c = rows.ncols();
    rows.into_shape_with_order((b, h, w, c))
        .expect("same element count")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

/// The model reads the first `c_in` input channels. Channels are laid out
/// optical-first, so a model with `c_in = K` trained without SAR evaluates
/// on a full dataset by simply taking the prefix.
pub(crate) fn adapt_channels(x: &Feat<f32>, c_in: usize) -> Result<std::borrow::Cow<'_, Feat<f32>>> {
    use std::borrow::Cow;
    let c = x.dim().1;
    match c_in.cmp(&c) {
        std::cmp::Ordering::Equal => Ok(Cow::Borrowed(x)),
        std::cmp::Ordering::Less => Ok(Cow::Owned(
            x.slice(ndarray::s![.., ..c_in, .., ..]).as_standard_layout().to_owned(),
        )),
        std::cmp::Ordering::Greater => Err(Error::Config(format!(
            "model expects {c_in} input channels but the dataset provides only {c}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn pixel_rows_round_trip_preserves_layout() {
        let a = Array4::from_shape_fn((2, 3, 4, 5), |(b, c, y, x)| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        let rows = pixel_rows(&a);
        assert_eq!(rows.dim(), (2 * 4 * 5, 3));
        // Row = one pixel, column = one channel.
        assert_eq!(rows[[0, 0]], 0.0);
        assert_eq!(rows[[0, 2]], 200.0);
        assert_eq!(rows[[1, 0]], 1.0); // next pixel along x
        assert_eq!(pixel_grid(rows, 2, 4, 5), a);
    }

    #[test]
    fn train_config_defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = crate::cfgfile::to_string(&cfg).unwrap();
        let back: TrainConfig = crate::cfgfile::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        for breakage in [
            &mut |c: &mut TrainConfig| c.lr = 0.0,
            &mut |c: &mut TrainConfig| c.lr_decay = 0.0,
            &mut |c: &mut TrainConfig| c.lr_decay = 1.1,
            &mut |c: &mut TrainConfig| c.epochs = 0,
            &mut |c: &mut TrainConfig| c.batch_size = 0,
        ] as [&mut dyn FnMut(&mut TrainConfig); 5]
        {
            let mut cfg = TrainConfig::default();
            breakage(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn channel_adaptation_takes_prefixes_only() {
        let x = Array4::<f32>::from_shape_fn((2, 5, 3, 3), |(_, c, _, _)| c as f32);
        assert!(matches!(adapt_channels(&x, 5).unwrap(), std::borrow::Cow::Borrowed(_)));
        let sliced = adapt_channels(&x, 3).unwrap();
        assert_eq!(sliced.dim(), (2, 3, 3, 3));
        assert!(sliced.iter().all(|&v| v < 3.0));
        assert!(adapt_channels(&x, 6).is_err());
    }
}
