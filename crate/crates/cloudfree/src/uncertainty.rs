//! Uncertainty quantification on top of the probabilistic outputs: fusing an
//! ensemble of Gaussian predictions, root-mean-variance summaries, expected
//! calibration error over uncertainty bins, and sparsification (discard)
//! curves for uncertainty-driven quality control.
//!
//! Calibration compares *predicted* spread against *observed* error on the
//! same scale: pixels are grouped into bins by their root-mean-variance, and
//! within each bin the RMSE of the actual residuals is held against the RMV.
//! A perfectly calibrated predictor has the two equal in every bin.

use crate::{Error, Result};
use ndarray::{Array3, ArrayView3, Zip};
use std::fmt::Write as _;

/// Number of calibration bins used throughout unless a caller overrides it.
pub const DEFAULT_BINS: usize = 20;

/// How calibration bin edges are placed over the observed uncertainty range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    /// Equal-width bins between the smallest and largest observed RMV. The
    /// default; bins can be empty and then contribute nothing.
    EqualWidth,
    /// Edges at empirical quantiles, so occupancy is roughly uniform.
    Quantile,
}

/// Per-bin calibration summary plus the scalar uncertainty calibration error.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// `bins + 1` edges on the RMV (σ, not σ²) scale.
    pub bin_edges: Vec<f64>,
    pub bin_counts: Vec<usize>,
    /// Observed error per bin: √(mean squared error), 0 for empty bins.
    pub bin_rmse: Vec<f64>,
    /// Predicted spread per bin: √(mean variance), 0 for empty bins.
    pub bin_rmv: Vec<f64>,
    /// `Σ_p (N_p/N) · |RMSE_p − RMV_p|` over non-empty bins.
    pub uce: f64,
    pub total_count: usize,
}

impl CalibrationReport {
    /// Render as CSV, one row per bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo, bin_hi, count, rmse, rmv\n");
        for p in 0..self.bin_counts.len() {
            writeln!(
                s,
                "{}, {}, {}, {}, {}",
                self.bin_edges[p],
                self.bin_edges[p + 1],
                self.bin_counts[p],
                self.bin_rmse[p],
                self.bin_rmv[p]
            )
            .expect("writing to String cannot fail");
        }
        s
    }
}

/// A fused ensemble prediction: one predictive mean and one total variance
/// (aleatoric average plus the spread of the member means).
#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    pub mean: Array3<f64>,
    pub variance: Array3<f64>,
}

/// Fuse `M` Gaussian predictions into a single mixture-moment Gaussian:
///
/// ```text
/// μ  = (1/M) Σ_m μ_m
/// σ² = (1/M) Σ_m σ²_m  +  (1/M) Σ_m μ_m²  −  μ²
/// ```
///
/// Member variances may be per-channel (same shape as the mean) or shared
/// across channels (`[1, H, W]`); the fused variance is always per-channel.
/// Cancellation can leave the epistemic part a hair below zero, which is
/// clipped to zero; anything below −1e-12 indicates a real inconsistency in
/// the inputs and is reported as an error.
pub fn ensemble_fuse(means: &[Array3<f64>], vars: &[Array3<f64>]) -> Result<EnsembleOutput> {
    if means.is_empty() {
        return Err(Error::Input("ensemble fusion needs at least one member".into()));
    }
    if means.len() != vars.len() {
        return Err(Error::Input(format!(
            "{} member means but {} member variances",
            means.len(),
            vars.len()
        )));
    }
    let dim = means[0].dim();
    let (k, h, w) = dim;
    let inv_m = 1.0 / means.len() as f64;

    let mut mean = Array3::<f64>::zeros(dim);
    let mut e_var = Array3::<f64>::zeros(dim); // (1/M) Σ σ²_m
    let mut e_sq = Array3::<f64>::zeros(dim); // (1/M) Σ μ_m²
    for (m, (mu, var)) in means.iter().zip(vars).enumerate() {
        if mu.dim() != dim {
            return Err(Error::Input(format!(
                "member {m} mean shape {:?} != member 0 shape {dim:?}",
                mu.dim()
            )));
        }
        if var.dim() != dim && var.dim() != (1, h, w) {
            return Err(Error::Input(format!(
                "member {m} variance shape {:?} fits neither {dim:?} nor (1, {h}, {w})",
                var.dim()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) || var.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input(format!("member {m} has non-finite or negative values")));
        }
        Zip::from(&mut mean).and(mu).for_each(|a, &b| *a += b * inv_m);
        Zip::from(&mut e_sq).and(mu).for_each(|a, &b| *a += b * b * inv_m);
        let vb = var.broadcast(dim).expect("checked shape");
        Zip::from(&mut e_var).and(&vb).for_each(|a, &b| *a += b * inv_m);
    }

    let mut variance = Array3::<f64>::zeros(dim);
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                // The epistemic part is formed on its own before the
                // aleatoric mean is added: E[μ²] − (E[μ])² cancels exactly
                // for identical members, and folding the aleatoric term into
                // the same expression would reintroduce rounding there.
                let epi = e_sq[[c, y, x]] - mean[[c, y, x]].powi(2);
                if epi < -1e-12 {
                    return Err(Error::Numerical(format!(
                        "epistemic variance {epi} < 0 at channel {c}, pixel ({y}, {x})"
                    )));
                }
                variance[[c, y, x]] = e_var[[c, y, x]] + epi.max(0.0);
            }
        }
    }
    Ok(EnsembleOutput { mean, variance })
}

/// Root-mean-variance of a predicted variance map: `√(mean σ²)` over all
/// channels and pixels. This is the image-level uncertainty summary.
pub fn rmv(variance: ArrayView3<f64>) -> Result<f64> {
    if variance.is_empty() {
        return Err(Error::Input("empty variance map".into()));
    }
    if let Some(v) = variance.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Input(format!("invalid variance value {v}")));
    }
    let s = variance.to_slice().expect("standard layout");
    Ok((crate::par::sum_with(s.len(), |i| s[i]) / s.len() as f64).sqrt())
}

/// Pixel-level calibration. `per_pixel_sq_error` and `per_pixel_mean_var`
/// hold, for each pixel, the squared residual and the predicted variance,
/// both already averaged over channels. Binning happens on the σ scale
/// (`√variance`); the top edge is inclusive so the largest value still lands
/// in the last bin.
pub fn uce(
    per_pixel_sq_error: &[f64],
    per_pixel_mean_var: &[f64],
    bins: usize,
    binning: Binning,
) -> Result<CalibrationReport> {
    let keys: Vec<f64> = per_pixel_mean_var.iter().map(|v| v.sqrt()).collect();
    calibrate(&keys, per_pixel_sq_error, per_pixel_mean_var, bins, binning)
}

/// Image-level calibration from per-image RMSE and RMV summaries. Bins hold
/// whole images; within a bin the image values recombine as root-mean-squares,
/// which is exact when every image has the same pixel count.
pub fn uce_image(
    per_image_rmse: &[f64],
    per_image_rmv: &[f64],
    bins: usize,
    binning: Binning,
) -> Result<CalibrationReport> {
    let sq_err: Vec<f64> = per_image_rmse.iter().map(|e| e * e).collect();
    let sq_unc: Vec<f64> = per_image_rmv.iter().map(|u| u * u).collect();
    calibrate(per_image_rmv, &sq_err, &sq_unc, bins, binning)
}

/// Shared core: `keys` (σ scale) choose the bin; `sq_err`/`sq_unc` are the
/// squared quantities whose bin means turn back into RMSE/RMV.
fn calibrate(
    keys: &[f64],
    sq_err: &[f64],
    sq_unc: &[f64],
    bins: usize,
    binning: Binning,
) -> Result<CalibrationReport> {
    let n = keys.len();
    if n == 0 {
        return Err(Error::Input("calibration needs at least one sample".into()));
    }
    if sq_err.len() != n || sq_unc.len() != n {
        return Err(Error::Input(format!(
            "length mismatch: {} keys, {} errors, {} uncertainties",
            n,
            sq_err.len(),
            sq_unc.len()
        )));
    }
    if bins == 0 {
        return Err(Error::Config("bin count must be positive".into()));
    }
    for (name, xs) in [("key", keys), ("squared error", sq_err), ("variance", sq_unc)] {
        if let Some((i, v)) = xs.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!("invalid {name} {v} at index {i}")));
        }
    }

    let edges = match binning {
        Binning::EqualWidth => {
            let lo = keys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = keys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (0..=bins).map(|p| lo + (hi - lo) * p as f64 / bins as f64).collect::<Vec<_>>()
        }
        Binning::Quantile => {
            let mut sorted = keys.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            // Edge p sits at the p/bins quantile (nearest rank).
            (0..=bins)
                .map(|p| {
                    let rank = ((p * (n - 1)) as f64 / bins as f64).round() as usize;
                    sorted[rank.min(n - 1)]
                })
                .collect::<Vec<_>>()
        }
    };

    let mut counts = vec![0usize; bins];
    let mut err_sum = vec![0.0f64; bins];
    let mut unc_sum = vec![0.0f64; bins];
    for i in 0..n {
        // Largest p with edges[p] ≤ key, clamped into range: half-open bins
        // with an inclusive top edge.
        let b = edges[1..bins].partition_point(|&e| e <= keys[i]).min(bins - 1);
        counts[b] += 1;
        err_sum[b] += sq_err[i];
        unc_sum[b] += sq_unc[i];
    }

    let mut bin_rmse = vec![0.0f64; bins];
    let mut bin_rmv = vec![0.0f64; bins];
    let mut uce = 0.0;
    for p in 0..bins {
        if counts[p] == 0 {
            continue;
        }
        bin_rmse[p] = (err_sum[p] / counts[p] as f64).sqrt();
        bin_rmv[p] = (unc_sum[p] / counts[p] as f64).sqrt();
        uce += counts[p] as f64 / n as f64 * (bin_rmse[p] - bin_rmv[p]).abs();
    }
    Ok(CalibrationReport { bin_edges: edges, bin_counts: counts, bin_rmse, bin_rmv, uce, total_count: n })
}

/// Sparsification curve for uncertainty-driven QC. Pixels are ranked by
/// predicted variance, most confident first (ties keep input order), and the
/// k-th point is `(k/N, RMSE over the k most confident pixels)`. If the
/// uncertainty is informative the curve rises towards the full-set RMSE.
pub fn discard_curve(
    per_pixel_sq_error: &[f64],
    per_pixel_mean_var: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let n = per_pixel_sq_error.len();
    if n == 0 {
        return Err(Error::Input("discard curve needs at least one pixel".into()));
    }
    if per_pixel_mean_var.len() != n {
        return Err(Error::Input(format!(
            "{} errors vs {} uncertainties",
            n,
            per_pixel_mean_var.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal variances keep their original pixel order, so the
    // curve is reproducible across runs and thread counts.
    order.sort_by(|&a, &b| {
        per_pixel_mean_var[a].partial_cmp(&per_pixel_mean_var[b]).expect("finite variance")
    });
    let mut curve = Vec::with_capacity(n);
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        acc += per_pixel_sq_error[i];
        curve.push(((k + 1) as f64 / n as f64, (acc / (k + 1) as f64).sqrt()));
    }
    Ok(curve)
}
