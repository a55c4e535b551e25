//! Image-quality metrics for reconstructed imagery: MAE, RMSE, PSNR, SSIM and
//! the spectral angle. Everything here runs in `f64` regardless of the model's
//! working precision — metric values end up in reports and CSVs, and we don't
//! want their last digits to depend on which scalar type the network used.
//!
//! Inputs are `[K, H, W]` views (channels first), predicted vs. reference.

use crate::{Error, Result};
use ndarray::ArrayView3;

/// Which local window SSIM uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimWindow {
    /// 7×7 box window, the default.
    Uniform7,
    /// 11×11 Gaussian window with σ = 1.5.
    Gaussian11,
}

/// Units for the spectral angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamUnits {
    Degrees,
    Radians,
}

/// Shared metric settings. `ssim_c1`/`ssim_c2` are the usual stabilisers
/// `(0.01·max)²` and `(0.03·max)²`; [`MetricConfig::new`] derives them from
/// the data ceiling so callers only pick that one number.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricConfig {
    /// Largest value the data can take (peak signal for PSNR).
    pub data_max: f64,
    pub ssim_window: SsimWindow,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub sam_units: SamUnits,
}

impl MetricConfig {
    pub fn new(data_max: f64) -> Self {
        Self {
            data_max,
            ssim_window: SsimWindow::Uniform7,
            ssim_c1: (0.01 * data_max).powi(2),
            ssim_c2: (0.03 * data_max).powi(2),
            sam_units: SamUnits::Degrees,
        }
    }
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self::new(1.0)
    }
}

/// Spectral angle plus how many pixels had to be skipped because one of the
/// two spectral vectors had zero norm (the angle is undefined there).
#[derive(Debug, Clone, Copy)]
pub struct SamResult {
    pub angle: f64,
    pub skipped: usize,
}

fn check_pair(pred: &ArrayView3<f64>, target: &ArrayView3<f64>) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::Input(format!(
            "prediction shape {:?} != reference shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("empty image".into()));
    }
    if pred.iter().chain(target.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite pixel value".into()));
    }
    Ok(())
}

/// Mean absolute error over all channels and pixels.
pub fn mae(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    check_pair(&pred, &target)?;
    Ok(mean_over(&pred, &target, |p, t| (p - t).abs()))
}

/// Mean squared error; shared by RMSE and PSNR.
fn mse(pred: &ArrayView3<f64>, target: &ArrayView3<f64>) -> f64 {
    mean_over(pred, target, |p, t| (p - t) * (p - t))
}

fn mean_over(
    pred: &ArrayView3<f64>,
    target: &ArrayView3<f64>,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> f64 {
    // Standard-layout views expose slices; metric callers always pass owned
    // arrays or full views, so this does not allocate.
    let p = pred.to_slice().expect("standard layout");
    let t = target.to_slice().expect("standard layout");
    crate::par::sum_with(p.len(), |i| f(p[i], t[i])) / p.len() as f64
}

/// Root mean squared error over all channels and pixels.
pub fn rmse(pred: ArrayView3<f64>, target: ArrayView3<f64>) -> Result<f64> {
    check_pair(&pred, &target)?;
    Ok(mse(&pred, &target).sqrt())
}

/// Peak signal-to-noise ratio in dB, `10·log10(max² / MSE)`, capped at 100 dB
/// once the MSE drops below 1e-12 so identical images don't produce ∞.
pub fn psnr(pred: ArrayView3<f64>, target: ArrayView3<f64>, cfg: &MetricConfig) -> Result<f64> {
    check_pair(&pred, &target)?;
    let m = mse(&pred, &target);
    if m < 1e-12 {
        return Ok(100.0);
    }
    Ok(10.0 * (cfg.data_max * cfg.data_max / m).log10())
}

/// Window weights for SSIM, flattened row-major, summing to 1.
fn ssim_window(kind: SsimWindow) -> (usize, Vec<f64>) {
    match kind {
        SsimWindow::Uniform7 => (7, vec![1.0 / 49.0; 49]),
        SsimWindow::Gaussian11 => {
            let sigma = 1.5f64;
            let g: Vec<f64> =
                (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
            let mut w: Vec<f64> = (0..121).map(|i| g[i / 11] * g[i % 11]).collect();
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            (11, w)
        }
    }
}

/// Structural similarity, averaged over all fully-contained windows of every
/// channel. No padding: an `H×W` channel contributes `(H−w+1)·(W−w+1)` window
/// positions, and images smaller than the window are rejected.
pub fn ssim(pred: ArrayView3<f64>, target: ArrayView3<f64>, cfg: &MetricConfig) -> Result<f64> {
    check_pair(&pred, &target)?;
    let (k, h, w) = pred.dim();
    let (win, weights) = ssim_window(cfg.ssim_window);
    if h < win || w < win {
        return Err(Error::Input(format!(
            "image {h}×{w} smaller than the {win}×{win} SSIM window"
        )));
    }
    let (oh, ow) = (h - win + 1, w - win + 1);
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);

    let mut total = 0.0;
    for c in 0..k {
        let pc = pred.index_axis(ndarray::Axis(0), c);
        let tc = target.index_axis(ndarray::Axis(0), c);
        let pc = pc.to_slice().expect("standard layout");
        let tc = tc.to_slice().expect("standard layout");
        let weights = &weights;
        let channel_sum = crate::par::sum_with(oh * ow, move |pos| {
            let (y0, x0) = (pos / ow, pos % ow);
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = weights[dy * win + dx];
                    let x = pc[(y0 + dy) * w + (x0 + dx)];
                    let y = tc[(y0 + dy) * w + (x0 + dx)];
                    mx += wgt * x;
                    my += wgt * y;
                    mxx += wgt * x * x;
                    myy += wgt * y * y;
                    mxy += wgt * x * y;
                }
            }
            let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
        });
        total += channel_sum / (oh * ow) as f64;
    }
    Ok(total / k as f64)
}

/// Mean spectral angle between per-pixel channel vectors. Pixels where either
/// vector has zero norm are skipped; their count comes back in the result so
/// callers can decide whether the mean is still meaningful.
pub fn sam(pred: ArrayView3<f64>, target: ArrayView3<f64>, cfg: &MetricConfig) -> Result<SamResult> {
    check_pair(&pred, &target)?;
    let (k, h, w) = pred.dim();
    let p = pred.to_slice().expect("standard layout");
    let t = target.to_slice().expect("standard layout");
    let plane = h * w;
    // (angle, 1) for valid pixels, (0, 0) for skipped ones; one ordered
    // reduction keeps the result identical in parallel and sequential runs.
    let (sum, valid) = {
        struct Acc(f64, usize);
        impl num_traits::Zero for Acc {
            fn zero() -> Self {
                Acc(0.0, 0)
            }
            fn is_zero(&self) -> bool {
                self.0 == 0.0 && self.1 == 0
            }
        }
        impl std::ops::Add for Acc {
            type Output = Acc;
            fn add(self, o: Acc) -> Acc {
                Acc(self.0 + o.0, self.1 + o.1)
            }
        }
        impl Clone for Acc {
            fn clone(&self) -> Self {
                Acc(self.0, self.1)
            }
        }
        impl Copy for Acc {}
        let acc = crate::par::sum_with(plane, move |pix| {
            let (mut dot, mut np, mut nt) = (0.0, 0.0, 0.0);
            for c in 0..k {
                let a = p[c * plane + pix];
                let b = t[c * plane + pix];
                dot += a * b;
                np += a * a;
                nt += b * b;
            }
            if np == 0.0 || nt == 0.0 {
                return Acc(0.0, 0);
            }
            let cosv = (dot / (np.sqrt() * nt.sqrt())).clamp(-1.0, 1.0);
            Acc(cosv.acos(), 1)
        });
        (acc.0, acc.1)
    };
    if valid == 0 {
        return Err(Error::Domain(
            "spectral angle undefined: every pixel has a zero-norm spectrum".into(),
        ));
    }
    let mut angle = sum / valid as f64;
    if cfg.sam_units == SamUnits::Degrees {
        angle = angle.to_degrees();
    }
    Ok(SamResult { angle, skipped: plane - valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Deterministic test tensor in (0, 1).
    fn tensor(seed: u64, dim: (usize, usize, usize)) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(dim, || rng.gen_range(0.05..0.95))
    }

    // ---- naive reference implementations, plain nested loops ----

    fn naive_mae(p: &Array3<f64>, t: &Array3<f64>) -> f64 {
        let mut s = 0.0;
        for (a, b) in p.iter().zip(t.iter()) {
            s += (a - b).abs();
        }
        s / p.len() as f64
    }

    fn naive_rmse(p: &Array3<f64>, t: &Array3<f64>) -> f64 {
        let mut s = 0.0;
        for (a, b) in p.iter().zip(t.iter()) {
            s += (a - b) * (a - b);
        }
        (s / p.len() as f64).sqrt()
    }

    fn naive_ssim_uniform7(p: &Array3<f64>, t: &Array3<f64>, c1: f64, c2: f64) -> f64 {
        let (k, h, w) = p.dim();
        let win = 7;
        let mut per_channel = 0.0;
        for c in 0..k {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - win) {
                for x0 in 0..=(w - win) {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for dy in 0..win {
                        for dx in 0..win {
                            mx += p[[c, y0 + dy, x0 + dx]];
                            my += t[[c, y0 + dy, x0 + dx]];
                        }
                    }
                    mx /= 49.0;
                    my /= 49.0;
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for dy in 0..win {
                        for dx in 0..win {
                            let a = p[[c, y0 + dy, x0 + dx]] - mx;
                            let b = t[[c, y0 + dy, x0 + dx]] - my;
                            vx += a * a;
                            vy += b * b;
                            cov += a * b;
                        }
                    }
                    vx /= 49.0;
                    vy /= 49.0;
                    cov /= 49.0;
                    sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            per_channel += sum / count as f64;
        }
        per_channel / k as f64
    }

    fn naive_sam_degrees(p: &Array3<f64>, t: &Array3<f64>) -> (f64, usize) {
        let (k, h, w) = p.dim();
        let (mut sum, mut valid, mut skipped) = (0.0, 0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (mut dot, mut np, mut nt) = (0.0, 0.0, 0.0);
                for c in 0..k {
                    dot += p[[c, y, x]] * t[[c, y, x]];
                    np += p[[c, y, x]] * p[[c, y, x]];
                    nt += t[[c, y, x]] * t[[c, y, x]];
                }
                if np == 0.0 || nt == 0.0 {
                    skipped += 1;
                } else {
                    sum += (dot / (np.sqrt() * nt.sqrt())).clamp(-1.0, 1.0).acos();
                    valid += 1;
                }
            }
        }
        ((sum / valid as f64).to_degrees(), skipped)
    }

    #[test]
    fn matches_naive_loops_on_random_tensor() {
        let p = tensor(11, (4, 8, 8));
        let t = tensor(12, (4, 8, 8));
        let cfg = MetricConfig::new(1.0);
        assert_abs_diff_eq!(mae(p.view(), t.view()).unwrap(), naive_mae(&p, &t), epsilon = 1e-9);
        assert_abs_diff_eq!(rmse(p.view(), t.view()).unwrap(), naive_rmse(&p, &t), epsilon = 1e-9);
        let naive_psnr = 10.0 * (1.0 / naive_rmse(&p, &t).powi(2)).log10();
        assert_abs_diff_eq!(psnr(p.view(), t.view(), &cfg).unwrap(), naive_psnr, epsilon = 1e-9);
        assert_abs_diff_eq!(
            ssim(p.view(), t.view(), &cfg).unwrap(),
            naive_ssim_uniform7(&p, &t, cfg.ssim_c1, cfg.ssim_c2),
            epsilon = 1e-9
        );
        let (naive_angle, naive_skip) = naive_sam_degrees(&p, &t);
        let got = sam(p.view(), t.view(), &cfg).unwrap();
        assert_abs_diff_eq!(got.angle, naive_angle, epsilon = 1e-9);
        assert_eq!(got.skipped, naive_skip);
    }

    #[test]
    fn identical_images_hit_the_fixed_points() {
        let p = tensor(21, (3, 12, 12));
        let cfg = MetricConfig::new(1.0);
        assert_eq!(mae(p.view(), p.view()).unwrap(), 0.0);
        assert_eq!(rmse(p.view(), p.view()).unwrap(), 0.0);
        assert_eq!(psnr(p.view(), p.view(), &cfg).unwrap(), 100.0);
        assert_abs_diff_eq!(ssim(p.view(), p.view(), &cfg).unwrap(), 1.0, epsilon = 1e-12);
        let s = sam(p.view(), p.view(), &cfg).unwrap();
        assert_abs_diff_eq!(s.angle, 0.0, epsilon = 1e-5);
    }

    #[test]
    fn psnr_closed_form_for_constant_offset() {
        // Constant error of 0.1 on data_max 1 → MSE 0.01 → PSNR 20 dB.
        let t = Array3::from_elem((2, 8, 8), 0.4);
        let p = t.mapv(|v| v + 0.1);
        let cfg = MetricConfig::new(1.0);
        assert_abs_diff_eq!(psnr(p.view(), t.view(), &cfg).unwrap(), 20.0, epsilon = 1e-9);
        // data_max 2 adds 10·log10(4) ≈ 6.0206 dB.
        let cfg2 = MetricConfig::new(2.0);
        assert_abs_diff_eq!(
            psnr(p.view(), t.view(), &cfg2).unwrap(),
            20.0 + 10.0 * 4f64.log10(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn sam_forty_five_degree_case() {
        // Per-pixel spectra (1, 0) vs (1, 1): the angle is exactly 45°.
        let mut p = Array3::zeros((2, 2, 2));
        let mut t = Array3::zeros((2, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                p[[0, y, x]] = 1.0;
                t[[0, y, x]] = 1.0;
                t[[1, y, x]] = 1.0;
            }
        }
        let cfg = MetricConfig::new(1.0);
        let r = sam(p.view(), t.view(), &cfg).unwrap();
        assert_abs_diff_eq!(r.angle, 45.0, epsilon = 1e-9);
        assert_eq!(r.skipped, 0);
        let rad = sam(
            p.view(),
            t.view(),
            &MetricConfig { sam_units: SamUnits::Radians, ..MetricConfig::new(1.0) },
        )
        .unwrap();
        assert_abs_diff_eq!(rad.angle, std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn sam_skips_zero_norm_pixels() {
        let mut p = tensor(31, (3, 4, 4));
        let t = tensor(32, (3, 4, 4));
        for c in 0..3 {
            p[[c, 0, 0]] = 0.0;
            p[[c, 2, 3]] = 0.0;
        }
        let r = sam(p.view(), t.view(), &MetricConfig::new(1.0)).unwrap();
        assert_eq!(r.skipped, 2);
        // All-zero prediction: no valid pixel remains.
        let z = Array3::zeros((3, 4, 4));
        assert!(matches!(
            sam(z.view(), t.view(), &MetricConfig::new(1.0)).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn gaussian_window_agrees_with_direct_evaluation() {
        let p = tensor(41, (2, 16, 16));
        let t = tensor(42, (2, 16, 16));
        let cfg = MetricConfig { ssim_window: SsimWindow::Gaussian11, ..MetricConfig::new(1.0) };
        // Build the reference value with an independently constructed kernel.
        let sigma = 1.5f64;
        let g: Vec<f64> =
            (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = g.iter().sum::<f64>().powi(2);
        let (k, h, w) = p.dim();
        let mut total = 0.0;
        for c in 0..k {
            let mut sum = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - 11) {
                for x0 in 0..=(w - 11) {
                    let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wt = g[dy] * g[dx] / norm;
                            let a = p[[c, y0 + dy, x0 + dx]];
                            let b = t[[c, y0 + dy, x0 + dx]];
                            mx += wt * a;
                            my += wt * b;
                            mxx += wt * a * a;
                            myy += wt * b * b;
                            mxy += wt * a * b;
                        }
                    }
                    let (vx, vy, cov) = (mxx - mx * mx, myy - my * my, mxy - mx * my);
                    sum += ((2.0 * mx * my + cfg.ssim_c1) * (2.0 * cov + cfg.ssim_c2))
                        / ((mx * mx + my * my + cfg.ssim_c1) * (vx + vy + cfg.ssim_c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total /= k as f64;
        assert_abs_diff_eq!(ssim(p.view(), t.view(), &cfg).unwrap(), total, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = tensor(51, (2, 8, 8));
        let b = tensor(52, (2, 8, 9));
        assert!(mae(a.view(), b.view()).is_err());
        let small = tensor(53, (1, 4, 4));
        assert!(ssim(small.view(), small.view(), &MetricConfig::new(1.0)).is_err());
        let mut nan = a.clone();
        nan[[0, 0, 0]] = f64::NAN;
        assert!(rmse(nan.view(), a.view()).is_err());
    }
}
