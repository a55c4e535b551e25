//! Training objectives over batches of pixels: plain L2 regression and the
//! Gaussian negative log-likelihood under two covariance models — diagonal
//! (one variance per channel) and isotropic (one shared variance).
//!
//! Conventions, fixed here once:
//! - Reduction is the **mean over pixels**, never the sum, so loss magnitudes
//!   do not depend on batch size.
//! - The NLL's additive constant `(K/2)·ln 2π` is dropped; it cannot affect
//!   optimisation.
//! - Variances are clamped to `[VAR_MIN, VAR_MAX]` inside the loss. The clamp
//!   passes gradients through at interior points and zeroes them where the
//!   bound is active, which is what keeps early training from diverging when
//!   the variance head wanders.

use crate::nn::Scalar;
use crate::{Error, Result};
use ndarray::{Array2, ArrayView1};

/// Lower variance clamp inside the losses.
pub const VAR_MIN: f64 = 1e-6;
/// Upper variance clamp inside the losses.
pub const VAR_MAX: f64 = 1e3;

/// A batch of per-pixel predictions with targets: `(n, K)` means/targets and
/// `(n, K)` (diagonal) or `(n, 1)` (isotropic) predicted variances.
#[derive(Debug, Clone)]
pub struct PixelBatch<F> {
    pub pred_mean: Array2<F>,
    pub target: Array2<F>,
    pub pred_var: Array2<F>,
}

impl<F: Scalar> PixelBatch<F> {
    pub fn new(pred_mean: Array2<F>, target: Array2<F>, pred_var: Array2<F>) -> Result<Self> {
        let (n, k) = pred_mean.dim();
        if n == 0 || k == 0 {
            return Err(Error::Input("empty pixel batch".into()));
        }
        if target.dim() != (n, k) {
            return Err(Error::Input(format!(
                "target shape {:?} != prediction shape {:?}",
                target.dim(),
                pred_mean.dim()
            )));
        }
        if pred_var.nrows() != n || !(pred_var.ncols() == k || pred_var.ncols() == 1) {
            return Err(Error::Input(format!(
                "variance shape {:?} incompatible with ({n}, {k}) predictions",
                pred_var.dim()
            )));
        }
        for (name, a) in [("pred_mean", &pred_mean), ("target", &target), ("pred_var", &pred_var)]
        {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite values in {name}")));
            }
        }
        if pred_var.iter().any(|&v| v <= F::zero()) {
            return Err(Error::Input("non-positive predicted variance".into()));
        }
        Ok(Self { pred_mean, target, pred_var })
    }

    /// A batch for variance-free (plain L2) training; the variance slot is
    /// filled with ones so the type invariant holds and NLL calls still work.
    pub fn without_variance(pred_mean: Array2<F>, target: Array2<F>) -> Result<Self> {
        let n = pred_mean.nrows();
        PixelBatch::new(pred_mean, target, Array2::ones((n, 1)))
    }

    pub fn n(&self) -> usize {
        self.pred_mean.nrows()
    }

    pub fn k(&self) -> usize {
        self.pred_mean.ncols()
    }
}

/// Clamp a variance into `[VAR_MIN, VAR_MAX]`; second value says whether the
/// point was interior (gradients flow) or pinned at a bound (they don't).
#[inline]
fn clamp_var<F: Scalar>(v: F) -> (F, bool) {
    let lo = F::from_f64(VAR_MIN);
    let hi = F::from_f64(VAR_MAX);
    if v < lo {
        (lo, false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

/// Mean squared residual norm: `(1/n) Σ_j ‖ŷ_j − y_j‖²`.
pub fn l2_loss<F: Scalar>(b: &PixelBatch<F>) -> Result<F> {
    Ok(l2_loss_grad(b)?.0)
}

/// [`l2_loss`] together with its gradient w.r.t. the predicted means.
pub fn l2_loss_grad<F: Scalar>(b: &PixelBatch<F>) -> Result<(F, Array2<F>)> {
    let n = F::from_usize(b.n());
    let resid = &b.pred_mean - &b.target;
    let loss = crate::par::sum_with(resid.len(), {
        let r = resid.as_slice().unwrap();
        move |i| r[i] * r[i]
    }) / n;
    let two = F::from_f64(2.0);
    let grad = resid.mapv(|r| two * r / n);
    check_finite(loss, "l2_loss")?;
    Ok((loss, grad))
}

/// Covariance-weighted squared residual for one pixel: `Σ_k r_k² / σ_k²`.
pub fn mahalanobis_diagonal<F: Scalar>(residual: ArrayView1<F>, var: ArrayView1<F>) -> Result<F> {
    if residual.len() != var.len() {
        return Err(Error::Input(format!(
            "residual length {} != variance length {}",
            residual.len(),
            var.len()
        )));
    }
    if let Some((k, _)) = var.iter().enumerate().find(|(_, &v)| v <= F::zero()) {
        return Err(Error::Domain(format!("non-positive variance at channel {k}")));
    }
    Ok(residual.iter().zip(var.iter()).map(|(&r, &v)| r * r / v).sum())
}

/// Diagonal-covariance NLL: `(1/n) Σ_j Σ_k [ln σ_jk² + r_jk²/σ_jk²]`.
pub fn nll_diagonal<F: Scalar>(b: &PixelBatch<F>) -> Result<F> {
    Ok(nll_diagonal_grad(b)?.0)
}

/// [`nll_diagonal`] plus gradients w.r.t. predicted means and variances.
pub fn nll_diagonal_grad<F: Scalar>(b: &PixelBatch<F>) -> Result<(F, Array2<F>, Array2<F>)> {
    if b.pred_var.ncols() != b.k() {
        return Err(Error::Input(format!(
            "diagonal NLL needs one variance per channel, got {:?} for K={}",
            b.pred_var.dim(),
            b.k()
        )));
    }
    let (n, k) = b.pred_mean.dim();
    let inv_n = F::from_usize(n).recip();
    let two = F::from_f64(2.0);

    let mut g_mean = Array2::zeros((n, k));
    let mut g_var = Array2::zeros((n, k));
    let mut per_pixel = vec![F::zero(); n];
    {
        let pm = b.pred_mean.as_slice().unwrap();
        let tg = b.target.as_slice().unwrap();
        let pv = b.pred_var.as_slice().unwrap();
        let gm = g_mean.as_slice_mut().unwrap();
        let gv = g_var.as_slice_mut().unwrap();
        for (j, term) in per_pixel.iter_mut().enumerate() {
            let mut acc = F::zero();
            for c in 0..k {
                let i = j * k + c;
                let r = pm[i] - tg[i];
                let (v, interior) = clamp_var(pv[i]);
                acc += v.ln() + r * r / v;
                gm[i] = two * r / v * inv_n;
                gv[i] = if interior { (v.recip() - r * r / (v * v)) * inv_n } else { F::zero() };
            }
            *term = acc;
        }
    }
    let loss = finite_mean(&per_pixel, inv_n, "nll_diagonal")?;
    Ok((loss, g_mean, g_var))
}

/// Isotropic NLL: `(1/n) Σ_j [K·ln σ_j² + ‖r_j‖²/σ_j²]` with one σ² per pixel.
pub fn nll_isotropic<F: Scalar>(b: &PixelBatch<F>) -> Result<F> {
    Ok(nll_isotropic_grad(b)?.0)
}

/// [`nll_isotropic`] plus gradients; the variance gradient is `(n, 1)`.
pub fn nll_isotropic_grad<F: Scalar>(b: &PixelBatch<F>) -> Result<(F, Array2<F>, Array2<F>)> {
    if b.pred_var.ncols() != 1 {
        return Err(Error::Input(format!(
            "isotropic NLL needs a single shared variance per pixel, got {:?}",
            b.pred_var.dim()
        )));
    }
    let (n, k) = b.pred_mean.dim();
    let inv_n = F::from_usize(n).recip();
    let two = F::from_f64(2.0);
    let kf = F::from_usize(k);

    let mut g_mean = Array2::zeros((n, k));
    let mut g_var = Array2::zeros((n, 1));
    let mut per_pixel = vec![F::zero(); n];
    {
        let pm = b.pred_mean.as_slice().unwrap();
        let tg = b.target.as_slice().unwrap();
        let gm = g_mean.as_slice_mut().unwrap();
        for (j, term) in per_pixel.iter_mut().enumerate() {
            let (v, interior) = clamp_var(b.pred_var[[j, 0]]);
            let mut sq = F::zero();
            for c in 0..k {
                let i = j * k + c;
                let r = pm[i] - tg[i];
                sq += r * r;
                gm[i] = two * r / v * inv_n;
            }
            *term = kf * v.ln() + sq / v;
            g_var[[j, 0]] =
                if interior { (kf / v - sq / (v * v)) * inv_n } else { F::zero() };
        }
    }
    let loss = finite_mean(&per_pixel, inv_n, "nll_isotropic")?;
    Ok((loss, g_mean, g_var))
}

fn check_finite<F: Scalar>(v: F, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} produced {v}")))
    }
}

/// Mean of per-pixel terms; a non-finite term is reported with its pixel index.
fn finite_mean<F: Scalar>(terms: &[F], inv_n: F, what: &str) -> Result<F> {
    if let Some((j, &t)) = terms.iter().enumerate().find(|(_, t)| !t.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite term {t} at pixel {j}")));
    }
    Ok(crate::par::sum_with(terms.len(), |i| terms[i]) * inv_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(
        pred: Array2<f64>,
        target: Array2<f64>,
        var: Array2<f64>,
    ) -> PixelBatch<f64> {
        PixelBatch::new(pred, target, var).unwrap()
    }

    #[test]
    fn l2_known_values() {
        // Zero at the identity.
        let b = batch(array![[0.3, -0.7]], array![[0.3, -0.7]], array![[1.0, 1.0]]);
        assert_eq!(l2_loss(&b).unwrap(), 0.0);
        // Single pixel: 1² + 2² = 5, gradient 2r/n.
        let b = batch(array![[1.0, 2.0]], array![[0.0, 0.0]], array![[1.0, 1.0]]);
        let (l, g) = l2_loss_grad(&b).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g, array![[2.0, 4.0]]);
        // Mean over pixels: (9 + 1)/2.
        let b = batch(array![[3.0], [1.0]], array![[0.0], [0.0]], array![[1.0], [1.0]]);
        assert_eq!(l2_loss(&b).unwrap(), 5.0);
    }

    #[test]
    fn l2_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
        let base = l2_loss(&batch(pred.clone(), target.clone(), Array2::ones((6, 3)))).unwrap();
        // Permute pixels (rows) and channels (columns) jointly in both arrays.
        let perm_r = [4usize, 0, 5, 2, 1, 3];
        let perm_c = [2usize, 0, 1];
        let permute = |a: &Array2<f64>| {
            Array2::from_shape_fn((6, 3), |(i, j)| a[[perm_r[i], perm_c[j]]])
        };
        let l = l2_loss(&batch(permute(&pred), permute(&target), Array2::ones((6, 3)))).unwrap();
        assert_abs_diff_eq!(base, l, epsilon = 1e-12);
    }

    #[test]
    fn mahalanobis_known_values() {
        let r0 = array![0.0, 0.0];
        let v1 = array![1.0, 1.0];
        assert_eq!(mahalanobis_diagonal(r0.view(), v1.view()).unwrap(), 0.0);
        let r = array![1.0, 0.0];
        assert_eq!(mahalanobis_diagonal(r.view(), v1.view()).unwrap(), 1.0);
        let r = array![2.0, 3.0];
        let v = array![4.0, 9.0];
        assert_eq!(mahalanobis_diagonal(r.view(), v.view()).unwrap(), 2.0);
        // Non-positive variance is a domain error naming the channel.
        let bad = array![1.0, 0.0];
        let err = mahalanobis_diagonal(r.view(), bad.view()).unwrap_err();
        assert!(matches!(err, Error::Domain(ref m) if m.contains("channel 1")), "{err}");
    }

    #[test]
    fn nll_diagonal_known_values() {
        // ŷ = y, σ² = 1 → ln 1 + 0 = 0.
        let b = batch(array![[0.4]], array![[0.4]], array![[1.0]]);
        assert_eq!(nll_diagonal(&b).unwrap(), 0.0);
        // Residual (1, 0), unit variances → 0 + Mahalanobis 1.
        let b = batch(array![[1.0, 0.0]], array![[0.0, 0.0]], array![[1.0, 1.0]]);
        assert_abs_diff_eq!(nll_diagonal(&b).unwrap(), 1.0, epsilon = 1e-15);
        // Zero residual, σ² = e → ln e = 1; variance gradient (1/e)/n.
        let e = std::f64::consts::E;
        let b = batch(array![[2.0]], array![[2.0]], array![[e]]);
        let (l, gm, gv) = nll_diagonal_grad(&b).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-15);
        assert_eq!(gm[[0, 0]], 0.0);
        assert_abs_diff_eq!(gv[[0, 0]], 1.0 / e, epsilon = 1e-15);
        // Mixed two-pixel batch, value frozen from a by-hand evaluation.
        let b = batch(
            array![[0.5, 1.5], [2.0, -1.0]],
            array![[0.0, 1.0], [1.0, -3.0]],
            array![[0.25, 1.0], [4.0, 2.0]],
        );
        assert_abs_diff_eq!(nll_diagonal(&b).unwrap(), 2.096_573_590_279_973, epsilon = 1e-12);
    }

    #[test]
    fn nll_isotropic_known_values() {
        let b = batch(array![[1.0, 2.0, 3.0]], array![[1.0, 2.0, 3.0]], array![[1.0]]);
        assert_eq!(nll_isotropic(&b).unwrap(), 0.0);
        let b = batch(array![[1.0, 1.0]], array![[0.0, 0.0]], array![[1.0]]);
        assert_abs_diff_eq!(nll_isotropic(&b).unwrap(), 2.0, epsilon = 1e-15);
        // K=3, ‖r‖² = 14, σ² = 2 → 3·ln 2 + 7; grads by hand.
        let b = batch(array![[1.0, 2.0, 3.0]], array![[0.0, 0.0, 0.0]], array![[2.0]]);
        let (l, gm, gv) = nll_isotropic_grad(&b).unwrap();
        assert_abs_diff_eq!(l, 3.0 * 2f64.ln() + 7.0, epsilon = 1e-14);
        assert_eq!(gm, array![[1.0, 2.0, 3.0]]); // 2r/σ²
        assert_abs_diff_eq!(gv[[0, 0]], 1.5 - 3.5, epsilon = 1e-14); // K/σ² − ‖r‖²/σ⁴
    }

    #[test]
    fn isotropic_equals_diagonal_with_repeated_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let k = rng.gen_range(1..5);
            let pred = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-2.0..2.0));
            let target = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-2.0..2.0));
            let var1 = Array2::from_shape_simple_fn((n, 1), || rng.gen_range(0.01..3.0));
            let vark = {
                let mut v = Array2::zeros((n, k));
                for j in 0..n {
                    v.row_mut(j).fill(var1[[j, 0]]);
                }
                v
            };
            let iso = nll_isotropic(&batch(pred.clone(), target.clone(), var1)).unwrap();
            let diag = nll_diagonal(&batch(pred, target, vark)).unwrap();
            assert_abs_diff_eq!(iso, diag, epsilon = 1e-9);
        }
    }

    #[test]
    fn variance_clamp_engages_and_blocks_gradient() {
        // Below the floor: loss behaves as if σ² = VAR_MIN and ∂/∂σ² = 0.
        let b = batch(array![[1.0]], array![[0.0]], array![[1e-9]]);
        let (l, _, gv) = nll_diagonal_grad(&b).unwrap();
        assert_abs_diff_eq!(l, VAR_MIN.ln() + 1.0 / VAR_MIN, epsilon = 1e-6);
        assert_eq!(gv[[0, 0]], 0.0);
        // Above the ceiling likewise.
        let b = batch(array![[1.0]], array![[0.0]], array![[1e9]]);
        let (l, _, gv) = nll_diagonal_grad(&b).unwrap();
        assert_abs_diff_eq!(l, VAR_MAX.ln() + 1.0 / VAR_MAX, epsilon = 1e-12);
        assert_eq!(gv[[0, 0]], 0.0);
    }

    #[test]
    fn monotone_in_variance_around_squared_residual() {
        // For fixed residual r, the per-channel NLL term ln v + r²/v decreases
        // on (0, r²) and increases on (r², ∞).
        let r: f64 = 0.7;
        let term = |v: f64| {
            nll_diagonal(&batch(array![[r]], array![[0.0]], array![[v]])).unwrap()
        };
        let opt = r * r;
        let mut prev = term(opt * 0.05);
        for i in 1..=10 {
            let v = opt * (0.05 + 0.095 * i as f64); // up to r² exactly
            let cur = term(v);
            assert!(cur < prev, "not decreasing at v={v}");
            prev = cur;
        }
        let mut prev = term(opt);
        for i in 1..=10 {
            let v = opt * (1.0 + 0.5 * i as f64);
            let cur = term(v);
            assert!(cur > prev, "not increasing at v={v}");
            prev = cur;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // The acceptance suite runs ≥100 batches; this is the fast local check
        // covering both covariance modes and both gradient outputs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-6;
        for trial in 0..25 {
            let n = rng.gen_range(1..5);
            let k = rng.gen_range(1..4);
            let pred = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-1.0..1.0));
            let target = Array2::from_shape_simple_fn((n, k), || rng.gen_range(-1.0..1.0));
            let vard = Array2::from_shape_simple_fn((n, k), || rng.gen_range(0.05..2.0));
            let vari = Array2::from_shape_simple_fn((n, 1), || rng.gen_range(0.05..2.0));

            let (_, gm, gv) = nll_diagonal_grad(&batch(pred.clone(), target.clone(), vard.clone())).unwrap();
            for (arr, grad, is_var) in [(&pred, &gm, false), (&vard, &gv, true)] {
                for idx in [(0, 0), (n - 1, k - 1)] {
                    let mut plus = arr.clone();
                    plus[idx] += step;
                    let mut minus = arr.clone();
                    minus[idx] -= step;
                    let (bp, bm) = if is_var {
                        (
                            batch(pred.clone(), target.clone(), plus),
                            batch(pred.clone(), target.clone(), minus),
                        )
                    } else {
                        (
                            batch(plus, target.clone(), vard.clone()),
                            batch(minus, target.clone(), vard.clone()),
                        )
                    };
                    let fd = (nll_diagonal(&bp).unwrap() - nll_diagonal(&bm).unwrap()) / (2.0 * step);
                    let a = grad[idx];
                    let denom = a.abs().max(fd.abs()).max(1e-8);
                    assert!((a - fd).abs() / denom < 1e-4, "trial {trial} diag: {a} vs {fd}");
                }
            }

            let (_, gm, gv) = nll_isotropic_grad(&batch(pred.clone(), target.clone(), vari.clone())).unwrap();
            let fd_m = {
                let mut plus = pred.clone();
                plus[(0, 0)] += step;
                let mut minus = pred.clone();
                minus[(0, 0)] -= step;
                (nll_isotropic(&batch(plus, target.clone(), vari.clone())).unwrap()
                    - nll_isotropic(&batch(minus, target.clone(), vari.clone())).unwrap())
                    / (2.0 * step)
            };
            assert!((gm[(0, 0)] - fd_m).abs() / gm[(0, 0)].abs().max(fd_m.abs()).max(1e-8) < 1e-4);
            let fd_v = {
                let mut plus = vari.clone();
                plus[(0, 0)] += step;
                let mut minus = vari.clone();
                minus[(0, 0)] -= step;
                (nll_isotropic(&batch(pred.clone(), target.clone(), plus)).unwrap()
                    - nll_isotropic(&batch(pred.clone(), target.clone(), minus)).unwrap())
                    / (2.0 * step)
            };
            assert!((gv[(0, 0)] - fd_v).abs() / gv[(0, 0)].abs().max(fd_v.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn rejects_malformed_batches() {
        let empty = PixelBatch::<f64>::new(
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
            Array2::zeros((0, 2)),
        );
        assert!(matches!(empty.unwrap_err(), Error::Input(_)));
        let mismatched = PixelBatch::new(
            Array2::<f64>::zeros((2, 2)),
            Array2::zeros((3, 2)),
            Array2::ones((2, 2)),
        );
        assert!(mismatched.is_err());
        let bad_var = PixelBatch::new(
            Array2::<f64>::zeros((2, 2)),
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)), // zero variance violates positivity
        );
        assert!(bad_var.is_err());
        // Isotropic loss on a diagonal-shaped batch is a usage error.
        let b = batch(Array2::zeros((2, 3)), Array2::zeros((2, 3)), Array2::ones((2, 3)));
        assert!(nll_isotropic(&b).is_err());
        // And vice versa when K > 1.
        let b = batch(Array2::zeros((2, 3)), Array2::zeros((2, 3)), Array2::ones((2, 1)));
        assert!(nll_diagonal(&b).is_err());
    }
}
