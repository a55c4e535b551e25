//! Hand-rolled neural-network layers with explicit forward/backward passes.
//!
//! Every layer follows one convention:
//!
//! - `forward_t(&mut self, ..)` — training-mode forward; stashes whatever the
//!   backward pass needs (inputs, masks, argmax indices, batch statistics).
//! - `forward_e(&self, ..)` — inference-mode forward; no caching, no mutation,
//!   running statistics instead of batch statistics, dropout disabled.
//! - `backward(&mut self, gy, ..)` — consumes the cache, accumulates parameter
//!   gradients in place and returns the gradient w.r.t. the input.
//!
//! Layers are generic over [`Scalar`] so the production path runs in `f32`
//! while gradient-check tests instantiate the exact same code in `f64`, where
//! central finite differences are trustworthy.
//!
//! Parameters are reached through the [`Params`] visitor rather than a tensor
//! registry: the optimiser, the checkpoint writer and the parameter counter all
//! walk the same stable, construction-ordered traversal.

pub mod act;
pub mod attention;
pub mod block;
pub mod conv;
pub mod dropout;
pub mod init;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod scalar;
pub mod se;
pub mod upsample;

pub use scalar::Scalar;

/// Feature maps in `(N, C, H, W)` layout; `N` is batch or batch × time.
pub type Feat<F> = ndarray::Array4<F>;

/// Visitor access to a layer's tensors in a stable order.
///
/// `visit_params` exposes each learnable tensor as `(name, values, grads)`;
/// `visit_state` exposes everything that belongs in a checkpoint, i.e. the
/// learnable tensors plus non-learned buffers such as batch-norm running
/// statistics. The default `visit_state` assumes there are no buffers.
pub trait Params<F: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F]));

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        self.visit_params(prefix, &mut |name, w, _| f(name, w));
    }
}

/// Join a visitor prefix and a leaf name into `prefix.leaf`.
pub(crate) fn key(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_owned()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Reset all accumulated gradients to zero.
pub fn zero_grads<F: Scalar>(layer: &mut impl Params<F>) {
    layer.visit_params("", &mut |_, _, g| g.fill(F::zero()));
}

/// Total number of learnable scalars.
pub fn param_count<F: Scalar>(layer: &mut impl Params<F>) -> usize {
    let mut n = 0;
    layer.visit_params("", &mut |_, w, _| n += w.len());
    n
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-finite-difference gradient checking, used by every layer's tests.
    //!
    //! All checks run in `f64`: a step of `1e-5` leaves ~10 significant digits,
    //! so a relative tolerance of `1e-5` catches genuinely wrong derivatives
    //! rather than float noise.

    use super::{Feat, Params};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;
    pub const TOL: f64 = 1e-5;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Random input in (-1, 1), the regime all layers here see in practice.
    pub fn rand_feat(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Feat<f64> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Check the input gradient of `layer` against finite differences of a random
    /// linear functional `L(y) = Σ cᵢ yᵢ` of the output (a fresh functional per
    /// check keeps all output paths exercised).
    ///
    /// `forward` must run the layer's training-mode forward; `backward` the
    /// matching backward. Layer state (dropout masks, batch stats) must be
    /// deterministic across the repeated forwards, so stochastic layers need
    /// their RNG re-seeded by the caller inside `forward`.
    pub fn check_input_grad<L, Fw, Bw>(
        layer: &mut L,
        x: &Feat<f64>,
        mut forward: Fw,
        mut backward: Bw,
    ) where
        Fw: FnMut(&mut L, &Feat<f64>) -> Feat<f64>,
        Bw: FnMut(&mut L, &Feat<f64>) -> Feat<f64>,
    {
        let mut rng = rng(0x5EED_C0DE);
        let y = forward(layer, x);
        let co: Feat<f64> = Array4::from_shape_simple_fn(y.dim(), || rng.gen_range(-1.0..1.0));
        let gx = backward(layer, &co);
        assert_eq!(gx.dim(), x.dim(), "input gradient shape");

        // Probe a subset of coordinates; exhaustive checks add nothing but time.
        let n = x.len();
        let stride = (n / 64).max(1);
        let xs = x.as_slice().unwrap();
        let gxs = gx.as_slice().unwrap();
        for i in (0..n).step_by(stride) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] = xs[i] + STEP;
            let lp = (&forward(layer, &xp) * &co).sum();
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] = xs[i] - STEP;
            let lm = (&forward(layer, &xm) * &co).sum();
            let fd = (lp - lm) / (2.0 * STEP);
            assert!(
                rel_err(gxs[i], fd) < TOL || (gxs[i] - fd).abs() < 1e-7,
                "input grad [{i}]: analytic {} vs finite-diff {fd}",
                gxs[i]
            );
        }
    }

    /// Check parameter gradients the same way, perturbing a probe subset of every
    /// learnable tensor.
    pub fn check_param_grads<L, Fw, Bw>(
        layer: &mut L,
        x: &Feat<f64>,
        mut forward: Fw,
        mut backward: Bw,
    ) where
        L: Params<f64>,
        Fw: FnMut(&mut L, &Feat<f64>) -> Feat<f64>,
        Bw: FnMut(&mut L, &Feat<f64>),
    {
        let mut rng = rng(0xFACE_FEED);
        super::zero_grads(layer);
        let y = forward(layer, x);
        let co: Feat<f64> = Array4::from_shape_simple_fn(y.dim(), || rng.gen_range(-1.0..1.0));
        backward(layer, &co);

        // Snapshot analytic grads; the visitor can't be re-entered while we
        // perturb, so copy them out keyed by visit order.
        let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
        layer.visit_params("", &mut |name, _, g| analytic.push((name.to_owned(), g.to_vec())));

        fn nudge<L: Params<f64>>(layer: &mut L, tensor: usize, i: usize, delta: f64) {
            let mut k = 0;
            layer.visit_params("", &mut |_, w, _| {
                if k == tensor {
                    w[i] += delta;
                }
                k += 1;
            });
        }

        for (t, (name, grads)) in analytic.iter().enumerate() {
            let stride = (grads.len() / 16).max(1);
            for i in (0..grads.len()).step_by(stride) {
                nudge(layer, t, i, STEP);
                let lp = (&forward(layer, x) * &co).sum();
                nudge(layer, t, i, -2.0 * STEP);
                let lm = (&forward(layer, x) * &co).sum();
                nudge(layer, t, i, STEP);
                let fd = (lp - lm) / (2.0 * STEP);
                assert!(
                    rel_err(grads[i], fd) < TOL || (grads[i] - fd).abs() < 1e-7,
                    "{name}[{i}]: analytic {} vs finite-diff {fd}",
                    grads[i]
                );
            }
        }
    }
}
