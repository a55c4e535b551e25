//! Inverted dropout on flat buffers.
//!
//! Shape-agnostic on purpose: the only consumer drops out attention masks,
//! which live in a 5-D array. The kept-element scale `1/(1−p)` is applied at
//! training time so inference is a no-op.
//!
//! Mask generation draws from the layer's own ChaCha stream *sequentially*,
//! then the (cheap) multiply is applied in parallel — keeping the random
//! sequence independent of the thread count.

use super::Scalar;
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Dropout<F> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<F>>,
}

impl<F: Scalar> Dropout<F> {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "Dropout: p = {p} outside [0, 1)");
        Self { p, rng: ChaCha8Rng::seed_from_u64(seed), mask: None }
    }

    /// Restart the random stream; used by tests that need repeatable masks.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Training-mode: zero each element with probability `p`, scale the rest.
    pub fn apply_t(&mut self, data: &mut [F]) {
        if self.p == 0.0 {
            self.mask = Some(vec![F::one(); data.len()]);
            return;
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - self.p));
        let mask: Vec<F> = (0..data.len())
            .map(|_| if self.rng.gen::<f64>() < self.p { F::zero() } else { keep_scale })
            .collect();
        par::zip_apply(data, &mask, |v, &m| *v = *v * m);
        self.mask = Some(mask);
    }

    /// Inference-mode: identity (kept for call-site symmetry).
    pub fn apply_e(&self, _data: &mut [F]) {}

    pub fn backward(&mut self, grad: &mut [F]) {
        let mask = self.mask.take().expect("Dropout::backward before apply_t");
        assert_eq!(mask.len(), grad.len(), "Dropout: gradient length changed");
        par::zip_apply(grad, &mask, |g, &m| *g = *g * m);
    }
}
