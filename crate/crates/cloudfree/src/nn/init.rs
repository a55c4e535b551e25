//! Weight initialisation.
//!
//! Everything is fan-in-scaled uniform, `U(-1/√fan_in, 1/√fan_in)`, the
//! conventional default for conv/linear layers. Draws always happen in `f64`
//! and are then narrowed, so an `f32` and an `f64` model built from the same
//! seed start at the same point (up to rounding) — useful when comparing runs
//! across precisions.

use super::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fill `w` with `U(-b, b)`, `b = 1/√fan_in`.
pub fn uniform_fan_in<F: Scalar>(w: &mut [F], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in w {
        *v = F::from_f64(rng.gen_range(-bound..bound));
    }
}
