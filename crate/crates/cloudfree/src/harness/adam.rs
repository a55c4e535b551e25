//! Adam, the adaptive-moment optimizer, over the [`Params`] visitor. Only
//! the learning rate is exposed; the moment decay rates and epsilon stay at
//! their standard published defaults.

use crate::nn::{Params, Scalar};
use std::collections::HashMap;

pub struct Adam<F> {
    beta1: F,
    beta2: F,
    eps: F,
    /// Update count, shared by all tensors (they are updated together).
    step: i32,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Self {
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Apply one update from the gradients currently stored in `net`.
    /// Gradients are left untouched; zero them before the next accumulation.
    pub fn step(&mut self, net: &mut impl Params<F>, lr: F) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = F::one() - b1.powi(self.step);
        let bc2 = F::one() - b2.powi(self.step);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        net.visit_params("", &mut |name, w, g| {
            let m = m_map.entry(name.to_owned()).or_insert_with(|| vec![F::zero(); w.len()]);
            let v = v_map.entry(name.to_owned()).or_insert_with(|| vec![F::zero(); w.len()]);
            debug_assert_eq!(m.len(), w.len(), "parameter {name} changed size");
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A bare parameter vector for driving the optimizer directly.
    struct Raw {
        w: Vec<f64>,
        g: Vec<f64>,
    }

    impl Params<f64> for Raw {
        fn visit_params(&mut self, _: &str, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
            f("w", &mut self.w, &mut self.g);
        }
    }

    #[test]
    fn first_step_size_is_the_learning_rate_regardless_of_gradient_scale() {
        // With bias correction, m̂ = g and v̂ = g² after one step, so the
        // update is lr·g/(|g| + ε) ≈ lr·sign(g) whatever the magnitude.
        for g0 in [1e-4, 0.5, 3.0, 2000.0] {
            let mut p = Raw { w: vec![1.0], g: vec![g0] };
            let mut adam = Adam::new();
            adam.step(&mut p, 0.01);
            let moved = 1.0 - p.w[0];
            assert!(
                (moved - 0.01).abs() < 1e-6,
                "step {moved} for gradient {g0}, wanted ≈ lr"
            );
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        // f(w) = Σ (w_i − c_i)², gradient 2(w − c).
        let c = [3.0, -1.5, 0.25];
        let mut p = Raw { w: vec![0.0; 3], g: vec![0.0; 3] };
        let mut adam = Adam::new();
        for _ in 0..2000 {
            for i in 0..3 {
                p.g[i] = 2.0 * (p.w[i] - c[i]);
            }
            adam.step(&mut p, 0.01);
        }
        for i in 0..3 {
            assert!((p.w[i] - c[i]).abs() < 1e-4, "w[{i}] = {} vs {}", p.w[i], c[i]);
        }
    }
}
