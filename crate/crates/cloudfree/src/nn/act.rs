//! Activation layers. The network uses SiLU (`x·σ(x)`) throughout the conv
//! stacks; the output heads apply sigmoid/softplus inline in the model where
//! the transform is fused with scaling.

use super::{Feat, Scalar};
use crate::par;

/// SiLU with an input cache for the backward pass.
#[derive(Default)]
pub struct Silu<F> {
    cache_x: Option<Feat<F>>,
}

impl<F: Scalar> Silu<F> {
    pub fn new() -> Self {
        Self { cache_x: None }
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        self.cache_x = Some(x.clone());
        self.forward_e(x)
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        let mut y = x.clone();
        par::apply(y.as_slice_mut().unwrap(), |v| *v = *v * v.sigmoid());
        y
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let x = self.cache_x.take().expect("Silu::backward before forward_t");
        let mut gx = gy.clone();
        par::zip_apply(gx.as_slice_mut().unwrap(), x.as_slice().unwrap(), |g, &v| {
            let s = v.sigmoid();
            // d/dx x·σ(x) = σ(x)·(1 + x·(1 − σ(x)))
            *g = *g * s * (F::one() + v * (F::one() - s));
        });
        gx
    }
}
