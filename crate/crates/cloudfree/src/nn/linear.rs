//! Fully-connected layer on `(N, in)` matrices.

use super::{init, key, Params, Scalar};
use ndarray::{Array1, Array2};
use ndarray::linalg::general_mat_mul;
use rand_chacha::ChaCha8Rng;

/// `y = x Wᵀ + b` with `W: (out, in)`.
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    gw: Array2<F>,
    gb: Array1<F>,
    cache_x: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = Array2::zeros((out_dim, in_dim));
        let mut b = Array1::zeros(out_dim);
        init::uniform_fan_in(w.as_slice_mut().unwrap(), in_dim, rng);
        init::uniform_fan_in(b.as_slice_mut().unwrap(), in_dim, rng);
        Self {
            w,
            b,
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
            cache_x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    fn affine(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros((x.nrows(), self.out_dim()));
        general_mat_mul(F::one(), x, &self.w.t(), F::zero(), &mut y);
        y += &self.b;
        y
    }

    pub fn forward_t(&mut self, x: &Array2<F>) -> Array2<F> {
        let y = self.affine(x);
        self.cache_x = Some(x.clone());
        y
    }

    pub fn forward_e(&self, x: &Array2<F>) -> Array2<F> {
        self.affine(x)
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache_x.take().expect("Linear::backward before forward_t");
        general_mat_mul(F::one(), &gy.t(), &x, F::one(), &mut self.gw);
        for (gb, col) in self.gb.iter_mut().zip(gy.columns()) {
            *gb = *gb + col.iter().copied().sum::<F>();
        }
        let mut gx = Array2::zeros(x.dim());
        general_mat_mul(F::one(), gy, &self.w, F::zero(), &mut gx);
        gx
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            &key(prefix, "weight"),
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            &key(prefix, "bias"),
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}
