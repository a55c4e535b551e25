//! Bilinear resampling with the half-pixel (centre-aligned) convention:
//! source position = `(dst + 0.5)·(in/out) − 0.5`, clamped to the image.
//! When input and output sizes match the map is exactly the identity.
//!
//! The layer has no parameters; interpolation weights depend only on the
//! geometry, so the backward pass recomputes them instead of caching.

use super::{Feat, Scalar};
use crate::par;
use ndarray::Array4;

pub struct BilinearUpsample {
    pub out_h: usize,
    pub out_w: usize,
    cache_in_dim: Option<(usize, usize, usize, usize)>,
}

/// Per-axis interpolation taps: output index → (lo, hi, weight of hi).
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

impl BilinearUpsample {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        assert!(out_h > 0 && out_w > 0);
        Self { out_h, out_w, cache_in_dim: None }
    }

    fn run<F: Scalar>(&self, x: &Feat<F>) -> Feat<F> {
        let (n, c, h, w) = x.dim();
        let ty = taps(h, self.out_h);
        let tx = taps(w, self.out_w);
        let mut y = Array4::zeros((n, c, self.out_h, self.out_w));
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            self.out_h * self.out_w,
            x.as_slice().unwrap(),
            h * w,
            |_, yp, xp| {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let a = xp[y0 * w + x0].to_f64();
                        let b = xp[y0 * w + x1].to_f64();
                        let c_ = xp[y1 * w + x0].to_f64();
                        let d = xp[y1 * w + x1].to_f64();
                        let top = a + (b - a) * wx;
                        let bot = c_ + (d - c_) * wx;
                        yp[oy * self.out_w + ox] = F::from_f64(top + (bot - top) * wy);
                    }
                }
            },
        );
        y
    }

    pub fn forward_t<F: Scalar>(&mut self, x: &Feat<F>) -> Feat<F> {
        self.cache_in_dim = Some(x.dim());
        self.run(x)
    }

    pub fn forward_e<F: Scalar>(&self, x: &Feat<F>) -> Feat<F> {
        self.run(x)
    }

    /// Transpose of the forward interpolation: scatter each output gradient
    /// onto its four source taps. Plane-parallel, fixed order within a plane.
    pub fn backward<F: Scalar>(&mut self, gy: &Feat<F>) -> Feat<F> {
        let in_dim = self.cache_in_dim.take().expect("BilinearUpsample::backward before forward_t");
        let (_, _, h, w) = in_dim;
        let ty = taps(h, self.out_h);
        let tx = taps(w, self.out_w);
        let mut gx = Array4::zeros(in_dim);
        par::zip_chunks_mut(
            gx.as_slice_mut().unwrap(),
            h * w,
            gy.as_slice().unwrap(),
            self.out_h * self.out_w,
            |_, gxp, gyp| {
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let g = gyp[oy * self.out_w + ox].to_f64();
                        let add = |gxp: &mut [F], idx: usize, v: f64| {
                            gxp[idx] = gxp[idx] + F::from_f64(v);
                        };
                        add(gxp, y0 * w + x0, g * (1.0 - wy) * (1.0 - wx));
                        add(gxp, y0 * w + x1, g * (1.0 - wy) * wx);
                        add(gxp, y1 * w + x0, g * wy * (1.0 - wx));
                        add(gxp, y1 * w + x1, g * wy * wx);
                    }
                }
            },
        );
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let mut rng = gradcheck::rng(61);
        let x = gradcheck::rand_feat(&mut rng, (1, 2, 5, 7));
        let up = BilinearUpsample::new(5, 7);
        assert_eq!(up.forward_e(&x), x);
    }

    #[test]
    fn doubling_interpolates_centres() {
        // 1-D ramp in x: values 0, 1. Half-pixel doubling puts outputs at
        // source coords -0.25, 0.25, 0.75, 1.25 → clamped 0, 0.25, 0.75, 1.
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0f64, 1.0]).unwrap();
        let up = BilinearUpsample::new(1, 4);
        let y = up.forward_e(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn preserves_constants() {
        let x = Array4::from_elem((1, 3, 4, 4), 0.37f64);
        let up = BilinearUpsample::new(12, 20);
        let y = up.forward_e(&x);
        for &v in y.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = gradcheck::rng(62);
        let x = gradcheck::rand_feat(&mut rng, (2, 2, 3, 4));
        let mut up = BilinearUpsample::new(6, 8);
        gradcheck::check_input_grad(&mut up, &x, |l, x| l.forward_t(x), |l, g| l.backward(g));
    }
}
