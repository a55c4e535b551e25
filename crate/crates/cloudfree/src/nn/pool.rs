//! Spatial max pooling with non-overlapping square windows (kernel == stride).
//!
//! The temporal-attention stage runs on features pooled down to a fixed grid,
//! so the pool size is always `H / target`; `k = 1` degenerates to a copy and
//! is handled by the same code path.

use super::{Feat, Scalar};
use crate::par;
use ndarray::Array4;

pub struct MaxPool2d {
    pub k: usize,
    /// Flat within-plane argmax index for every output element.
    cache: Option<(Vec<u32>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(k: usize) -> Self {
        assert!(k > 0, "MaxPool2d: zero kernel");
        Self { k, cache: None }
    }

    fn run<F: Scalar>(&self, x: &Feat<F>) -> (Feat<F>, Vec<u32>) {
        let (n, c, h, w) = x.dim();
        let k = self.k;
        assert!(h % k == 0 && w % k == 0, "MaxPool2d: {h}×{w} not divisible by {k}");
        let (ho, wo) = (h / k, w / k);
        // Find each window's argmax (parallel over planes), then gather values.
        let mut arg = vec![0u32; n * c * ho * wo];
        par::zip_chunks_mut(&mut arg, ho * wo, x.as_slice().unwrap(), h * w, |_, ap, xp| {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (oy * k) * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (oy * k + dy) * w + ox * k + dx;
                            if xp[idx] > xp[best] {
                                best = idx;
                            }
                        }
                    }
                    ap[oy * wo + ox] = best as u32;
                }
            }
        });
        let xs = x.as_slice().unwrap();
        let mut y = Array4::zeros((n, c, ho, wo));
        par::zip_chunks_mut(y.as_slice_mut().unwrap(), ho * wo, &arg, ho * wo, |plane, yp, ap| {
            let xbase = plane * h * w;
            for (v, &a) in yp.iter_mut().zip(ap) {
                *v = xs[xbase + a as usize];
            }
        });
        (y, arg)
    }

    pub fn forward_t<F: Scalar>(&mut self, x: &Feat<F>) -> Feat<F> {
        let (y, arg) = self.run(x);
        self.cache = Some((arg, x.dim()));
        y
    }

    pub fn forward_e<F: Scalar>(&self, x: &Feat<F>) -> Feat<F> {
        self.run(x).0
    }

    /// Route each output gradient to the input position that won the max.
    pub fn backward<F: Scalar>(&mut self, gy: &Feat<F>) -> Feat<F> {
        let (arg, in_dim) = self.cache.take().expect("MaxPool2d::backward before forward_t");
        let (_, _, h, w) = in_dim;
        let (_, _, ho, wo) = gy.dim();
        let mut gx = Array4::zeros(in_dim);
        par::zip_chunks_mut(
            gx.as_slice_mut().unwrap(),
            h * w,
            gy.as_slice().unwrap(),
            ho * wo,
            |plane, gxp, gyp| {
                let abase = plane * ho * wo;
                for (o, &g) in gyp.iter().enumerate() {
                    let idx = arg[abase + o] as usize;
                    gxp[idx] = gxp[idx] + g; // windows never overlap, but ties are safe too
                }
            },
        );
        gx
    }
}
