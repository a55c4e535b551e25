//! Squeeze-and-excite: global average pool → bottleneck MLP → per-channel
//! sigmoid gate on the input features.

use super::linear::Linear;
use super::{Feat, Params, Scalar};
use crate::par;
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

pub struct SqueezeExcite<F> {
    fc1: Linear<F>,
    fc2: Linear<F>,
    cache: Option<SeCache<F>>,
}

struct SeCache<F> {
    x: Feat<F>,
    a1: Array2<F>,   // fc1 pre-activation
    gate: Array2<F>, // σ(fc2(silu(a1))), one gate per (sample, channel)
}

/// Channel-wise squeeze: mean over the spatial plane.
fn squeeze<F: Scalar>(x: &Feat<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let xs = x.as_slice().unwrap();
    let means =
        par::map_collect(n * c, |p| par::sum_with(hw, |i| xs[p * hw + i]) / F::from_usize(hw));
    Array2::from_shape_vec((n, c), means).unwrap()
}

/// Scale each channel plane of `x` by its gate.
fn excite<F: Scalar>(x: &Feat<F>, gate: &Array2<F>) -> Feat<F> {
    let mut y = Array4::zeros(x.dim());
    let (_, _, h, w) = x.dim();
    let gs = gate.as_slice().unwrap();
    par::zip_chunks_mut(
        y.as_slice_mut().unwrap(),
        h * w,
        x.as_slice().unwrap(),
        h * w,
        |plane, yp, xp| {
            let g = gs[plane];
            for (o, &v) in yp.iter_mut().zip(xp) {
                *o = v * g;
            }
        },
    );
    y
}

impl<F: Scalar> SqueezeExcite<F> {
    pub fn new(channels: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(hidden > 0, "SqueezeExcite: empty bottleneck");
        Self {
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
            cache: None,
        }
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let s = squeeze(x);
        let a1 = self.fc1.forward_t(&s);
        let h = a1.mapv(|v| v * v.sigmoid());
        let a2 = self.fc2.forward_t(&h);
        let gate = a2.mapv(Scalar::sigmoid);
        let y = excite(x, &gate);
        self.cache = Some(SeCache { x: x.clone(), a1, gate });
        y
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        let s = squeeze(x);
        let h = self.fc1.forward_e(&s).mapv(|v| v * v.sigmoid());
        let gate = self.fc2.forward_e(&h).mapv(Scalar::sigmoid);
        excite(x, &gate)
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let SeCache { x, a1, gate } =
            self.cache.take().expect("SqueezeExcite::backward before forward_t");
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let gys = gy.as_slice().unwrap();
        let xs = x.as_slice().unwrap();

        // Gate gradient: how much each channel's scale mattered.
        let ggate_v: Vec<F> =
            par::map_collect(n * c, |p| par::sum_with(hw, |i| gys[p * hw + i] * xs[p * hw + i]));
        let ggate = Array2::from_shape_vec((n, c), ggate_v).unwrap();

        // Through σ, fc2, SiLU, fc1 back to the squeezed means.
        let ga2 = &ggate * &gate.mapv(|g| g * (F::one() - g));
        let gh = self.fc2.backward(&ga2);
        let ga1 = &gh
            * &a1.mapv(|v| {
                let s = v.sigmoid();
                s * (F::one() + v * (F::one() - s))
            });
        let gs = self.fc1.backward(&ga1);

        // Two paths into x: the direct scale and the squeeze mean.
        let mut gx = Array4::zeros(x.dim());
        let gates = gate.as_slice().unwrap();
        let gss = gs.as_slice().unwrap();
        let inv_hw = F::from_usize(hw).recip();
        par::zip_chunks_mut(gx.as_slice_mut().unwrap(), hw, gys, hw, |plane, gxp, gyp| {
            let g = gates[plane];
            let spread = gss[plane] * inv_hw;
            for (o, &gy) in gxp.iter_mut().zip(gyp) {
                *o = gy * g + spread;
            }
        });
        gx
    }
}

impl<F: Scalar> Params<F> for SqueezeExcite<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.fc1.visit_params(&super::key(prefix, "fc1"), f);
        self.fc2.visit_params(&super::key(prefix, "fc2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck;
    use super::*;

    #[test]
    fn gates_are_per_channel_scales() {
        let mut rng = gradcheck::rng(71);
        let se = SqueezeExcite::<f64>::new(3, 2, &mut rng);
        let x = gradcheck::rand_feat(&mut rng, (2, 3, 4, 4));
        let y = se.forward_e(&x);
        // The ratio y/x must be constant within each channel plane.
        for s in 0..2 {
            for c in 0..3 {
                let r0 = y[[s, c, 0, 0]] / x[[s, c, 0, 0]];
                for h in 0..4 {
                    for w in 0..4 {
                        assert!((y[[s, c, h, w]] / x[[s, c, h, w]] - r0).abs() < 1e-12);
                    }
                }
                assert!(r0 > 0.0 && r0 < 1.0, "sigmoid gate out of range: {r0}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = gradcheck::rng(72);
        let mut se = SqueezeExcite::<f64>::new(4, 2, &mut rng);
        let x = gradcheck::rand_feat(&mut rng, (2, 4, 3, 3));
        gradcheck::check_input_grad(&mut se, &x, |l, x| l.forward_t(x), |l, g| l.backward(g));
        gradcheck::check_param_grads(
            &mut se,
            &x,
            |l, x| l.forward_t(x),
            |l, g| {
                l.backward(g);
            },
        );
    }
}
