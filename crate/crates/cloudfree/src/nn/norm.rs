//! Normalisation layers: per-sample group normalisation (encoder/attention)
//! and batch normalisation with running statistics (decoder).

use super::{key, Feat, Params, Scalar};
use crate::par;
use ndarray::{Array1, Array4};

const EPS: f64 = 1e-5;

/// GroupNorm over `(N, C, H, W)`: statistics per sample per channel group,
/// learnable per-channel scale and shift.
pub struct GroupNorm<F> {
    pub groups: usize,
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    gg: Array1<F>,
    gb: Array1<F>,
    /// (normalised activations, inverse std per (sample, group))
    cache: Option<(Feat<F>, Vec<F>)>,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "GroupNorm: {channels} ch / {groups} groups");
        Self {
            groups,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            gg: Array1::zeros(channels),
            gb: Array1::zeros(channels),
            cache: None,
        }
    }

    /// Normalise; returns (y, x̂, inv_std per (sample, group)). `x̂` doubles as
    /// the backward cache; eval mode simply drops it.
    fn run(&self, x: &Feat<F>) -> (Feat<F>, Feat<F>, Vec<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "GroupNorm: channel mismatch");
        let gsz = c / self.groups; // channels per group
        let m = gsz * h * w; // elements per (sample, group)
        let hw = h * w;
        let xs = x.as_slice().unwrap();

        let stats: Vec<(F, F)> = par::map_collect(n * self.groups, |grp| {
            let xin = &xs[grp * m..(grp + 1) * m];
            let mean = par::sum_with(m, |i| xin[i]) / F::from_usize(m);
            let var = par::sum_with(m, |i| {
                let d = xin[i] - mean;
                d * d
            }) / F::from_usize(m);
            (mean, (var + F::from_f64(EPS)).sqrt().recip())
        });
        let inv_std: Vec<F> = stats.iter().map(|&(_, is)| is).collect();

        let mut xhat = Array4::zeros(x.dim());
        par::zip_chunks_mut(xhat.as_slice_mut().unwrap(), m, xs, m, |grp, out, xin| {
            let (mean, is) = stats[grp];
            for (o, &v) in out.iter_mut().zip(xin) {
                *o = (v - mean) * is;
            }
        });

        let mut y = Array4::zeros(x.dim());
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            hw,
            xhat.as_slice().unwrap(),
            hw,
            |plane, out, xin| {
                let ch = plane % c;
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for (o, &v) in out.iter_mut().zip(xin) {
                    *o = v * g + b;
                }
            },
        );
        (y, xhat, inv_std)
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let (y, xhat, inv_std) = self.run(x);
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        self.run(x).0
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let (xhat, inv_std) = self.cache.take().expect("GroupNorm::backward before forward_t");
        let (n, c, h, w) = xhat.dim();
        let (gsz, hw) = (c / self.groups, h * w);
        let m = gsz * hw;
        let gys = gy.as_slice().unwrap();
        let xhs = xhat.as_slice().unwrap();

        // Per-channel parameter grads; channels independent, inner order fixed.
        let per_ch: Vec<(F, F)> = par::map_collect(c, |ch| {
            let gg = par::sum_with(n * hw, |j| {
                let (s, p) = (j / hw, j % hw);
                let idx = (s * c + ch) * hw + p;
                gys[idx] * xhs[idx]
            });
            let gb = par::sum_with(n * hw, |j| {
                let (s, p) = (j / hw, j % hw);
                gys[(s * c + ch) * hw + p]
            });
            (gg, gb)
        });
        for (ch, (gg, gb)) in per_ch.into_iter().enumerate() {
            self.gg[ch] = self.gg[ch] + gg;
            self.gb[ch] = self.gb[ch] + gb;
        }

        // dx = inv_std · (dx̂ − mean(dx̂) − x̂·mean(dx̂ ⊙ x̂)) within each group,
        // where dx̂ = gy ⊙ γ.
        let mut gx = Array4::zeros(xhat.dim());
        par::zip_chunks_mut(gx.as_slice_mut().unwrap(), m, xhs, m, |grp, gxp, xhp| {
            let base = grp * m;
            let ch_of = |i: usize| ((base + i) / hw) % c;
            let dxh = |i: usize| gys[base + i] * self.gamma[ch_of(i)];
            let mean_dxh = par::sum_with(m, dxh) / F::from_usize(m);
            let mean_dxh_xh = par::sum_with(m, |i| dxh(i) * xhp[i]) / F::from_usize(m);
            let is = inv_std[grp];
            for i in 0..m {
                gxp[i] = is * (dxh(i) - mean_dxh - xhp[i] * mean_dxh_xh);
            }
        });
        gx
    }
}

impl<F: Scalar> Params<F> for GroupNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            &key(prefix, "gamma"),
            self.gamma.as_slice_mut().unwrap(),
            self.gg.as_slice_mut().unwrap(),
        );
        f(
            &key(prefix, "beta"),
            self.beta.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

/// BatchNorm over `(N, C, H, W)`: per-channel batch statistics during
/// training, exponential running statistics for inference.
pub struct BatchNorm2d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    momentum: F,
    gg: Array1<F>,
    gb: Array1<F>,
    cache: Option<(Feat<F>, Vec<F>)>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::from_f64(0.1),
            gg: Array1::zeros(channels),
            gb: Array1::zeros(channels),
            cache: None,
        }
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "BatchNorm2d: channel mismatch");
        let hw = h * w;
        let m = n * hw;
        let xs = x.as_slice().unwrap();

        // Per-channel batch mean/var (biased for normalisation, unbiased for
        // the running estimate, matching the usual convention).
        let stats: Vec<(F, F)> = par::map_collect(c, |ch| {
            let mean = par::sum_with(m, |j| xs[((j / hw) * c + ch) * hw + j % hw])
                / F::from_usize(m);
            let var = par::sum_with(m, |j| {
                let d = xs[((j / hw) * c + ch) * hw + j % hw] - mean;
                d * d
            }) / F::from_usize(m);
            (mean, var)
        });
        let one = F::one();
        for (ch, &(mean, var)) in stats.iter().enumerate() {
            let unbiased = if m > 1 { var * F::from_usize(m) / F::from_usize(m - 1) } else { var };
            self.running_mean[ch] = (one - self.momentum) * self.running_mean[ch] + self.momentum * mean;
            self.running_var[ch] = (one - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
        }

        let inv_std: Vec<F> =
            stats.iter().map(|&(_, v)| (v + F::from_f64(EPS)).sqrt().recip()).collect();
        let mut xhat = Array4::zeros(x.dim());
        par::zip_chunks_mut(xhat.as_slice_mut().unwrap(), hw, xs, hw, |plane, out, xin| {
            let ch = plane % c;
            let (mean, _) = stats[ch];
            let is = inv_std[ch];
            for (o, &v) in out.iter_mut().zip(xin) {
                *o = (v - mean) * is;
            }
        });
        let y = self.scale_shift(&xhat);
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "BatchNorm2d: channel mismatch");
        let hw = h * w;
        let mut y = Array4::zeros(x.dim());
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            hw,
            x.as_slice().unwrap(),
            hw,
            |plane, out, xin| {
                let ch = plane % c;
                let is = (self.running_var[ch] + F::from_f64(EPS)).sqrt().recip();
                let (g, b, mean) = (self.gamma[ch], self.beta[ch], self.running_mean[ch]);
                for (o, &v) in out.iter_mut().zip(xin) {
                    *o = (v - mean) * is * g + b;
                }
            },
        );
        y
    }

    fn scale_shift(&self, xhat: &Feat<F>) -> Feat<F> {
        let (_, c, h, w) = xhat.dim();
        let hw = h * w;
        let mut y = Array4::zeros(xhat.dim());
        par::zip_chunks_mut(
            y.as_slice_mut().unwrap(),
            hw,
            xhat.as_slice().unwrap(),
            hw,
            |plane, out, xin| {
                let ch = plane % c;
                let (g, b) = (self.gamma[ch], self.beta[ch]);
                for (o, &v) in out.iter_mut().zip(xin) {
                    *o = v * g + b;
                }
            },
        );
        y
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let (xhat, inv_std) = self.cache.take().expect("BatchNorm2d::backward before forward_t");
        let (n, c, h, w) = xhat.dim();
        let hw = h * w;
        let m = n * hw;
        let gys = gy.as_slice().unwrap();
        let xhs = xhat.as_slice().unwrap();

        // Channel sums needed for both parameter and input grads.
        let sums: Vec<(F, F)> = par::map_collect(c, |ch| {
            let s_g = par::sum_with(m, |j| gys[((j / hw) * c + ch) * hw + j % hw]);
            let s_gx = par::sum_with(m, |j| {
                let idx = ((j / hw) * c + ch) * hw + j % hw;
                gys[idx] * xhs[idx]
            });
            (s_g, s_gx)
        });
        for (ch, &(s_g, s_gx)) in sums.iter().enumerate() {
            self.gg[ch] = self.gg[ch] + s_gx;
            self.gb[ch] = self.gb[ch] + s_g;
        }

        let inv_m = F::from_usize(m).recip();
        let mut gx = Array4::zeros(xhat.dim());
        par::zip_chunks_mut(gx.as_slice_mut().unwrap(), hw, xhs, hw, |plane, gxp, xhp| {
            let (s, ch) = (plane / c, plane % c);
            let (s_g, s_gx) = sums[ch];
            let coeff = self.gamma[ch] * inv_std[ch];
            let base = (s * c + ch) * hw;
            for i in 0..hw {
                gxp[i] = coeff * (gys[base + i] - s_g * inv_m - xhp[i] * s_gx * inv_m);
            }
        });
        gx
    }
}

impl<F: Scalar> Params<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            &key(prefix, "gamma"),
            self.gamma.as_slice_mut().unwrap(),
            self.gg.as_slice_mut().unwrap(),
        );
        f(
            &key(prefix, "beta"),
            self.beta.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        f(&key(prefix, "gamma"), self.gamma.as_slice_mut().unwrap());
        f(&key(prefix, "beta"), self.beta.as_slice_mut().unwrap());
        f(&key(prefix, "running_mean"), self.running_mean.as_slice_mut().unwrap());
        f(&key(prefix, "running_var"), self.running_var.as_slice_mut().unwrap());
    }
}

/// Either normalisation behind one interface, so conv blocks can be built
/// with group statistics (encoder: per-sample, batch-size independent) or
/// batch statistics (decoder) without duplicating the block code.
pub enum Norm<F> {
    Group(GroupNorm<F>),
    Batch(BatchNorm2d<F>),
}

impl<F: Scalar> Norm<F> {
    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        match self {
            Norm::Group(n) => n.forward_t(x),
            Norm::Batch(n) => n.forward_t(x),
        }
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        match self {
            Norm::Group(n) => n.forward_e(x),
            Norm::Batch(n) => n.forward_e(x),
        }
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        match self {
            Norm::Group(n) => n.backward(gy),
            Norm::Batch(n) => n.backward(gy),
        }
    }
}

impl<F: Scalar> Params<F> for Norm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        match self {
            Norm::Group(n) => n.visit_params(prefix, f),
            Norm::Batch(n) => n.visit_params(prefix, f),
        }
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        match self {
            Norm::Group(n) => n.visit_state(prefix, f),
            Norm::Batch(n) => n.visit_state(prefix, f),
        }
    }
}
