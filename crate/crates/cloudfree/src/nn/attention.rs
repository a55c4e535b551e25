//! Lightweight temporal attention over a short image time series.
//!
//! Works on spatially pooled features. Each date's feature map is normalised,
//! projected to twice its width, tagged with a sinusoidal encoding of its
//! position in the series, and mapped to per-head keys. A single *learned*
//! query per head (no query network) scores the dates at every pooled spatial
//! location, and a softmax over the time axis turns the scores into per-pixel
//! date weights — the attention masks. The masks are the only thing the
//! attention stage produces; the caller upsamples them to full resolution and
//! applies them to the unpooled features via [`grouped_aggregate`], which
//! assigns each head a contiguous slice of channels.

use super::conv::Conv1x1;
use super::norm::GroupNorm;
use super::{key, Feat, Params, Scalar};
use crate::par;
use ndarray::{Array2, Array5};
use rand_chacha::ChaCha8Rng;

/// Date weights per head and pooled location: `(B, n_head, T, h, w)`.
pub type Masks<F> = Array5<F>;

pub struct TemporalAttention<F> {
    pub n_head: usize,
    pub d_k: usize,
    in_norm: GroupNorm<F>,
    proj: Conv1x1<F>,
    fc_k: Conv1x1<F>,
    q: Array2<F>, // (n_head, d_k)
    gq: Array2<F>,
    cache: Option<AttCache<F>>,
}

struct AttCache<F> {
    keys: Feat<F>,
    masks: Masks<F>,
}

/// Sinusoidal position code for date `t` in a `d_model`-wide feature space.
fn positional_code(t: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            let angle = t as f64 / 1000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

impl<F: Scalar> TemporalAttention<F> {
    pub fn new(d_in: usize, n_head: usize, d_k: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d_in % n_head == 0, "TemporalAttention: {d_in} channels / {n_head} heads");
        let d_model = 2 * d_in;
        let mut q = Array2::zeros((n_head, d_k));
        super::init::uniform_fan_in(q.as_slice_mut().unwrap(), d_k, rng);
        Self {
            n_head,
            d_k,
            in_norm: GroupNorm::new(d_in, n_head),
            proj: Conv1x1::new(d_in, d_model, rng),
            fc_k: Conv1x1::new(d_model, n_head * d_k, rng),
            q,
            gq: Array2::zeros((n_head, d_k)),
            cache: None,
        }
    }

    /// Add the date encodings in place; `x` is `(B·T, d_model, h, w)` and
    /// `dates` carries one (possibly non-contiguous) date index per step.
    fn add_positional(&self, x: &mut Feat<F>, dates: &[usize]) {
        let (bt, d_model, h, w) = x.dim();
        let t_len = dates.len();
        debug_assert_eq!(bt % t_len, 0);
        let hw = h * w;
        let codes: Vec<F> = dates
            .iter()
            .flat_map(|&t| positional_code(t, d_model))
            .map(F::from_f64)
            .collect();
        par::planes_mut(x.as_slice_mut().unwrap(), hw, |plane, chunk| {
            let (n, i) = (plane / d_model, plane % d_model);
            let code = codes[(n % t_len) * d_model + i];
            for v in chunk {
                *v = *v + code;
            }
        });
    }

    /// Scores → softmax over the time axis, in place per (sample, head, pixel).
    fn masks_from_keys(&self, keys: &Feat<F>, b: usize, t_len: usize) -> Masks<F> {
        let (_, kc, h, w) = keys.dim();
        let hw = h * w;
        let (n_head, d_k) = (self.n_head, self.d_k);
        debug_assert_eq!(kc, n_head * d_k);
        let inv_sqrt = F::from_f64(1.0 / (d_k as f64).sqrt());
        let ks = keys.as_slice().unwrap();
        let qs = self.q.as_slice().unwrap();

        let mut masks = Array5::zeros((b, n_head, t_len, h, w));
        par::planes_mut(masks.as_slice_mut().unwrap(), t_len * hw, |blk, mp| {
                let (bi, head) = (blk / n_head, blk % n_head);
                for t in 0..t_len {
                    let kbase = ((bi * t_len + t) * kc + head * d_k) * hw;
                    for p in 0..hw {
                        let mut s = F::zero();
                        for dk in 0..d_k {
                            s = s + qs[head * d_k + dk] * ks[kbase + dk * hw + p];
                        }
                        mp[t * hw + p] = s * inv_sqrt;
                    }
                }
                // Softmax over t at each pixel, max-subtracted for stability.
                for p in 0..hw {
                    let mut mx = mp[p];
                    for t in 1..t_len {
                        if mp[t * hw + p] > mx {
                            mx = mp[t * hw + p];
                        }
                    }
                    let mut z = F::zero();
                    for t in 0..t_len {
                        let e = (mp[t * hw + p] - mx).exp();
                        mp[t * hw + p] = e;
                        z = z + e;
                    }
                    for t in 0..t_len {
                        mp[t * hw + p] = mp[t * hw + p] / z;
                    }
                }
        });
        masks
    }

    /// `x` is `(B·T, d_in, h, w)` pooled features for `b` series sharing the
    /// same `dates`; returns the attention masks `(b, n_head, T, h, w)`.
    pub fn forward_t(&mut self, x: &Feat<F>, b: usize, dates: &[usize]) -> Masks<F> {
        let t_len = dates.len();
        assert_eq!(x.dim().0, b * t_len, "TemporalAttention: series shape mismatch");
        let xn = self.in_norm.forward_t(x);
        let mut p = self.proj.forward_t(&xn);
        self.add_positional(&mut p, dates);
        let keys = self.fc_k.forward_t(&p);
        let masks = self.masks_from_keys(&keys, b, t_len);
        self.cache = Some(AttCache { keys: keys.clone(), masks: masks.clone() });
        masks
    }

    pub fn forward_e(&self, x: &Feat<F>, b: usize, dates: &[usize]) -> Masks<F> {
        let t_len = dates.len();
        assert_eq!(x.dim().0, b * t_len, "TemporalAttention: series shape mismatch");
        let xn = self.in_norm.forward_e(x);
        let mut p = self.proj.forward_e(&xn);
        self.add_positional(&mut p, dates);
        let keys = self.fc_k.forward_e(&p);
        self.masks_from_keys(&keys, b, t_len)
    }

    /// Gradient w.r.t. the pooled input features, given the mask gradient.
    pub fn backward(&mut self, g_masks: &Masks<F>) -> Feat<F> {
        let AttCache { keys, masks } =
            self.cache.take().expect("TemporalAttention::backward before forward_t");
        let (b, n_head, t_len, h, w) = masks.dim();
        let hw = h * w;
        let (kc, d_k) = (n_head * self.d_k, self.d_k);
        let inv_sqrt = F::from_f64(1.0 / (d_k as f64).sqrt());
        let ms = masks.as_slice().unwrap();
        let gms = g_masks.as_slice().unwrap();
        let ks = keys.as_slice().unwrap();
        let qs = self.q.as_slice().unwrap();

        // Softmax backward: gs_t = m_t (g_t − Σ_u m_u g_u) per (sample, head, pixel).
        let mut gscore = Array5::<F>::zeros(masks.dim());
        par::zip_chunks_mut(gscore.as_slice_mut().unwrap(), t_len * hw, ms, t_len * hw, |blk, gsp, mp| {
            let base = blk * t_len * hw;
            for p in 0..hw {
                let mut dot = F::zero();
                for t in 0..t_len {
                    dot = dot + mp[t * hw + p] * gms[base + t * hw + p];
                }
                for t in 0..t_len {
                    gsp[t * hw + p] = mp[t * hw + p] * (gms[base + t * hw + p] - dot);
                }
            }
        });
        let gss = gscore.as_slice().unwrap();

        // Key gradient (parallel over (b·t, head) planes) and query gradient
        // (per head, fixed series/pixel order).
        let mut gk = Feat::<F>::zeros(keys.dim());
        par::planes_mut(gk.as_slice_mut().unwrap(), d_k * hw, |blk, gkp| {
            let (bt, head) = (blk / n_head, blk % n_head);
            let (bi, t) = (bt / t_len, bt % t_len);
            let gsbase = ((bi * n_head + head) * t_len + t) * hw;
            for dk in 0..d_k {
                let qv = qs[head * d_k + dk] * inv_sqrt;
                for p in 0..hw {
                    gkp[dk * hw + p] = gss[gsbase + p] * qv;
                }
            }
        });
        let gq_add: Vec<F> = par::map_collect(n_head, |head| {
            let mut acc = vec![F::zero(); d_k];
            for bi in 0..b {
                for t in 0..t_len {
                    let gsbase = ((bi * n_head + head) * t_len + t) * hw;
                    let kbase = ((bi * t_len + t) * kc + head * d_k) * hw;
                    for dk in 0..d_k {
                        let s = par::sum_with(hw, |p| gss[gsbase + p] * ks[kbase + dk * hw + p]);
                        acc[dk] = acc[dk] + s * inv_sqrt;
                    }
                }
            }
            acc
        })
        .into_iter()
        .flatten()
        .collect();
        for (g, add) in self.gq.as_slice_mut().unwrap().iter_mut().zip(gq_add) {
            *g = *g + add;
        }

        // Position codes are additive constants: gradient passes straight through.
        let gp = self.fc_k.backward(&gk);
        let gxn = self.proj.backward(&gp);
        self.in_norm.backward(&gxn)
    }
}

impl<F: Scalar> Params<F> for TemporalAttention<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.in_norm.visit_params(&key(prefix, "in_norm"), f);
        self.proj.visit_params(&key(prefix, "proj"), f);
        self.fc_k.visit_params(&key(prefix, "fc_k"), f);
        f(
            &key(prefix, "query"),
            self.q.as_slice_mut().unwrap(),
            self.gq.as_slice_mut().unwrap(),
        );
    }
}

/// Blend per-date full-resolution features with upsampled attention masks.
///
/// Head `i` of the masks weights the `i`-th contiguous channel group:
/// `out[b,c,·] = Σ_t masks[b, group(c), t, ·] · values[b·T+t, c, ·]`.
pub fn grouped_aggregate<F: Scalar>(masks: &Masks<F>, values: &Feat<F>) -> Feat<F> {
    let (b, n_head, t_len, h, w) = masks.dim();
    let (btv, c, hv, wv) = values.dim();
    assert_eq!(btv, b * t_len, "grouped_aggregate: series length mismatch");
    assert_eq!((h, w), (hv, wv), "grouped_aggregate: resolution mismatch");
    assert!(c % n_head == 0, "grouped_aggregate: {c} channels / {n_head} heads");
    let gsz = c / n_head;
    let hw = h * w;
    let ms = masks.as_slice().unwrap();
    let vs = values.as_slice().unwrap();

    let mut out = Feat::<F>::zeros((b, c, h, w));
    par::planes_mut(out.as_slice_mut().unwrap(), hw, |plane, op| {
        let (bi, ch) = (plane / c, plane % c);
        let head = ch / gsz;
        for t in 0..t_len {
            let mbase = ((bi * n_head + head) * t_len + t) * hw;
            let vbase = ((bi * t_len + t) * c + ch) * hw;
            for p in 0..hw {
                op[p] = op[p] + ms[mbase + p] * vs[vbase + p];
            }
        }
    });
    out
}

/// Gradients of [`grouped_aggregate`] w.r.t. masks and values.
pub fn grouped_aggregate_backward<F: Scalar>(
    g_out: &Feat<F>,
    masks: &Masks<F>,
    values: &Feat<F>,
) -> (Masks<F>, Feat<F>) {
    let (_, n_head, t_len, h, w) = masks.dim();
    let (_, c, _, _) = values.dim();
    let gsz = c / n_head;
    let hw = h * w;
    let gos = g_out.as_slice().unwrap();
    let ms = masks.as_slice().unwrap();
    let vs = values.as_slice().unwrap();

    let mut g_values = Feat::<F>::zeros(values.dim());
    par::planes_mut(g_values.as_slice_mut().unwrap(), hw, |plane, gvp| {
        let (bt, ch) = (plane / c, plane % c);
        let (bi, t) = (bt / t_len, bt % t_len);
        let head = ch / gsz;
        let mbase = ((bi * n_head + head) * t_len + t) * hw;
        let obase = (bi * c + ch) * hw;
        for p in 0..hw {
            gvp[p] = ms[mbase + p] * gos[obase + p];
        }
    });

    let mut g_masks = Masks::<F>::zeros(masks.dim());
    par::planes_mut(g_masks.as_slice_mut().unwrap(), hw, |plane, gmp| {
        let (bh, t) = (plane / t_len, plane % t_len);
        let (bi, head) = (bh / n_head, bh % n_head);
        for ch in head * gsz..(head + 1) * gsz {
            let obase = (bi * c + ch) * hw;
            let vbase = ((bi * t_len + t) * c + ch) * hw;
            for p in 0..hw {
                gmp[p] = gmp[p] + gos[obase + p] * vs[vbase + p];
            }
        }
    });
    (g_masks, g_values)
}
