//! The reconstruction network: a weight-shared per-date encoder, lightweight
//! temporal attention that scores each date at low resolution, channel-grouped
//! temporal aggregation of the full-resolution features, and a decoder that
//! emits a reconstructed image together with (optionally) per-pixel variances.
//!
//! The public per-sample operations ([`CloudRemovalNet::encode_shared`],
//! [`CloudRemovalNet::temporal_attention`], [`CloudRemovalNet::aggregate`],
//! [`CloudRemovalNet::decode`], [`CloudRemovalNet::forward`]) expose the four
//! stages on `[T, C, H, W]` inputs for evaluation and inspection. Training
//! goes through the batched pair [`CloudRemovalNet::forward_batch`] /
//! [`CloudRemovalNet::backward_batch`], which shares the exact same layers
//! and additionally threads gradients back to every parameter.

use crate::nn::attention::{grouped_aggregate, grouped_aggregate_backward, Masks, TemporalAttention};
use crate::nn::block::{MbConvBlock, NormKind};
use crate::nn::conv::Conv1x1;
use crate::nn::dropout::Dropout;
use crate::nn::norm::GroupNorm;
use crate::nn::pool::MaxPool2d;
use crate::nn::upsample::BilinearUpsample;
use crate::nn::{act::Silu, key, Feat, Params, Scalar};
use crate::{Error, Result};
use ndarray::{s, Array3, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Additive floor under the softplus variance head.
pub const VAR_FLOOR: f64 = 1e-6;

/// Group count for the encoder-side group normalisation.
const ENC_GROUPS: usize = 4;

/// Shape of the predictive covariance per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    /// Point estimate only; no variance head.
    None,
    /// One shared variance per pixel (`Σ = σ²·I`).
    Isotropic,
    /// One variance per channel per pixel.
    Diagonal,
}

impl CovMode {
    /// Decoder output channels: K means plus this mode's variance channels.
    pub fn out_channels(self, k: usize) -> usize {
        k + self.var_channels(k)
    }

    pub fn var_channels(self, k: usize) -> usize {
        match self {
            CovMode::None => 0,
            CovMode::Isotropic => 1,
            CovMode::Diagonal => k,
        }
    }
}

impl std::fmt::Display for CovMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CovMode::None => "none",
            CovMode::Isotropic => "isotropic",
            CovMode::Diagonal => "diagonal",
        })
    }
}

impl std::str::FromStr for CovMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CovMode::None),
            "isotropic" => Ok(CovMode::Isotropic),
            "diagonal" => Ok(CovMode::Diagonal),
            other => Err(Error::Input(format!(
                "unknown covariance mode `{other}` (expected none, isotropic or diagonal)"
            ))),
        }
    }
}

/// All architecture hyperparameters. Serializes to/from TOML so experiment
/// configs are plain text files.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder blocks between the input projection and the attention.
    pub n_e: usize,
    /// Decoder blocks after temporal aggregation.
    pub n_d: usize,
    /// Embedding width (feature channels throughout the trunk).
    pub d_m: usize,
    /// Attention heads; also the number of channel groups at aggregation.
    pub n_head: usize,
    /// Key dimension per head.
    pub d_k: usize,
    /// Input channels per date (optical + SAR).
    pub c_in: usize,
    /// Reconstructed output channels.
    pub k: usize,
    pub cov_mode: CovMode,
    /// Side length of the downsampled grid the attention runs on.
    pub low_res: usize,
    /// Dropout probability on the upsampled attention masks (training only).
    pub attn_dropout: f64,
    /// Squeeze-excitation reduction factor relative to the block input width.
    pub se_expansion: f64,
    /// Upper bound of the sigmoid reconstruction range.
    pub out_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_e: 1,
            n_d: 5,
            d_m: 128,
            n_head: 16,
            d_k: 4,
            c_in: 15,
            k: 13,
            cov_mode: CovMode::Diagonal,
            low_res: 32,
            attn_dropout: 0.1,
            se_expansion: 0.25,
            out_scale: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_d == 0 {
            return fail("n_d must be ≥ 1 (the decoder needs at least one block)".into());
        }
        for (name, v) in [
            ("d_m", self.d_m),
            ("n_head", self.n_head),
            ("d_k", self.d_k),
            ("c_in", self.c_in),
            ("k", self.k),
            ("low_res", self.low_res),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_m % self.n_head != 0 {
            return fail(format!(
                "d_m = {} must be divisible by n_head = {} (channel grouping needs equal groups)",
                self.d_m, self.n_head
            ));
        }
        if self.d_m % ENC_GROUPS != 0 {
            return fail(format!(
                "d_m = {} must be divisible by the group-norm group count {ENC_GROUPS}",
                self.d_m
            ));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return fail(format!("attn_dropout = {} outside [0, 1)", self.attn_dropout));
        }
        if !(self.se_expansion > 0.0) || self.se_hidden() == 0 {
            return fail(format!(
                "se_expansion = {} leaves the squeeze-excitation bottleneck empty",
                self.se_expansion
            ));
        }
        if !(self.out_scale > 0.0) {
            return fail(format!("out_scale = {} must be positive", self.out_scale));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.cov_mode.out_channels(self.k)
    }

    fn se_hidden(&self) -> usize {
        (self.d_m as f64 * self.se_expansion).round() as usize
    }
}

/// Per-date encoder output: `values` is `[T, d_m, H, W]`; `dates` optionally
/// carries non-contiguous acquisition indices for the positional encoding
/// (`None` means steps 0…T−1).
#[derive(Debug, Clone)]
pub struct FeatureSequence<F> {
    pub values: Array4<F>,
    pub dates: Option<Vec<usize>>,
}

/// Temporal attention masks at both resolutions, `[n_head, T, ·, ·]`. In eval
/// mode every low-res pixel's mask sums to 1 over T; in training mode dropout
/// has already been applied to `full_res`, so sums there need *not* be 1.
#[derive(Debug, Clone)]
pub struct AttentionMasks<F> {
    pub low_res: Array4<F>,
    pub full_res: Array4<F>,
}

/// A reconstructed image with optional per-pixel uncertainty. `mean` is
/// `[K, H, W]` strictly inside `(0, out_scale)`; `variance` is `[K, H, W]`
/// (diagonal), `[1, H, W]` (isotropic) or absent, all entries ≥ 1e−6.
#[derive(Debug, Clone)]
pub struct Prediction<F> {
    pub mean: Array3<F>,
    pub variance: Option<Array3<F>>,
}

/// Batched counterpart of [`Prediction`] with a leading batch axis.
#[derive(Debug, Clone)]
pub struct BatchOutput<F> {
    pub mean: Feat<F>,
    pub variance: Option<Feat<F>>,
}

/// Everything the batched backward pass needs that the layers don't cache
/// themselves.
struct ForwardCache<F> {
    feats: Feat<F>,      // encoder output [B·T, d_m, H, W]
    masks_full: Masks<F>, // post-dropout full-res masks [B, n_head, T, H, W]
    raw: Feat<F>,        // decoder head pre-activations [B, c_out, H, W]
}

pub struct CloudRemovalNet<F> {
    cfg: ModelConfig,
    in_conv: Conv1x1<F>,
    in_norm: GroupNorm<F>,
    in_act: Silu<F>,
    encoder: Vec<MbConvBlock<F>>,
    attn: TemporalAttention<F>,
    mask_dropout: Dropout<F>,
    decoder: Vec<MbConvBlock<F>>,
    out_conv: Conv1x1<F>,
    // Resolution-dependent stages, instantiated on first use and replaced
    // whenever the input resolution changes; they carry the forward caches
    // the matching backward call consumes.
    pool: Option<MaxPool2d>,
    upsample: Option<BilinearUpsample>,
    cache: Option<ForwardCache<F>>,
}

impl<F: Scalar> CloudRemovalNet<F> {
    /// Build a freshly initialised network. `seed` fixes every random draw
    /// (weights and dropout), so equal seeds give bit-identical models.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let se = cfg.se_hidden();
        let in_conv = Conv1x1::new(cfg.c_in, cfg.d_m, &mut rng);
        let in_norm = GroupNorm::new(cfg.d_m, ENC_GROUPS);
        let encoder = (0..cfg.n_e)
            .map(|_| MbConvBlock::new(cfg.d_m, NormKind::Group(ENC_GROUPS), se, &mut rng))
            .collect();
        let attn = TemporalAttention::new(cfg.d_m, cfg.n_head, cfg.d_k, &mut rng);
        let mask_dropout = Dropout::new(cfg.attn_dropout, rng.gen());
        let decoder =
            (0..cfg.n_d).map(|_| MbConvBlock::new(cfg.d_m, NormKind::Batch, se, &mut rng)).collect();
        let mut out_conv = Conv1x1::new(cfg.d_m, cfg.out_channels(), &mut rng);
        // Bias the variance channels so the initial softplus output is ≈ 1:
        // early NLL then behaves like L2 while the mean head finds its feet.
        let unit_bias = F::from_f64((std::f64::consts::E - 1.0).ln());
        for ch in cfg.k..cfg.out_channels() {
            out_conv.b[ch] = unit_bias;
        }
        Ok(Self {
            cfg,
            in_conv,
            in_norm,
            in_act: Silu::new(),
            encoder,
            attn,
            mask_dropout,
            decoder,
            out_conv,
            pool: None,
            upsample: None,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    // ---- stage helpers shared by the batched and per-sample paths ----

    /// `[N, C_in, H, W]` → `[N, d_m, H, W]` through the shared encoder.
    fn encode_feats(&mut self, x: &Feat<F>, train: bool) -> Feat<F> {
        let mut h = if train {
            let a = self.in_conv.forward_t(x);
            let a = self.in_norm.forward_t(&a);
            self.in_act.forward_t(&a)
        } else {
            let a = self.in_conv.forward_e(x);
            let a = self.in_norm.forward_e(&a);
            self.in_act.forward_e(&a)
        };
        for blk in &mut self.encoder {
            h = if train { blk.forward_t(&h) } else { blk.forward_e(&h) };
        }
        h
    }

    /// Pool, attend, upsample and (in training) drop out; returns the low-res
    /// and full-res masks, both `[B, n_head, T, ·, ·]`.
    fn attend(
        &mut self,
        feats: &Feat<F>,
        b: usize,
        dates: &[usize],
        train: bool,
    ) -> Result<(Masks<F>, Masks<F>)> {
        let (_, _, h, w) = feats.dim();
        let lr = self.cfg.low_res;
        if lr > h || lr > w {
            return Err(Error::Config(format!(
                "low_res = {lr} exceeds the {h}×{w} input resolution"
            )));
        }
        if h % lr != 0 || w % lr != 0 || h / lr != w / lr {
            return Err(Error::Config(format!(
                "input {h}×{w} is not an integer multiple of the {lr}×{lr} attention grid"
            )));
        }
        let mut pool = MaxPool2d::new(h / lr);
        let pooled = if train { pool.forward_t(feats) } else { pool.forward_e(feats) };
        self.pool = Some(pool);

        let low = if train {
            self.attn.forward_t(&pooled, b, dates)
        } else {
            self.attn.forward_e(&pooled, b, dates)
        };

        let (bb, nh, t, lh, lw) = low.dim();
        let low4 = low.clone().into_shape_with_order((bb, nh * t, lh, lw)).expect("contiguous");
        let mut up = BilinearUpsample::new(h, w);
        let full4 = if train { up.forward_t(&low4) } else { up.forward_e(&low4) };
        self.upsample = Some(up);
        let mut full =
            full4.into_shape_with_order((bb, nh, t, h, w)).expect("contiguous");
        if train {
            self.mask_dropout.apply_t(full.as_slice_mut().expect("standard layout"));
        }
        Ok((low, full))
    }

    /// Decoder trunk + output head pre-activations, `[B, c_out, H, W]`.
    fn decode_feats(&mut self, fhat: &Feat<F>, train: bool) -> Feat<F> {
        let mut h = fhat.clone();
        for blk in &mut self.decoder {
            h = if train { blk.forward_t(&h) } else { blk.forward_e(&h) };
        }
        if train {
            self.out_conv.forward_t(&h)
        } else {
            self.out_conv.forward_e(&h)
        }
    }

    /// Split head pre-activations into the squashed mean and the positive
    /// variance. The sigmoid is clipped a hair inside (0, 1) so the mean is
    /// strictly inside its range even where `f32` saturates.
    fn split_output(&self, raw: &Feat<F>) -> BatchOutput<F> {
        let k = self.cfg.k;
        let scale = F::from_f64(self.cfg.out_scale);
        let eps = F::from_f64(1e-7);
        let lo = eps;
        let hi = F::one() - eps;
        let floor = F::from_f64(VAR_FLOOR);
        let mean = raw
            .slice(s![.., ..k, .., ..])
            .mapv(|a| a.sigmoid().max(lo).min(hi) * scale);
        let variance = match self.cfg.cov_mode {
            CovMode::None => None,
            _ => Some(raw.slice(s![.., k.., .., ..]).mapv(|v| v.softplus() + floor)),
        };
        BatchOutput { mean, variance }
    }

    // ---- batched training path ----

    /// Forward over a batch of `b` date series, each with the same `dates`.
    /// `x` is `[b·T, C_in, H, W]` with series laid out contiguously. In
    /// training mode the pass caches everything [`Self::backward_batch`]
    /// needs; in eval mode it is pure.
    pub fn forward_batch(
        &mut self,
        x: &Feat<F>,
        b: usize,
        dates: &[usize],
        train: bool,
    ) -> Result<BatchOutput<F>> {
        let (n, c, _, _) = x.dim();
        let t = dates.len();
        if t == 0 || b == 0 {
            return Err(Error::Input("empty batch or empty date series".into()));
        }
        if n != b * t {
            return Err(Error::Config(format!(
                "{n} stacked frames ≠ {b} series × {t} dates"
            )));
        }
        if c != self.cfg.c_in {
            return Err(Error::Config(format!(
                "input has {c} channels, the model expects C_in = {}",
                self.cfg.c_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in model input".into()));
        }

        let feats = self.encode_feats(x, train);
        let (_, full) = self.attend(&feats, b, dates, train)?;
        let agg = grouped_aggregate(&full, &feats);
        let raw = self.decode_feats(&agg, train);
        let out = self.split_output(&raw);
        if train {
            self.cache = Some(ForwardCache { feats, masks_full: full, raw });
        }
        Ok(out)
    }

    /// Backward from loss gradients w.r.t. the mean (`[b, K, H, W]`) and, if
    /// the model predicts uncertainty, the variance. Accumulates parameter
    /// gradients; the input gradient is discarded.
    pub fn backward_batch(&mut self, g_mean: &Feat<F>, g_var: Option<&Feat<F>>) -> Result<()> {
        let ForwardCache { feats, masks_full, raw } = self
            .cache
            .take()
            .ok_or_else(|| Error::Input("backward_batch without a training forward".into()))?;
        let k = self.cfg.k;
        let vc = self.cfg.cov_mode.var_channels(k);
        let (bb, cc, h, w) = raw.dim();
        if g_mean.dim() != (bb, k, h, w) {
            return Err(Error::Input(format!(
                "mean gradient shape {:?} ≠ {:?}",
                g_mean.dim(),
                (bb, k, h, w)
            )));
        }
        match (vc, g_var) {
            (0, None) => {}
            (0, Some(_)) => {
                return Err(Error::Input("variance gradient supplied to a mean-only model".into()))
            }
            (_, None) => {
                return Err(Error::Input("missing variance gradient".into()));
            }
            (vc, Some(gv)) if gv.dim() != (bb, vc, h, w) => {
                return Err(Error::Input(format!(
                    "variance gradient shape {:?} ≠ {:?}",
                    gv.dim(),
                    (bb, vc, h, w)
                )));
            }
            _ => {}
        }
        debug_assert_eq!(cc, k + vc);

        // Head backward: mean = σ(a)·s, variance = softplus(v) + floor.
        let scale = F::from_f64(self.cfg.out_scale);
        let mut g_raw = Feat::<F>::zeros(raw.dim());
        {
            let mut gm = g_raw.slice_mut(s![.., ..k, .., ..]);
            Zip::from(&mut gm)
                .and(g_mean)
                .and(&raw.slice(s![.., ..k, .., ..]))
                .for_each(|g, &gy, &a| {
                    let sg = a.sigmoid();
                    *g = gy * scale * sg * (F::one() - sg);
                });
        }
        if let Some(gv) = g_var {
            let mut gvp = g_raw.slice_mut(s![.., k.., .., ..]);
            Zip::from(&mut gvp).and(gv).and(&raw.slice(s![.., k.., .., ..])).for_each(
                |g, &gy, &v| {
                    *g = gy * v.sigmoid();
                },
            );
        }

        // Decoder.
        let mut g = self.out_conv.backward(&g_raw);
        for blk in self.decoder.iter_mut().rev() {
            g = blk.backward(&g);
        }

        // Aggregation fans gradients out to the masks and the features.
        let (mut g_masks, g_values) = grouped_aggregate_backward(&g, &masks_full, &feats);
        self.mask_dropout.backward(g_masks.as_slice_mut().expect("standard layout"));

        let (b, nh, t, fh, fw) = g_masks.dim();
        let gm4 = g_masks.into_shape_with_order((b, nh * t, fh, fw)).expect("contiguous");
        let g_low4 = self
            .upsample
            .as_mut()
            .expect("backward_batch without forward")
            .backward(&gm4);
        let (lb, lc, lh, lw) = g_low4.dim();
        let g_low = g_low4.into_shape_with_order((lb, nh, lc / nh, lh, lw)).expect("contiguous");

        let g_pooled = self.attn.backward(&g_low);
        let mut g_feats = self.pool.as_mut().expect("backward_batch without forward").backward(&g_pooled);
        g_feats += &g_values;

        // Shared encoder.
        for blk in self.encoder.iter_mut().rev() {
            g_feats = blk.backward(&g_feats);
        }
        let g = self.in_act.backward(&g_feats);
        let g = self.in_norm.backward(&g);
        let _ = self.in_conv.backward(&g);
        Ok(())
    }

    // ---- public per-sample operations ----

    /// Encode a `[T, C_in, H, W]` date series with the shared per-date
    /// encoder. The same weights act on every date, so permuting input steps
    /// permutes the output steps identically.
    pub fn encode_shared(&mut self, x: &Array4<F>, train: bool) -> Result<FeatureSequence<F>> {
        let (t, c, _, _) = x.dim();
        if t == 0 {
            return Err(Error::Input("empty date series".into()));
        }
        if c != self.cfg.c_in {
            return Err(Error::Config(format!(
                "input has {c} channels, the model expects C_in = {}",
                self.cfg.c_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in model input".into()));
        }
        Ok(FeatureSequence { values: self.encode_feats(x, train), dates: None })
    }

    /// Score the dates of an encoded series against each other. Returns masks
    /// at the attention grid resolution and bilinearly upsampled to full
    /// resolution; in training mode dropout is applied to the upsampled masks
    /// (they then no longer sum to 1 over dates — by design).
    pub fn temporal_attention(
        &mut self,
        f: &FeatureSequence<F>,
        train: bool,
    ) -> Result<AttentionMasks<F>> {
        let t = f.values.dim().0;
        if t == 0 {
            return Err(Error::Input("empty feature sequence".into()));
        }
        let dates: Vec<usize> = match &f.dates {
            Some(d) => {
                if d.len() != t {
                    return Err(Error::Input(format!(
                        "{} dates for {t} feature steps",
                        d.len()
                    )));
                }
                d.clone()
            }
            None => (0..t).collect(),
        };
        let (low, full) = self.attend(&f.values, 1, &dates, train)?;
        Ok(AttentionMasks {
            low_res: low.index_axis_move(Axis(0), 0),
            full_res: full.index_axis_move(Axis(0), 0),
        })
    }

    /// Collapse the date axis: channel group g of the output is the mask-
    /// weighted temporal sum of channel group g of the features.
    pub fn aggregate(&self, f: &FeatureSequence<F>, m: &AttentionMasks<F>) -> Result<Array3<F>> {
        let (t, c, h, w) = f.values.dim();
        let md = m.full_res.dim();
        if md != (self.cfg.n_head, t, h, w) {
            return Err(Error::Config(format!(
                "mask shape {md:?} does not match {} heads over {t}×{h}×{w} features",
                self.cfg.n_head
            )));
        }
        if c % self.cfg.n_head != 0 {
            return Err(Error::Config(format!(
                "{c} channels cannot split into {} head groups",
                self.cfg.n_head
            )));
        }
        let m5 = m.full_res.clone().insert_axis(Axis(0));
        Ok(grouped_aggregate(&m5, &f.values).index_axis_move(Axis(0), 0))
    }

    /// Decode one aggregated `[d_m, H, W]` map into a [`Prediction`].
    pub fn decode(&mut self, fhat: &Array3<F>, train: bool) -> Result<Prediction<F>> {
        if fhat.dim().0 != self.cfg.d_m {
            return Err(Error::Config(format!(
                "aggregated features have {} channels, the decoder expects d_m = {}",
                fhat.dim().0,
                self.cfg.d_m
            )));
        }
        if fhat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in aggregated features".into()));
        }
        let x4 = fhat.clone().insert_axis(Axis(0));
        let raw = self.decode_feats(&x4, train);
        let out = self.split_output(&raw);
        Ok(Prediction {
            mean: out.mean.index_axis_move(Axis(0), 0),
            variance: out.variance.map(|v| v.index_axis_move(Axis(0), 0)),
        })
    }

    /// Full reconstruction of a single `[T, C_in, H, W]` series.
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Result<Prediction<F>> {
        let t = x.dim().0;
        let dates: Vec<usize> = (0..t).collect();
        let out = self.forward_batch(x, 1, &dates, train)?;
        Ok(Prediction {
            mean: out.mean.index_axis_move(Axis(0), 0),
            variance: out.variance.map(|v| v.index_axis_move(Axis(0), 0)),
        })
    }
}

impl<F: Scalar> Params<F> for CloudRemovalNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.in_conv.visit_params(&key(prefix, "in_conv"), f);
        self.in_norm.visit_params(&key(prefix, "in_norm"), f);
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            blk.visit_params(&key(prefix, &format!("enc{i}")), f);
        }
        self.attn.visit_params(&key(prefix, "attn"), f);
        for (i, blk) in self.decoder.iter_mut().enumerate() {
            blk.visit_params(&key(prefix, &format!("dec{i}")), f);
        }
        self.out_conv.visit_params(&key(prefix, "out_conv"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        self.in_conv.visit_state(&key(prefix, "in_conv"), f);
        self.in_norm.visit_state(&key(prefix, "in_norm"), f);
        for (i, blk) in self.encoder.iter_mut().enumerate() {
            blk.visit_state(&key(prefix, &format!("enc{i}")), f);
        }
        self.attn.visit_state(&key(prefix, "attn"), f);
        for (i, blk) in self.decoder.iter_mut().enumerate() {
            blk.visit_state(&key(prefix, &format!("dec{i}")), f);
        }
        self.out_conv.visit_state(&key(prefix, "out_conv"), f);
    }
}

/// Number of trainable scalars for a config — a pure function of the config,
/// computed by building the network and walking its parameters.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    let mut net = CloudRemovalNet::<f32>::new(cfg.clone(), 0)?;
    Ok(crate::nn::param_count(&mut net))
}

// ---- checkpoints ----

/// Metadata stored alongside the weights.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_loss: f64,
    pub cfg: ModelConfig,
}

const CKPT_MAGIC: &str = "cloudfree-checkpoint v1";

impl CloudRemovalNet<f32> {
    /// Write weights (including batch-norm running statistics) plus metadata.
    /// The format is a plain-text header — magic line, epoch, the validation
    /// loss as exact f64 bits, the embedded TOML config, a tensor manifest —
    /// followed by raw little-endian f32 data in manifest order.
    pub fn save_checkpoint(&mut self, path: &Path, epoch: usize, val_loss: f64) -> Result<()> {
        let mut tensors: Vec<(String, Vec<f32>)> = Vec::new();
        self.visit_state("", &mut |name, w| tensors.push((name.to_owned(), w.to_vec())));

        let mut out = String::new();
        out.push_str(CKPT_MAGIC);
        out.push('\n');
        out.push_str(&format!("epoch {epoch}\n"));
        out.push_str(&format!("val_loss_bits {:016x}\n", val_loss.to_bits()));
        let cfg_text = crate::cfgfile::to_string(&self.cfg)?;
        out.push_str(&format!("config_bytes {}\n", cfg_text.len()));
        out.push_str(&cfg_text);
        out.push_str(&format!("tensors {}\n", tensors.len()));
        for (name, w) in &tensors {
            out.push_str(&format!("{name} {}\n", w.len()));
        }
        out.push_str("data\n");

        let mut bytes = out.into_bytes();
        for (_, w) in &tensors {
            for v in w {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("write failed: {e}"),
        })
    }

    /// Load a checkpoint written by [`Self::save_checkpoint`]. The network is
    /// rebuilt from the embedded config, then every tensor is overwritten, so
    /// the result is bit-identical to the saved state.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bad = |reason: String| Error::Load { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path)
            .map_err(|e| bad(format!("read failed: {e}")))?;
        let mut pos = 0usize;
        let line = |bytes: &[u8], pos: &mut usize| -> Result<String> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(bad("truncated header".into()));
            }
            let s = std::str::from_utf8(&bytes[start..*pos])
                .map_err(|_| bad("non-UTF-8 header".into()))?
                .to_owned();
            *pos += 1;
            Ok(s)
        };

        if line(&bytes, &mut pos)? != CKPT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic line)".into()));
        }
        let field = |l: String, name: &str| -> Result<String> {
            l.strip_prefix(name)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("expected `{name} …` line")))
        };
        let epoch: usize = field(line(&bytes, &mut pos)?, "epoch")?
            .parse()
            .map_err(|e| bad(format!("bad epoch: {e}")))?;
        let bits = u64::from_str_radix(&field(line(&bytes, &mut pos)?, "val_loss_bits")?, 16)
            .map_err(|e| bad(format!("bad val_loss_bits: {e}")))?;
        let val_loss = f64::from_bits(bits);
        let cfg_len: usize = field(line(&bytes, &mut pos)?, "config_bytes")?
            .parse()
            .map_err(|e| bad(format!("bad config_bytes: {e}")))?;
        if pos + cfg_len > bytes.len() {
            return Err(bad("truncated config".into()));
        }
        let cfg_text = std::str::from_utf8(&bytes[pos..pos + cfg_len])
            .map_err(|_| bad("non-UTF-8 config".into()))?;
        let cfg: ModelConfig = crate::cfgfile::from_str(cfg_text)
            .map_err(|e| bad(format!("embedded config: {e}")))?;
        pos += cfg_len;

        let n_tensors: usize = field(line(&bytes, &mut pos)?, "tensors")?
            .parse()
            .map_err(|e| bad(format!("bad tensor count: {e}")))?;
        let mut manifest = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let l = line(&bytes, &mut pos)?;
            let (name, len) = l
                .rsplit_once(' ')
                .ok_or_else(|| bad(format!("bad manifest line `{l}`")))?;
            let len: usize = len.parse().map_err(|e| bad(format!("bad tensor length: {e}")))?;
            manifest.push((name.to_owned(), len));
        }
        if line(&bytes, &mut pos)? != "data" {
            return Err(bad("missing data section".into()));
        }
        let want: usize = manifest.iter().map(|(_, l)| l).sum();
        if bytes.len() - pos != want * 4 {
            return Err(bad(format!(
                "data section holds {} bytes, manifest wants {}",
                bytes.len() - pos,
                want * 4
            )));
        }

        let mut net = CloudRemovalNet::<f32>::new(cfg.clone(), 0)?;
        let mut idx = 0usize;
        let mut err: Option<String> = None;
        net.visit_state("", &mut |name, w| {
            if err.is_some() {
                return;
            }
            let Some((want_name, want_len)) = manifest.get(idx) else {
                err = Some(format!("checkpoint is missing tensor `{name}`"));
                return;
            };
            if want_name != name || *want_len != w.len() {
                err = Some(format!(
                    "tensor mismatch: model expects `{name}`×{}, file has `{want_name}`×{want_len}",
                    w.len()
                ));
                return;
            }
            for v in w.iter_mut() {
                let b = [bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]];
                *v = f32::from_le_bytes(b);
                pos += 4;
            }
            idx += 1;
        });
        if let Some(reason) = err {
            return Err(bad(reason));
        }
        if idx != manifest.len() {
            return Err(bad(format!(
                "file has {} tensors, the model uses {idx}",
                manifest.len()
            )));
        }
        Ok((net, CheckpointMeta { epoch, val_loss, cfg }))
    }
}
