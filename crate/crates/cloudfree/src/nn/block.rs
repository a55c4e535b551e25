//! The residual inverted-bottleneck block used by both the encoder and the
//! decoder: expand ×2 pointwise → depthwise 3×3 → squeeze-excite → project
//! back, each conv followed by norm (+ SiLU except after the projection),
//! wrapped in an identity skip. Width and resolution are preserved, so the
//! skip never needs a projection.

use super::act::Silu;
use super::conv::{Conv1x1, DwConv3x3};
use super::norm::{BatchNorm2d, GroupNorm, Norm};
use super::se::SqueezeExcite;
use super::{key, Feat, Params, Scalar};
use rand_chacha::ChaCha8Rng;

/// Which statistics drive the normalisation layers inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-sample group statistics with this many groups.
    Group(usize),
    /// Cross-batch statistics with running estimates for inference.
    Batch,
}

impl NormKind {
    fn build<F: Scalar>(self, channels: usize) -> Norm<F> {
        match self {
            NormKind::Group(groups) => Norm::Group(GroupNorm::new(channels, groups)),
            NormKind::Batch => Norm::Batch(BatchNorm2d::new(channels)),
        }
    }
}

pub struct MbConvBlock<F> {
    expand: Conv1x1<F>,
    n1: Norm<F>,
    a1: Silu<F>,
    dw: DwConv3x3<F>,
    n2: Norm<F>,
    a2: Silu<F>,
    se: SqueezeExcite<F>,
    project: Conv1x1<F>,
    n3: Norm<F>,
}

impl<F: Scalar> MbConvBlock<F> {
    /// `se_hidden` is sized from the block input width (not the expanded
    /// width), which is what keeps the parameter budget where it belongs.
    pub fn new(channels: usize, norm: NormKind, se_hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let wide = channels * 2;
        Self {
            expand: Conv1x1::new(channels, wide, rng),
            n1: norm.build(wide),
            a1: Silu::new(),
            dw: DwConv3x3::new(wide, rng),
            n2: norm.build(wide),
            a2: Silu::new(),
            se: SqueezeExcite::new(wide, se_hidden, rng),
            project: Conv1x1::new(wide, channels, rng),
            n3: norm.build(channels),
        }
    }

    pub fn forward_t(&mut self, x: &Feat<F>) -> Feat<F> {
        let mut h = self.expand.forward_t(x);
        h = self.n1.forward_t(&h);
        h = self.a1.forward_t(&h);
        h = self.dw.forward_t(&h);
        h = self.n2.forward_t(&h);
        h = self.a2.forward_t(&h);
        h = self.se.forward_t(&h);
        h = self.project.forward_t(&h);
        h = self.n3.forward_t(&h);
        h + x
    }

    pub fn forward_e(&self, x: &Feat<F>) -> Feat<F> {
        let mut h = self.expand.forward_e(x);
        h = self.n1.forward_e(&h);
        h = self.a1.forward_e(&h);
        h = self.dw.forward_e(&h);
        h = self.n2.forward_e(&h);
        h = self.a2.forward_e(&h);
        h = self.se.forward_e(&h);
        h = self.project.forward_e(&h);
        h = self.n3.forward_e(&h);
        h + x
    }

    pub fn backward(&mut self, gy: &Feat<F>) -> Feat<F> {
        let mut g = self.n3.backward(gy);
        g = self.project.backward(&g);
        g = self.se.backward(&g);
        g = self.a2.backward(&g);
        g = self.n2.backward(&g);
        g = self.dw.backward(&g);
        g = self.a1.backward(&g);
        g = self.n1.backward(&g);
        g = self.expand.backward(&g);
        g + gy // skip connection feeds the output gradient straight through
    }
}

impl<F: Scalar> Params<F> for MbConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.expand.visit_params(&key(prefix, "expand"), f);
        self.n1.visit_params(&key(prefix, "n1"), f);
        self.dw.visit_params(&key(prefix, "dw"), f);
        self.n2.visit_params(&key(prefix, "n2"), f);
        self.se.visit_params(&key(prefix, "se"), f);
        self.project.visit_params(&key(prefix, "project"), f);
        self.n3.visit_params(&key(prefix, "n3"), f);
    }

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [F])) {
        self.expand.visit_state(&key(prefix, "expand"), f);
        self.n1.visit_state(&key(prefix, "n1"), f);
        self.dw.visit_state(&key(prefix, "dw"), f);
        self.n2.visit_state(&key(prefix, "n2"), f);
        self.se.visit_state(&key(prefix, "se"), f);
        self.project.visit_state(&key(prefix, "project"), f);
        self.n3.visit_state(&key(prefix, "n3"), f);
    }
}
