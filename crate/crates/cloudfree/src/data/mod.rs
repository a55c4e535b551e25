//! Synthetic multi-temporal scenes and everything around them: generation of
//! cloud-corrupted optical series with co-registered SAR-like channels
//! ([`synth`]), preprocessing conventions, the least-cloudy reference frame,
//! and dataset persistence with deterministic splits ([`io`]).
//!
//! All sample data is stored and generated in `f32`; the generator sticks to
//! add/mul/div/sqrt so a config reproduces the dataset bit-exactly across
//! platforms.

mod io;
mod synth;

pub use io::{manifest, read_sample, read_split, write_dataset};
pub use synth::{generate_scene, generate_scene_debug, SceneDebug};

use crate::{Error, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use std::fmt;
use std::str::FromStr;

/// Which of the three fixed-ratio partitions a scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Val, SplitTag::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::Input(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Generator parameters. A config is the complete recipe: the same values
/// always reproduce the same dataset, byte for byte.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Acquisition dates per sample.
    pub t: usize,
    /// Optical channels (these are also the reconstruction targets).
    pub k: usize,
    /// SAR-like channels appended after the optical ones.
    pub c_s1: usize,
    pub h: usize,
    pub w: usize,
    /// Probability that a date carries a cloud event.
    pub cloud_prob: f64,
    /// Peak opacity drawn for haze events; keep the lower end above 0.5 or
    /// thin haze will slip past the opacity-threshold mask.
    pub haze_opacity_range: [f64; 2],
    /// Fraction of cloud events that white out the entire frame.
    pub opaque_fraction: f64,
    /// Cast-shadow displacement in pixels (applied on both axes).
    pub shadow_offset: i64,
    pub seed: u64,
    /// Total scenes; split 80/10/10 by id hash.
    pub n_scenes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t: 3,
            k: 4,
            c_s1: 2,
            h: 32,
            w: 32,
            cloud_prob: 0.5,
            haze_opacity_range: [0.6, 1.0],
            opaque_fraction: 0.3,
            shadow_offset: 3,
            seed: 7,
            n_scenes: 250,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.t == 0 || self.k == 0 || self.n_scenes == 0 {
            return fail("t, k and n_scenes must all be positive".into());
        }
        if self.h < 8 || self.w < 8 {
            return fail(format!("{}×{} is too small; scenes need at least 8×8", self.h, self.w));
        }
        if !(0.0..=1.0).contains(&self.cloud_prob) {
            return fail(format!("cloud_prob = {} outside [0, 1]", self.cloud_prob));
        }
        if !(0.0..=1.0).contains(&self.opaque_fraction) {
            return fail(format!("opaque_fraction = {} outside [0, 1]", self.opaque_fraction));
        }
        let [lo, hi] = self.haze_opacity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return fail(format!("haze_opacity_range [{lo}, {hi}] is not an interval in [0, 1]"));
        }
        if self.shadow_offset.unsigned_abs() as usize >= self.h.min(self.w) {
            return fail(format!(
                "shadow_offset = {} throws shadows clean off the {}×{} frame",
                self.shadow_offset, self.h, self.w
            ));
        }
        Ok(())
    }

    /// Total input channels per date: optical first, then SAR.
    pub fn c_in(&self) -> usize {
        self.k + self.c_s1
    }

    /// Scenes per split under the 80/10/10 rank rule.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_scenes;
        let train = n * 8 / 10;
        let val = n * 9 / 10 - train;
        [train, val, n - train - val]
    }
}

/// Scene identity and provenance carried alongside the arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub scene_id: u64,
    pub split: SplitTag,
    /// Acquisition-time indices of the T dates, strictly increasing. These
    /// feed the temporal positional encoding, so irregular gaps matter.
    pub dates: Vec<usize>,
}

/// One training example: a cloud-corrupted series paired with its clear
/// target. `x` is `[T, K + C_S1, H, W]` (optical then SAR), `y` is
/// `[K, H, W]`, `masks` is `[T, H, W]` with 1 marking cloud opacity > 0.5.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTempSample {
    pub x: Array4<f32>,
    pub y: Array3<f32>,
    pub masks: Array3<u8>,
    pub meta: SampleMeta,
}

impl MultiTempSample {
    /// Optical channels of date `t`, `[K, H, W]`.
    pub fn optical(&self, t: usize) -> ndarray::ArrayView3<'_, f32> {
        let k = self.y.dim().0;
        self.x.slice(ndarray::s![t, ..k, .., ..])
    }
}

const SPLIT_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64: a cheap, well-mixed hash used for split assignment and for
/// deriving per-scene RNG streams.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLIT_MIX);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Split of every scene id, by hash rank: ids are ordered by their hash and
/// the first 80% become train, the next 10% val, the rest test. Rank (rather
/// than thresholding) makes the split sizes exact, and the assignment depends
/// only on `n_scenes`, never on generator parameters.
pub fn split_assignments(cfg: &SynthConfig) -> Vec<SplitTag> {
    let mut order: Vec<u64> = (0..cfg.n_scenes as u64).collect();
    order.sort_by_key(|&id| (splitmix64(id), id));
    let [n_train, n_val, _] = cfg.split_sizes();
    let mut tags = vec![SplitTag::Test; cfg.n_scenes];
    for (rank, &id) in order.iter().enumerate() {
        tags[id as usize] = if rank < n_train {
            SplitTag::Train
        } else if rank < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    tags
}

/// Optical top-of-atmosphere counts → model range: divide by 1000, clip to
/// `[0, out_scale]`. Computed in f64 so that scaling a model-range value up
/// by 1000 and back is exact.
pub fn preprocess_s2(raw: &Array3<f32>, out_scale: f64) -> Array3<f32> {
    raw.mapv(|v| ((v as f64 / 1000.0).clamp(0.0, out_scale)) as f32)
}

/// SAR backscatter in dB → `[0, 1]`: channel 0 is clipped to [−25, 0] dB,
/// channel 1 to [−32.5, 0] dB, then each is mapped affinely onto the unit
/// interval. Extra channels (if any) reuse the channel-1 rule.
pub fn preprocess_s1(raw_db: &Array3<f32>) -> Array3<f32> {
    let mut out = raw_db.clone();
    for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
        let lo = if ch == 0 { -25.0f64 } else { -32.5f64 };
        plane.mapv_inplace(|v| (((v as f64).clamp(lo, 0.0) - lo) / -lo) as f32);
    }
    out
}

/// Stand-in cloud detector: flag pixels whose mean optical brightness
/// exceeds `threshold`. Clouds in the synthetic scenes are bright, so this
/// crude rule works where a real detector would be used.
pub fn synth_cloud_mask(optical: &Array3<f32>, threshold: f32) -> Array2<u8> {
    let mean = optical.mean_axis(Axis(0)).expect("at least one channel");
    mean.mapv(|v| u8::from(v > threshold))
}

/// The strongest trivial baseline: return the optical frame of the date with
/// the fewest masked pixels, earliest date winning ties.
pub fn least_cloudy_baseline(sample: &MultiTempSample) -> Array3<f32> {
    let best = sample
        .masks
        .axis_iter(Axis(0))
        .map(|m| m.iter().map(|&v| v as u32).sum::<u32>())
        .enumerate()
        .min_by_key(|&(t, n)| (n, t))
        .map(|(t, _)| t)
        .expect("T ≥ 1");
    sample.optical(best).to_owned()
}
