//! Procedural scene generator. Each scene is a smooth multi-channel ground
//! truth with sharp region boundaries, observed on several dates through
//! per-date drift, cloud fields (haze through full whiteout) with cast
//! shadows, and cloud-immune SAR-like channels.
//!
//! Reproducibility rules the implementation: every aspect of a scene draws
//! from its own ChaCha substream keyed by `(seed, scene_id, aspect)`, so
//! changing e.g. the cloud parameters cannot perturb the targets or the SAR
//! channels of an existing scene. The arithmetic sticks to add/mul/div/sqrt
//! on f32 — no transcendentals — so outputs are bit-identical across
//! platforms.

use super::{split_assignments, splitmix64, MultiTempSample, SampleMeta, SynthConfig};
use crate::{Error, Result};
use ndarray::{s, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Aspect tags for per-scene RNG substreams.
mod stream {
    pub const TARGET: u64 = 0xA1;
    pub const DRIFT: u64 = 0xB2;
    pub const CLOUD: u64 = 0xC3;
    pub const SAR: u64 = 0xD4;
    pub const DATES: u64 = 0xE5;
}

fn subrng(seed: u64, scene_id: u64, aspect: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ splitmix64(scene_id)) ^ aspect))
}

/// Cubic smoothstep, the classic value-noise fade.
fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise in [0, 1]: random grid values every `cell` pixels,
/// smoothstep-interpolated in between.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Array2<f32> {
    let cell = cell.max(1);
    let grid = Array2::from_shape_simple_fn(
        ((h - 1) / cell + 2, (w - 1) / cell + 2),
        || rng.gen_range(0.0f32..1.0),
    );
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (gy, gx) = (y / cell, x / cell);
        let ty = smooth((y - gy * cell) as f32 / cell as f32);
        let tx = smooth((x - gx * cell) as f32 / cell as f32);
        let top = grid[[gy, gx]] + (grid[[gy, gx + 1]] - grid[[gy, gx]]) * tx;
        let bot = grid[[gy + 1, gx]] + (grid[[gy + 1, gx + 1]] - grid[[gy + 1, gx]]) * tx;
        top + (bot - top) * ty
    })
}

/// Two octaves of value noise, still in [0, 1].
fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, coarse: usize, fine: usize) -> Array2<f32> {
    let a = value_noise(rng, h, w, coarse);
    let b = value_noise(rng, h, w, fine);
    azip_new(&a, &b, |a, b| 0.65 * a + 0.35 * b)
}

fn azip_new(a: &Array2<f32>, b: &Array2<f32>, f: impl Fn(f32, f32) -> f32) -> Array2<f32> {
    ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}

/// A unit direction drawn without trigonometry: rejection-sample the disk,
/// normalise with sqrt (both bit-exact operations).
fn unit_direction(rng: &mut ChaCha8Rng) -> (f32, f32) {
    loop {
        let u = rng.gen_range(-1.0f32..1.0);
        let v = rng.gen_range(-1.0f32..1.0);
        let sq = u * u + v * v;
        if (0.04..=1.0).contains(&sq) {
            let inv = 1.0 / sq.sqrt();
            return (u * inv, v * inv);
        }
    }
}

/// Everything the invariant tests need to see that [`generate_scene`] keeps
/// quiet about: per-date cloud opacity, the shadow brightness multiplier,
/// and the drifted-but-uncorrupted optical frames.
#[derive(Debug, Clone)]
pub struct SceneDebug {
    /// `[T, H, W]`, 0 = clear sky, 1 = fully opaque cloud.
    pub opacity: Array3<f32>,
    /// `[T, H, W]` brightness multiplier; 1 outside shadows, 0.6 inside.
    pub shadow: Array3<f32>,
    /// `[T, K, H, W]` optical frames after drift, before shadow and cloud.
    pub drifted: Array4<f32>,
}

pub fn generate_scene(cfg: &SynthConfig, scene_id: u64) -> Result<MultiTempSample> {
    generate_scene_debug(cfg, scene_id).map(|(sample, _)| sample)
}

/// Like [`generate_scene`] but also returns the internal corruption fields.
pub fn generate_scene_debug(
    cfg: &SynthConfig,
    scene_id: u64,
) -> Result<(MultiTempSample, SceneDebug)> {
    cfg.validate()?;
    if scene_id >= cfg.n_scenes as u64 {
        return Err(Error::Input(format!(
            "scene id {scene_id} outside the configured {} scenes",
            cfg.n_scenes
        )));
    }
    let (t, k, h, w) = (cfg.t, cfg.k, cfg.h, cfg.w);
    let side = h.min(w);

    // ---- clear-sky target: regions with sharp boundaries + layered noise ----
    let mut rng = subrng(cfg.seed, scene_id, stream::TARGET);
    let mut region = Array2::<usize>::zeros((h, w));
    for bit in 0..2 {
        let (nx, ny) = unit_direction(&mut rng);
        let c = rng.gen_range(-0.25 * side as f32..0.25 * side as f32);
        for ((y, x), r) in region.indexed_iter_mut() {
            let proj = nx * (x as f32 - w as f32 / 2.0) + ny * (y as f32 - h as f32 / 2.0);
            if proj > c {
                *r |= 1 << bit;
            }
        }
    }
    let colors =
        Array2::from_shape_simple_fn((4, k), || rng.gen_range(0.15f32..0.85));
    let shared = fractal_noise(&mut rng, h, w, side / 8, side / 16);
    let texture = value_noise(&mut rng, h, w, 2);
    let mut y_clear = Array3::<f32>::zeros((k, h, w));
    for ch in 0..k {
        let chan_noise = value_noise(&mut rng, h, w, side / 8);
        for ((yy, xx), r) in region.indexed_iter() {
            let v = colors[[*r, ch]]
                + 0.30 * (shared[[yy, xx]] - 0.5)
                + 0.18 * (chan_noise[[yy, xx]] - 0.5)
                + 0.08 * (texture[[yy, xx]] - 0.5);
            y_clear[[ch, yy, xx]] = v.clamp(0.02, 0.98);
        }
    }

    // ---- per-date drift: gain/offset jitter plus a low, smooth field ----
    let mut rng = subrng(cfg.seed, scene_id, stream::DRIFT);
    let mut drifted = Array4::<f32>::zeros((t, k, h, w));
    for d in 0..t {
        let gain = rng.gen_range(0.98f32..1.02);
        let offset = rng.gen_range(-0.02f32..0.02);
        let field = value_noise(&mut rng, h, w, side / 4);
        for ch in 0..k {
            for ((yy, xx), fv) in field.indexed_iter() {
                let v = y_clear[[ch, yy, xx]] * gain + offset + 0.04 * (fv - 0.5);
                drifted[[d, ch, yy, xx]] = v.clamp(0.0, 1.0);
            }
        }
    }

    // ---- clouds, shadows, masks ----
    let mut rng = subrng(cfg.seed, scene_id, stream::CLOUD);
    let mut opacity = Array3::<f32>::zeros((t, h, w));
    let mut shadow = Array3::<f32>::from_elem((t, h, w), 1.0);
    let mut masks = Array3::<u8>::zeros((t, h, w));
    let mut cloud_color = Array3::<f32>::zeros((t, h, w));
    let mut tints = Array2::<f32>::zeros((t, k));
    for d in 0..t {
        if !rng.gen_bool(cfg.cloud_prob) {
            continue;
        }
        let opaque = rng.gen_bool(cfg.opaque_fraction);
        let coverage = if opaque { 1.0 } else { rng.gen_range(0.35f64..0.95) };
        let [lo, hi] = cfg.haze_opacity_range;
        let peak = if opaque { 1.0f32 } else { rng.gen_range(lo..=hi) as f32 };

        // Threshold the noise field at its empirical quantile so the masked
        // area tracks the drawn coverage instead of the field's whims.
        let noise = fractal_noise(&mut rng, h, w, side / 4, side / 8);
        let want = (coverage * (h * w) as f64).round() as usize;
        let tau = if want >= h * w {
            -1.0
        } else if want == 0 {
            2.0
        } else {
            let mut sorted: Vec<f32> = noise.iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("noise is finite"));
            sorted[h * w - 1 - want]
        };
        // `shape` crosses 0.5 exactly on the coverage contour; the upper half
        // is remapped so the densest cloud reaches `peak` opacity.
        let shape = noise.mapv(|n| (0.5 + (n - tau) / 0.3).clamp(0.0, 1.0));
        for ((yy, xx), &sv) in shape.indexed_iter() {
            let op = if sv <= 0.5 { sv } else { 0.5 + (sv - 0.5) * (peak - 0.5) * 2.0 };
            opacity[[d, yy, xx]] = op;
            masks[[d, yy, xx]] = u8::from(op > 0.5);
        }

        // Shadows: the dense-cloud core displaced across the ground.
        let (dy, dx) = (cfg.shadow_offset, cfg.shadow_offset);
        for yy in 0..h as i64 {
            for xx in 0..w as i64 {
                let (sy, sx) = (yy - dy, xx - dx);
                if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    let core =
                        ((shape[[sy as usize, sx as usize]] - 0.5) / 0.2).clamp(0.0, 1.0);
                    shadow[[d, yy as usize, xx as usize]] = 1.0 - 0.4 * core;
                }
            }
        }

        // Whitening: a bright, faintly textured deck with a per-channel tint.
        let white = value_noise(&mut rng, h, w, side / 8);
        for ((yy, xx), &wv) in white.indexed_iter() {
            cloud_color[[d, yy, xx]] = 0.82 + 0.16 * wv;
        }
        for ch in 0..k {
            tints[[d, ch]] = rng.gen_range(-0.03f32..0.03);
        }
    }

    // ---- SAR-like channels: edge-sensitive, speckled, cloud-immune ----
    let y_mean = {
        let mut m = Array2::<f32>::zeros((h, w));
        for ch in 0..k {
            for ((yy, xx), v) in m.indexed_iter_mut() {
                *v += y_clear[[ch, yy, xx]];
            }
        }
        m.mapv(|v| v / k as f32)
    };
    let edges = Array2::from_shape_fn((h, w), |(yy, xx)| {
        let up = y_mean[[yy.saturating_sub(1), xx]];
        let down = y_mean[[(yy + 1).min(h - 1), xx]];
        let left = y_mean[[yy, xx.saturating_sub(1)]];
        let right = y_mean[[yy, (xx + 1).min(w - 1)]];
        (((down - up).abs() + (right - left).abs()) * 2.0).clamp(0.0, 1.0)
    });
    let mut rng = subrng(cfg.seed, scene_id, stream::SAR);
    let mut sar = Array4::<f32>::zeros((t, cfg.c_s1, h, w));
    for d in 0..t {
        for j in 0..cfg.c_s1 {
            for yy in 0..h {
                for xx in 0..w {
                    let (g, e) = (y_mean[[yy, xx]], edges[[yy, xx]]);
                    let base = if j % 2 == 0 {
                        0.15 + 0.55 * g + 1.2 * e
                    } else {
                        0.08 + 0.35 * (1.0 - g) + 0.9 * e
                    } + 0.02 * (j / 2) as f32;
                    // Multiplicative speckle around 1, from a 12-uniform sum
                    // (≈ Gaussian without calling into libm).
                    let z: f32 = (0..12).map(|_| rng.gen_range(0.0f32..1.0)).sum::<f32>() - 6.0;
                    sar[[d, j, yy, xx]] = (base.clamp(0.0, 1.0) * (1.0 + 0.1 * z)).clamp(0.0, 1.0);
                }
            }
        }
    }

    // ---- acquisition dates: irregular but sorted ----
    let mut rng = subrng(cfg.seed, scene_id, stream::DATES);
    let mut dates = Vec::with_capacity(t);
    let mut day = rng.gen_range(0usize..4);
    for _ in 0..t {
        dates.push(day);
        day += rng.gen_range(2usize..10);
    }

    // ---- composite: drift, then shadow, then alpha-blend the cloud ----
    let mut x = Array4::<f32>::zeros((t, cfg.c_in(), h, w));
    for d in 0..t {
        for ch in 0..k {
            let tint = tints[[d, ch]];
            for yy in 0..h {
                for xx in 0..w {
                    let op = opacity[[d, yy, xx]];
                    let ground = drifted[[d, ch, yy, xx]] * shadow[[d, yy, xx]];
                    let cloud = (cloud_color[[d, yy, xx]] + tint).clamp(0.0, 1.0);
                    x[[d, ch, yy, xx]] = (ground * (1.0 - op) + cloud * op).clamp(0.0, 1.0);
                }
            }
        }
        x.slice_mut(s![d, k.., .., ..]).assign(&sar.slice(s![d, .., .., ..]));
    }

    let meta = SampleMeta {
        scene_id,
        split: split_assignments(cfg)[scene_id as usize],
        dates,
    };
    Ok((
        MultiTempSample { x, y: y_clear, masks, meta },
        SceneDebug { opacity, shadow, drifted },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;

    /// Worst-case drift: ±2% gain on a ≤ 0.98 signal, ±0.02 offset, ±0.02
    /// smooth field.
    const DRIFT_BOUND: f32 = 0.06;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_scene(&cfg, 11).unwrap();
        let b = generate_scene(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 12).unwrap();
        assert_ne!(a.y, c.y, "different scenes should differ");
    }

    #[test]
    fn outputs_stay_in_range_and_masks_are_binary() {
        let cfg = SynthConfig::default();
        for id in 0..5 {
            let s = generate_scene(&cfg, id).unwrap();
            assert!(s.x.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.y.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.masks.iter().all(|&m| m <= 1));
            assert_eq!(s.meta.dates.len(), cfg.t);
            assert!(s.meta.dates.windows(2).all(|p| p[0] < p[1]), "dates must increase");
        }
    }

    #[test]
    fn clear_skies_leave_only_drift() {
        let cfg = SynthConfig { cloud_prob: 0.0, ..SynthConfig::default() };
        let (s, dbg) = generate_scene_debug(&cfg, 3).unwrap();
        assert!(s.masks.iter().all(|&m| m == 0));
        assert!(dbg.opacity.iter().all(|&o| o == 0.0));
        for d in 0..cfg.t {
            let opt = s.optical(d);
            assert_eq!(opt, dbg.drifted.slice(s![d, .., .., ..]), "clear frame ≠ drifted target");
            for ch in 0..cfg.k {
                for yy in 0..cfg.h {
                    for xx in 0..cfg.w {
                        let diff = (opt[[ch, yy, xx]] - s.y[[ch, yy, xx]]).abs();
                        assert!(diff <= DRIFT_BOUND, "drift {diff} exceeds the bound");
                    }
                }
            }
        }
    }

    #[test]
    fn certain_opaque_cover_masks_every_pixel() {
        let cfg = SynthConfig {
            cloud_prob: 1.0,
            opaque_fraction: 1.0,
            ..SynthConfig::default()
        };
        let s = generate_scene(&cfg, 4).unwrap();
        assert!(s.masks.iter().all(|&m| m == 1));
        // Whiteout: the optical channels hold cloud, not ground.
        for d in 0..cfg.t {
            assert!(s.optical(d).iter().all(|&v| v > 0.7), "opaque frame should be bright");
        }
        // The SAR channels still carry scene information.
        let sar = s.x.slice(s![0, cfg.k.., .., ..]);
        let spread = sar.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(spread.1 - spread.0 > 0.2, "SAR flattened out: {spread:?}");
    }

    #[test]
    fn sar_target_and_dates_ignore_cloud_settings() {
        let clear = SynthConfig { cloud_prob: 0.0, ..SynthConfig::default() };
        let stormy = SynthConfig { cloud_prob: 1.0, opaque_fraction: 0.5, ..SynthConfig::default() };
        let a = generate_scene(&clear, 9).unwrap();
        let b = generate_scene(&stormy, 9).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.meta.dates, b.meta.dates);
        let k = clear.k;
        assert_eq!(
            a.x.slice(s![.., k.., .., ..]),
            b.x.slice(s![.., k.., .., ..]),
            "SAR channels must be bit-identical whatever the weather"
        );
    }

    #[test]
    fn pixels_clear_of_cloud_and_shadow_match_the_drifted_target() {
        let cfg = SynthConfig { cloud_prob: 0.7, ..SynthConfig::default() };
        let mut inspected = 0usize;
        for id in 0..10 {
            let (s, dbg) = generate_scene_debug(&cfg, id).unwrap();
            for d in 0..cfg.t {
                for yy in 0..cfg.h {
                    for xx in 0..cfg.w {
                        if dbg.opacity[[d, yy, xx]] == 0.0 && dbg.shadow[[d, yy, xx]] == 1.0 {
                            assert_eq!(s.masks[[d, yy, xx]], 0);
                            for ch in 0..cfg.k {
                                assert_eq!(s.x[[d, ch, yy, xx]], dbg.drifted[[d, ch, yy, xx]]);
                                let diff = (s.x[[d, ch, yy, xx]] - s.y[[ch, yy, xx]]).abs();
                                assert!(diff <= DRIFT_BOUND);
                            }
                            inspected += 1;
                        }
                    }
                }
            }
        }
        assert!(inspected > 1000, "only {inspected} clear pixels found — field too cloudy");
    }

    #[test]
    fn half_cloud_probability_affects_about_half_the_dates() {
        let cfg = SynthConfig { n_scenes: 200, t: 5, ..SynthConfig::default() };
        let mut cloudy_dates = 0usize;
        let mut partly_masked = 0usize;
        for id in 0..cfg.n_scenes as u64 {
            let s = generate_scene(&cfg, id).unwrap();
            for d in 0..cfg.t {
                let n: u32 = s.masks.slice(s![d, .., ..]).iter().map(|&m| m as u32).sum();
                if n > 0 {
                    cloudy_dates += 1;
                }
                if n > 0 && (n as usize) < cfg.h * cfg.w {
                    partly_masked += 1;
                }
            }
        }
        let frac = cloudy_dates as f64 / (cfg.n_scenes * cfg.t) as f64;
        assert!(
            (0.45..=0.55).contains(&frac),
            "cloudy-date fraction {frac} strays from cloud_prob = 0.5"
        );
        // Partial coverage must dominate, or the least-cloudy baseline would
        // be either perfect or hopeless and the attention would have nothing
        // to exploit.
        assert!(partly_masked * 2 > cloudy_dates, "too few partially masked dates");
    }

    #[test]
    fn scene_ids_outside_the_dataset_are_rejected() {
        let cfg = SynthConfig::default();
        assert!(matches!(
            generate_scene(&cfg, cfg.n_scenes as u64),
            Err(Error::Input(_))
        ));
        // Meta picks up the hash split.
        let s = generate_scene(&cfg, 0).unwrap();
        assert!(SplitTag::ALL.contains(&s.meta.split));
    }
}
