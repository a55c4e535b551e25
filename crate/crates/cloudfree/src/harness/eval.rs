//! Evaluation: run a predictor over a split, score every image, measure
//! calibration, build discard curves, and persist the whole report as CSVs
//! (plus best-effort plots).

use super::adapt_channels;
use crate::data::{least_cloudy_baseline, MultiTempSample, SampleMeta};
use crate::metrics::{mae, psnr, rmse, sam, ssim, MetricConfig};
use crate::model::{CheckpointMeta, CloudRemovalNet, CovMode, Prediction};
use crate::uncertainty::{
    discard_curve, ensemble_fuse, rmv, uce, uce_image, Binning, CalibrationReport, DEFAULT_BINS,
};
use crate::{Error, Result};
use ndarray::{s, Array2, Array3, Axis};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Anything that reconstructs a clear image from a corrupted series. The
/// trait exists so the evaluation pipeline can be exercised with a perfect
/// oracle and so ensembles evaluate through the same code path as single
/// models.
pub trait Predictor {
    /// Reconstruct one sample. Must be deterministic.
    fn predict(&mut self, sample: &MultiTempSample) -> Result<Prediction<f32>>;

    /// Whether predictions carry a variance map (drives the calibration and
    /// discard sections of the report).
    fn has_variance(&self) -> bool;

    /// Stable identifier of the model configuration, recorded in reports.
    fn fingerprint(&self) -> String;
}

fn sha_hex(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A single trained network.
pub struct NetPredictor {
    pub net: CloudRemovalNet<f32>,
}

impl NetPredictor {
    pub fn new(net: CloudRemovalNet<f32>) -> Self {
        Self { net }
    }

    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (net, meta) = CloudRemovalNet::load_checkpoint(path)?;
        Ok((Self { net }, meta))
    }
}

impl Predictor for NetPredictor {
    fn predict(&mut self, sample: &MultiTempSample) -> Result<Prediction<f32>> {
        let x = adapt_channels(&sample.x, self.net.config().c_in)?;
        let out = self.net.forward_batch(&x, 1, &sample.meta.dates, false)?;
        Ok(Prediction {
            mean: out.mean.index_axis_move(Axis(0), 0),
            variance: out.variance.map(|v| v.index_axis_move(Axis(0), 0)),
        })
    }

    fn has_variance(&self) -> bool {
        self.net.config().cov_mode != CovMode::None
    }

    fn fingerprint(&self) -> String {
        let cfg = crate::cfgfile::to_string(self.net.config()).unwrap_or_default();
        sha_hex(&cfg)
    }
}

/// A deep ensemble: every member predicts, the Gaussians are fused by moment
/// matching, and the fused prediction flows through the standard report.
pub struct EnsemblePredictor {
    members: Vec<CloudRemovalNet<f32>>,
}

impl EnsemblePredictor {
    pub fn new(members: Vec<CloudRemovalNet<f32>>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "an ensemble needs at least 2 members, got {}",
                members.len()
            )));
        }
        let cfg0 = members[0].config().clone();
        if cfg0.cov_mode == CovMode::None {
            return Err(Error::Config(
                "ensemble fusion needs members with a variance head (cov_mode is none)".into(),
            ));
        }
        for (i, m) in members.iter().enumerate().skip(1) {
            if *m.config() != cfg0 {
                return Err(Error::Config(format!(
                    "ensemble member {i} was trained with a different model config than member 0"
                )));
            }
        }
        Ok(Self { members })
    }

    pub fn from_checkpoints(paths: &[PathBuf]) -> Result<Self> {
        let members = paths
            .iter()
            .enumerate()
            .map(|(i, p)| {
                CloudRemovalNet::load_checkpoint(p)
                    .map(|(net, _)| net)
                    .map_err(|e| Error::Ensemble { member: i, source: Box::new(e) })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }
}

impl Predictor for EnsemblePredictor {
    fn predict(&mut self, sample: &MultiTempSample) -> Result<Prediction<f32>> {
        let mut means: Vec<Array3<f64>> = Vec::with_capacity(self.members.len());
        let mut vars: Vec<Array3<f64>> = Vec::with_capacity(self.members.len());
        for net in &mut self.members {
            let x = adapt_channels(&sample.x, net.config().c_in)?;
            let out = net.forward_batch(&x, 1, &sample.meta.dates, false)?;
            means.push(out.mean.index_axis_move(Axis(0), 0).mapv(f64::from));
            vars.push(
                out.variance
                    .expect("variance head checked at construction")
                    .index_axis_move(Axis(0), 0)
                    .mapv(f64::from),
            );
        }
        let fused = ensemble_fuse(&means, &vars)?;
        Ok(Prediction {
            mean: fused.mean.mapv(|v| v as f32),
            variance: Some(fused.variance.mapv(|v| v as f32)),
        })
    }

    fn has_variance(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        let cfg = crate::cfgfile::to_string(self.members[0].config()).unwrap_or_default();
        sha_hex(&format!("ensemble of {}\n{cfg}", self.members.len()))
    }
}

/// Test hook: returns the target itself with variance equal to the squared
/// residual (identically zero). Every error metric must come out at its
/// ideal value and UCE at exactly 0, which pins down the report plumbing.
pub struct PerfectOracle;

impl Predictor for PerfectOracle {
    fn predict(&mut self, sample: &MultiTempSample) -> Result<Prediction<f32>> {
        Ok(Prediction {
            mean: sample.y.clone(),
            variance: Some(Array3::zeros(sample.y.dim())),
        })
    }

    fn has_variance(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> String {
        "perfect-oracle".into()
    }
}

/// Evaluation settings; the defaults match the synthetic data range.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Evaluate on only the first N dates of every series.
    pub t_override: Option<usize>,
    /// Peak data value for PSNR/SSIM (the model's `out_scale`).
    pub data_max: f64,
    pub bins: usize,
    pub binning: Binning,
    /// How many samples get a rendered image panel.
    pub panels: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            t_override: None,
            data_max: 1.0,
            bins: DEFAULT_BINS,
            binning: Binning::EqualWidth,
            panels: 4,
        }
    }
}

/// Per-image scores, one row of `metrics.csv`.
#[derive(Debug, Clone)]
pub struct ImageRow {
    pub index: usize,
    pub scene_id: u64,
    pub rmse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    /// Mean predicted variance (σ²) over the image; absent without a
    /// variance head.
    pub mean_variance: Option<f64>,
}

/// Column means over the rows (every image weighted equally), plus counters
/// that only make sense in total.
#[derive(Debug, Clone)]
pub struct Aggregate {
    pub rmse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub sam_deg: f64,
    pub mean_variance: Option<f64>,
    /// Zero-norm pixels excluded from SAM, totalled over the split.
    pub sam_skipped: usize,
}

/// Pixel- and image-level calibration tables.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub pixel: CalibrationReport,
    pub image: CalibrationReport,
}

/// Raw material for one rendered sample panel
/// (input / prediction / target / error map / uncertainty map).
#[derive(Debug, Clone)]
pub struct Panel {
    pub scene_id: u64,
    /// Least-cloudy input frame, `[K, H, W]`.
    pub input: Array3<f32>,
    pub pred: Array3<f32>,
    pub target: Array3<f32>,
    /// Channel-mean absolute error, `[H, W]`.
    pub error: Array2<f32>,
    /// Channel-mean predictive σ, `[H, W]`.
    pub uncertainty: Option<Array2<f32>>,
}

/// Everything evaluation produces. CSV renderings are deterministic
/// functions of the numeric content.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub t_used: Option<usize>,
    pub fingerprint: String,
    pub rows: Vec<ImageRow>,
    pub aggregate: Aggregate,
    pub calibration: Option<Calibration>,
    /// `(fraction kept, RMSE over that fraction)`, pixels pooled over the
    /// whole split, most confident first.
    pub discard_pixel: Option<Vec<(f64, f64)>>,
    /// Same curve over whole images, ranked by mean predicted variance.
    pub discard_image: Option<Vec<(f64, f64)>>,
    pub panels: Vec<Panel>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl EvalReport {
    /// One row per image plus a final `aggregate` row.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("index, scene_id, rmse, mae, psnr, ssim, sam_deg, mean_variance\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}, {}, {}, {}\n",
                r.index, r.scene_id, r.rmse, r.mae, r.psnr, r.ssim, r.sam_deg,
                opt(r.mean_variance)
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "aggregate, , {}, {}, {}, {}, {}, {}\n",
            a.rmse, a.mae, a.psnr, a.ssim, a.sam_deg, opt(a.mean_variance)
        ));
        out
    }

    /// Flat `key, value` summary of the aggregates and calibration scores.
    pub fn summary_csv(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::from("key, value\n");
        out.push_str(&format!("n_images, {}\n", self.rows.len()));
        out.push_str(&format!("rmse, {}\n", a.rmse));
        out.push_str(&format!("mae, {}\n", a.mae));
        out.push_str(&format!("psnr, {}\n", a.psnr));
        out.push_str(&format!("ssim, {}\n", a.ssim));
        out.push_str(&format!("sam_deg, {}\n", a.sam_deg));
        out.push_str(&format!("sam_skipped_pixels, {}\n", a.sam_skipped));
        out.push_str(&format!("mean_variance, {}\n", opt(a.mean_variance)));
        if let Some(c) = &self.calibration {
            out.push_str(&format!("uce, {}\n", c.pixel.uce));
            out.push_str(&format!("uce_image, {}\n", c.image.uce));
        }
        out.push_str(&format!(
            "t_override, {}\n",
            self.t_used.map_or_else(String::new, |t| t.to_string())
        ));
        out.push_str(&format!("fingerprint, {}\n", self.fingerprint));
        out
    }
}

/// Restrict a series to its first `n` dates.
fn slice_sample(sample: &MultiTempSample, n: usize) -> Result<MultiTempSample> {
    let t = sample.x.dim().0;
    if n == 0 || n > t {
        return Err(Error::Input(format!(
            "t-override {n} outside the available 1..={t} dates"
        )));
    }
    Ok(MultiTempSample {
        x: sample.x.slice(s![..n, .., .., ..]).as_standard_layout().to_owned(),
        y: sample.y.clone(),
        masks: sample.masks.slice(s![..n, .., ..]).to_owned(),
        meta: SampleMeta { dates: sample.meta.dates[..n].to_vec(), ..sample.meta.clone() },
    })
}

/// Score `predictor` on every sample. Deterministic: fixed sample order and
/// fixed-chunk reductions underneath.
pub fn evaluate(
    predictor: &mut dyn Predictor,
    samples: &[MultiTempSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("nothing to evaluate: empty split".into()));
    }
    if opts.bins == 0 || !(opts.data_max > 0.0) {
        return Err(Error::Config("bins must be ≥ 1 and data_max positive".into()));
    }
    let mcfg = MetricConfig::new(opts.data_max);
    let has_var = predictor.has_variance();

    let mut rows = Vec::with_capacity(samples.len());
    let mut panels = Vec::new();
    let mut sam_skipped = 0usize;
    // Pixel-level pools (channel-averaged) and image-level summaries for the
    // calibration and discard sections.
    let mut px_sq_err: Vec<f64> = Vec::new();
    let mut px_var: Vec<f64> = Vec::new();
    let mut im_rmse: Vec<f64> = Vec::new();
    let mut im_rmv: Vec<f64> = Vec::new();

    for (index, sample) in samples.iter().enumerate() {
        let sliced;
        let sample = match opts.t_override {
            Some(n) => {
                sliced = slice_sample(sample, n)?;
                &sliced
            }
            None => sample,
        };
        let p = predictor.predict(sample)?;
        if p.mean.dim() != sample.y.dim() {
            return Err(Error::Input(format!(
                "prediction shape {:?} does not match target {:?}",
                p.mean.dim(),
                sample.y.dim()
            )));
        }
        let pred = p.mean.mapv(f64::from);
        let target = sample.y.mapv(f64::from);
        let sam_res = sam(pred.view(), target.view(), &mcfg)?;
        sam_skipped += sam_res.skipped;
        let row_rmse = rmse(pred.view(), target.view())?;

        let mean_variance = match &p.variance {
            Some(v) if has_var => {
                let var = v.mapv(f64::from);
                im_rmse.push(row_rmse);
                im_rmv.push(rmv(var.view())?);
                // Channel-mean residual² and variance per pixel.
                let sq = (&pred - &target).mapv(|r| r * r).mean_axis(Axis(0)).expect("K ≥ 1");
                let vr = var.mean_axis(Axis(0)).expect("channels ≥ 1");
                px_sq_err.extend(sq.iter());
                px_var.extend(vr.iter());
                Some(vr.mean().expect("non-empty"))
            }
            _ => None,
        };

        rows.push(ImageRow {
            index,
            scene_id: sample.meta.scene_id,
            rmse: row_rmse,
            mae: mae(pred.view(), target.view())?,
            psnr: psnr(pred.view(), target.view(), &mcfg)?,
            ssim: ssim(pred.view(), target.view(), &mcfg)?,
            sam_deg: sam_res.angle,
            mean_variance,
        });

        if panels.len() < opts.panels {
            let error = (&pred - &target)
                .mapv(f64::abs)
                .mean_axis(Axis(0))
                .expect("K ≥ 1")
                .mapv(|v| v as f32);
            let uncertainty = p.variance.as_ref().map(|v| {
                v.mapv(f64::from)
                    .mean_axis(Axis(0))
                    .expect("channels ≥ 1")
                    .mapv(|v| v.sqrt() as f32)
            });
            panels.push(Panel {
                scene_id: sample.meta.scene_id,
                input: least_cloudy_baseline(sample),
                pred: p.mean.clone(),
                target: sample.y.clone(),
                error,
                uncertainty,
            });
        }
    }

    let n = rows.len() as f64;
    let mean_of = |f: &dyn Fn(&ImageRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let aggregate = Aggregate {
        rmse: mean_of(&|r| r.rmse),
        mae: mean_of(&|r| r.mae),
        psnr: mean_of(&|r| r.psnr),
        ssim: mean_of(&|r| r.ssim),
        sam_deg: mean_of(&|r| r.sam_deg),
        mean_variance: has_var.then(|| mean_of(&|r| r.mean_variance.expect("has_var"))),
        sam_skipped,
    };

    let (calibration, discard_pixel, discard_image) = if has_var {
        let pixel = uce(&px_sq_err, &px_var, opts.bins, opts.binning)?;
        let image = uce_image(&im_rmse, &im_rmv, opts.bins, opts.binning)?;
        let d_px = discard_curve(&px_sq_err, &px_var)?;
        let im_sq: Vec<f64> = im_rmse.iter().map(|r| r * r).collect();
        let im_vr: Vec<f64> = im_rmv.iter().map(|u| u * u).collect();
        let d_im = discard_curve(&im_sq, &im_vr)?;
        (Some(Calibration { pixel, image }), Some(d_px), Some(d_im))
    } else {
        (None, None, None)
    };

    Ok(EvalReport {
        t_used: opts.t_override,
        fingerprint: predictor.fingerprint(),
        rows,
        aggregate,
        calibration,
        discard_pixel,
        discard_image,
        panels,
    })
}

/// Load the member checkpoints, fuse, and run the standard evaluation.
pub fn evaluate_ensemble(
    checkpoints: &[PathBuf],
    samples: &[MultiTempSample],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut predictor = EnsemblePredictor::from_checkpoints(checkpoints)?;
    evaluate(&mut predictor, samples, opts)
}

fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("fraction, rmse\n");
    for (f, r) in points {
        out.push_str(&format!("{f}, {r}\n"));
    }
    out
}

/// Persist a report under `dir`. The CSVs always land; plot rendering is
/// best-effort and never fails the call.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    std::fs::write(dir.join("summary.csv"), report.summary_csv())?;
    if let Some(c) = &report.calibration {
        std::fs::write(dir.join("calibration.csv"), c.pixel.to_csv())?;
        std::fs::write(dir.join("calibration_image.csv"), c.image.to_csv())?;
    }
    if let Some(d) = &report.discard_pixel {
        std::fs::write(dir.join("discard.csv"), curve_csv(d))?;
    }
    if let Some(d) = &report.discard_image {
        std::fs::write(dir.join("discard_image.csv"), curve_csv(d))?;
    }
    if let Err(e) = crate::plot::render_report(report, dir) {
        log::warn!("plots skipped ({e}); the CSVs are complete");
    }
    Ok(())
}
