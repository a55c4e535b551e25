//! The training loop. One optimizer step per batch; batches group per-sample
//! forward/backward passes (each series keeps its own acquisition dates, so
//! samples cannot share a stacked forward), with gradients averaged across
//! the batch before the update.

use super::{adapt_channels, check_loss_model, pixel_grid, pixel_rows, pixel_rows3, Adam, LossKind, TrainConfig};
use crate::data::{read_split, splitmix64, MultiTempSample, SplitTag};
use crate::losses::{l2_loss_grad, nll_diagonal_grad, nll_isotropic_grad, PixelBatch};
use crate::model::{BatchOutput, CloudRemovalNet, CovMode, ModelConfig};
use crate::nn::Feat;
use crate::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on validation epochs (every `eval_every`-th and the last).
    pub val_loss: Option<f64>,
    pub lr: f64,
    /// Wall time; logged to a separate file so the loss log stays
    /// bit-reproducible.
    pub seconds: f64,
}

/// What [`train`] leaves behind.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Checkpoint with the lowest validation loss seen.
    pub best_checkpoint: PathBuf,
    /// Checkpoint of the final epoch.
    pub latest_checkpoint: PathBuf,
    pub best_val_loss: f64,
    pub epochs: Vec<EpochStats>,
}

/// Per-sample loss and gradient grids, dispatched on the objective.
fn sample_loss_grad(
    loss: LossKind,
    cov: CovMode,
    out: BatchOutput<f32>,
    y_rows: &Array2<f32>,
    h: usize,
    w: usize,
) -> Result<(f64, Feat<f32>, Option<Feat<f32>>)> {
    let mean_rows = pixel_rows(&out.mean);
    match (loss, cov) {
        (LossKind::L2, _) => {
            let batch = PixelBatch::without_variance(mean_rows, y_rows.clone())?;
            let (l, gm) = l2_loss_grad(&batch)?;
            // The objective never reads the variance head, so when one is
            // present it gets an identically zero gradient.
            let gv = out.variance.as_ref().map(|v| Feat::zeros(v.dim()));
            Ok((l as f64, pixel_grid(gm, 1, h, w), gv))
        }
        (LossKind::Nll, CovMode::Diagonal) | (LossKind::Nll, CovMode::Isotropic) => {
            let var_rows =
                pixel_rows(out.variance.as_ref().expect("variance head present"));
            let batch = PixelBatch::new(mean_rows, y_rows.clone(), var_rows)?;
            let (l, gm, gv) = if cov == CovMode::Diagonal {
                nll_diagonal_grad(&batch)?
            } else {
                nll_isotropic_grad(&batch)?
            };
            Ok((l as f64, pixel_grid(gm, 1, h, w), Some(pixel_grid(gv, 1, h, w))))
        }
        (LossKind::Nll, CovMode::None) => unreachable!("rejected by check_loss_model"),
    }
}

/// Loss of one sample without touching gradients; used for validation
/// (eval-mode forward, so batch-norm uses running statistics and dropout is
/// off).
fn sample_loss(
    net: &mut CloudRemovalNet<f32>,
    loss: LossKind,
    sample: &MultiTempSample,
) -> Result<f64> {
    let x = adapt_channels(&sample.x, net.config().c_in)?;
    let out = net.forward_batch(&x, 1, &sample.meta.dates, false)?;
    let mean_rows = pixel_rows(&out.mean);
    let y_rows = pixel_rows3(&sample.y);
    let l = match loss {
        LossKind::L2 => {
            crate::losses::l2_loss(&PixelBatch::without_variance(mean_rows, y_rows)?)?
        }
        LossKind::Nll => {
            let var_rows = pixel_rows(out.variance.as_ref().expect("checked up front"));
            let batch = PixelBatch::new(mean_rows, y_rows, var_rows)?;
            match net.config().cov_mode {
                CovMode::Diagonal => crate::losses::nll_diagonal(&batch)?,
                CovMode::Isotropic => crate::losses::nll_isotropic(&batch)?,
                CovMode::None => unreachable!("rejected by check_loss_model"),
            }
        }
    };
    Ok(l as f64)
}

fn mean_loss(
    net: &mut CloudRemovalNet<f32>,
    loss: LossKind,
    samples: &[MultiTempSample],
) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        sum += sample_loss(net, loss, s)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Leave a diagnostic dump next to the checkpoints and build the error that
/// ends the run. Divergence is an answer, not a crash: the dump records
/// where the numbers left the reals.
fn abort_dump(
    dir: &Path,
    reason: &str,
    epoch: usize,
    batch_id: usize,
    lr: f64,
    scenes: &[u64],
) -> Error {
    let dump =
        format!("{reason}\nepoch {epoch}\nbatch {batch_id}\nlr {lr}\nscene_ids {scenes:?}\n");
    let _ = std::fs::write(dir.join("abort.txt"), &dump);
    Error::Numerical(format!(
        "{reason} at epoch {epoch}, batch {batch_id} (scenes {scenes:?}); \
         diagnostics in abort.txt"
    ))
}

/// Train on pre-loaded splits. [`train`] is the path-based wrapper.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[MultiTempSample],
    val_set: &[MultiTempSample],
) -> Result<TrainReport> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_loss_model(cfg.loss, model_cfg.cov_mode)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("empty training or validation split".into()));
    }
    let k = train_set[0].y.dim().0;
    if k != model_cfg.k {
        return Err(Error::Config(format!(
            "dataset targets have {k} channels, the model reconstructs {}",
            model_cfg.k
        )));
    }
    std::fs::create_dir_all(&cfg.checkpoint_dir)?;

    let mut net = CloudRemovalNet::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new();
    // Separate stream from the weight-init RNG, which is seeded with
    // `cfg.seed` directly.
    const SHUFFLE_TAG: u64 = 0x5000_0000_0000_0000;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ SHUFFLE_TAG));
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let best_path = cfg.checkpoint_dir.join("best.ckpt");
    let latest_path = cfg.checkpoint_dir.join("latest.ckpt");
    let mut best_val = f64::INFINITY;
    let mut stats: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_id, chunk) in order.chunks(cfg.batch_size).enumerate() {
            crate::nn::zero_grads(&mut net);
            let inv = 1.0 / chunk.len() as f32;
            let mut batch_loss = 0.0f64;
            for &si in chunk {
                let s = &train_set[si];
                let x = adapt_channels(&s.x, model_cfg.c_in)?;
                let (h, w) = (s.y.dim().1, s.y.dim().2);
                let out = net.forward_batch(&x, 1, &s.meta.dates, true)?;
                let finite = out.mean.iter().all(|v| v.is_finite())
                    && out.variance.as_ref().map_or(true, |v| v.iter().all(|x| x.is_finite()));
                if !finite {
                    let scenes: Vec<u64> =
                        chunk.iter().map(|&i| train_set[i].meta.scene_id).collect();
                    return Err(abort_dump(
                        &cfg.checkpoint_dir,
                        "non-finite model output",
                        epoch,
                        batch_id,
                        lr,
                        &scenes,
                    ));
                }
                let y_rows = pixel_rows3(&s.y);
                let (l, mut gm, gv) =
                    sample_loss_grad(cfg.loss, model_cfg.cov_mode, out, &y_rows, h, w)?;
                // The batch loss is the mean over its samples, so each
                // sample's gradient enters scaled by 1/batch.
                gm.mapv_inplace(|g| g * inv);
                let gv = gv.map(|mut g| {
                    g.mapv_inplace(|v| v * inv);
                    g
                });
                net.backward_batch(&gm, gv.as_ref())?;
                batch_loss += l / chunk.len() as f64;
            }
            if !batch_loss.is_finite() {
                let scenes: Vec<u64> = chunk.iter().map(|&i| train_set[i].meta.scene_id).collect();
                return Err(abort_dump(
                    &cfg.checkpoint_dir,
                    "non-finite training loss",
                    epoch,
                    batch_id,
                    lr,
                    &scenes,
                ));
            }
            adam.step(&mut net, lr as f32);
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        let validate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let val_loss = if validate { Some(mean_loss(&mut net, cfg.loss, val_set)?) } else { None };

        net.save_checkpoint(&latest_path, epoch, val_loss.unwrap_or(f64::NAN))?;
        if let Some(v) = val_loss {
            if v < best_val {
                best_val = v;
                net.save_checkpoint(&best_path, epoch, v)?;
            }
        }
        stats.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {} lr {lr:.6}",
            val_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"))
        );
    }

    write_logs(&cfg.checkpoint_dir, &stats)?;
    Ok(TrainReport {
        best_checkpoint: best_path,
        latest_checkpoint: latest_path,
        best_val_loss: best_val,
        epochs: stats,
    })
}

/// Train from a dataset directory (train + val splits).
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data_root: &Path) -> Result<TrainReport> {
    let train_set = read_split(data_root, SplitTag::Train)?;
    let val_set = read_split(data_root, SplitTag::Val)?;
    train_with(model_cfg, cfg, &train_set, &val_set)
}

/// `log.csv` holds only seed-determined values — two identical runs must
/// produce identical bytes — so wall times go to `timing.csv` next to it.
fn write_logs(dir: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut log = String::from("epoch, train_loss, val_loss, lr\n");
    let mut timing = String::from("epoch, seconds\n");
    for s in stats {
        let val = s.val_loss.map_or_else(String::new, |v| format!("{v}"));
        log.push_str(&format!("{}, {}, {val}, {}\n", s.epoch, s.train_loss, s.lr));
        timing.push_str(&format!("{}, {}\n", s.epoch, s.seconds));
    }
    std::fs::write(dir.join("log.csv"), log)?;
    std::fs::write(dir.join("timing.csv"), timing)?;
    Ok(())
}

/// Train `m ≥ 2` members with seeds `seed+0 … seed+m−1` (distinct weight
/// initialisations and batch shufflings), each into its own subdirectory.
/// Returns the best-validation checkpoint of each member.
pub fn train_ensemble(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data_root: &Path,
    m: usize,
) -> Result<Vec<PathBuf>> {
    if m < 2 {
        return Err(Error::Config(format!("an ensemble needs at least 2 members, got {m}")));
    }
    let train_set = read_split(data_root, SplitTag::Train)?;
    let val_set = read_split(data_root, SplitTag::Val)?;
    (0..m)
        .map(|i| {
            let member = TrainConfig {
                seed: cfg.seed + i as u64,
                checkpoint_dir: cfg.checkpoint_dir.join(format!("member_{i}")),
                ..cfg.clone()
            };
            log::info!("training ensemble member {i} (seed {})", member.seed);
            train_with(model_cfg, &member, &train_set, &val_set)
                .map(|r| r.best_checkpoint)
                .map_err(|e| Error::Ensemble { member: i, source: Box::new(e) })
        })
        .collect()
}
