//! Command-line front end: synthesize datasets, train single models or
//! ensembles, evaluate checkpoints into CSV+PNG reports, and re-render
//! report figures.
//!
//! Outputs that are not routed through an explicit `--out` land under a
//! fresh run directory `<CLOUDFREE_HOME>/<timestamp>-<config hash>/`;
//! `CLOUDFREE_HOME` defaults to `./runs`.

use clap::{Parser, Subcommand};
use cloudfree::data::{read_split, write_dataset, SplitTag, SynthConfig};
use cloudfree::harness::{
    evaluate, evaluate_ensemble, train, train_ensemble, write_report, EvalOptions, EvalReport,
    LossKind, NetPredictor, TrainConfig,
};
use cloudfree::model::{CloudRemovalNet, CovMode, ModelConfig};
use cloudfree::{cfgfile, Error, Result};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "cloudfree",
    version,
    about = "Cloud-free image reconstruction from multi-temporal series, \
             with calibrated per-pixel uncertainty"
)]
struct Cli {
    /// Run everything on one thread (results are bitwise identical to the
    /// parallel default; this only trades speed).
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Model hyperparameters (TOML); built-in defaults when omitted.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Training hyperparameters (TOML); built-in defaults when omitted.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Override the training objective.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Override the covariance mode of the model head.
    #[arg(long, value_parser = parse_cov)]
    cov: Option<CovMode>,
    /// Train on optical channels only (drops the SAR block of every input).
    #[arg(long)]
    no_sar: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: SplitTag,
    /// Evaluate on only the first N dates of every series.
    #[arg(long)]
    t_override: Option<usize>,
    /// Report directory (CSVs and figures).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-temporal dataset.
    Synth {
        /// Generator settings (TOML); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; checkpoints and logs go to a fresh run directory.
    Train {
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Score a checkpoint on a split and write the full report.
    Eval {
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Train M ensemble members (seeds seed+0 … seed+M−1).
    EnsembleTrain {
        /// Number of members (≥ 2).
        #[arg(long)]
        members: usize,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Fuse member checkpoints and score the ensemble on a split.
    EnsembleEval {
        /// Member checkpoints (best.ckpt of each member).
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        args: EvalArgs,
    },
    /// Re-render the figures of an existing evaluation report from its CSVs.
    Report {
        /// Directory written by `eval` or `ensemble-eval`.
        #[arg(long)]
        eval_dir: PathBuf,
    },
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    LossKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_cov(s: &str) -> std::result::Result<CovMode, String> {
    CovMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<SplitTag, String> {
    SplitTag::from_str(s).map_err(|e| e.to_string())
}

fn home() -> PathBuf {
    std::env::var_os("CLOUDFREE_HOME").map_or_else(|| PathBuf::from("runs"), Into::into)
}

/// `<home>/<UTC timestamp>-<hash of the effective configs>`.
fn run_dir(config_texts: &[&str]) -> Result<PathBuf> {
    let mut h = Sha256::new();
    for t in config_texts {
        h.update(t.as_bytes());
    }
    let hash: String = h.finalize().iter().take(4).map(|b| format!("{b:02x}")).collect();
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let dir = home().join(format!("{stamp}-{hash}"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| cfgfile::load(p))
}

/// Apply the flag overrides and resolve the run directory. Returns the
/// effective configs with `checkpoint_dir` anchored inside the run dir
/// (absolute paths in the train config are respected as given).
fn prepare_training(args: &TrainArgs) -> Result<(ModelConfig, TrainConfig, PathBuf)> {
    let mut model_cfg: ModelConfig = load_or_default(args.model_config.as_ref())?;
    let mut train_cfg: TrainConfig = load_or_default(args.train_config.as_ref())?;
    if let Some(loss) = args.loss {
        train_cfg.loss = loss;
    }
    if let Some(cov) = args.cov {
        model_cfg.cov_mode = cov;
    }
    if args.no_sar {
        model_cfg.c_in = model_cfg.k;
    }
    let model_text = cfgfile::to_string(&model_cfg)?;
    let train_text = cfgfile::to_string(&train_cfg)?;
    let dir = run_dir(&[&model_text, &train_text])?;
    if train_cfg.checkpoint_dir.is_relative() {
        train_cfg.checkpoint_dir = dir.join(&train_cfg.checkpoint_dir);
    }
    // Keep the exact configs of the run next to its outputs.
    std::fs::write(dir.join("model.toml"), model_text)?;
    std::fs::write(dir.join("train.toml"), cfgfile::to_string(&train_cfg)?)?;
    Ok((model_cfg, train_cfg, dir))
}

fn print_report_summary(report: &EvalReport, out: &Path) {
    let a = &report.aggregate;
    print!("rmse {:.5}  mae {:.5}  psnr {:.2}  ssim {:.4}  sam {:.3}°", a.rmse, a.mae, a.psnr, a.ssim, a.sam_deg);
    if let Some(c) = &report.calibration {
        print!("  uce {:.6}  uce_im {:.6}", c.pixel.uce, c.image.uce);
    }
    println!();
    println!("report written to {}", out.display());
}

/// Read a two-column `fraction, rmse` curve written by `write_report`.
fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Load {
                path: path.to_path_buf(),
                reason: format!("bad curve line `{line}`"),
            })?;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("bad number `{s}`: {e}"),
            })
        };
        points.push((parse(a)?, parse(b)?));
    }
    Ok(points)
}

/// Read the occupied `(rmv, rmse)` pairs of a calibration CSV
/// (`bin_lo, bin_hi, count, rmse, rmv`).
fn read_calibration_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut points = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(Error::Load {
                path: path.to_path_buf(),
                reason: format!("bad calibration line `{line}`"),
            });
        }
        let count: usize = cols[2].parse().map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: format!("bad count: {e}"),
        })?;
        if count == 0 {
            continue;
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: format!("bad number `{s}`: {e}"),
            })
        };
        points.push((num(cols[4])?, num(cols[3])?));
    }
    Ok(points)
}

fn cmd_synth(config: Option<&PathBuf>, out: &Path) -> Result<()> {
    let cfg: SynthConfig = load_or_default(config)?;
    write_dataset(&cfg, out)?;
    let [tr, va, te] = cfg.split_sizes();
    println!(
        "wrote {} scenes ({tr} train / {va} val / {te} test) to {}",
        cfg.n_scenes,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg, dir) = prepare_training(args)?;
    println!("run directory: {}", dir.display());
    let report = train(&model_cfg, &train_cfg, &args.data)?;
    println!(
        "best val loss {:.6}; best checkpoint {}",
        report.best_val_loss,
        report.best_checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, args: &EvalArgs) -> Result<()> {
    let (mut predictor, meta) = NetPredictor::from_checkpoint(checkpoint)?;
    let samples = read_split(&args.data, args.split)?;
    let opts = EvalOptions {
        t_override: args.t_override,
        data_max: meta.cfg.out_scale,
        ..EvalOptions::default()
    };
    let report = evaluate(&mut predictor, &samples, &opts)?;
    write_report(&report, &args.out)?;
    print_report_summary(&report, &args.out);
    Ok(())
}

fn cmd_ensemble_train(members: usize, args: &TrainArgs) -> Result<()> {
    let (model_cfg, train_cfg, dir) = prepare_training(args)?;
    println!("run directory: {}", dir.display());
    let checkpoints = train_ensemble(&model_cfg, &train_cfg, &args.data, members)?;
    for (i, p) in checkpoints.iter().enumerate() {
        println!("member {i}: {}", p.display());
    }
    Ok(())
}

fn cmd_ensemble_eval(checkpoints: &[PathBuf], args: &EvalArgs) -> Result<()> {
    // The members' shared out_scale sets the metric data range.
    let (_, meta) = CloudRemovalNet::load_checkpoint(&checkpoints[0])?;
    let samples = read_split(&args.data, args.split)?;
    let opts = EvalOptions {
        t_override: args.t_override,
        data_max: meta.cfg.out_scale,
        ..EvalOptions::default()
    };
    let report = evaluate_ensemble(checkpoints, &samples, &opts)?;
    write_report(&report, &args.out)?;
    print_report_summary(&report, &args.out);
    Ok(())
}

fn cmd_report(dir: &Path) -> Result<()> {
    if !dir.join("summary.csv").exists() {
        return Err(Error::NotFound(format!(
            "{} does not look like an evaluation report (no summary.csv)",
            dir.display()
        )));
    }
    let mut rendered = 0usize;
    let discard = dir.join("discard.csv");
    if discard.exists() {
        let px = read_curve(&discard)?;
        let im = read_curve(&dir.join("discard_image.csv"))?;
        cloudfree::plot::discard_chart(&dir.join("discard.png"), &px, &im)?;
        rendered += 1;
    }
    let calibration = dir.join("calibration.csv");
    if calibration.exists() {
        let px = read_calibration_points(&calibration)?;
        let im = read_calibration_points(&dir.join("calibration_image.csv"))?;
        cloudfree::plot::calibration_chart(&dir.join("calibration.png"), &px, &im)?;
        rendered += 1;
    }
    // Sample panels need the raw images, which only evaluation has; existing
    // panel PNGs in the directory are left as rendered.
    let panels = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name();
            let n = n.to_string_lossy();
            n.starts_with("panel_") && n.ends_with(".png")
        })
        .count();
    println!("rendered {rendered} charts in {} ({panels} sample panels present)", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Synth { config, out } => cmd_synth(config.as_ref(), out),
        Cmd::Train { args } => cmd_train(args),
        Cmd::Eval { checkpoint, args } => cmd_eval(checkpoint, args),
        Cmd::EnsembleTrain { members, args } => cmd_ensemble_train(*members, args),
        Cmd::EnsembleEval { checkpoints, args } => cmd_ensemble_eval(checkpoints, args),
        Cmd::Report { eval_dir } => cmd_report(eval_dir),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        cloudfree::par::set_parallel(false);
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
