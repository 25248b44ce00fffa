//! `vseg` — the volumetric segmentation pipeline driver.
//!
//! Subcommands mirror the pipeline stages: `phantom` emits synthetic
//! datasets, `preprocess` fuses masks and crops/normalizes volumes,
//! `train` fits the network, `predict` emits probability and mask
//! volumes, `evaluate` scores predictions, and `gradcheck` runs the
//! gradient verification suite.
//!
//! Exit codes: 0 success, 2 usage error, 3 input/format error, 4 numeric
//! failure. Human-readable messages go to stderr; machine artifacts are
//! written only on success.

mod config;
mod overlay;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vseg_core::gradcheck;
use vseg_core::ioutil::atomic_write;
use vseg_core::metrics::{aggregate, report_volume};
use vseg_core::phantom::{write_phantom_dataset, PhantomError, PhantomSpec};
use vseg_core::tensor::{Tape, TensorError};
use vseg_core::train::{
    train, Dataset, LossKind, Precision, Split, TrainConfig, TrainError,
};
use vseg_core::unet::{build_unet, load_model, save_model, UNetConfig, UNetError};
use vseg_core::volume::{
    binarize, crop_centered, fuse_masks, read_nifti, read_srv, write_srv_mask,
    write_srv_volume, zscore_normalize, Mask, Volume, VolumeError,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, invalid parameter combinations. Exit 2.
    Usage(String),
    /// Missing or malformed inputs. Exit 3.
    Input(String),
    /// NaN losses, failed gradient checks. Exit 4.
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Input(_) => 3,
            Self::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(s) | Self::Input(s) | Self::Numeric(s) => write!(f, "{s}"),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        match e {
            VolumeError::BadThreshold { .. } => Self::Usage(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::BadSpec(_) => Self::Usage(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<UNetError> for CliError {
    fn from(e: UNetError) -> Self {
        match e {
            UNetError::Config(_) => Self::Usage(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Validation(_) => Self::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteGrad { .. } => {
                Self::Numeric(e.to_string())
            }
            _ => Self::Input(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => Self::Numeric(e.to_string()),
            _ => Self::Input(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vseg",
    version,
    about = "3D U-Net hippocampus-style segmentation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ellipsoid phantom dataset.
    Phantom(PhantomArgs),
    /// Fuse left/right masks, crop around the structure, normalize.
    Preprocess(PreprocessArgs),
    /// Train a network on preprocessed volume/mask pairs.
    Train(TrainArgs),
    /// Run a trained model over one volume.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Verify every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    foreground: f64,
    #[arg(long, default_value_t = 0.0)]
    background: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Semi-axis range, voxels.
    #[arg(long, default_value_t = 4.0)]
    axis_min: f64,
    #[arg(long, default_value_t = 7.0)]
    axis_max: f64,
    #[arg(long, default_value_t = 2.0)]
    jitter: f64,
    /// Minimum voxel gap between the two ellipsoids.
    #[arg(long, default_value_t = 2)]
    gap: usize,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Input volume (.srv, .nii, .nii.gz).
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    mask_left: PathBuf,
    #[arg(long)]
    mask_right: PathBuf,
    /// Crop target as X,Y,Z.
    #[arg(long, value_parser = parse_dims)]
    target: Option<(usize, usize, usize)>,
    #[arg(long)]
    margin: Option<usize>,
    #[arg(long)]
    out_volume: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    /// Optional run-config file supplying target/margin defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of <stem>_vol.srv / <stem>_mask.srv training pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out pairs; defaults to the training directory.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Network preset: "desk" or "paper".
    #[arg(long)]
    preset: Option<String>,
    /// Explicit channel schedule, e.g. 8,16,32 (overrides --preset).
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
    /// Drop the encoder→decoder skip connections.
    #[arg(long)]
    no_skips: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Loss: "bce" or "dice".
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shuffle: bool,
    /// Arithmetic width: "f32" or "f64".
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input volume; should be preprocessed like the training data.
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    out_prob: PathBuf,
    #[arg(long)]
    out_mask: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write axial/coronal/sagittal overlay PNGs into this directory.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of predicted *_mask.srv files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth *_mask.srv files with matching names.
    #[arg(long)]
    truth: PathBuf,
    /// Output directory for per_volume.json and aggregate.json.
    #[arg(long)]
    out: PathBuf,
    /// Add pooled-count (micro) averages to the aggregate.
    #[arg(long)]
    micro: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected X,Y,Z, got {s:?}"));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse()
            .map_err(|e| format!("bad extent {p:?}: {e}"))?;
    }
    Ok((out[0], out[1], out[2]))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Preprocess(a) => cmd_preprocess(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

// ── Input sniffing ──────────────────────────────────────────────────

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn read_volume_any(path: &Path) -> Result<Volume, CliError> {
    if is_nifti(path) {
        Ok(read_nifti(path)?)
    } else {
        Ok(read_srv(path)?.into_volume()?)
    }
}

/// Masks arrive either as SRV u8 grids or as NIfTI label volumes, where
/// any nonzero voxel counts as set.
fn read_mask_any(path: &Path) -> Result<Mask, CliError> {
    if is_nifti(path) {
        let v = read_nifti(path)?;
        let data = v.data.iter().map(|&x| u8::from(x != 0.0)).collect();
        Ok(Mask::new(v.dims, data)?)
    } else {
        Ok(read_srv(path)?.into_mask()?)
    }
}

// ── Commands ────────────────────────────────────────────────────────

fn cmd_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let spec = PhantomSpec {
        size: a.size,
        count: a.count,
        seed: a.seed,
        foreground_mean: a.foreground,
        background_mean: a.background,
        noise_std: a.noise_std,
        semi_axis_range: (a.axis_min, a.axis_max),
        center_jitter: a.jitter,
        min_gap: a.gap,
    };
    write_phantom_dataset(&spec, &a.out)?;
    eprintln!(
        "wrote {} phantom sample(s) of size {} to {}",
        a.count,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let file_cfg = a
        .config
        .as_deref()
        .map(config::RunConfig::load)
        .transpose()?
        .unwrap_or_default();
    let target = a
        .target
        .or(file_cfg.preprocess.target.map(|t| (t[0], t[1], t[2])))
        .unwrap_or((128, 128, 64));
    let margin = a.margin.or(file_cfg.preprocess.margin).unwrap_or(4);

    let volume = read_volume_any(&a.volume)?;
    let left = read_mask_any(&a.mask_left)?;
    let right = read_mask_any(&a.mask_right)?;
    let fused = fuse_masks(&left, &right)?;
    let (cropped_v, cropped_m, window) = crop_centered(&volume, &fused, target, margin)?;
    let normalized = zscore_normalize(&cropped_v);
    write_srv_volume(&normalized, &a.out_volume)?;
    write_srv_mask(&cropped_m, &a.out_mask)?;
    eprintln!(
        "cropped window {:?}..{:?} of {:?} → {:?}, {} mask voxel(s)",
        window.lo, window.hi, volume.dims, cropped_v.dims,
        cropped_m.set_count()
    );
    Ok(())
}

/// Effective training settings after merging config file and flags;
/// echoed at startup for reproducibility.
#[derive(serde::Serialize)]
struct EffectiveTrain<'a> {
    network: &'a UNetConfig,
    epochs: usize,
    lr: f64,
    loss: &'static str,
    threshold: f64,
    seed: u64,
    shuffle: bool,
    precision: &'static str,
    data: &'a Path,
    test_data: &'a Path,
    model_out: &'a Path,
    history_out: &'a Path,
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file_cfg = a
        .config
        .as_deref()
        .map(config::RunConfig::load)
        .transpose()?
        .unwrap_or_default();

    // Network: explicit schedule > preset > config file > desk default.
    let schedule = a.schedule.or(file_cfg.network.schedule.clone());
    let preset = a.preset.or(file_cfg.network.preset.clone());
    let mut net_cfg = if let Some(s) = schedule {
        UNetConfig::from_schedule(s)
    } else if let Some(name) = &preset {
        UNetConfig::preset(name)
            .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}; use desk or paper")))?
    } else {
        UNetConfig::desk()
    };
    if a.no_skips || file_cfg.network.no_skips.unwrap_or(false) {
        net_cfg.use_skips = false;
    }
    net_cfg.validate().map_err(CliError::from)?;

    let loss_kind = match a
        .loss
        .or(file_cfg.train.loss.clone())
        .unwrap_or_else(|| "bce".into())
        .as_str()
    {
        "bce" | "bce_with_logits" => LossKind::BceWithLogits,
        "dice" | "soft_dice" => LossKind::SoftDice,
        other => {
            return Err(CliError::Usage(format!(
                "unknown loss {other:?}; use bce or dice"
            )))
        }
    };
    let precision = match a
        .precision
        .or(file_cfg.train.precision.clone())
        .unwrap_or_else(|| "f32".into())
        .as_str()
    {
        "f32" => Precision::F32,
        "f64" => Precision::F64,
        other => {
            return Err(CliError::Usage(format!(
                "unknown precision {other:?}; use f32 or f64"
            )))
        }
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs.or(file_cfg.train.epochs).unwrap_or(10),
        batch_size: 1,
        loss_kind,
        threshold: a.threshold.or(file_cfg.train.threshold).unwrap_or(0.5),
        seed: a.seed.or(file_cfg.train.seed).unwrap_or(0),
        precision,
        lr: a.lr.or(file_cfg.train.lr).unwrap_or(1e-2),
        shuffle: a.shuffle || file_cfg.train.shuffle.unwrap_or(false),
    };

    let data_dir = a
        .data
        .or(file_cfg.paths.data.clone())
        .ok_or_else(|| CliError::Usage("no training data directory (--data)".into()))?;
    let test_dir = a
        .test_data
        .or(file_cfg.paths.test_data.clone())
        .unwrap_or_else(|| data_dir.clone());
    let model_out = a
        .model
        .or(file_cfg.paths.model.clone())
        .ok_or_else(|| CliError::Usage("no model output path (--model)".into()))?;
    let history_out = a
        .history
        .or(file_cfg.paths.history.clone())
        .ok_or_else(|| CliError::Usage("no history output path (--history)".into()))?;

    let effective = EffectiveTrain {
        network: &net_cfg,
        epochs: train_cfg.epochs,
        lr: train_cfg.lr,
        loss: match train_cfg.loss_kind {
            LossKind::BceWithLogits => "bce_with_logits",
            LossKind::SoftDice => "soft_dice",
        },
        threshold: train_cfg.threshold,
        seed: train_cfg.seed,
        shuffle: train_cfg.shuffle,
        precision: match train_cfg.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        },
        data: &data_dir,
        test_data: &test_dir,
        model_out: &model_out,
        history_out: &history_out,
    };
    eprintln!(
        "effective config: {}",
        serde_json::to_string(&effective).expect("config serializes")
    );

    let train_set = Dataset::from_dir(&data_dir, Split::Train)?;
    let test_set = Dataset::from_dir(&test_dir, Split::Test)?;
    eprintln!(
        "loaded {} training and {} test sample(s)",
        train_set.len(),
        test_set.len()
    );

    let history = match train_cfg.precision {
        Precision::F32 => {
            let mut model = build_unet::<f32>(&net_cfg, train_cfg.seed)?;
            let history = train(&mut model, &train_set, &test_set, &train_cfg)?;
            save_model(&model, &model_out)?;
            history
        }
        Precision::F64 => {
            let mut model = build_unet::<f64>(&net_cfg, train_cfg.seed)?;
            let history = train(&mut model, &train_set, &test_set, &train_cfg)?;
            save_model(&model.cast::<f32>(), &model_out)?;
            history
        }
    };
    for rec in &history.0 {
        eprintln!(
            "epoch {:3}  loss {:.6}  train_iou {:.4}  test_iou {:.4}",
            rec.epoch, rec.loss, rec.train_iou, rec.test_iou
        );
    }
    history
        .write_jsonl(&history_out)
        .map_err(|e| CliError::Input(format!("cannot write history: {e}")))?;
    eprintln!(
        "model → {}, history → {}",
        model_out.display(),
        history_out.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let volume = read_volume_any(&a.volume)?;
    let mut tape = Tape::new();
    let x = tape.constant(volume.to_tensor::<f32>());
    let logits = model.forward_infer(&mut tape, x)?;
    let probs = tape.sigmoid(logits);
    let prob_vol = Volume::from_tensor(tape.data(probs), volume.dims, volume.spacing_mm)?;
    let mask = binarize(&prob_vol, a.threshold)?;
    write_srv_volume(&prob_vol, &a.out_prob)?;
    write_srv_mask(&mask, &a.out_mask)?;
    eprintln!(
        "predicted {} voxel(s) foreground of {}",
        mask.set_count(),
        mask.data.len()
    );
    if let Some(dir) = &a.overlay {
        let paths = overlay::export_overlay(&volume, &mask, dir)?;
        eprintln!(
            "overlays → {}, {}, {}",
            paths[0].display(),
            paths[1].display(),
            paths[2].display()
        );
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&a.truth)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", a.truth.display())))?
    {
        let entry = entry.map_err(|e| CliError::Input(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with("_mask.srv") {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::Input(format!(
            "no *_mask.srv ground-truth files in {}",
            a.truth.display()
        )));
    }

    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let truth = read_srv(&a.truth.join(name))?.into_mask()?;
        let pred_path = a.pred.join(name);
        if !pred_path.exists() {
            return Err(CliError::Input(format!(
                "no prediction for {name} in {}",
                a.pred.display()
            )));
        }
        let pred = read_srv(&pred_path)?.into_mask()?;
        let id = name.trim_end_matches("_mask.srv");
        reports.push(report_volume(&pred, &truth, id).map_err(|e| CliError::Input(e.to_string()))?);
    }
    let agg = aggregate(&reports, a.micro).map_err(|e| CliError::Input(e.to_string()))?;

    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", a.out.display())))?;
    let per_volume = serde_json::to_string_pretty(&reports).expect("reports serialize");
    let aggregate_json = serde_json::to_string_pretty(&agg).expect("aggregate serializes");
    atomic_write(&a.out.join("per_volume.json"), |w| {
        w.write_all(per_volume.as_bytes())
    })
    .map_err(|e| CliError::Input(format!("cannot write per-volume report: {e}")))?;
    atomic_write(&a.out.join("aggregate.json"), |w| {
        w.write_all(aggregate_json.as_bytes())
    })
    .map_err(|e| CliError::Input(format!("cannot write aggregate report: {e}")))?;
    eprintln!(
        "{} volume(s): mean dsc {:.4}, sensitivity {:.4}, ppv {:.4}, iou {:.4}",
        agg.n, agg.mean.dsc, agg.mean.sensitivity, agg.mean.ppv, agg.mean.iou
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let results = gradcheck::run_suite(a.seed).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut failed = false;
    for r in &results {
        println!(
            "{:<20} worst_rel_err {:>12.3e}  threshold {:>8.0e}  {}",
            r.op,
            r.worst,
            r.threshold,
            if r.pass() { "ok" } else { "FAIL" }
        );
        failed |= !r.pass();
    }
    if failed {
        return Err(CliError::Numeric(
            "gradient check exceeded tolerance".into(),
        ));
    }
    Ok(())
}
