//! `train`: optimize regulator parameters on a data directory.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use xmatch_core::pipeline::{DirectionTag, HeadKind, Mode, PipelineConfig};
use xmatch_core::training::{train, TrainConfig, TrainSchedule};
use xmatch_core::Error;

use crate::dataset::Dataset;
use crate::settings::Settings;

const KEYS: [&str; 21] = [
    "mode",
    "direction",
    "steps",
    "n_rar",
    "n_rcr",
    "rcr_every_step",
    "head",
    "lambda0",
    "m",
    "margin",
    "batch_size",
    "epochs",
    "lr",
    "decay_epochs",
    "decay_lr",
    "seed",
    "e_hidden",
    "lambda_hidden",
    "unshare_alignment",
    "residual_rcr",
    "residual_rar",
];

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Data directory written by gen-synthetic
    #[arg(long)]
    pub data: PathBuf,

    /// Run directory for checkpoints, the log, and the config snapshot
    #[arg(long)]
    pub out: PathBuf,

    /// Flat key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one setting, e.g. --set margin=0.3 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Held-out data directory scored after every epoch
    #[arg(long)]
    pub val_data: Option<PathBuf>,

    /// rcr, rar, or rcar
    #[arg(long)]
    pub mode: Option<String>,

    /// t2i or i2t
    #[arg(long)]
    pub direction: Option<String>,

    /// Recurrence step count
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub margin: Option<f64>,

    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,
}

/// Defaults match the reference configuration: cooperative mode, two
/// recurrence steps, temperature 10, and a halved-rate second phase.
fn defaults() -> Settings {
    Settings::with_defaults(&[
        ("mode", "rcar"),
        ("direction", "t2i"),
        ("steps", "2"),
        ("rcr_every_step", "0"),
        ("lambda0", "10"),
        ("m", "256"),
        ("margin", "0.2"),
        ("batch_size", "128"),
        ("epochs", "10"),
        ("lr", "2e-4"),
        ("decay_epochs", "10"),
        ("decay_lr", "2e-5"),
        ("seed", "0"),
        ("e_hidden", "512"),
        ("lambda_hidden", "128"),
        ("unshare_alignment", "0"),
        ("residual_rcr", "1"),
        ("residual_rar", "0"),
    ])
}

fn parse_head(raw: &str) -> Result<HeadKind> {
    match raw {
        "cosine" => Ok(HeadKind::Cosine),
        "sigmoid" => Ok(HeadKind::Sigmoid),
        other => Err(Error::config(format!(
            "head must be cosine or sigmoid, got {other:?}"
        ))
        .into()),
    }
}

/// Build the scoring configuration from resolved settings plus the
/// feature dimension read off the data.
pub fn pipeline_from(s: &Settings, d: usize) -> Result<PipelineConfig> {
    let mode = Mode::parse(s.str_of("mode")?)?;
    let m = s.usize_of("m")?;
    let steps = s.usize_of("steps")?;
    let mut p = match mode {
        Mode::Baseline => PipelineConfig::baseline(d),
        Mode::Rcr => PipelineConfig::rcr(d, m, steps),
        Mode::Rar => PipelineConfig::rar(d, m, steps),
        Mode::Rcar => PipelineConfig::rcar(d, m, steps),
    };
    if let Some(raw) = s.get("n_rar") {
        p.n_rar = raw
            .parse()
            .map_err(|_| Error::config(format!("setting n_rar={raw:?} is not a count")))?;
    }
    if let Some(raw) = s.get("n_rcr") {
        p.n_rcr = raw
            .parse()
            .map_err(|_| Error::config(format!("setting n_rcr={raw:?} is not a count")))?;
    }
    if s.bool_of("rcr_every_step")? {
        if mode != Mode::Rcar {
            return Err(Error::config(
                "rcr_every_step only applies to the cooperative mode",
            )
            .into());
        }
        p = p.rcr_every_step();
    }
    if let Some(raw) = s.get("head") {
        p = p.with_head(parse_head(raw)?);
    }
    p = p
        .with_direction(DirectionTag::parse(s.str_of("direction")?)?)
        .with_lambda0(s.f64_of("lambda0")?);
    p.residual_rcr = s.bool_of("residual_rcr")?;
    p.residual_rar = s.bool_of("residual_rar")?;
    p.validate()?;
    Ok(p)
}

fn schedule_from(s: &Settings) -> Result<TrainSchedule> {
    let epochs = s.usize_of("epochs")?;
    let lr = s.f64_of("lr")?;
    let decay_epochs = s.usize_of("decay_epochs")?;
    let schedule = if decay_epochs > 0 {
        TrainSchedule::two_phase(epochs, lr, decay_epochs, s.f64_of("decay_lr")?)
    } else {
        TrainSchedule::constant(epochs, lr)
    };
    Ok(schedule)
}

pub fn run(args: TrainArgs) -> Result<u8> {
    let mut s = defaults();
    if let Some(path) = &args.config {
        s.merge(&Settings::load(path)?);
    }
    for kv in &args.set {
        s.set_kv(kv)?;
    }
    if let Some(v) = &args.mode {
        s.set("mode", v.clone());
    }
    if let Some(v) = &args.direction {
        s.set("direction", v.clone());
    }
    if let Some(v) = args.steps {
        s.set("steps", v.to_string());
    }
    if let Some(v) = args.epochs {
        s.set("epochs", v.to_string());
    }
    if let Some(v) = args.lr {
        s.set("lr", v.to_string());
    }
    if let Some(v) = args.margin {
        s.set("margin", v.to_string());
    }
    if let Some(v) = args.batch_size {
        s.set("batch_size", v.to_string());
    }
    if let Some(v) = args.seed {
        s.set("seed", v.to_string());
    }
    s.check_keys(&KEYS)?;

    let data = Dataset::load(&args.data)?;
    let d = data.feature_dim()?;

    let mut config = TrainConfig::new(pipeline_from(&s, d)?);
    config.loss.margin = s.f64_of("margin")?;
    config.loss.batch_size = s.usize_of("batch_size")?;
    config.schedule = schedule_from(&s)?;
    config.seed = s.u64_of("seed")?;
    config.e_hidden = s.usize_of("e_hidden")?;
    config.lambda_hidden = s.usize_of("lambda_hidden")?;
    config.unshare_alignment = s.bool_of("unshare_alignment")?;
    config.validate()?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut snapshot = s.clone();
    snapshot.set("d", d.to_string());
    snapshot.write(&args.out.join("config.kv"))?;

    let (images, captions) = data.training_pairs();
    let val_data = args.val_data.as_deref().map(Dataset::load).transpose()?;
    let val_pairs = val_data.as_ref().map(|v| v.training_pairs());
    let validation = val_pairs
        .as_ref()
        .map(|(vi, vc)| (vi.as_slice(), vc.as_slice()));

    let log_path = args.out.join("train.log");
    let mut log = BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let outcome = train(
        &config,
        &images,
        &captions,
        validation,
        None,
        Some(&args.out),
        &mut log,
    )?;
    log.flush()?;

    let final_path = args.out.join("final.ck");
    outcome.checkpoint.save(&final_path)?;

    let last_loss = outcome.epoch_losses.last().copied().unwrap_or(0.0);
    println!(
        "trained {} epochs on {} pairs; final epoch loss {last_loss:.6e}",
        outcome.epoch_losses.len(),
        images.len()
    );
    if let Some((epoch, metric)) = outcome.best {
        println!("best validation recall-sum {metric:.6} at epoch {epoch} (best.ck)");
    }
    println!("final checkpoint: {}", final_path.display());
    Ok(0)
}
