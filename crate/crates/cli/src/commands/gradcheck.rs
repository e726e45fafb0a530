//! `grad-check`: compare analytic gradients against central finite
//! differences on randomized desk-scale instances.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use xmatch_core::pipeline::Mode;
use xmatch_core::training::gradcheck::{check_fragment, CorruptSpec, Fragment, ProbeSpec};
use xmatch_core::Error;

use crate::settings::Settings;

const KEYS: [&str; 11] = [
    "d",
    "m",
    "k",
    "l",
    "e_hidden",
    "lambda_hidden",
    "probes",
    "tolerance",
    "step",
    "seed",
    "retry_budget",
];

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// attend, refinement, guidance, linear-head, full, or all
    #[arg(long, default_value = "all")]
    pub fragment: String,

    /// Mode for --fragment full
    #[arg(long, default_value = "rcar")]
    pub mode: String,

    /// Recurrence steps for --fragment full
    #[arg(long, default_value_t = 2)]
    pub steps: usize,

    /// Flat key=value settings file for the probe shape
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one probe setting, e.g. --set probes=10 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    #[arg(long)]
    pub probes: Option<usize>,

    #[arg(long)]
    pub tolerance: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Self-test: scale one analytic gradient coordinate of this tensor
    /// and demand the audit catches it
    #[arg(long)]
    pub corrupt_tensor: Option<String>,

    #[arg(long, default_value_t = 0)]
    pub corrupt_coordinate: usize,

    #[arg(long, default_value_t = 1.1)]
    pub corrupt_factor: f64,

    /// Directory for the report and config snapshot
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_fragments(args: &GradCheckArgs) -> Result<Vec<Fragment>> {
    let list = match args.fragment.as_str() {
        "all" => Fragment::standard_set(),
        "attend" => vec![Fragment::Attend],
        "refinement" => vec![Fragment::Refinement],
        "guidance" => vec![Fragment::Guidance],
        "linear-head" => vec![Fragment::LinearHead],
        "full" => vec![Fragment::Full {
            mode: Mode::parse(&args.mode)?,
            steps: args.steps,
        }],
        other => {
            return Err(Error::config(format!(
                "unknown fragment {other:?}; use attend, refinement, guidance, linear-head, full, or all"
            ))
            .into())
        }
    };
    Ok(list)
}

pub fn run(args: GradCheckArgs) -> Result<u8> {
    let defaults = ProbeSpec::default();
    let mut s = Settings::with_defaults(&[
        ("d", &defaults.d.to_string()),
        ("m", &defaults.m.to_string()),
        ("k", &defaults.k.to_string()),
        ("l", &defaults.l.to_string()),
        ("e_hidden", &defaults.e_hidden.to_string()),
        ("lambda_hidden", &defaults.lambda_hidden.to_string()),
        ("probes", &defaults.probes.to_string()),
        ("tolerance", &defaults.tolerance.to_string()),
        ("step", &defaults.step.to_string()),
        ("seed", &defaults.seed.to_string()),
        ("retry_budget", &defaults.retry_budget.to_string()),
    ]);
    if let Some(path) = &args.config {
        s.merge(&Settings::load(path)?);
    }
    for kv in &args.set {
        s.set_kv(kv)?;
    }
    if let Some(v) = args.probes {
        s.set("probes", v.to_string());
    }
    if let Some(v) = args.tolerance {
        s.set("tolerance", v.to_string());
    }
    if let Some(v) = args.seed {
        s.set("seed", v.to_string());
    }
    s.check_keys(&KEYS)?;

    let corrupt = args.corrupt_tensor.as_ref().map(|tensor| CorruptSpec {
        tensor: tensor.clone(),
        coordinate: args.corrupt_coordinate,
        factor: args.corrupt_factor,
    });
    let spec = ProbeSpec {
        d: s.usize_of("d")?,
        m: s.usize_of("m")?,
        k: s.usize_of("k")?,
        l: s.usize_of("l")?,
        e_hidden: s.usize_of("e_hidden")?,
        lambda_hidden: s.usize_of("lambda_hidden")?,
        probes: s.usize_of("probes")?,
        tolerance: s.f64_of("tolerance")?,
        step: s.f64_of("step")?,
        seed: s.u64_of("seed")?,
        retry_budget: s.usize_of("retry_budget")?,
        corrupt,
    };

    let mut rendered = Vec::new();
    let mut all_pass = true;
    for fragment in parse_fragments(&args)? {
        let report = check_fragment(fragment, &spec)?;
        all_pass &= report.pass;
        let text = report.render();
        println!("{text}");
        rendered.push(text);
    }

    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("gradcheck.txt"), rendered.join("\n") + "\n")?;
        s.write(&out.join("config.kv"))?;
    }

    Ok(if all_pass { 0 } else { 3 })
}
