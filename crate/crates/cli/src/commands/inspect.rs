//! `inspect`: identify any file this tool produces and summarize it.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use xmatch_core::checkpoint::Checkpoint;
use xmatch_core::data::{DatasetManifest, FeatureReader};
use xmatch_core::pipeline::read_scores;
use xmatch_core::Error;

use crate::settings::Settings;

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// File to identify
    pub file: PathBuf,
}

pub fn run(args: InspectArgs) -> Result<u8> {
    let path = &args.file;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;

    if bytes.starts_with(b"XMCK") {
        let ck = Checkpoint::load(path)?;
        println!("checkpoint: {}", path.display());
        for (k, v) in &ck.meta {
            println!("  meta {k} = {v}");
        }
        if let Some(rng) = &ck.rng {
            println!(
                "  rng seed {} stream {} word_pos {}",
                rng.seed, rng.stream, rng.word_pos
            );
        }
        for t in &ck.tensors {
            println!("  tensor {} shape {:?} ({} values)", t.name, t.dims, t.len());
        }
        return Ok(0);
    }

    if bytes.starts_with(b"XMRF") {
        let reader = FeatureReader::open(path)?;
        println!(
            "feature file: {} sets of {} x {} ({})",
            reader.len(),
            reader.k(),
            reader.d_raw(),
            path.display()
        );
        return Ok(0);
    }

    let text = String::from_utf8(bytes)
        .map_err(|_| Error::format("not a known binary format and not UTF-8 text"))?;
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .unwrap_or("");

    if first == "image_id\tcaption_id\tdirection\tmode\tscore" {
        let records = read_scores(path)?;
        let directions: BTreeSet<String> =
            records.iter().map(|r| r.direction.to_string()).collect();
        let modes: BTreeSet<String> = records.iter().map(|r| r.mode.to_string()).collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in &records {
            lo = lo.min(r.score);
            hi = hi.max(r.score);
        }
        println!("score table: {} records ({})", records.len(), path.display());
        println!(
            "  directions {:?} modes {:?}",
            directions.iter().collect::<Vec<_>>(),
            modes.iter().collect::<Vec<_>>()
        );
        if !records.is_empty() {
            println!("  score range [{lo:.6}, {hi:.6}]");
        }
        return Ok(0);
    }

    if let Ok(manifest) = DatasetManifest::from_text(&text) {
        println!("manifest: {}", path.display());
        println!("  split {}", manifest.split());
        println!("  captions_per_image {}", manifest.captions_per_image());
        println!(
            "  {} pairs over {} images",
            manifest.pairs().len(),
            manifest.images().len()
        );
        return Ok(0);
    }

    let content_lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    if !content_lines.is_empty() && content_lines.iter().all(|l| l.contains('\t')) {
        println!(
            "token tag table: {} captions ({})",
            content_lines.len(),
            path.display()
        );
        return Ok(0);
    }
    if !content_lines.is_empty() && content_lines.iter().all(|l| l.contains('=')) {
        let s = Settings::load(path)?;
        println!("settings file: {}", path.display());
        print!("{}", indent(&s.snapshot()));
        return Ok(0);
    }

    Err(Error::format(format!("unrecognized file format: {}", path.display())).into())
}

fn indent(text: &str) -> String {
    text.lines()
        .map(|l| format!("  {l}\n"))
        .collect::<String>()
}
