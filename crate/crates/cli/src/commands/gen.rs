//! `gen-synthetic`: write a paired synthetic dataset to a directory.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use ndarray::Array2;
use xmatch_core::data::{
    concept_table, generate_synthetic, token_features, write_features, RegionSet, SyntheticSpec,
};

use crate::dataset::{write_tags, CAPTIONS_FILE, MANIFEST_FILE, REGIONS_FILE, TAGS_FILE};
use crate::settings::Settings;

const KEYS: [&str; 7] = [
    "pairs", "regions", "words", "dim", "concepts", "noise", "seed",
];

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Directory to create the dataset in
    #[arg(long)]
    pub out: PathBuf,

    /// Flat key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override one setting, e.g. --set pairs=128 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Number of (image, caption) pairs
    #[arg(long)]
    pub pairs: Option<usize>,

    /// Regions per image
    #[arg(long)]
    pub regions: Option<usize>,

    /// Content words per caption (sentinels excluded)
    #[arg(long)]
    pub words: Option<usize>,

    /// Feature dimension of both modalities
    #[arg(long)]
    pub dim: Option<usize>,

    /// Size of the latent concept pool
    #[arg(long)]
    pub concepts: Option<usize>,

    /// Region noise standard deviation
    #[arg(long)]
    pub noise: Option<f64>,

    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: GenArgs) -> Result<u8> {
    let mut s = Settings::with_defaults(&[
        ("pairs", "64"),
        ("regions", "8"),
        ("words", "6"),
        ("dim", "64"),
        ("concepts", "16"),
        ("noise", "0.1"),
        ("seed", "7"),
    ]);
    if let Some(path) = &args.config {
        s.merge(&Settings::load(path)?);
    }
    for kv in &args.set {
        s.set_kv(kv)?;
    }
    if let Some(v) = args.pairs {
        s.set("pairs", v.to_string());
    }
    if let Some(v) = args.regions {
        s.set("regions", v.to_string());
    }
    if let Some(v) = args.words {
        s.set("words", v.to_string());
    }
    if let Some(v) = args.dim {
        s.set("dim", v.to_string());
    }
    if let Some(v) = args.concepts {
        s.set("concepts", v.to_string());
    }
    if let Some(v) = args.noise {
        s.set("noise", v.to_string());
    }
    if let Some(v) = args.seed {
        s.set("seed", v.to_string());
    }
    s.check_keys(&KEYS)?;

    let spec = SyntheticSpec {
        num_pairs: s.usize_of("pairs")?,
        k: s.usize_of("regions")?,
        l: s.usize_of("words")?,
        d: s.usize_of("dim")?,
        latent_concept_count: s.usize_of("concepts")?,
        noise_scale: s.f64_of("noise")?,
        seed: s.u64_of("seed")?,
    };
    let (regions, sentences, manifest) = generate_synthetic(&spec)?;
    let table = concept_table(&spec)?;

    // Captions are stored as materialized word features so downstream
    // commands never need the concept table.
    let mut caption_sets = Vec::with_capacity(sentences.len());
    for sentence in &sentences {
        let feats = token_features(sentence, &table)?;
        let feats32 = Array2::from_shape_fn(feats.dim(), |ix| feats[ix] as f32);
        caption_sets.push(RegionSet::new(sentence.caption_id(), feats32)?);
    }

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_features(&args.out.join(REGIONS_FILE), &regions)?;
    write_features(&args.out.join(CAPTIONS_FILE), &caption_sets)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    write_tags(&args.out.join(TAGS_FILE), &sentences)?;
    s.write(&args.out.join("config.kv"))?;

    println!(
        "wrote {} pairs ({} regions x {}d images, {} token captions) to {}",
        spec.num_pairs,
        spec.k,
        spec.d,
        spec.l + 2,
        args.out.display()
    );
    Ok(0)
}
