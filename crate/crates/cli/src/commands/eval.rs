//! `eval`: bidirectional retrieval metrics, either by scoring a data
//! directory with a checkpoint or by re-reading an exported score table.
//!
//! The similarity matrix has one row per image and one column per
//! caption. Image-to-text retrieval ranks columns within a row;
//! text-to-image retrieval ranks rows within a column. The hit rule is
//! the standard one for multi-caption galleries: an image query scores a
//! hit when any of its captions makes the cutoff, a caption query when
//! its single paired image does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ndarray::Array2;
use xmatch_core::checkpoint::Checkpoint;
use xmatch_core::data::DatasetManifest;
use xmatch_core::eval::{
    diagnostics, five_fold_eval, retrieval_report, DiagnosticsBundle, RetrievalReport, REPORT_KS,
};
use xmatch_core::pipeline::{
    read_scores, score_matrix, score_traced, write_scores, DirectionTag, Mode, ModelParams,
    PipelineConfig, ScoreTrace, SimilarityRecord,
};
use xmatch_core::training::read_pipeline_meta;
use xmatch_core::Error;

use crate::dataset::Dataset;
use crate::settings::Settings;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to score with (needs --data)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Data directory to score (needs --checkpoint)
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// Previously exported score table (needs --manifest)
    #[arg(long)]
    pub scores: Option<PathBuf>,

    /// Pairing manifest for --scores
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Directory for report.txt, report.kv, and exported scores
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Comma-separated recall cutoffs (default: 1,5,10 clipped to the gallery)
    #[arg(long)]
    pub ks: Option<String>,

    /// Also evaluate five consecutive gallery folds and their mean
    #[arg(long)]
    pub five_fold: bool,

    /// Also trace guidance weights and cosine separation (checkpoint runs only)
    #[arg(long)]
    pub diagnostics: bool,
}

/// Everything the report stage needs, however the scores were obtained.
struct EvalInputs {
    /// Images by row, captions by column.
    sim: Array2<f64>,
    image_ids: Vec<String>,
    caption_ids: Vec<String>,
    /// Caption columns of each image row.
    truth_i2t: Vec<Vec<usize>>,
    /// Image row of each caption column.
    truth_t2i: Vec<Vec<usize>>,
}

fn truths(manifest: &DatasetManifest) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let image_row: BTreeMap<&str, usize> = manifest
        .images()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut truth_i2t = vec![Vec::new(); manifest.images().len()];
    let mut truth_t2i = Vec::with_capacity(manifest.pairs().len());
    for (j, (img, _)) in manifest.pairs().iter().enumerate() {
        let row = image_row[img.as_str()];
        truth_i2t[row].push(j);
        truth_t2i.push(vec![row]);
    }
    (truth_i2t, truth_t2i)
}

fn parse_ks(raw: &Option<String>, gallery: usize) -> Result<Vec<usize>> {
    match raw {
        Some(text) => {
            let mut ks = Vec::new();
            for part in text.split(',') {
                let k: usize = part.trim().parse().map_err(|_| {
                    Error::config(format!("--ks entry {part:?} is not a count"))
                })?;
                ks.push(k);
            }
            ks.sort_unstable();
            ks.dedup();
            if ks.is_empty() {
                return Err(Error::config("--ks names no cutoffs").into());
            }
            Ok(ks)
        }
        None => Ok(REPORT_KS.iter().copied().filter(|&k| k <= gallery).collect()),
    }
}

fn sim_from_checkpoint(
    ck_path: &Path,
    data_dir: &Path,
    want_diagnostics: bool,
) -> Result<(EvalInputs, PipelineConfig, Option<DiagnosticsBundle>)> {
    let ck = Checkpoint::load(ck_path)?;
    let pipeline = read_pipeline_meta(&ck)?;
    let params = if pipeline.mode == Mode::Baseline {
        None
    } else {
        Some(ModelParams::read_from(&ck)?)
    };
    let data = Dataset::load(data_dir)?;
    let d = data.feature_dim()?;
    if d != pipeline.d {
        return Err(Error::data(format!(
            "data features are {d} wide but the checkpoint was trained at d={}",
            pipeline.d
        ))
        .into());
    }

    let sim = score_matrix(
        &data.image_features,
        &data.caption_features,
        &pipeline,
        params.as_ref(),
    )?;

    let bundle = if want_diagnostics {
        Some(trace_diagnostics(&data, &pipeline, params.as_ref())?)
    } else {
        None
    };

    let (truth_i2t, truth_t2i) = truths(&data.manifest);
    let caption_ids = data
        .manifest
        .pairs()
        .iter()
        .map(|(_, c)| c.clone())
        .collect();
    Ok((
        EvalInputs {
            sim,
            image_ids: data.manifest.images().to_vec(),
            caption_ids,
            truth_i2t,
            truth_t2i,
        },
        pipeline,
        bundle,
    ))
}

/// Score every caption against its paired image and one shifted
/// non-paired image, with per-step internals recorded, then summarize.
fn trace_diagnostics(
    data: &Dataset,
    pipeline: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<DiagnosticsBundle> {
    if pipeline.direction != DirectionTag::T2i {
        return Err(Error::config(
            "diagnostics group guidance weights by caption token; they need a t2i-direction checkpoint",
        )
        .into());
    }
    let tags = data.tags_in_pair_order()?;
    let n_img = data.image_features.len();
    if n_img < 2 {
        return Err(Error::data("diagnostics need at least two images for negative pairs").into());
    }
    let rows = data.paired_image_rows();
    let mut positive: Vec<ScoreTrace> = Vec::with_capacity(data.caption_features.len());
    let mut negative: Vec<ScoreTrace> = Vec::with_capacity(data.caption_features.len());
    for (j, cap) in data.caption_features.iter().enumerate() {
        let pos_row = rows[j];
        let neg_row = (pos_row + 1) % n_img;
        let (_, pt) = score_traced(
            data.image_features[pos_row].view(),
            cap.view(),
            pipeline,
            params,
        )?;
        let (_, nt) = score_traced(
            data.image_features[neg_row].view(),
            cap.view(),
            pipeline,
            params,
        )?;
        positive.push(pt);
        negative.push(nt);
    }
    Ok(diagnostics(&positive, &negative, &tags)?)
}

fn sim_from_scores(scores_path: &Path, manifest_path: &Path) -> Result<EvalInputs> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let records = read_scores(scores_path)?;
    let image_ids: Vec<String> = manifest.images().to_vec();
    let caption_ids: Vec<String> = manifest.pairs().iter().map(|(_, c)| c.clone()).collect();
    let image_row: BTreeMap<&str, usize> = image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let caption_col: BTreeMap<&str, usize> = caption_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();

    let mut sim = Array2::from_elem((image_ids.len(), caption_ids.len()), f64::NAN);
    for r in &records {
        let i = *image_row.get(r.image_id.as_str()).ok_or_else(|| {
            Error::data(format!("score table names unknown image {:?}", r.image_id))
        })?;
        let j = *caption_col.get(r.caption_id.as_str()).ok_or_else(|| {
            Error::data(format!("score table names unknown caption {:?}", r.caption_id))
        })?;
        if !r.score.is_finite() {
            return Err(Error::data(format!(
                "non-finite score for pair ({}, {})",
                r.image_id, r.caption_id
            ))
            .into());
        }
        if !sim[[i, j]].is_nan() {
            return Err(Error::data(format!(
                "duplicate score for pair ({}, {})",
                r.image_id, r.caption_id
            ))
            .into());
        }
        sim[[i, j]] = r.score;
    }
    let missing = sim.iter().filter(|v| v.is_nan()).count();
    if missing > 0 {
        return Err(Error::data(format!(
            "score table covers {} of {} image-caption pairs",
            sim.len() - missing,
            sim.len()
        ))
        .into());
    }

    let (truth_i2t, truth_t2i) = truths(&manifest);
    Ok(EvalInputs {
        sim,
        image_ids,
        caption_ids,
        truth_i2t,
        truth_t2i,
    })
}

fn push_report(lines: &mut Vec<String>, kv: &mut Settings, label: &str, report: &RetrievalReport) {
    lines.push(report.render());
    kv.set(&format!("{label}.queries"), report.queries.to_string());
    for (k, r) in &report.r_at {
        kv.set(&format!("{label}.r@{k}"), format!("{r:.6}"));
    }
}

fn push_five_fold(
    lines: &mut Vec<String>,
    kv: &mut Settings,
    label: &str,
    sim: ndarray::ArrayView2<f64>,
    truth: &[Vec<usize>],
    direction: DirectionTag,
    ks: &[usize],
) -> Result<()> {
    let folds = five_fold_eval(sim, truth, direction, ks)?;
    for (n, fold) in folds.folds.iter().enumerate() {
        lines.push(format!("fold {}/5: {}", n + 1, fold.render()));
        for (k, r) in &fold.r_at {
            kv.set(&format!("{label}.fold{}.r@{k}", n + 1), format!("{r:.6}"));
        }
    }
    lines.push(format!("fold mean: {}", folds.mean.render()));
    for (k, r) in &folds.mean.r_at {
        kv.set(&format!("{label}.foldmean.r@{k}"), format!("{r:.6}"));
    }
    Ok(())
}

fn push_diagnostics(lines: &mut Vec<String>, kv: &mut Settings, bundle: &DiagnosticsBundle) {
    for step in &bundle.beta_by_tag {
        let mut parts = Vec::with_capacity(step.tags.len());
        for t in &step.tags {
            parts.push(format!(
                "{} share {:.6} token-weight {:.6}",
                t.tag, t.mean_share, t.mean_token_weight
            ));
            kv.set(
                &format!("diag.step{}.share.{}", step.step, t.tag),
                format!("{:.6}", t.mean_share),
            );
            kv.set(
                &format!("diag.step{}.token_weight.{}", step.step, t.tag),
                format!("{:.6}", t.mean_token_weight),
            );
        }
        lines.push(format!("guidance step {}: {}", step.step, parts.join("; ")));
    }
    for sep in &bundle.separation {
        lines.push(format!(
            "attention pass {}: positive/negative cosine distance {:.6}",
            sep.step, sep.w1
        ));
        kv.set(
            &format!("diag.pass{}.separation", sep.step),
            format!("{:.6}", sep.w1),
        );
    }
}

pub fn run(args: EvalArgs) -> Result<u8> {
    let checkpoint_mode = args.checkpoint.is_some() || args.data.is_some();
    let scores_mode = args.scores.is_some() || args.manifest.is_some();
    if checkpoint_mode && scores_mode {
        return Err(Error::config(
            "pass either --checkpoint with --data or --scores with --manifest, not both",
        )
        .into());
    }

    let (inputs, scored, bundle) = if checkpoint_mode {
        let (Some(ck), Some(data)) = (&args.checkpoint, &args.data) else {
            return Err(Error::config("--checkpoint and --data go together").into());
        };
        let (inputs, pipeline, bundle) = sim_from_checkpoint(ck, data, args.diagnostics)?;
        (inputs, Some(pipeline), bundle)
    } else {
        let (Some(scores), Some(manifest)) = (&args.scores, &args.manifest) else {
            return Err(Error::config(
                "pass --checkpoint with --data, or --scores with --manifest",
            )
            .into());
        };
        if args.diagnostics {
            return Err(Error::config(
                "diagnostics re-run the scorer; they need --checkpoint and --data",
            )
            .into());
        }
        (sim_from_scores(scores, manifest)?, None, None)
    };

    let mut lines: Vec<String> = Vec::new();
    let mut kv = Settings::default();

    let ks_i2t = parse_ks(&args.ks, inputs.caption_ids.len())?;
    let ks_t2i = parse_ks(&args.ks, inputs.image_ids.len())?;
    let i2t = retrieval_report(inputs.sim.view(), &inputs.truth_i2t, DirectionTag::I2t, &ks_i2t)?;
    let t2i = retrieval_report(inputs.sim.t(), &inputs.truth_t2i, DirectionTag::T2i, &ks_t2i)?;
    push_report(&mut lines, &mut kv, "i2t", &i2t);
    push_report(&mut lines, &mut kv, "t2i", &t2i);
    let rsum = i2t.recall_sum() + t2i.recall_sum();
    lines.push(format!("rsum {rsum:.6}"));
    kv.set("rsum", format!("{rsum:.6}"));

    if args.five_fold {
        push_five_fold(
            &mut lines,
            &mut kv,
            "i2t",
            inputs.sim.view(),
            &inputs.truth_i2t,
            DirectionTag::I2t,
            &ks_i2t,
        )?;
        push_five_fold(
            &mut lines,
            &mut kv,
            "t2i",
            inputs.sim.t(),
            &inputs.truth_t2i,
            DirectionTag::T2i,
            &ks_t2i,
        )?;
    }
    if let Some(bundle) = &bundle {
        push_diagnostics(&mut lines, &mut kv, bundle);
    }

    let report_text = lines.join("\n") + "\n";
    print!("{report_text}");

    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("report.txt"), &report_text)?;
        kv.write(&out.join("report.kv"))?;

        let mut snapshot = Settings::default();
        if let Some(p) = &args.checkpoint {
            snapshot.set("checkpoint", p.display().to_string());
        }
        if let Some(p) = &args.data {
            snapshot.set("data", p.display().to_string());
        }
        if let Some(p) = &args.scores {
            snapshot.set("scores", p.display().to_string());
        }
        if let Some(p) = &args.manifest {
            snapshot.set("manifest", p.display().to_string());
        }
        snapshot.set("ks", ks_i2t.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
        snapshot.set("five_fold", if args.five_fold { "1" } else { "0" });
        snapshot.set("diagnostics", if args.diagnostics { "1" } else { "0" });
        snapshot.write(&out.join("config.kv"))?;

        if let Some(pipeline) = &scored {
            let mut records = Vec::with_capacity(inputs.sim.len());
            for (i, img) in inputs.image_ids.iter().enumerate() {
                for (j, cap) in inputs.caption_ids.iter().enumerate() {
                    records.push(SimilarityRecord {
                        image_id: img.clone(),
                        caption_id: cap.clone(),
                        direction: pipeline.direction,
                        mode: pipeline.mode,
                        score: inputs.sim[[i, j]],
                    });
                }
            }
            write_scores(&out.join("scores.tsv"), &records)?;
        }
        println!("report written to {}", out.display());
    }
    Ok(0)
}
