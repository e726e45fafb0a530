//! Optimization loop: hinge loss over in-batch negatives, Adam updates
//! from tape gradients, checkpoint and log emission.
//!
//! Training is deterministic given the seed. All stochastic choices
//! (parameter init, epoch shuffles) come from one counter-based RNG,
//! and batch scoring parallelism never reorders arithmetic, so two runs
//! with the same inputs produce byte-identical checkpoints.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod model;

pub use adam::{AdamConfig, AdamState};
pub use loss::{hardest_negatives, hinge_loss, LossConfig};

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, RngState};
use crate::correspondence::{DEFAULT_E_HIDDEN, DEFAULT_LAMBDA_HIDDEN};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::pipeline::{score, HeadKind, Mode, ModelParams, PipelineConfig};
use crate::training::model::{build_batch_loss, param_slice_mut};

/// One stretch of epochs at a fixed learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

/// Piecewise-constant learning-rate plan. Rates never increase from one
/// phase to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
}

impl TrainSchedule {
    pub fn constant(epochs: usize, lr: f64) -> Self {
        TrainSchedule {
            phases: vec![Phase { epochs, lr }],
        }
    }

    pub fn two_phase(epochs1: usize, lr1: f64, epochs2: usize, lr2: f64) -> Self {
        TrainSchedule {
            phases: vec![
                Phase {
                    epochs: epochs1,
                    lr: lr1,
                },
                Phase {
                    epochs: epochs2,
                    lr: lr2,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = f64::INFINITY;
        for (i, phase) in self.phases.iter().enumerate() {
            if !phase.lr.is_finite() || phase.lr <= 0.0 {
                return Err(Error::config(format!(
                    "phase {i}: learning rate {} out of range",
                    phase.lr
                )));
            }
            if phase.lr > prev {
                return Err(Error::config(format!(
                    "phase {i}: learning rate {} rises above {prev}",
                    phase.lr
                )));
            }
            prev = phase.lr;
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate in force during `epoch` (zero-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let mut passed = 0;
        for phase in &self.phases {
            passed += phase.epochs;
            if epoch < passed {
                return phase.lr;
            }
        }
        self.phases.last().map(|p| p.lr).unwrap_or(0.0)
    }
}

impl Default for TrainSchedule {
    /// Ten epochs at 2e-4 then ten at 2e-5.
    fn default() -> Self {
        TrainSchedule::two_phase(10, 2e-4, 10, 2e-5)
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub pipeline: PipelineConfig,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub e_hidden: usize,
    pub lambda_hidden: usize,
    pub seed: u64,
    /// Give the guidance path its own alignment projection instead of
    /// sharing the refinement one.
    pub unshare_alignment: bool,
}

impl TrainConfig {
    pub fn new(pipeline: PipelineConfig) -> Self {
        TrainConfig {
            pipeline,
            loss: LossConfig::default(),
            schedule: TrainSchedule::default(),
            adam: AdamConfig::default(),
            e_hidden: DEFAULT_E_HIDDEN,
            lambda_hidden: DEFAULT_LAMBDA_HIDDEN,
            seed: 0,
            unshare_alignment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.pipeline.mode == Mode::Baseline {
            return Err(Error::config(
                "baseline mode has no trainable parameters; nothing to train",
            ));
        }
        if self.e_hidden == 0 || self.lambda_hidden == 0 {
            return Err(Error::config("hidden sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Result of a run: final parameters, final checkpoint, the best
/// validation checkpoint when validation data was given, and per-epoch
/// traces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub checkpoint: Checkpoint,
    pub best: Option<(usize, f64)>,
    pub best_checkpoint: Option<Checkpoint>,
    pub epoch_losses: Vec<f64>,
    pub validation_history: Vec<(usize, f64)>,
}

fn head_as_str(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Cosine => "cosine",
        HeadKind::Sigmoid => "sigmoid",
    }
}

fn parse_head(s: &str) -> Result<HeadKind> {
    match s {
        "cosine" => Ok(HeadKind::Cosine),
        "sigmoid" => Ok(HeadKind::Sigmoid),
        other => Err(Error::format(format!("unknown head kind {other:?}"))),
    }
}

/// Record the scoring configuration in checkpoint metadata.
pub fn write_pipeline_meta(ck: &mut Checkpoint, c: &PipelineConfig) {
    ck.set_meta("mode", c.mode.as_str());
    ck.set_meta("direction", c.direction.as_str());
    ck.set_meta("n_rar", c.n_rar.to_string());
    ck.set_meta("n_rcr", c.n_rcr.to_string());
    ck.set_meta("lambda0", c.lambda0.to_string());
    ck.set_meta("residual_rcr", if c.residual_rcr { "1" } else { "0" });
    ck.set_meta("residual_rar", if c.residual_rar { "1" } else { "0" });
    ck.set_meta("head", head_as_str(c.head));
    ck.set_meta("d", c.d.to_string());
    ck.set_meta("m", c.m.to_string());
}

/// Rebuild the scoring configuration from checkpoint metadata.
pub fn read_pipeline_meta(ck: &Checkpoint) -> Result<PipelineConfig> {
    let get = |key: &str| {
        ck.get_meta(key)
            .ok_or_else(|| Error::format(format!("checkpoint metadata lacks {key:?}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(format!("checkpoint metadata {key:?} is not a count")))
    };
    let config = PipelineConfig {
        mode: crate::pipeline::Mode::parse(get("mode")?)?,
        direction: crate::pipeline::DirectionTag::parse(get("direction")?)?,
        n_rar: parse_usize("n_rar")?,
        n_rcr: parse_usize("n_rcr")?,
        lambda0: get("lambda0")?
            .parse()
            .map_err(|_| Error::format("checkpoint metadata lambda0 is not a number"))?,
        residual_rcr: get("residual_rcr")? == "1",
        residual_rar: get("residual_rar")? == "1",
        head: parse_head(get("head")?)?,
        d: parse_usize("d")?,
        m: parse_usize("m")?,
    };
    config.validate()?;
    Ok(config)
}

/// Snapshot parameters plus run provenance into a checkpoint.
pub fn snapshot_checkpoint(
    params: &ModelParams,
    config: &TrainConfig,
    epochs_done: usize,
    rng: &ChaCha12Rng,
) -> Checkpoint {
    let mut ck = Checkpoint::new();
    write_pipeline_meta(&mut ck, &config.pipeline);
    ck.set_meta("margin", config.loss.margin.to_string());
    ck.set_meta("batch_size", config.loss.batch_size.to_string());
    ck.set_meta("seed", config.seed.to_string());
    ck.set_meta("epochs_done", epochs_done.to_string());
    ck.rng = Some(RngState {
        seed: config.seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    });
    params.write_into(&mut ck);
    ck
}

fn check_features(side: &str, sets: &[Array2<f64>], d: usize) -> Result<()> {
    if sets.is_empty() {
        return Err(Error::data(format!("{side}: empty feature list")));
    }
    for (i, f) in sets.iter().enumerate() {
        if f.nrows() == 0 {
            return Err(Error::data(format!("{side} {i}: no feature rows")));
        }
        if f.ncols() != d {
            return Err(Error::data(format!(
                "{side} {i}: feature width {} does not match configured d={d}",
                f.ncols()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{side} {i}: non-finite feature value")));
        }
    }
    Ok(())
}

/// Score every (image, caption) pair of a batch given by reference.
fn batch_score_matrix(
    images: &[&Array2<f64>],
    captions: &[&Array2<f64>],
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<Array2<f64>> {
    let rows: Result<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|img| {
            captions
                .iter()
                .map(|cap| score(img.view(), cap.view(), config, params).map(|r| r.score))
                .collect()
        })
        .collect();
    let rows = rows?;
    let mut out = Array2::zeros((images.len(), captions.len()));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

/// Sum of recalls at 1, 5 and 10 (clamped to the gallery size) in both
/// retrieval directions, with pair `i` matching pair `i`.
pub fn validation_metric(
    images: &[Array2<f64>],
    captions: &[Array2<f64>],
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<f64> {
    let image_refs: Vec<&Array2<f64>> = images.iter().collect();
    let caption_refs: Vec<&Array2<f64>> = captions.iter().collect();
    let sim = batch_score_matrix(&image_refs, &caption_refs, config, params)?;
    let n = images.len();
    let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut total = 0.0;
    for k in [1usize, 5, 10] {
        if k > n {
            continue;
        }
        total += recall_at_k(sim.view(), &truth, k)?;
        total += recall_at_k(sim.t(), &truth, k)?;
    }
    Ok(total)
}

/// Optimize the regulator parameters on paired feature sets.
///
/// `images[i]` and `captions[i]` are a positive pair; all other batch
/// members serve as negatives. Logs one line per optimization step.
/// With `out_dir` set, writes a checkpoint per epoch plus `best.ck`
/// whenever validation improves.
pub fn train(
    config: &TrainConfig,
    images: &[Array2<f64>],
    captions: &[Array2<f64>],
    validation: Option<(&[Array2<f64>], &[Array2<f64>])>,
    initial: Option<&ModelParams>,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.len() != captions.len() {
        return Err(Error::data(format!(
            "{} images but {} captions",
            images.len(),
            captions.len()
        )));
    }
    let d = config.pipeline.d;
    check_features("image", images, d)?;
    check_features("caption", captions, d)?;
    if let Some((vi, vc)) = validation {
        if vi.len() != vc.len() {
            return Err(Error::data(format!(
                "validation: {} images but {} captions",
                vi.len(),
                vc.len()
            )));
        }
        check_features("validation image", vi, d)?;
        check_features("validation caption", vc, d)?;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut params = match initial {
        Some(p) => {
            p.validate(d, config.pipeline.m)?;
            p.clone()
        }
        None => {
            let mut p = ModelParams::init_with_hidden(
                d,
                config.pipeline.m,
                config.e_hidden,
                config.lambda_hidden,
                &mut rng,
            );
            if config.unshare_alignment {
                p.unshare_alignment_weight();
            }
            p
        }
    };

    let mut adam = AdamState::new();
    let mut step_index = 0usize;
    let mut epoch_losses = Vec::new();
    let mut validation_history = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_checkpoint: Option<Checkpoint> = None;
    let total_epochs = config.schedule.total_epochs();
    let n = images.len();

    for epoch in 0..total_epochs {
        let lr = config.schedule.lr_for_epoch(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.loss.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let image_refs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &images[i]).collect();
            let caption_refs: Vec<&Array2<f64>> = chunk.iter().map(|&i| &captions[i]).collect();
            let sim = batch_score_matrix(
                &image_refs,
                &caption_refs,
                &config.pipeline,
                Some(&params),
            )?;
            let loss = hinge_loss(sim.view(), config.loss.margin)?;
            guard_batch(&sim, loss, epoch, step_index, chunk, out_dir)?;
            epoch_loss += loss;
            batches += 1;

            if loss > 0.0 {
                let bt = build_batch_loss(
                    &params,
                    &image_refs,
                    &caption_refs,
                    sim.view(),
                    &config.pipeline,
                    config.loss.margin,
                )?;
                let tape_loss = bt.tape.value(bt.loss).scalar();
                debug_assert!(
                    (tape_loss - loss).abs() <= 1e-9 * loss.abs().max(1.0),
                    "tape loss {tape_loss} drifted from pure loss {loss}"
                );
                let grads = bt.tape.backward(bt.loss);
                let named: Vec<(String, Vec<f64>)> = bt
                    .bound
                    .entries
                    .iter()
                    .map(|(name, var)| (name.clone(), grads.get(&bt.tape, *var).flat()))
                    .collect();
                adam.begin_step();
                for (name, grad) in &named {
                    let slice = param_slice_mut(&mut params, name)
                        .unwrap_or_else(|| panic!("no parameter slot named {name}"));
                    adam.update_tensor(&config.adam, lr, name, slice, grad);
                }
            }

            writeln!(
                log,
                "epoch {epoch} step {step_index} loss {loss:.6e} lr {lr:.3e}"
            )?;
            step_index += 1;
        }
        epoch_losses.push(if batches > 0 {
            epoch_loss / batches as f64
        } else {
            0.0
        });

        if let Some(dir) = out_dir {
            let ck = snapshot_checkpoint(&params, config, epoch + 1, &rng);
            ck.save(&dir.join(format!("epoch_{:04}.ck", epoch + 1)))?;
        }
        if let Some((vi, vc)) = validation {
            let metric = validation_metric(vi, vc, &config.pipeline, Some(&params))?;
            validation_history.push((epoch + 1, metric));
            if best.map_or(true, |(_, m)| metric > m) {
                best = Some((epoch + 1, metric));
                let ck = snapshot_checkpoint(&params, config, epoch + 1, &rng);
                if let Some(dir) = out_dir {
                    ck.save(&dir.join("best.ck"))?;
                }
                best_checkpoint = Some(ck);
            }
        }
    }

    let checkpoint = snapshot_checkpoint(&params, config, total_epochs, &rng);
    Ok(TrainOutcome {
        params,
        checkpoint,
        best,
        best_checkpoint,
        epoch_losses,
        validation_history,
    })
}

/// Abort the run if a batch produced non-finite scores or a non-finite
/// loss. Input validation makes this unreachable for well-formed data;
/// the guard is the backstop that turns any numeric blowup into a
/// diagnosable dump instead of a silently poisoned model.
fn guard_batch(
    sim: &Array2<f64>,
    loss: f64,
    epoch: usize,
    step: usize,
    chunk: &[usize],
    out_dir: Option<&Path>,
) -> Result<()> {
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(abort_on_bad_loss(
            "similarity matrix contains non-finite scores",
            epoch,
            step,
            chunk,
            sim,
            out_dir,
        ));
    }
    if !loss.is_finite() {
        return Err(abort_on_bad_loss(
            &format!("loss {loss} is non-finite"),
            epoch,
            step,
            chunk,
            sim,
            out_dir,
        ));
    }
    Ok(())
}

/// Build the abort error for a blown-up batch, writing a dump next to
/// the checkpoints when a run directory exists.
fn abort_on_bad_loss(
    problem: &str,
    epoch: usize,
    step: usize,
    chunk: &[usize],
    sim: &Array2<f64>,
    out_dir: Option<&Path>,
) -> Error {
    let mut dump = format!(
        "non-finite loss: {problem} at epoch {epoch} step {step}\nbatch pair indices: {chunk:?}\nsimilarity matrix:\n"
    );
    for row in sim.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        dump.push_str(&cells.join("\t"));
        dump.push('\n');
    }
    if let Some(dir) = out_dir {
        let path = dir.join("bad_batch_dump.txt");
        if std::fs::write(&path, &dump).is_ok() {
            return Error::Training(format!(
                "non-finite loss: {problem} at epoch {epoch} step {step}; batch dump at {}",
                path.display()
            ));
        }
    }
    Error::Training(dump)
}
