//! Scoring modes and their shared executor.
//!
//! Four modes compose the same parts: `baseline` is one attention pass
//! and an average-cosine head; `rcr` refines the attention factors
//! before that head; `rar` re-weights alignment vectors into a guidance
//! vector read by a sigmoid head; `rcar` interleaves both. One executor
//! serves them all, so the degenerate configurations coincide exactly
//! rather than approximately.
//!
//! The cross-modal interaction step is pluggable: anything implementing
//! [`InteractionUnit`] can replace the built-in attention, and the
//! executor keeps enforcing finiteness on whatever comes back.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::aggregation::{init_guidance, similarity_head, step_guidance, RarParams};
use crate::attention::{attend, cosine, AttentionFactors};
use crate::checkpoint::Checkpoint;
use crate::correspondence::{
    build_alignments, regulate, RcrParams, DEFAULT_E_HIDDEN, DEFAULT_LAMBDA_HIDDEN,
};
use crate::error::{Error, Result};

/// Default softmax temperature for fresh attention factors.
pub const DEFAULT_LAMBDA0: f64 = 10.0;

/// Scoring mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Rcr,
    Rar,
    Rcar,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Rcr => "rcr",
            Mode::Rar => "rar",
            Mode::Rcar => "rcar",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "rcr" => Ok(Mode::Rcr),
            "rar" => Ok(Mode::Rar),
            "rcar" => Ok(Mode::Rcar),
            other => Err(Error::config(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which modality asks and which answers. `Ensemble` only appears on
/// records produced by offline averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionTag {
    T2i,
    I2t,
    Ensemble,
}

impl DirectionTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectionTag::T2i => "t2i",
            DirectionTag::I2t => "i2t",
            DirectionTag::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Result<DirectionTag> {
        match s {
            "t2i" => Ok(DirectionTag::T2i),
            "i2t" => Ok(DirectionTag::I2t),
            "ensemble" => Ok(DirectionTag::Ensemble),
            other => Err(Error::config(format!("unknown direction '{other}'"))),
        }
    }
}

impl fmt::Display for DirectionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Final similarity head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Mean cosine between each query and its attended feature.
    Cosine,
    /// Sigmoid readout of the guidance alignment.
    Sigmoid,
}

/// Everything that selects a scoring behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub direction: DirectionTag,
    pub n_rar: usize,
    pub n_rcr: usize,
    pub lambda0: f64,
    pub residual_rcr: bool,
    pub residual_rar: bool,
    pub head: HeadKind,
    pub d: usize,
    pub m: usize,
}

impl PipelineConfig {
    pub fn baseline(d: usize) -> Self {
        PipelineConfig {
            mode: Mode::Baseline,
            direction: DirectionTag::T2i,
            n_rar: 0,
            n_rcr: 0,
            lambda0: DEFAULT_LAMBDA0,
            residual_rcr: true,
            residual_rar: false,
            head: HeadKind::Cosine,
            d,
            m: 1,
        }
    }

    pub fn rcr(d: usize, m: usize, steps: usize) -> Self {
        PipelineConfig {
            mode: Mode::Rcr,
            n_rcr: steps,
            m,
            ..Self::baseline(d)
        }
    }

    pub fn rar(d: usize, m: usize, steps: usize) -> Self {
        PipelineConfig {
            mode: Mode::Rar,
            n_rar: steps,
            head: HeadKind::Sigmoid,
            m,
            ..Self::baseline(d)
        }
    }

    /// The cooperative schedule: n guidance steps and n-1 refinement
    /// steps, so refinement skips the last iteration.
    pub fn rcar(d: usize, m: usize, n: usize) -> Self {
        PipelineConfig {
            mode: Mode::Rcar,
            n_rar: n,
            n_rcr: n.saturating_sub(1),
            head: HeadKind::Sigmoid,
            m,
            ..Self::baseline(d)
        }
    }

    /// Run refinement on every iteration instead of skipping the last.
    pub fn rcr_every_step(mut self) -> Self {
        self.n_rcr = self.n_rar;
        self
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn with_direction(mut self, direction: DirectionTag) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_lambda0(mut self, lambda0: f64) -> Self {
        self.lambda0 = lambda0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::config("d and m must be at least 1"));
        }
        if !self.lambda0.is_finite() || self.lambda0 < 0.0 {
            return Err(Error::config(format!(
                "initial temperature {} out of range",
                self.lambda0
            )));
        }
        if self.direction == DirectionTag::Ensemble {
            return Err(Error::config(
                "ensemble is a record tag, not a scoring direction",
            ));
        }
        match self.mode {
            Mode::Baseline => {
                if self.n_rar != 0 || self.n_rcr != 0 {
                    return Err(Error::config("baseline mode takes no regulator steps"));
                }
                if self.head != HeadKind::Cosine {
                    return Err(Error::config("baseline mode scores with the cosine head"));
                }
            }
            Mode::Rcr => {
                if self.n_rcr == 0 || self.n_rar != 0 {
                    return Err(Error::config(
                        "rcr mode needs n_rcr >= 1 and no guidance steps",
                    ));
                }
                if self.head != HeadKind::Cosine {
                    return Err(Error::config("rcr mode scores with the cosine head"));
                }
            }
            Mode::Rar => {
                if self.n_rar == 0 || self.n_rcr != 0 {
                    return Err(Error::config(
                        "rar mode needs n_rar >= 1 and no refinement steps",
                    ));
                }
                if self.head != HeadKind::Sigmoid {
                    return Err(Error::config("rar mode scores with the sigmoid head"));
                }
            }
            Mode::Rcar => {}
        }
        Ok(())
    }

    /// Loop iterations the executor runs.
    pub fn total_steps(&self) -> usize {
        self.n_rar.max(self.n_rcr)
    }

    fn needs_params(&self) -> bool {
        self.mode != Mode::Baseline
    }

    fn needs_guidance(&self) -> bool {
        self.head == HeadKind::Sigmoid || self.n_rar > 0
    }
}

/// Learned parameters for one scoring direction.
///
/// The alignment projection is shared between the refinement MLPs and
/// the guidance pooling unless `w_a_rar` unshares it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub rcr: RcrParams,
    pub rar: RarParams,
    pub w_a_rar: Option<Array2<f64>>,
}

impl ModelParams {
    pub fn zeroed(d: usize, m: usize) -> Self {
        Self::zeroed_with_hidden(d, m, DEFAULT_E_HIDDEN, DEFAULT_LAMBDA_HIDDEN)
    }

    pub fn zeroed_with_hidden(d: usize, m: usize, e_hidden: usize, lambda_hidden: usize) -> Self {
        ModelParams {
            rcr: RcrParams::zeroed(d, m, e_hidden, lambda_hidden),
            rar: RarParams::zeroed(m),
            w_a_rar: None,
        }
    }

    pub fn init(d: usize, m: usize, rng: &mut impl Rng) -> Self {
        Self::init_with_hidden(d, m, DEFAULT_E_HIDDEN, DEFAULT_LAMBDA_HIDDEN, rng)
    }

    pub fn init_with_hidden(
        d: usize,
        m: usize,
        e_hidden: usize,
        lambda_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ModelParams {
            rcr: RcrParams::init(d, m, e_hidden, lambda_hidden, rng),
            rar: RarParams::init(m, rng),
            w_a_rar: None,
        }
    }

    pub fn validate(&self, d: usize, m: usize) -> Result<()> {
        self.rcr.validate(d, m)?;
        self.rar.validate(m)?;
        if let Some(w) = &self.w_a_rar {
            if w.nrows() != d || w.ncols() != m {
                return Err(Error::config(format!(
                    "unshared alignment weight is {}x{}, expected {d}x{m}",
                    w.nrows(),
                    w.ncols()
                )));
            }
        }
        Ok(())
    }

    /// Projection used to build the alignments the guidance pools.
    pub fn guidance_alignment_weight(&self) -> ArrayView2<'_, f64> {
        match &self.w_a_rar {
            Some(w) => w.view(),
            None => self.rcr.w_a.view(),
        }
    }

    /// Split the alignment projection into independent copies for the
    /// refinement and guidance paths.
    pub fn unshare_alignment_weight(&mut self) {
        if self.w_a_rar.is_none() {
            self.w_a_rar = Some(self.rcr.w_a.clone());
        }
    }

    pub fn write_into(&self, ck: &mut Checkpoint) {
        ck.push_matrix("rcr.w_a", &self.rcr.w_a);
        ck.push_matrix("rcr.e.w1", &self.rcr.e_mlp.w1);
        ck.push_vector("rcr.e.b1", &self.rcr.e_mlp.b1);
        ck.push_matrix("rcr.e.w2", &self.rcr.e_mlp.w2);
        ck.push_vector("rcr.e.b2", &self.rcr.e_mlp.b2);
        ck.push_matrix("rcr.lam.w1", &self.rcr.lambda_mlp.w1);
        ck.push_vector("rcr.lam.b1", &self.rcr.lambda_mlp.b1);
        ck.push_matrix("rcr.lam.w2", &self.rcr.lambda_mlp.w2);
        ck.push_vector("rcr.lam.b2", &self.rcr.lambda_mlp.b2);
        ck.push_matrix("rar.w_g", &self.rar.w_g);
        ck.push_matrix("rar.w_l", &self.rar.w_l);
        ck.push_vector("rar.w_beta", &self.rar.w_beta);
        ck.push_vector("rar.w_s", &self.rar.w_s);
        if let Some(w) = &self.w_a_rar {
            ck.push_matrix("rar.w_a", w);
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let rcr = RcrParams {
            w_a: ck.matrix("rcr.w_a")?,
            e_mlp: crate::correspondence::Mlp2::new(
                ck.matrix("rcr.e.w1")?,
                ck.vector("rcr.e.b1")?,
                ck.matrix("rcr.e.w2")?,
                ck.vector("rcr.e.b2")?,
            )?,
            lambda_mlp: crate::correspondence::Mlp2::new(
                ck.matrix("rcr.lam.w1")?,
                ck.vector("rcr.lam.b1")?,
                ck.matrix("rcr.lam.w2")?,
                ck.vector("rcr.lam.b2")?,
            )?,
        };
        let rar = RarParams {
            w_g: ck.matrix("rar.w_g")?,
            w_l: ck.matrix("rar.w_l")?,
            w_beta: ck.vector("rar.w_beta")?,
            w_s: ck.vector("rar.w_s")?,
        };
        let w_a_rar = match ck.matrix("rar.w_a") {
            Ok(w) => Some(w),
            Err(_) => None,
        };
        Ok(ModelParams { rcr, rar, w_a_rar })
    }
}

/// A scored pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRecord {
    pub image_id: String,
    pub caption_id: String,
    pub direction: DirectionTag,
    pub mode: Mode,
    pub score: f64,
}

impl SimilarityRecord {
    pub fn new(direction: DirectionTag, mode: Mode, score: f64) -> Self {
        SimilarityRecord {
            image_id: String::new(),
            caption_id: String::new(),
            direction,
            mode,
            score,
        }
    }

    pub fn with_ids(mut self, image_id: impl Into<String>, caption_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self.caption_id = caption_id.into();
        self
    }
}

/// Per-step internals recorded during a traced scoring run: the pooling
/// weights after initialization and every guidance step, and the
/// per-query cosines after every attention pass.
#[derive(Debug, Clone, Default)]
pub struct ScoreTrace {
    pub step_betas: Vec<Array1<f64>>,
    pub step_query_cosines: Vec<Array1<f64>>,
}

/// A pluggable cross-modal interaction: map queries and keys to one
/// attended feature per query under the supplied factors.
pub trait InteractionUnit: Sync {
    fn attend(
        &self,
        queries: ArrayView2<f64>,
        keys: ArrayView2<f64>,
        factors: &AttentionFactors,
    ) -> Result<Array2<f64>>;
}

/// The built-in interaction: temperature-scaled softmax attention over
/// clamped normalized cosines.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuiltinUnit;

impl InteractionUnit for BuiltinUnit {
    fn attend(
        &self,
        queries: ArrayView2<f64>,
        keys: ArrayView2<f64>,
        factors: &AttentionFactors,
    ) -> Result<Array2<f64>> {
        Ok(attend(queries, keys, factors, None)?.attended)
    }
}

/// Adapter wrapping a plain closure as an interaction unit.
pub struct FnUnit<F>(pub F);

impl<F> InteractionUnit for FnUnit<F>
where
    F: Fn(ArrayView2<f64>, ArrayView2<f64>, &AttentionFactors) -> Result<Array2<f64>> + Sync,
{
    fn attend(
        &self,
        queries: ArrayView2<f64>,
        keys: ArrayView2<f64>,
        factors: &AttentionFactors,
    ) -> Result<Array2<f64>> {
        (self.0)(queries, keys, factors)
    }
}

fn checked_attend<U: InteractionUnit + ?Sized>(
    unit: &U,
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    factors: &AttentionFactors,
    step: usize,
) -> Result<Array2<f64>> {
    let attended = unit.attend(queries, keys, factors)?;
    if attended.dim() != queries.dim() {
        return Err(Error::Adapter {
            step,
            msg: format!(
                "attended features are {:?}, queries are {:?}",
                attended.dim(),
                queries.dim()
            ),
        });
    }
    if attended.iter().any(|v| !v.is_finite()) {
        return Err(Error::Adapter {
            step,
            msg: "non-finite attended feature".to_string(),
        });
    }
    Ok(attended)
}

fn cosine_head(queries: ArrayView2<f64>, attended: ArrayView2<f64>) -> Result<f64> {
    let l = queries.nrows();
    let mut total = 0.0;
    for j in 0..l {
        total += cosine(attended.row(j), queries.row(j))?;
    }
    Ok(total / l as f64)
}

fn per_query_cosines(queries: ArrayView2<f64>, attended: ArrayView2<f64>) -> Result<Array1<f64>> {
    let l = queries.nrows();
    let mut out = Array1::zeros(l);
    for j in 0..l {
        out[j] = cosine(attended.row(j), queries.row(j))?;
    }
    Ok(out)
}

/// The shared executor behind every scoring entry point.
fn execute<U: InteractionUnit + ?Sized>(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    config: &PipelineConfig,
    params: Option<&ModelParams>,
    unit: &U,
    want_trace: bool,
) -> Result<(f64, ScoreTrace)> {
    config.validate()?;
    if regions.ncols() != config.d || words.ncols() != config.d {
        return Err(Error::config(format!(
            "features are {} / {} dimensional, config says d={}",
            regions.ncols(),
            words.ncols(),
            config.d
        )));
    }
    let params = if config.needs_params() {
        let p = params.ok_or_else(|| {
            Error::config(format!("mode {} needs model parameters", config.mode))
        })?;
        p.validate(config.d, config.m)?;
        Some(p)
    } else {
        None
    };

    let (queries, keys) = match config.direction {
        DirectionTag::T2i => (words.view(), regions.view()),
        DirectionTag::I2t => (regions.view(), words.view()),
        DirectionTag::Ensemble => unreachable!("rejected by validate"),
    };

    let mut trace = ScoreTrace::default();
    let mut factors = AttentionFactors::uniform(queries.nrows(), config.d, config.lambda0)?;
    let mut attended = checked_attend(unit, queries, keys, &factors, 0)?;
    if want_trace {
        trace
            .step_query_cosines
            .push(per_query_cosines(queries, attended.view())?);
    }

    let guidance = config.needs_guidance();
    let mut alignments = None;
    let mut state = None;
    if guidance {
        let p = params.expect("guidance modes carry parameters");
        let (a, _) = build_alignments(queries, attended.view(), p.guidance_alignment_weight())?;
        let s = init_guidance(a.view())?;
        if want_trace {
            trace.step_betas.push(s.beta.clone());
        }
        alignments = Some(a);
        state = Some(s);
    }

    for n in 1..=config.total_steps() {
        if n <= config.n_rcr {
            let p = params.expect("refinement modes carry parameters");
            factors = regulate(queries, attended.view(), &factors, &p.rcr, config.residual_rcr)?;
            attended = checked_attend(unit, queries, keys, &factors, n)?;
            if want_trace {
                trace
                    .step_query_cosines
                    .push(per_query_cosines(queries, attended.view())?);
            }
            if guidance {
                let (a, _) =
                    build_alignments(queries, attended.view(), p.guidance_alignment_weight())?;
                alignments = Some(a);
            }
        }
        if n <= config.n_rar {
            let p = params.expect("guidance modes carry parameters");
            let a = alignments.as_ref().expect("guidance path built alignments");
            let next = step_guidance(state.as_ref().unwrap(), a.view(), &p.rar, config.residual_rar)?;
            if want_trace {
                trace.step_betas.push(next.beta.clone());
            }
            state = Some(next);
        }
    }

    let score = match config.head {
        HeadKind::Cosine => cosine_head(queries, attended.view())?,
        HeadKind::Sigmoid => {
            let p = params.expect("sigmoid head needs parameters");
            similarity_head(state.as_ref().unwrap().a_g.view(), &p.rar)?
        }
    };
    debug_assert!(score.is_finite());
    Ok((score, trace))
}

/// One attention pass with fixed factors and the average-cosine head.
pub fn score_baseline(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    direction: DirectionTag,
    lambda0: f64,
) -> Result<SimilarityRecord> {
    let config = PipelineConfig::baseline(regions.ncols())
        .with_direction(direction)
        .with_lambda0(lambda0);
    score(regions, words, &config, None)
}

/// Score one pair under any mode.
pub fn score(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<SimilarityRecord> {
    let (s, _) = execute(regions, words, config, params, &BuiltinUnit, false)?;
    Ok(SimilarityRecord::new(config.direction, config.mode, s))
}

/// Score one pair and record the per-step internals.
pub fn score_traced(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<(SimilarityRecord, ScoreTrace)> {
    let (s, trace) = execute(regions, words, config, params, &BuiltinUnit, true)?;
    Ok((SimilarityRecord::new(config.direction, config.mode, s), trace))
}

/// Score one pair under the cooperative schedule.
pub fn score_rcar(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    config: &PipelineConfig,
    params: &ModelParams,
) -> Result<SimilarityRecord> {
    if config.mode != Mode::Rcar {
        return Err(Error::config(format!(
            "score_rcar called with mode {}",
            config.mode
        )));
    }
    score(regions, words, config, Some(params))
}

/// A scorer whose interaction step is the supplied adapter instead of
/// the built-in attention.
pub struct HostedScorer<'a, U: InteractionUnit> {
    config: PipelineConfig,
    params: &'a ModelParams,
    unit: U,
}

impl<'a, U: InteractionUnit> HostedScorer<'a, U> {
    pub fn score(
        &self,
        regions: ArrayView2<f64>,
        words: ArrayView2<f64>,
    ) -> Result<SimilarityRecord> {
        let (s, _) = execute(
            regions,
            words,
            &self.config,
            Some(self.params),
            &self.unit,
            false,
        )?;
        Ok(SimilarityRecord::new(
            self.config.direction,
            self.config.mode,
            s,
        ))
    }

    pub fn score_traced(
        &self,
        regions: ArrayView2<f64>,
        words: ArrayView2<f64>,
    ) -> Result<(SimilarityRecord, ScoreTrace)> {
        let (s, trace) = execute(
            regions,
            words,
            &self.config,
            Some(self.params),
            &self.unit,
            true,
        )?;
        Ok((
            SimilarityRecord::new(self.config.direction, self.config.mode, s),
            trace,
        ))
    }
}

/// Wrap a foreign interaction unit in the full regulator pipeline.
pub fn host_foreign_unit<U: InteractionUnit>(
    unit: U,
    config: PipelineConfig,
    params: &ModelParams,
) -> Result<HostedScorer<'_, U>> {
    config.validate()?;
    params.validate(config.d, config.m)?;
    Ok(HostedScorer {
        config,
        params,
        unit,
    })
}

/// Full similarity matrix: entry [i][j] scores image i against caption
/// j. Rows are computed in parallel; each row is sequential, so the
/// result does not depend on the thread schedule.
pub fn score_matrix(
    images: &[Array2<f64>],
    captions: &[Array2<f64>],
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> Result<Array2<f64>> {
    config.validate()?;
    if images.is_empty() || captions.is_empty() {
        return Err(Error::data("empty feature list for the score matrix"));
    }
    let rows: Vec<Result<Vec<f64>>> = images
        .par_iter()
        .map(|v| {
            captions
                .iter()
                .map(|t| score(v.view(), t.view(), config, params).map(|r| r.score))
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((images.len(), captions.len()));
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for (j, s) in row.into_iter().enumerate() {
            out[[i, j]] = s;
        }
    }
    Ok(out)
}

/// Offline ensemble: per-pair arithmetic mean of two score sets over
/// identical (image, caption) id sets.
pub fn ensemble(a: &[SimilarityRecord], b: &[SimilarityRecord]) -> Result<Vec<SimilarityRecord>> {
    if a.len() != b.len() {
        return Err(Error::data(format!(
            "score sets have {} and {} records",
            a.len(),
            b.len()
        )));
    }
    let mut by_pair = std::collections::BTreeMap::new();
    for r in b {
        let key = (r.image_id.clone(), r.caption_id.clone());
        if by_pair.insert(key, r).is_some() {
            return Err(Error::data(format!(
                "duplicate pair ({}, {}) in second score set",
                r.image_id, r.caption_id
            )));
        }
    }
    let mut out = Vec::with_capacity(a.len());
    for r in a {
        let key = (r.image_id.clone(), r.caption_id.clone());
        let other = by_pair.remove(&key).ok_or_else(|| {
            Error::data(format!(
                "pair ({}, {}) missing from second score set",
                r.image_id, r.caption_id
            ))
        })?;
        let direction = if r.direction == other.direction {
            r.direction
        } else {
            DirectionTag::Ensemble
        };
        let mode = if r.mode == other.mode {
            r.mode
        } else {
            return Err(Error::data(format!(
                "pair ({}, {}) mixes modes {} and {}",
                r.image_id, r.caption_id, r.mode, other.mode
            )));
        };
        out.push(SimilarityRecord {
            image_id: r.image_id.clone(),
            caption_id: r.caption_id.clone(),
            direction,
            mode,
            score: 0.5 * (r.score + other.score),
        });
    }
    Ok(out)
}

/// Decimal formatting shared by everything that prints scores: 9
/// significant digits, bit-exactly reproducible from the text.
pub fn format_score(score: f64) -> String {
    format!("{score:.8e}")
}

const SCORES_HEADER: &str = "image_id\tcaption_id\tdirection\tmode\tscore";

/// Write records as tab-separated text with a fixed header.
pub fn write_scores(path: &Path, records: &[SimilarityRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{SCORES_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.image_id,
            r.caption_id,
            r.direction,
            r.mode,
            format_score(r.score)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read a score table written by [`write_scores`].
pub fn read_scores(path: &Path) -> Result<Vec<SimilarityRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty score file"))??;
    if header != SCORES_HEADER {
        return Err(Error::format(format!(
            "unexpected score header '{header}'"
        )));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "line {}: expected 5 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let score: f64 = fields[4].parse().map_err(|_| {
            Error::format(format!("line {}: unparsable score '{}'", lineno + 2, fields[4]))
        })?;
        out.push(SimilarityRecord {
            image_id: fields[0].to_string(),
            caption_id: fields[1].to_string(),
            direction: DirectionTag::parse(fields[2])
                .map_err(|e| Error::format(format!("line {}: {e}", lineno + 2)))?,
            mode: Mode::parse(fields[3])
                .map_err(|e| Error::format(format!("line {}: {e}", lineno + 2)))?,
            score,
        });
    }
    Ok(out)
}
