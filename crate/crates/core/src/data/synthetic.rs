//! Synthetic paired corpus for desk-scale experiments.
//!
//! Every vocabulary token (two sentinels plus `latent_concept_count`
//! concepts) owns a latent unit direction in d-dim space: a dominant
//! "home" channel plus a small dense tail, so relevance is channel
//! dependent. An image draws a distinct set of concepts; its regions
//! are the concept directions plus Gaussian noise, and its caption is
//! the same concepts as tokens. At `noise_scale = 0` a matcher that
//! counts shared concepts retrieves perfectly in both directions.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::{
    DatasetManifest, RegionSet, SentenceSet, END_TOKEN, FIRST_CONTENT_TOKEN, START_TOKEN,
};
use crate::error::{Error, Result};

/// Hard cap on vocabulary size (sentinels included).
pub const MAX_VOCAB: u32 = 1 << 24;

/// Relative weight of the dense tail against the home-channel spike.
const TAIL_SCALE: f64 = 0.05;

/// Recipe for one synthetic dataset. Generation is a pure function of
/// this value.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    /// Number of (image, caption) pairs; one caption per image.
    pub num_pairs: usize,
    /// Regions per image.
    pub k: usize,
    /// Content words per caption (sentinels not counted).
    pub l: usize,
    /// Feature dimension shared by both modalities.
    pub d: usize,
    /// Size of the latent concept pool.
    pub latent_concept_count: usize,
    /// Standard deviation of region noise, in units of direction norm.
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 || self.k == 0 || self.l == 0 || self.d == 0 {
            return Err(Error::config("synthetic spec: all counts must be >= 1"));
        }
        if self.latent_concept_count == 0 {
            return Err(Error::config("synthetic spec: need at least one concept"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config(
                "synthetic spec: noise_scale must be finite and >= 0",
            ));
        }
        let vocab = self.latent_concept_count as u64 + 2;
        if vocab > MAX_VOCAB as u64 {
            return Err(Error::config(format!(
                "synthetic spec: {} concepts exceed vocabulary capacity {}",
                self.latent_concept_count,
                MAX_VOCAB - 2
            )));
        }
        if self.latent_concept_count < self.concepts_per_pair() {
            return Err(Error::config(format!(
                "synthetic spec: {} concepts cannot fill {} distinct slots per pair",
                self.latent_concept_count,
                self.concepts_per_pair()
            )));
        }
        Ok(())
    }

    /// Distinct concepts drawn per pair: bounded by both regions and words.
    pub fn concepts_per_pair(&self) -> usize {
        self.k.min(self.l)
    }

    /// Vocabulary size: sentinels plus concepts.
    pub fn vocab_size(&self) -> u32 {
        self.latent_concept_count as u32 + FIRST_CONTENT_TOKEN
    }
}

/// Latent directions of the whole vocabulary, row index = token id.
/// Rows are unit vectors. Depends only on (seed, vocab, d).
pub fn concept_table(spec: &SyntheticSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 1);
    let vocab = spec.vocab_size() as usize;
    let mut table = Array2::<f64>::zeros((vocab, spec.d));
    let homes = shuffled_channels(spec.d, &mut rng);
    for (t, mut row) in table.outer_iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = TAIL_SCALE * standard_normal(&mut rng);
        }
        row[homes[t % spec.d]] += 1.0;
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    Ok(table)
}

/// Word features of one sentence: table rows for its token ids,
/// sentinels included. Shape [len × d].
pub fn token_features(sentence: &SentenceSet, table: &Array2<f64>) -> Result<Array2<f64>> {
    let d = table.ncols();
    let mut out = Array2::<f64>::zeros((sentence.len(), d));
    for (j, id) in sentence.token_ids().iter().enumerate() {
        let id = *id as usize;
        if id >= table.nrows() {
            return Err(Error::data(format!(
                "sentence {}: token id {id} outside concept table of {} rows",
                sentence.caption_id(),
                table.nrows()
            )));
        }
        out.row_mut(j).assign(&table.row(id));
    }
    Ok(out)
}

/// Generate the paired corpus. Ids are `i00042` / `c00042` by pair index.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<RegionSet>, Vec<SentenceSet>, DatasetManifest)> {
    spec.validate()?;
    let table = concept_table(spec)?;
    let mut rng = stream_rng(spec.seed, 2);

    let cpp = spec.concepts_per_pair();
    let mut used_sets: BTreeSet<Vec<u32>> = BTreeSet::new();
    let mut regions = Vec::with_capacity(spec.num_pairs);
    let mut sentences = Vec::with_capacity(spec.num_pairs);
    let mut pairs = Vec::with_capacity(spec.num_pairs);

    // Distinct concept sets make cross-pair overlap strictly smaller than
    // self overlap, which is what the overlap oracle relies on.
    let attempt_budget = 1000usize.saturating_mul(spec.num_pairs).max(1000);
    let mut attempts = 0usize;

    for pair_idx in 0..spec.num_pairs {
        let concepts = loop {
            attempts += 1;
            if attempts > attempt_budget {
                return Err(Error::config(format!(
                    "synthetic spec: concept pool of {} cannot supply {} distinct sets of {}",
                    spec.latent_concept_count, spec.num_pairs, cpp
                )));
            }
            let picked = sample_distinct(spec.latent_concept_count, cpp, &mut rng);
            let mut key: Vec<u32> = picked.iter().map(|c| *c as u32).collect();
            key.sort_unstable();
            if used_sets.insert(key) {
                break picked;
            }
        };

        let image_id = format!("i{pair_idx:05}");
        let caption_id = format!("c{pair_idx:05}");

        // Regions: every concept at least once, remaining slots drawn
        // uniformly from the pair's concepts, then shuffled.
        let mut region_concepts: Vec<usize> = Vec::with_capacity(spec.k);
        region_concepts.extend_from_slice(&concepts);
        while region_concepts.len() < spec.k {
            region_concepts.push(concepts[rng.gen_range(0..cpp)]);
        }
        shuffle(&mut region_concepts, &mut rng);

        let mut feats = Array2::<f32>::zeros((spec.k, spec.d));
        for (r, concept) in region_concepts.iter().enumerate() {
            let token = FIRST_CONTENT_TOKEN as usize + concept;
            let dir = table.row(token);
            let scale = spec.noise_scale / (spec.d as f64).sqrt();
            for (c, v) in feats.row_mut(r).iter_mut().enumerate() {
                *v = (dir[c] + scale * standard_normal(&mut rng)) as f32;
            }
        }
        regions.push(RegionSet::new(&image_id, feats)?);

        // Caption: every concept once, padding slots repeat concepts,
        // then shuffled and framed by sentinels.
        let mut word_concepts: Vec<usize> = Vec::with_capacity(spec.l);
        word_concepts.extend_from_slice(&concepts);
        while word_concepts.len() < spec.l {
            word_concepts.push(concepts[rng.gen_range(0..cpp)]);
        }
        shuffle(&mut word_concepts, &mut rng);

        let mut token_ids = Vec::with_capacity(spec.l + 2);
        token_ids.push(START_TOKEN);
        token_ids.extend(
            word_concepts
                .iter()
                .map(|c| FIRST_CONTENT_TOKEN + *c as u32),
        );
        token_ids.push(END_TOKEN);
        let tags: Vec<String> = token_ids.iter().map(|id| tag_of(*id)).collect();
        sentences.push(SentenceSet::new(
            &caption_id,
            &image_id,
            token_ids,
            spec.vocab_size(),
            Some(tags),
        )?);

        pairs.push((image_id, caption_id));
    }

    let manifest = DatasetManifest::new("synthetic", 1, pairs)?;
    Ok((regions, sentences, manifest))
}

/// Diagnostic tag of a token: sentinels get their own groups, content
/// tokens share one.
fn tag_of(id: u32) -> String {
    match id {
        START_TOKEN => "<start>".to_string(),
        END_TOKEN => "<end>".to_string(),
        _ => "content".to_string(),
    }
}

/// ChaCha stream carved out of one seed; streams keep the concept table
/// independent of corpus sampling.
fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal via Box-Muller; two uniforms per draw keeps the
/// consumption pattern fixed and thus the output deterministic.
fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn shuffled_channels(d: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut channels: Vec<usize> = (0..d).collect();
    shuffle(&mut channels, rng);
    channels
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// `count` distinct values from `0..pool` by partial Fisher-Yates.
fn sample_distinct(pool: usize, count: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(count <= pool);
    let mut items: Vec<usize> = (0..pool).collect();
    for i in 0..count {
        let j = rng.gen_range(i..pool);
        items.swap(i, j);
    }
    items.truncate(count);
    items
}

/// Noise-free direction lookup used by oracles: the concept whose
/// direction is closest (by dot product) to a feature row.
pub fn nearest_concept(feature: &Array1<f64>, table: &Array2<f64>) -> usize {
    let mut best = FIRST_CONTENT_TOKEN as usize;
    let mut best_dot = f64::NEG_INFINITY;
    for t in FIRST_CONTENT_TOKEN as usize..table.nrows() {
        let dot = table.row(t).dot(feature);
        if dot > best_dot {
            best_dot = dot;
            best = t;
        }
    }
    best - FIRST_CONTENT_TOKEN as usize
}
