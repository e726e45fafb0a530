//! Retrieval metrics and trace diagnostics.
//!
//! Ranking is stable: equal scores keep gallery order, so recall at k
//! is a pure function of the score matrix with no hidden tie policy.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::pipeline::{DirectionTag, ScoreTrace};

/// The ranks reported by default.
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Recall fractions for one retrieval direction.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: DirectionTag,
    pub queries: usize,
    /// (k, fraction of queries whose best truth item ranks in the top k),
    /// ascending in k.
    pub r_at: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.r_at.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn recall_sum(&self) -> f64 {
        self.r_at.iter().map(|(_, r)| *r).sum()
    }

    pub fn render(&self) -> String {
        let mut out = format!("direction {} queries {}", self.direction, self.queries);
        for (k, r) in &self.r_at {
            out.push_str(&format!(" r@{k} {r:.6}"));
        }
        out
    }
}

fn check_truth(truth: &[Vec<usize>], queries: usize, gallery: usize) -> Result<()> {
    if truth.len() != queries {
        return Err(Error::data(format!(
            "{} truth sets for {queries} queries",
            truth.len()
        )));
    }
    for (q, set) in truth.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::data(format!("query {q} has no relevant items")));
        }
        for &g in set {
            if g >= gallery {
                return Err(Error::data(format!(
                    "query {q}: relevant item {g} outside gallery of {gallery}"
                )));
            }
        }
    }
    Ok(())
}

/// Rank of gallery item `g` in one query row under stable descending
/// order: items with strictly greater score rank ahead, and among equal
/// scores the smaller gallery index ranks ahead.
fn rank_of(scores: ArrayView1<f64>, g: usize) -> usize {
    let s = scores[g];
    let mut rank = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > s || (v == s && i < g) {
            rank += 1;
        }
    }
    rank
}

/// Fraction of queries with a relevant item in the top `k`.
///
/// `sim` is queries x gallery; `truth[q]` lists the gallery indices
/// that count as hits for query q. A query scores when ANY of its
/// relevant items ranks within k.
pub fn recall_at_k(sim: ArrayView2<f64>, truth: &[Vec<usize>], k: usize) -> Result<f64> {
    let (queries, gallery) = sim.dim();
    if queries == 0 || gallery == 0 {
        return Err(Error::data("empty similarity matrix"));
    }
    if k == 0 {
        return Err(Error::config("recall needs k >= 1"));
    }
    if k > gallery {
        return Err(Error::config(format!(
            "recall at {k} is undefined for a gallery of {gallery}"
        )));
    }
    check_truth(truth, queries, gallery)?;
    let mut hits = 0usize;
    for q in 0..queries {
        let row = sim.row(q);
        if truth[q].iter().any(|&g| rank_of(row, g) < k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries as f64)
}

/// Recall at each of `ks` as one report.
pub fn retrieval_report(
    sim: ArrayView2<f64>,
    truth: &[Vec<usize>],
    direction: DirectionTag,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut r_at: Vec<(usize, f64)> = Vec::with_capacity(ks.len());
    for &k in ks {
        r_at.push((k, recall_at_k(sim, truth, k)?));
    }
    r_at.sort_by_key(|(k, _)| *k);
    Ok(RetrievalReport {
        direction,
        queries: sim.nrows(),
        r_at,
    })
}

/// Five-fold decomposition plus the full-split report.
#[derive(Debug, Clone, PartialEq)]
pub struct FiveFoldReport {
    pub folds: Vec<RetrievalReport>,
    /// Arithmetic mean of the fold recalls, k by k.
    pub mean: RetrievalReport,
    pub full: RetrievalReport,
}

/// Split the gallery into five consecutive equal blocks, evaluate each
/// block against only the queries whose relevant items live in it, and
/// also evaluate the undivided split.
///
/// The gallery size must be divisible by five, and every query's
/// relevant items must fall in a single block.
pub fn five_fold_eval(
    sim: ArrayView2<f64>,
    truth: &[Vec<usize>],
    direction: DirectionTag,
    ks: &[usize],
) -> Result<FiveFoldReport> {
    let (queries, gallery) = sim.dim();
    if queries == 0 || gallery == 0 {
        return Err(Error::data("empty similarity matrix"));
    }
    if gallery % 5 != 0 {
        return Err(Error::config(format!(
            "gallery of {gallery} does not divide into five folds"
        )));
    }
    check_truth(truth, queries, gallery)?;
    let block = gallery / 5;

    let mut fold_queries: Vec<Vec<usize>> = vec![Vec::new(); 5];
    for (q, set) in truth.iter().enumerate() {
        let fold = set[0] / block;
        if set.iter().any(|&g| g / block != fold) {
            return Err(Error::data(format!(
                "query {q}: relevant items straddle folds"
            )));
        }
        fold_queries[fold].push(q);
    }

    let mut folds = Vec::with_capacity(5);
    for (f, members) in fold_queries.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::data(format!("fold {f} has no queries")));
        }
        let lo = f * block;
        let mut sub = ndarray::Array2::zeros((members.len(), block));
        let mut sub_truth = Vec::with_capacity(members.len());
        for (row, &q) in members.iter().enumerate() {
            for c in 0..block {
                sub[[row, c]] = sim[[q, lo + c]];
            }
            sub_truth.push(truth[q].iter().map(|&g| g - lo).collect::<Vec<_>>());
        }
        folds.push(retrieval_report(sub.view(), &sub_truth, direction, ks)?);
    }

    let ks_present: Vec<usize> = folds[0].r_at.iter().map(|(k, _)| *k).collect();
    let mut mean_r: Vec<(usize, f64)> = Vec::new();
    for k in ks_present {
        let total: f64 = folds.iter().map(|f| f.recall(k).unwrap()).sum();
        mean_r.push((k, total / folds.len() as f64));
    }
    let mean = RetrievalReport {
        direction,
        queries,
        r_at: mean_r,
    };
    let full = retrieval_report(sim, truth, direction, ks)?;
    Ok(FiveFoldReport { folds, mean, full })
}

/// First Wasserstein distance between two one-dimensional samples,
/// each weighted uniformly: the integral of the absolute difference of
/// their empirical CDFs.
pub fn w1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("distance between empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite value in sample"));
    }
    let mut xs = a.to_vec();
    xs.sort_by(f64::total_cmp);
    let mut ys = b.to_vec();
    ys.sort_by(f64::total_cmp);
    let na = xs.len() as f64;
    let nb = ys.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    while i < xs.len() || j < ys.len() {
        let cur = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            total += (i as f64 / na - j as f64 / nb).abs() * (cur - p);
        }
        while i < xs.len() && xs[i] == cur {
            i += 1;
        }
        while j < ys.len() && ys[j] == cur {
            j += 1;
        }
        prev = Some(cur);
    }
    Ok(total)
}

/// Guidance weight mass for one tag at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct TagShare {
    pub tag: String,
    /// Mean over sentences of the weight falling on this tag's tokens.
    pub mean_share: f64,
    /// Mean weight of a single token carrying this tag.
    pub mean_token_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepBetaSummary {
    pub step: usize,
    pub tags: Vec<TagShare>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSeparation {
    pub step: usize,
    /// Distance between the positive-pair and negative-pair pools of
    /// per-query cosines after this attention pass.
    pub w1: f64,
}

/// Where the guidance weights sit and how well attention separates
/// matching from non-matching pairs, step by step.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsBundle {
    pub beta_by_tag: Vec<StepBetaSummary>,
    pub separation: Vec<StepSeparation>,
}

/// Summarize traces of positive (matching) and negative (non-matching)
/// pair scorings. `tags[i]` labels the tokens of the sentence behind
/// `positive[i]`, one tag per token.
pub fn diagnostics(
    positive: &[ScoreTrace],
    negative: &[ScoreTrace],
    tags: &[Vec<String>],
) -> Result<DiagnosticsBundle> {
    if positive.is_empty() {
        return Err(Error::data("no positive traces"));
    }
    if negative.is_empty() {
        return Err(Error::data("no negative traces"));
    }
    if tags.len() != positive.len() {
        return Err(Error::data(format!(
            "{} tag lists for {} positive traces",
            tags.len(),
            positive.len()
        )));
    }

    let beta_steps = positive[0].step_betas.len();
    if beta_steps == 0 {
        return Err(Error::data("traces carry no guidance weights"));
    }
    for (i, t) in positive.iter().enumerate() {
        if t.step_betas.len() != beta_steps {
            return Err(Error::data(format!(
                "trace {i} has {} guidance steps, expected {beta_steps}",
                t.step_betas.len()
            )));
        }
        if t.step_betas[0].len() != tags[i].len() {
            return Err(Error::data(format!(
                "trace {i}: {} weights for {} token tags",
                t.step_betas[0].len(),
                tags[i].len()
            )));
        }
    }

    let mut beta_by_tag = Vec::with_capacity(beta_steps);
    for step in 0..beta_steps {
        let mut share_sum: BTreeMap<&str, f64> = BTreeMap::new();
        let mut weight_sum: BTreeMap<&str, f64> = BTreeMap::new();
        let mut token_count: BTreeMap<&str, usize> = BTreeMap::new();
        for (trace, tag_list) in positive.iter().zip(tags) {
            let beta = &trace.step_betas[step];
            let mut per_sentence: BTreeMap<&str, f64> = BTreeMap::new();
            for (j, tag) in tag_list.iter().enumerate() {
                *per_sentence.entry(tag.as_str()).or_insert(0.0) += beta[j];
                *weight_sum.entry(tag.as_str()).or_insert(0.0) += beta[j];
                *token_count.entry(tag.as_str()).or_insert(0) += 1;
            }
            for (tag, share) in per_sentence {
                *share_sum.entry(tag).or_insert(0.0) += share;
            }
        }
        let sentences = positive.len() as f64;
        let tags_out: Vec<TagShare> = share_sum
            .iter()
            .map(|(tag, total)| TagShare {
                tag: tag.to_string(),
                mean_share: total / sentences,
                mean_token_weight: weight_sum[tag] / token_count[tag] as f64,
            })
            .collect();
        beta_by_tag.push(StepBetaSummary {
            step,
            tags: tags_out,
        });
    }

    let cosine_steps = positive[0].step_query_cosines.len();
    for (label, traces) in [("positive", positive), ("negative", negative)] {
        for (i, t) in traces.iter().enumerate() {
            if t.step_query_cosines.len() != cosine_steps {
                return Err(Error::data(format!(
                    "{label} trace {i} has {} attention passes, expected {cosine_steps}",
                    t.step_query_cosines.len()
                )));
            }
        }
    }
    let mut separation = Vec::with_capacity(cosine_steps);
    for step in 0..cosine_steps {
        let pool = |traces: &[ScoreTrace]| -> Vec<f64> {
            traces
                .iter()
                .flat_map(|t| t.step_query_cosines[step].iter().copied())
                .collect()
        };
        let pos_pool = pool(positive);
        let neg_pool = pool(negative);
        separation.push(StepSeparation {
            step,
            w1: w1_distance(&pos_pool, &neg_pool)?,
        });
    }

    Ok(DiagnosticsBundle {
        beta_by_tag,
        separation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn identity_truth(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![i]).collect()
    }

    /// Full stable argsort, then look for a truth item in the prefix.
    fn recall_oracle(sim: &Array2<f64>, truth: &[Vec<usize>], k: usize) -> f64 {
        let mut hits = 0;
        for q in 0..sim.nrows() {
            let mut order: Vec<usize> = (0..sim.ncols()).collect();
            order.sort_by(|&a, &b| {
                sim[[q, b]]
                    .partial_cmp(&sim[[q, a]])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            if order[..k].iter().any(|g| truth[q].contains(g)) {
                hits += 1;
            }
        }
        hits as f64 / sim.nrows() as f64
    }

    #[test]
    fn equal_scores_rank_by_gallery_index() {
        let sim = array![[0.5, 0.5, 0.5, 0.5]];
        // The relevant item sits at index 2; two equal scores precede it.
        let truth = vec![vec![2]];
        assert_eq!(recall_at_k(sim.view(), &truth, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(sim.view(), &truth, 3).unwrap(), 1.0);
    }

    #[test]
    fn k_beyond_the_gallery_is_a_config_error() {
        let sim = Array2::zeros((3, 4));
        let err = recall_at_k(sim.view(), &identity_truth(3), 5).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn random_matrices_match_the_argsort_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for round in 0..100 {
            let q = rng.gen_range(3..=20);
            let g = rng.gen_range(10..=20);
            // Quantized scores force plenty of ties.
            let sim = Array2::from_shape_fn((q, g), |_| {
                (rng.gen_range(-1.0..1.0f64) * 10.0).round() / 10.0
            });
            let truth: Vec<Vec<usize>> = (0..q)
                .map(|_| {
                    let count = rng.gen_range(1..=3);
                    (0..count).map(|_| rng.gen_range(0..g)).collect()
                })
                .collect();
            for k in [1, 5, g] {
                let ours = recall_at_k(sim.view(), &truth, k).unwrap();
                let oracle = recall_oracle(&sim, &truth, k);
                assert_eq!(ours, oracle, "round {round} k {k}");
            }
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let sim = Array2::from_shape_fn((12, 15), |_| rng.gen_range(-1.0..1.0));
        let truth = identity_truth(12);
        let report =
            retrieval_report(sim.view(), &truth, DirectionTag::T2i, &[1, 5, 10]).unwrap();
        let r1 = report.recall(1).unwrap();
        let r5 = report.recall(5).unwrap();
        let r10 = report.recall(10).unwrap();
        assert!(r1 <= r5 && r5 <= r10, "{r1} {r5} {r10}");
    }

    #[test]
    fn any_relevant_item_in_the_prefix_counts_as_a_hit() {
        // Truth items rank 3rd and 1st; the query hits at k=1 thanks to
        // the second item alone.
        let sim = array![[0.9, 0.1, 0.5, 0.2]];
        let truth = vec![vec![2, 0]];
        assert_eq!(recall_at_k(sim.view(), &truth, 1).unwrap(), 1.0);
    }

    #[test]
    fn five_fold_matches_direct_recomputation_on_25_items() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let sim = Array2::from_shape_fn((25, 25), |_| rng.gen_range(-1.0..1.0));
        let truth = identity_truth(25);
        let report = five_fold_eval(sim.view(), &truth, DirectionTag::T2i, &[1, 5]).unwrap();

        assert_eq!(report.folds.len(), 5);
        for (f, fold) in report.folds.iter().enumerate() {
            let lo = f * 5;
            let mut sub = Array2::zeros((5, 5));
            for r in 0..5 {
                for c in 0..5 {
                    sub[[r, c]] = sim[[lo + r, lo + c]];
                }
            }
            let direct =
                retrieval_report(sub.view(), &identity_truth(5), DirectionTag::T2i, &[1, 5])
                    .unwrap();
            assert_eq!(fold.r_at, direct.r_at, "fold {f}");
        }
        for &k in &[1usize, 5] {
            let mean: f64 = report
                .folds
                .iter()
                .map(|f| f.recall(k).unwrap())
                .sum::<f64>()
                / 5.0;
            assert_eq!(report.mean.recall(k).unwrap(), mean);
        }
        let full =
            retrieval_report(sim.view(), &truth, DirectionTag::T2i, &[1, 5]).unwrap();
        assert_eq!(report.full, full);
    }

    #[test]
    fn indivisible_gallery_is_a_config_error() {
        let sim = Array2::zeros((12, 12));
        let err =
            five_fold_eval(sim.view(), &identity_truth(12), DirectionTag::T2i, &[1]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn truth_straddling_folds_is_a_data_error() {
        let sim = Array2::zeros((2, 10));
        let truth = vec![vec![0], vec![1, 7]];
        let err = five_fold_eval(sim.view(), &truth, DirectionTag::T2i, &[1]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
    }

    #[test]
    fn identical_samples_have_zero_distance() {
        let a = vec![0.3, -0.2, 0.9, 0.5];
        assert_eq!(w1_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn point_masses_at_zero_and_one_are_distance_one() {
        let a = vec![1.0; 7];
        let b = vec![0.0; 3];
        assert_eq!(w1_distance(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn equal_size_samples_match_the_sorted_difference_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(44);
        for _ in 0..50 {
            let n = rng.gen_range(1..=40);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut sa = a.clone();
            sa.sort_by(f64::total_cmp);
            let mut sb = b.clone();
            sb.sort_by(f64::total_cmp);
            let oracle: f64 = sa
                .iter()
                .zip(&sb)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n as f64;
            let ours = w1_distance(&a, &b).unwrap();
            assert!((ours - oracle).abs() < 1e-9, "{ours} vs {oracle}");
        }
    }

    #[test]
    fn distance_is_symmetric_and_translation_covariant() {
        let a = vec![0.1, 0.4, 0.4, 0.9];
        let b = vec![0.2, 0.3, 0.8];
        let ab = w1_distance(&a, &b).unwrap();
        let ba = w1_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        let shifted: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
        let d = w1_distance(&shifted, &a).unwrap();
        assert!((d - 5.0).abs() < 1e-12, "{d}");
    }

    fn trace(betas: Vec<Array1<f64>>, cosines: Vec<Array1<f64>>) -> ScoreTrace {
        ScoreTrace {
            step_betas: betas,
            step_query_cosines: cosines,
        }
    }

    #[test]
    fn tag_shares_sum_to_one_per_step() {
        let positive = vec![
            trace(
                vec![array![0.5, 0.3, 0.2], array![0.2, 0.2, 0.6]],
                vec![array![0.9, 0.8, 0.7]],
            ),
            trace(
                vec![array![0.25, 0.25, 0.5], array![0.1, 0.1, 0.8]],
                vec![array![0.6, 0.5, 0.4]],
            ),
        ];
        let negative = vec![trace(vec![array![1.0]], vec![array![0.1, 0.2, 0.0]])];
        let tags = vec![
            vec!["noun".to_string(), "verb".to_string(), "noun".to_string()],
            vec!["adj".to_string(), "noun".to_string(), "noun".to_string()],
        ];
        let bundle = diagnostics(&positive, &negative, &tags).unwrap();
        assert_eq!(bundle.beta_by_tag.len(), 2);
        for step in &bundle.beta_by_tag {
            let total: f64 = step.tags.iter().map(|t| t.mean_share).sum();
            assert!((total - 1.0).abs() < 1e-12, "step {}: {total}", step.step);
        }
        // Step 0, "noun" covers beta 0.5+0.2 in sentence one and
        // 0.25+0.5 in sentence two: shares 0.7 and 0.75, mean 0.725.
        let noun = bundle.beta_by_tag[0]
            .tags
            .iter()
            .find(|t| t.tag == "noun")
            .unwrap();
        assert!((noun.mean_share - 0.725).abs() < 1e-12);
        assert!((noun.mean_token_weight - (0.5 + 0.2 + 0.25 + 0.5) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn separation_is_zero_for_identical_pools_and_one_for_split_masses() {
        let positive = vec![trace(vec![array![1.0]], vec![array![1.0, 1.0]])];
        let negative = vec![trace(vec![array![1.0]], vec![array![0.0, 0.0, 0.0]])];
        let tags = vec![vec!["w".to_string()]];
        let bundle = diagnostics(&positive, &negative, &tags).unwrap();
        assert_eq!(bundle.separation.len(), 1);
        assert_eq!(bundle.separation[0].w1, 1.0);

        let same = vec![trace(vec![array![1.0]], vec![array![0.4, 0.6]])];
        let bundle = diagnostics(&same, &same, &tags).unwrap();
        assert_eq!(bundle.separation[0].w1, 0.0);
    }

    #[test]
    fn missing_traces_are_a_data_error() {
        let tags: Vec<Vec<String>> = Vec::new();
        let err = diagnostics(&[], &[], &tags).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");

        let positive = vec![trace(vec![array![1.0]], vec![array![0.5]])];
        let err = diagnostics(&positive, &[], &[vec!["w".to_string()]]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
    }

    #[test]
    fn mismatched_step_counts_are_a_data_error() {
        let tags = vec![vec!["w".to_string()], vec!["w".to_string()]];
        let positive = vec![
            trace(vec![array![1.0]], vec![array![0.5]]),
            trace(vec![array![1.0], array![1.0]], vec![array![0.5]]),
        ];
        let negative = vec![trace(vec![array![1.0]], vec![array![0.5]])];
        let err = diagnostics(&positive, &negative, &tags).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
    }
}
