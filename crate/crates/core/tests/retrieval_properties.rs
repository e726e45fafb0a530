//! Retrieval metrics under relabeling, from randomly generated
//! similarity tables: recall cannot depend on gallery item labels,
//! cannot shrink as the cutoff grows, and the five-fold mean is the
//! plain arithmetic mean of the fold values.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use xmatch_core::eval::{five_fold_eval, recall_at_k, retrieval_report};
use xmatch_core::pipeline::DirectionTag;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// A random retrieval instance: a queries-by-gallery score table and a
/// non-empty relevant set per query.
fn instance(
    seed: u64,
    queries: usize,
    gallery: usize,
) -> (Array2<f64>, Vec<Vec<usize>>) {
    let mut r = rng(seed);
    let sim = Array2::from_shape_fn((queries, gallery), |_| r.gen_range(-1.0..1.0));
    let truth = (0..queries)
        .map(|_| {
            let hits = r.gen_range(1..=2.min(gallery));
            let mut set: Vec<usize> = (0..hits).map(|_| r.gen_range(0..gallery)).collect();
            set.sort_unstable();
            set.dedup();
            set
        })
        .collect();
    (sim, truth)
}

proptest! {
    /// Renaming gallery items (permuting columns and remapping the
    /// relevant sets the same way) leaves every recall untouched.
    #[test]
    fn recall_ignores_gallery_labels(
        seed in any::<u64>(),
        queries in 1usize..10,
        gallery in 2usize..12,
        k in 1usize..5,
    ) {
        prop_assume!(k <= gallery);
        let (sim, truth) = instance(seed, queries, gallery);

        let mut r = rng(seed ^ 0x5ca1ab1e);
        let mut perm: Vec<usize> = (0..gallery).collect();
        for i in (1..gallery).rev() {
            let j = r.gen_range(0..=i);
            perm.swap(i, j);
        }
        // Column c of the original lands at position[c] in the shuffle.
        let mut position = vec![0usize; gallery];
        for (new, old) in perm.iter().enumerate() {
            position[*old] = new;
        }
        let shuffled = Array2::from_shape_fn((queries, gallery), |(q, c)| sim[[q, perm[c]]]);
        let relabeled: Vec<Vec<usize>> = truth
            .iter()
            .map(|set| {
                let mut set: Vec<usize> = set.iter().map(|g| position[*g]).collect();
                set.sort_unstable();
                set
            })
            .collect();

        let base = recall_at_k(sim.view(), &truth, k).unwrap();
        let moved = recall_at_k(shuffled.view(), &relabeled, k).unwrap();
        prop_assert_eq!(base.to_bits(), moved.to_bits());
    }

    /// A larger cutoff can only admit more hits.
    #[test]
    fn recall_is_monotone_in_the_cutoff(
        seed in any::<u64>(),
        queries in 1usize..10,
        gallery in 2usize..12,
    ) {
        let (sim, truth) = instance(seed, queries, gallery);
        let mut prev = 0.0;
        for k in 1..=gallery {
            let r = recall_at_k(sim.view(), &truth, k).unwrap();
            prop_assert!(r >= prev, "recall dropped from {prev} to {r} at cutoff {k}");
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }

    /// Scores only matter through their order: any strictly increasing
    /// transform of the whole table preserves every recall.
    #[test]
    fn recall_depends_only_on_score_order(
        seed in any::<u64>(),
        queries in 1usize..8,
        gallery in 2usize..10,
        k in 1usize..4,
    ) {
        prop_assume!(k <= gallery);
        let (sim, truth) = instance(seed, queries, gallery);
        let squashed = sim.mapv(|v| 3.0 * v.tanh() + 1.0);
        let base = recall_at_k(sim.view(), &truth, k).unwrap();
        let moved = recall_at_k(squashed.view(), &truth, k).unwrap();
        prop_assert_eq!(base.to_bits(), moved.to_bits());
    }
}

#[test]
fn the_five_fold_mean_is_the_arithmetic_mean_of_the_folds() {
    let mut r = rng(81);
    let (queries, gallery) = (20, 20);
    let sim = Array2::from_shape_fn((queries, gallery), |_| r.gen_range(-1.0..1.0));
    // Diagonal truth keeps each query's relevant item inside one block.
    let truth: Vec<Vec<usize>> = (0..queries).map(|q| vec![q]).collect();
    let ks = [1, 2, 4];

    let report = five_fold_eval(sim.view(), &truth, DirectionTag::I2t, &ks).unwrap();
    assert_eq!(report.folds.len(), 5);
    for k in ks {
        let want = report
            .folds
            .iter()
            .map(|f| f.recall(k).unwrap())
            .sum::<f64>()
            / 5.0;
        assert_eq!(report.mean.recall(k).unwrap().to_bits(), want.to_bits());
    }

    // The full report evaluates the undivided table.
    let full = retrieval_report(sim.view(), &truth, DirectionTag::I2t, &ks).unwrap();
    assert_eq!(report.full, full);

    // Each fold sees a 4x4 block: recall at the block width is total.
    let block = five_fold_eval(sim.view(), &truth, DirectionTag::I2t, &[4]).unwrap();
    for fold in &block.folds {
        assert_eq!(fold.recall(4), Some(1.0));
        assert_eq!(fold.queries, 4);
    }
}
