//! Hard-negative hinge loss over an in-batch similarity matrix.

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Margin and batch shape for the triplet objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            batch_size: 128,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::config(format!(
                "margin must be positive and finite, got {}",
                self.margin
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Indices of the hardest negatives for one batch: for each row i the
/// argmax off-diagonal column (hardest caption for image i), and for
/// each column j the argmax off-diagonal row (hardest image for caption
/// j). Ties break toward the lowest index. `None` when the batch has no
/// negatives (size 1).
pub fn hardest_negatives(sim: ArrayView2<f64>) -> Result<(Vec<Option<usize>>, Vec<Option<usize>>)> {
    let b = sim.nrows();
    if sim.ncols() != b {
        return Err(Error::config(format!(
            "similarity matrix is {}x{}, expected square",
            sim.nrows(),
            sim.ncols()
        )));
    }
    let mut row_neg = vec![None; b];
    let mut col_neg = vec![None; b];
    for i in 0..b {
        let mut best: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            if best.map_or(true, |k| sim[[i, j]] > sim[[i, k]]) {
                best = Some(j);
            }
        }
        row_neg[i] = best;
    }
    for j in 0..b {
        let mut best: Option<usize> = None;
        for i in 0..b {
            if i == j {
                continue;
            }
            if best.map_or(true, |k| sim[[i, j]] > sim[[k, j]]) {
                best = Some(i);
            }
        }
        col_neg[j] = best;
    }
    Ok((row_neg, col_neg))
}

/// Sum of hinges on the hardest in-batch negatives, both directions.
///
/// For each diagonal positive S[i][i], the hardest non-matching caption
/// in row i and the hardest non-matching image in column i each
/// contribute `max(0, margin + negative - positive)`.
pub fn hinge_loss(sim: ArrayView2<f64>, margin: f64) -> Result<f64> {
    let (row_neg, col_neg) = hardest_negatives(sim)?;
    let b = sim.nrows();
    let mut loss = 0.0;
    for i in 0..b {
        let pos = sim[[i, i]];
        if let Some(j) = row_neg[i] {
            loss += (margin + sim[[i, j]] - pos).max(0.0);
        }
        if let Some(k) = col_neg[i] {
            loss += (margin + sim[[k, i]] - pos).max(0.0);
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Brute force over every negative, keeping only the largest hinge
    /// per direction; written independently of the production argmax.
    fn oracle(sim: &Array2<f64>, margin: f64) -> f64 {
        let b = sim.nrows();
        let mut loss = 0.0;
        for i in 0..b {
            let pos = sim[[i, i]];
            let mut worst = f64::NEG_INFINITY;
            for j in 0..b {
                if j != i {
                    worst = worst.max(margin + sim[[i, j]] - pos);
                }
            }
            if worst > f64::NEG_INFINITY {
                loss += worst.max(0.0);
            }
            let mut worst = f64::NEG_INFINITY;
            for k in 0..b {
                if k != i {
                    worst = worst.max(margin + sim[[k, i]] - pos);
                }
            }
            if worst > f64::NEG_INFINITY {
                loss += worst.max(0.0);
            }
        }
        loss
    }

    #[test]
    fn satisfied_margins_give_zero_loss() {
        let sim = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.9 } else { 0.1 });
        assert_eq!(hinge_loss(sim.view(), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_matches_exhaustive_oracle() {
        let sim = array![[0.5, 0.6], [0.4, 0.5]];
        let got = hinge_loss(sim.view(), 0.2).unwrap();
        assert_eq!(got, oracle(&sim, 0.2));
        // Row 0: margin + 0.6 - 0.5 = 0.3; col 0: margin + 0.4 - 0.5 = 0.1;
        // row 1: margin + 0.4 - 0.5 = 0.1; col 1: margin + 0.6 - 0.5 = 0.3.
        assert!((got - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_pays_full_margin_everywhere() {
        // Dyadic margin and scores keep every term and the sum exact.
        for b in [2usize, 3, 8] {
            let sim = Array2::from_elem((b, b), 0.5);
            let got = hinge_loss(sim.view(), 0.25).unwrap();
            assert_eq!(got, 2.0 * b as f64 * 0.25);
        }
        // With the default margin the identity holds to rounding.
        for b in [2usize, 3, 8] {
            let sim = Array2::from_elem((b, b), 0.37);
            let got = hinge_loss(sim.view(), 0.2).unwrap();
            assert!((got - 2.0 * b as f64 * 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn random_matrices_match_oracle_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(60);
        for _ in 0..200 {
            let sim = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
            let got = hinge_loss(sim.view(), 0.2).unwrap();
            assert_eq!(got, oracle(&sim, 0.2));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_iff_margins_hold() {
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        for _ in 0..100 {
            let sim = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
            let loss = hinge_loss(sim.view(), 0.2).unwrap();
            assert!(loss >= 0.0);
            let satisfied = (0..5).all(|i| {
                (0..5).all(|j| {
                    i == j
                        || (sim[[i, i]] - sim[[i, j]] >= 0.2 && sim[[j, j]] - sim[[i, j]] >= 0.2)
                })
            });
            assert_eq!(loss == 0.0, satisfied);
        }
    }

    #[test]
    fn negative_permutation_leaves_loss_unchanged() {
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        for _ in 0..50 {
            let b = 6;
            let sim = Array2::from_shape_fn((b, b), |_| rng.gen_range(-1.0..1.0));
            let base = hinge_loss(sim.view(), 0.2).unwrap();
            // Permute off-diagonal entries within one row; the hardest
            // negative is an order statistic, so the loss is unchanged.
            let mut permuted = sim.clone();
            let row = 2;
            let mut cols: Vec<usize> = (0..b).filter(|j| *j != row).collect();
            for i in (1..cols.len()).rev() {
                let j = rng.gen_range(0..=i);
                cols.swap(i, j);
            }
            let original: Vec<f64> = (0..b)
                .filter(|j| *j != row)
                .map(|j| sim[[row, j]])
                .collect();
            for (slot, j) in cols.iter().enumerate() {
                permuted[[row, *j]] = original[slot];
            }
            // Row hinges are preserved exactly; column hinges may move,
            // so compare against the oracle instead of the base value
            // when columns are affected.
            let row_term = |m: &Array2<f64>| {
                let pos = m[[row, row]];
                let mut worst = f64::NEG_INFINITY;
                for j in 0..b {
                    if j != row {
                        worst = worst.max(0.2 + m[[row, j]] - pos);
                    }
                }
                worst.max(0.0)
            };
            assert_eq!(row_term(&sim), row_term(&permuted));
            assert_eq!(hinge_loss(permuted.view(), 0.2).unwrap(), oracle(&permuted, 0.2));
            assert_eq!(base, oracle(&sim, 0.2));
        }
    }

    #[test]
    fn non_square_matrix_is_rejected() {
        let sim = Array2::<f64>::zeros((3, 4));
        assert!(matches!(hinge_loss(sim.view(), 0.2), Err(Error::Config(_))));
    }

    #[test]
    fn singleton_batch_has_no_negatives() {
        let sim = array![[0.4]];
        assert_eq!(hinge_loss(sim.view(), 0.2).unwrap(), 0.0);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { margin: 0.0, batch_size: 8 }.validate().is_err());
        assert!(LossConfig { margin: -0.1, batch_size: 8 }.validate().is_err());
        assert!(LossConfig { margin: f64::NAN, batch_size: 8 }.validate().is_err());
        assert!(LossConfig { margin: 0.2, batch_size: 0 }.validate().is_err());
    }
}
