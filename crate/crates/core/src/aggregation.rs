//! Recurrent aggregation regulator (RAR).
//!
//! Alignment vectors of all queries are pooled into one guidance
//! alignment. The initial guidance is the uniform average; each step
//! gates every alignment against the current guidance, scores it,
//! softmax-normalizes the scores into weights, and re-pools. A sigmoid
//! head turns the final guidance into a similarity in (0, 1).
//!
//! Reductions over alignments (softmax denominator, weighted pooling)
//! sort their terms before summing, so permuting the alignment rows
//! permutes the weights and leaves the pooled result bitwise unchanged.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::correspondence::fan_in_uniform;
use crate::error::{Error, Result};

/// Parameters of the aggregation regulator: guidance gate `w_g`,
/// alignment gate `w_l`, weight scorer `w_beta`, similarity head `w_s`.
/// Matrices are stored `[input-dim × output-dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RarParams {
    pub w_g: Array2<f64>,
    pub w_l: Array2<f64>,
    pub w_beta: Array1<f64>,
    pub w_s: Array1<f64>,
}

impl RarParams {
    pub fn validate(&self, m: usize) -> Result<()> {
        for (name, mat) in [("w_g", &self.w_g), ("w_l", &self.w_l)] {
            if mat.nrows() != m || mat.ncols() != m {
                return Err(Error::config(format!(
                    "{name} is {}x{}, expected {m}x{m}",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
            if mat.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("non-finite value in {name}")));
            }
        }
        for (name, vec) in [("w_beta", &self.w_beta), ("w_s", &self.w_s)] {
            if vec.len() != m {
                return Err(Error::config(format!(
                    "{name} has {} entries, expected {m}",
                    vec.len()
                )));
            }
            if vec.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("non-finite value in {name}")));
            }
        }
        Ok(())
    }

    pub fn zeroed(m: usize) -> Self {
        RarParams {
            w_g: Array2::zeros((m, m)),
            w_l: Array2::zeros((m, m)),
            w_beta: Array1::zeros(m),
            w_s: Array1::zeros(m),
        }
    }

    pub fn init(m: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (m as f64).sqrt();
        let mut w_beta = Array1::zeros(m);
        let mut w_s = Array1::zeros(m);
        for v in w_beta.iter_mut().chain(w_s.iter_mut()) {
            *v = rng.gen_range(-bound..bound);
        }
        RarParams {
            w_g: fan_in_uniform((m, m), rng),
            w_l: fan_in_uniform((m, m), rng),
            w_beta,
            w_s,
        }
    }
}

/// Running pooling state: the guidance alignment, the weights that
/// produced it, and how many steps have run.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceState {
    pub a_g: Array1<f64>,
    pub beta: Array1<f64>,
    pub step: usize,
}

/// Uniform-weight pooling: beta = (1/L, ..., 1/L), a_g their weighted
/// sum. Uses the same pooling routine as the steps, so a step under
/// uniform weights reproduces this state bitwise.
pub fn init_guidance(alignments: ArrayView2<f64>) -> Result<GuidanceState> {
    let l = alignments.nrows();
    if l == 0 {
        return Err(Error::domain("guidance over an empty alignment set"));
    }
    let beta = Array1::from_elem(l, 1.0 / l as f64);
    let a_g = pool_rows(alignments, beta.view());
    Ok(GuidanceState {
        a_g,
        beta,
        step: 0,
    })
}

/// One re-weighting step.
///
/// With `residual` the new guidance is averaged with the previous one;
/// default pipelines leave it off.
pub fn step_guidance(
    state: &GuidanceState,
    alignments: ArrayView2<f64>,
    params: &RarParams,
    residual: bool,
) -> Result<GuidanceState> {
    let l = alignments.nrows();
    let m = alignments.ncols();
    if state.a_g.len() != m {
        return Err(Error::config(format!(
            "guidance is {}-dim but alignments are {m}-dim",
            state.a_g.len()
        )));
    }
    if state.beta.len() != l {
        return Err(Error::config(format!(
            "state carries {} weights for {l} alignments",
            state.beta.len()
        )));
    }
    params.validate(m)?;

    let mut gate = state.a_g.dot(&params.w_g);
    gate.mapv_inplace(f64::tanh);

    let mut scores = Array1::<f64>::zeros(l);
    for j in 0..l {
        let mut row_gate = alignments.row(j).dot(&params.w_l);
        row_gate.mapv_inplace(f64::tanh);
        let mut s = 0.0;
        for c in 0..m {
            s += gate[c] * row_gate[c] * params.w_beta[c];
        }
        scores[j] = s;
    }

    let beta = softmax_stable(scores.view());
    let mut a_g = pool_rows(alignments, beta.view());
    if residual {
        for c in 0..m {
            a_g[c] = 0.5 * (a_g[c] + state.a_g[c]);
        }
    }
    Ok(GuidanceState {
        a_g,
        beta,
        step: state.step + 1,
    })
}

/// Similarity of a pooled guidance: sigmoid(w_s · a_g), strictly inside
/// (0, 1) for finite logits.
pub fn similarity_head(a_g: ArrayView1<f64>, params: &RarParams) -> Result<f64> {
    if a_g.len() != params.w_s.len() {
        return Err(Error::config(format!(
            "head weight has {} entries for {}-dim guidance",
            params.w_s.len(),
            a_g.len()
        )));
    }
    let logit = params.w_s.dot(&a_g);
    Ok(1.0 / (1.0 + (-logit).exp()))
}

/// Weighted sum of rows with a permutation-invariant reduction per
/// output coordinate.
fn pool_rows(rows: ArrayView2<f64>, weights: ArrayView1<f64>) -> Array1<f64> {
    let m = rows.ncols();
    let mut out = Array1::<f64>::zeros(m);
    let mut terms = vec![0.0f64; rows.nrows()];
    for c in 0..m {
        for j in 0..rows.nrows() {
            terms[j] = weights[j] * rows[[j, c]];
        }
        out[c] = stable_sum(&mut terms);
    }
    out
}

/// Max-subtracted softmax; the denominator uses the permutation-
/// invariant sum.
fn softmax_stable(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut terms = exps.clone();
    let denom = stable_sum(&mut terms);
    for e in exps.iter_mut() {
        *e /= denom;
    }
    Array1::from_vec(exps)
}

/// Sum after sorting by total order: the result depends only on the
/// multiset of terms, not their arrangement.
fn stable_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    let mut acc = 0.0;
    for t in terms.iter() {
        acc += *t;
    }
    acc
}
