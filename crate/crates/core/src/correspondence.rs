//! Recurrent correspondence regulator (RCR).
//!
//! After an attention pass, each query and its attended feature are
//! compressed into an m-dim alignment vector (normalized squared
//! differences through a linear map). Two small MLPs read the alignment
//! and emit residual updates for the query's attention factors: channel
//! weights are updated and clipped into [-1, +1], the temperature is
//! updated and floored at 0. Re-running attention under the updated
//! factors closes the recurrence.
//!
//! All linear maps are stored `[input-dim × output-dim]` and applied as
//! `x.dot(w)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::attention::{attend, AttendMask, AttentionFactors, AttentionResult};
use crate::error::{Error, Result};

/// Alignment vector of one (query, attended) pair. `degenerate` marks
/// the measure-zero case where the pre-normalization vector was exactly
/// zero and the vector is zero instead of unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentVector {
    pub vector: Array1<f64>,
    pub degenerate: bool,
}

/// Two-layer MLP with a tanh hidden layer; the output layer is linear,
/// optionally followed by tanh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp2 {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp2 {
    pub fn new(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Result<Self> {
        if w1.ncols() != b1.len() || w1.ncols() != w2.nrows() || w2.ncols() != b2.len() {
            return Err(Error::config(format!(
                "inconsistent MLP shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.nrows(),
                w1.ncols(),
                b1.len(),
                w2.nrows(),
                w2.ncols(),
                b2.len()
            )));
        }
        for (name, it) in [
            ("w1", w1.iter()),
            ("w2", w2.iter()),
        ] {
            if it.clone().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("non-finite value in MLP {name}")));
            }
        }
        if b1.iter().chain(b2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite value in MLP bias"));
        }
        Ok(Mlp2 { w1, b1, w2, b2 })
    }

    pub fn zeroed(input: usize, hidden: usize, output: usize) -> Self {
        Mlp2 {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
            b2: Array1::zeros(output),
        }
    }

    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp2 {
            w1: fan_in_uniform((input, hidden), rng),
            b1: Array1::zeros(hidden),
            w2: fan_in_uniform((hidden, output), rng),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    /// tanh(x·w1 + b1)·w2 + b2, optionally tanh-ed.
    pub fn forward(&self, x: ArrayView1<f64>, output_tanh: bool) -> Array1<f64> {
        let mut hidden = x.dot(&self.w1) + &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut out = hidden.dot(&self.w2) + &self.b2;
        if output_tanh {
            out.mapv_inplace(f64::tanh);
        }
        out
    }
}

/// Parameters of the correspondence regulator.
///
/// `w_a` builds alignment vectors; `e_mlp` (hidden default 512, output
/// tanh) updates channel weights; `lambda_mlp` (hidden default 128,
/// linear output of size 1) updates the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct RcrParams {
    pub w_a: Array2<f64>,
    pub e_mlp: Mlp2,
    pub lambda_mlp: Mlp2,
}

pub const DEFAULT_E_HIDDEN: usize = 512;
pub const DEFAULT_LAMBDA_HIDDEN: usize = 128;

impl RcrParams {
    pub fn validate(&self, d: usize, m: usize) -> Result<()> {
        if self.w_a.nrows() != d || self.w_a.ncols() != m {
            return Err(Error::config(format!(
                "w_a is {}x{}, expected {d}x{m}",
                self.w_a.nrows(),
                self.w_a.ncols()
            )));
        }
        if self.e_mlp.input_dim() != m || self.e_mlp.output_dim() != d {
            return Err(Error::config("channel-weight MLP does not map m -> d"));
        }
        if self.lambda_mlp.input_dim() != m || self.lambda_mlp.output_dim() != 1 {
            return Err(Error::config("temperature MLP does not map m -> 1"));
        }
        Ok(())
    }

    /// All-zero parameters: with residual updates the regulator is the
    /// identity on factors.
    pub fn zeroed(d: usize, m: usize, e_hidden: usize, lambda_hidden: usize) -> Self {
        RcrParams {
            w_a: Array2::zeros((d, m)),
            e_mlp: Mlp2::zeroed(m, e_hidden, d),
            lambda_mlp: Mlp2::zeroed(m, lambda_hidden, 1),
        }
    }

    pub fn init(
        d: usize,
        m: usize,
        e_hidden: usize,
        lambda_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        RcrParams {
            w_a: fan_in_uniform((d, m), rng),
            e_mlp: Mlp2::init(m, e_hidden, d, rng),
            lambda_mlp: Mlp2::init(m, lambda_hidden, 1, rng),
        }
    }
}

/// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
pub fn fan_in_uniform(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (shape.0 as f64).sqrt();
    let mut w = Array2::zeros(shape);
    for v in w.iter_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    w
}

/// Alignment vector of one pair: normalize(|query - attended|^2 · w_a).
/// The squared difference makes the result symmetric under swapping the
/// two inputs.
pub fn build_alignment(
    query: ArrayView1<f64>,
    attended: ArrayView1<f64>,
    w_a: ArrayView2<f64>,
) -> Result<AlignmentVector> {
    if query.len() != attended.len() || query.len() != w_a.nrows() {
        return Err(Error::config(format!(
            "alignment shapes disagree: query {}, attended {}, w_a {} rows",
            query.len(),
            attended.len(),
            w_a.nrows()
        )));
    }
    let mut sq = Array1::<f64>::zeros(query.len());
    for (i, s) in sq.iter_mut().enumerate() {
        let diff = query[i] - attended[i];
        *s = diff * diff;
    }
    let pre = sq.dot(&w_a);
    let norm = pre.dot(&pre).sqrt();
    if norm == 0.0 {
        return Ok(AlignmentVector {
            vector: Array1::zeros(w_a.ncols()),
            degenerate: true,
        });
    }
    Ok(AlignmentVector {
        vector: pre.mapv(|v| v / norm),
        degenerate: false,
    })
}

/// Alignment vectors for all query rows at once. Returns the [L × m]
/// matrix and the per-row degeneracy flags.
pub fn build_alignments(
    queries: ArrayView2<f64>,
    attended: ArrayView2<f64>,
    w_a: ArrayView2<f64>,
) -> Result<(Array2<f64>, Vec<bool>)> {
    if queries.dim() != attended.dim() {
        return Err(Error::config(format!(
            "queries {:?} and attended {:?} disagree",
            queries.dim(),
            attended.dim()
        )));
    }
    let l = queries.nrows();
    let mut out = Array2::<f64>::zeros((l, w_a.ncols()));
    let mut flags = Vec::with_capacity(l);
    for j in 0..l {
        let a = build_alignment(queries.row(j), attended.row(j), w_a)?;
        out.row_mut(j).assign(&a.vector);
        flags.push(a.degenerate);
    }
    Ok((out, flags))
}

/// Factor update for a single query. Returns the new channel weights
/// (clipped into [-1, +1]) and temperature (floored at 0). With
/// `residual` the MLP outputs are added to the previous factors;
/// without it they replace them.
pub fn regulate_row(
    query: ArrayView1<f64>,
    attended: ArrayView1<f64>,
    prev_e: ArrayView1<f64>,
    prev_lambda: f64,
    params: &RcrParams,
    residual: bool,
) -> Result<(Array1<f64>, f64)> {
    let alignment = build_alignment(query, attended, params.w_a.view())?;
    let e_update = params.e_mlp.forward(alignment.vector.view(), true);
    let lambda_update = params.lambda_mlp.forward(alignment.vector.view(), false)[0];
    let mut e = if residual {
        e_update + &prev_e
    } else {
        e_update
    };
    e.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    let lambda_raw = if residual {
        lambda_update + prev_lambda
    } else {
        lambda_update
    };
    Ok((e, lambda_raw.max(0.0)))
}

/// Factor update for every query row. Output always satisfies the
/// factor invariants: clipping and the hinge floor are applied last.
pub fn regulate(
    queries: ArrayView2<f64>,
    attended: ArrayView2<f64>,
    prev: &AttentionFactors,
    params: &RcrParams,
    residual: bool,
) -> Result<AttentionFactors> {
    if queries.nrows() != prev.queries() || queries.ncols() != prev.d() {
        return Err(Error::config(format!(
            "factors shaped {}x{} for {}x{} queries",
            prev.queries(),
            prev.d(),
            queries.nrows(),
            queries.ncols()
        )));
    }
    let l = queries.nrows();
    let d = queries.ncols();
    let mut e = Array2::<f64>::zeros((l, d));
    let mut lambda = Array1::<f64>::zeros(l);
    for j in 0..l {
        let (row_e, row_lambda) = regulate_row(
            queries.row(j),
            attended.row(j),
            prev.e().index_axis(Axis(0), j),
            prev.lambda()[j],
            params,
            residual,
        )?;
        e.row_mut(j).assign(&row_e);
        lambda[j] = row_lambda;
    }
    Ok(AttentionFactors::from_parts_unchecked(e, lambda))
}

/// One full refinement step: attend under the previous factors, update
/// the factors from the resulting alignments, attend again under the
/// new factors.
pub fn refine_attention(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    prev: &AttentionFactors,
    params: &RcrParams,
    residual: bool,
    mask: Option<&AttendMask>,
) -> Result<(AttentionResult, AttentionFactors)> {
    let first = attend(queries, keys, prev, mask)?;
    refine_attention_from(queries, keys, first.attended.view(), prev, params, residual, mask)
}

/// Refinement step given the already-computed previous attended
/// features; cascades use this to avoid re-running the previous pass.
pub fn refine_attention_from(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    prev_attended: ArrayView2<f64>,
    prev: &AttentionFactors,
    params: &RcrParams,
    residual: bool,
    mask: Option<&AttendMask>,
) -> Result<(AttentionResult, AttentionFactors)> {
    let factors = regulate(queries, prev_attended, prev, params, residual)?;
    let result = attend(queries, keys, &factors, mask)?;
    Ok((result, factors))
}
