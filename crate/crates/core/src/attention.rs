//! Cross-modal attention with per-query channel weights and temperature.
//!
//! One query row attends over all key rows. The similarity of query j
//! and key i is a channel-weighted cosine of the raw vectors; per key,
//! the clamped similarities are L2-normalized across queries; per query,
//! a temperature-scaled softmax over keys turns them into weights, and
//! the attended feature is the weight-averaged key.
//!
//! Both matching directions use the same routine: text-to-image runs
//! words as queries over region keys, image-to-text swaps the roles.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Denominator floor for the clamp-normalize step: a row with no
/// positive similarity stays exactly zero instead of erroring.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-query attention factors: channel weights `e` (entries in
/// [-1, +1]) and softmax temperature `lambda` (>= 0), one row/value per
/// query. The constant-initialized case is one broadcast value per query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFactors {
    e: Array2<f64>,
    lambda: Array1<f64>,
}

impl AttentionFactors {
    pub fn new(e: Array2<f64>, lambda: Array1<f64>) -> Result<Self> {
        if e.nrows() != lambda.len() {
            return Err(Error::config(format!(
                "factors disagree: e has {} rows, lambda {} entries",
                e.nrows(),
                lambda.len()
            )));
        }
        if e.iter().any(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
            return Err(Error::config(
                "channel weights must be finite and within [-1, +1]",
            ));
        }
        if lambda.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("temperatures must be finite and >= 0"));
        }
        Ok(AttentionFactors { e, lambda })
    }

    /// All-ones channel weights and one shared temperature: the state
    /// every refinement cascade starts from.
    pub fn uniform(queries: usize, d: usize, lambda0: f64) -> Result<Self> {
        Self::new(
            Array2::ones((queries, d)),
            Array1::from_elem(queries, lambda0),
        )
    }

    /// Skip validation for values already clamped into range by the
    /// producing computation.
    pub(crate) fn from_parts_unchecked(e: Array2<f64>, lambda: Array1<f64>) -> Self {
        debug_assert_eq!(e.nrows(), lambda.len());
        AttentionFactors { e, lambda }
    }

    pub fn e(&self) -> ArrayView2<'_, f64> {
        self.e.view()
    }

    pub fn lambda(&self) -> ArrayView1<'_, f64> {
        self.lambda.view()
    }

    pub fn queries(&self) -> usize {
        self.e.nrows()
    }

    pub fn d(&self) -> usize {
        self.e.ncols()
    }
}

/// Validity mask over queries and keys. Masked rows get zero weight and
/// contribute nothing; they exist so fixed-size batches can carry
/// variable-length instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttendMask {
    pub query_valid: Vec<bool>,
    pub key_valid: Vec<bool>,
}

impl AttendMask {
    pub fn full(queries: usize, keys: usize) -> Self {
        AttendMask {
            query_valid: vec![true; queries],
            key_valid: vec![true; keys],
        }
    }
}

/// Output of one attention pass.
///
/// `weights` and `raw_sims` are [keys × queries]; `attended` is
/// [queries × d]. Each weight column over keys sums to 1 (masked or
/// degenerate columns sum to 0 or use the uniform fallback).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub attended: Array2<f64>,
    pub weights: Array2<f64>,
    pub raw_sims: Array2<f64>,
}

/// Channel-weighted cosine of two raw vectors: `v . (e ⊙ t)` over the
/// product of raw norms. With all-ones weights this is plain cosine,
/// bitwise (multiplying by 1.0 is exact).
pub fn weighted_cosine(v: ArrayView1<f64>, t: ArrayView1<f64>, e: ArrayView1<f64>) -> Result<f64> {
    if v.len() != t.len() || v.len() != e.len() {
        return Err(Error::config(format!(
            "weighted cosine over mismatched lengths {} / {} / {}",
            v.len(),
            t.len(),
            e.len()
        )));
    }
    let vn = norm(v);
    let tn = norm(t);
    if vn == 0.0 || tn == 0.0 {
        return Err(Error::domain("cosine of a zero-norm vector"));
    }
    let mut dot = 0.0;
    for k in 0..v.len() {
        dot += v[k] * (e[k] * t[k]);
    }
    Ok(dot / (vn * tn))
}

/// Plain cosine; shares the exact summation path of [`weighted_cosine`].
pub fn cosine(v: ArrayView1<f64>, t: ArrayView1<f64>) -> Result<f64> {
    if v.len() != t.len() {
        return Err(Error::config(format!(
            "cosine over mismatched lengths {} / {}",
            v.len(),
            t.len()
        )));
    }
    let vn = norm(v);
    let tn = norm(t);
    if vn == 0.0 || tn == 0.0 {
        return Err(Error::domain("cosine of a zero-norm vector"));
    }
    let mut dot = 0.0;
    for k in 0..v.len() {
        dot += v[k] * t[k];
    }
    Ok(dot / (vn * tn))
}

/// One attention pass of `queries` over `keys` under per-query factors.
///
/// Steps, writing i for keys and j for queries:
/// 1. `c[i][j]`: channel-weighted cosine of key i and query j.
/// 2. `cbar[i][j]`: clamp negatives to zero, L2-normalize each key row
///    across queries (denominator floored at [`NORMALIZE_EPS`]).
/// 3. `alpha[.][j]`: softmax over keys of `lambda[j] * cbar[.][j]`,
///    computed with max-subtraction.
/// 4. `attended[j]`: alpha-weighted sum of key rows.
pub fn attend(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    factors: &AttentionFactors,
    mask: Option<&AttendMask>,
) -> Result<AttentionResult> {
    let l = queries.nrows();
    let k = keys.nrows();
    let d = queries.ncols();
    if keys.ncols() != d {
        return Err(Error::config(format!(
            "queries are {d}-dim but keys are {}-dim",
            keys.ncols()
        )));
    }
    if factors.queries() != l || factors.d() != d {
        return Err(Error::config(format!(
            "factors shaped {}x{} for {l}x{d} queries",
            factors.queries(),
            factors.d()
        )));
    }
    let owned_mask;
    let mask = match mask {
        Some(m) => {
            if m.query_valid.len() != l || m.key_valid.len() != k {
                return Err(Error::config(format!(
                    "mask covers {}x{} but data is {k} keys x {l} queries",
                    m.key_valid.len(),
                    m.query_valid.len()
                )));
            }
            m
        }
        None => {
            owned_mask = AttendMask::full(l, k);
            &owned_mask
        }
    };
    if !mask.key_valid.iter().any(|v| *v) {
        return Err(Error::domain("attention over an all-masked key set"));
    }

    // Raw norms of valid rows; cosine denominators must be positive.
    let mut key_norms = vec![0.0f64; k];
    for i in 0..k {
        if !mask.key_valid[i] {
            continue;
        }
        key_norms[i] = norm(keys.row(i));
        if key_norms[i] == 0.0 {
            return Err(Error::domain(format!("key {i} has zero norm")));
        }
    }
    let mut query_norms = vec![0.0f64; l];
    for j in 0..l {
        if !mask.query_valid[j] {
            continue;
        }
        query_norms[j] = norm(queries.row(j));
        if query_norms[j] == 0.0 {
            return Err(Error::domain(format!("query {j} has zero norm")));
        }
    }

    let e = factors.e();
    let lambda = factors.lambda();

    // Step 1: weighted cosines. The weighted query is materialized once
    // per query; the k-loop then runs a plain fixed-order dot product,
    // which keeps the computation symmetric under role exchange.
    let mut raw = Array2::<f64>::zeros((k, l));
    let mut weighted_query = Array1::<f64>::zeros(d);
    for j in 0..l {
        if !mask.query_valid[j] {
            continue;
        }
        for c in 0..d {
            weighted_query[c] = e[[j, c]] * queries[[j, c]];
        }
        for i in 0..k {
            if !mask.key_valid[i] {
                continue;
            }
            let mut dot = 0.0;
            for c in 0..d {
                dot += keys[[i, c]] * weighted_query[c];
            }
            raw[[i, j]] = dot / (key_norms[i] * query_norms[j]);
        }
    }

    // Step 2: clamp and normalize each key row across valid queries.
    let mut cbar = Array2::<f64>::zeros((k, l));
    for i in 0..k {
        if !mask.key_valid[i] {
            continue;
        }
        let mut sq = 0.0;
        for j in 0..l {
            if !mask.query_valid[j] {
                continue;
            }
            let clamped = raw[[i, j]].max(0.0);
            cbar[[i, j]] = clamped;
            sq += clamped * clamped;
        }
        let denom = sq.sqrt().max(NORMALIZE_EPS);
        for j in 0..l {
            cbar[[i, j]] /= denom;
        }
    }

    // Steps 3 and 4: per-query softmax over keys, then weighted key sum.
    let mut weights = Array2::<f64>::zeros((k, l));
    let mut attended = Array2::<f64>::zeros((l, d));
    for j in 0..l {
        if !mask.query_valid[j] {
            continue;
        }
        let mut max_z = f64::NEG_INFINITY;
        for i in 0..k {
            if mask.key_valid[i] {
                max_z = max_z.max(lambda[j] * cbar[[i, j]]);
            }
        }
        let mut denom = 0.0;
        for i in 0..k {
            if mask.key_valid[i] {
                let w = (lambda[j] * cbar[[i, j]] - max_z).exp();
                weights[[i, j]] = w;
                denom += w;
            }
        }
        for i in 0..k {
            if !mask.key_valid[i] {
                continue;
            }
            let alpha = weights[[i, j]] / denom;
            weights[[i, j]] = alpha;
            for c in 0..d {
                attended[[j, c]] += alpha * keys[[i, c]];
            }
        }
    }

    Ok(AttentionResult {
        attended,
        weights,
        raw_sims: raw,
    })
}

/// Role-swapped attention: regions query over word keys. Normalization
/// of the clamped similarities runs per word across regions; the softmax
/// runs over words.
pub fn attend_i2t(
    regions: ArrayView2<f64>,
    words: ArrayView2<f64>,
    factors: &AttentionFactors,
    mask: Option<&AttendMask>,
) -> Result<AttentionResult> {
    attend(regions, words, factors, mask)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    let mut sq = 0.0;
    for x in v.iter() {
        sq += x * x;
    }
    sq.sqrt()
}
