//! Differentiable mirror of the scoring pipeline.
//!
//! These builders reproduce the executor's arithmetic as tape graphs so
//! the same configuration can be scored (pure) and trained (autodiff).
//! A consistency test pins the two paths to each other; any change to
//! one side must land in both.

use ndarray::{Array1, Array2, ArrayView2};
use std::collections::BTreeSet;

use crate::attention::NORMALIZE_EPS;
use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pipeline::{DirectionTag, HeadKind, ModelParams, PipelineConfig};
use crate::training::loss::hardest_negatives;

/// Tape handles for the refinement parameters. The temperature MLP's
/// output layer is bound as a vector and a scalar, which matches its
/// stored [hidden × 1] matrix and single bias flat for flat.
#[derive(Debug, Clone, Copy)]
pub struct RcrVars {
    pub w_a: Var,
    pub e_w1: Var,
    pub e_b1: Var,
    pub e_w2: Var,
    pub e_b2: Var,
    pub lam_w1: Var,
    pub lam_b1: Var,
    pub lam_w2: Var,
    pub lam_b2: Var,
}

/// Tape handles for the aggregation parameters. `w_a` is the projection
/// the guidance alignments are built with; it equals the refinement
/// projection when shared.
#[derive(Debug, Clone, Copy)]
pub struct RarVars {
    pub w_g: Var,
    pub w_l: Var,
    pub w_beta: Var,
    pub w_s: Var,
    pub w_a: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub rcr: RcrVars,
    pub rar: RarVars,
}

/// A full parameter set bound onto a tape as leaves, with the canonical
/// (name, handle) list used for gradient extraction and updates.
pub struct BoundModel {
    pub entries: Vec<(String, Var)>,
    pub vars: ModelVars,
}

/// Bind every trainable tensor of `params` as a tape leaf.
pub fn bind_model(tape: &mut Tape, params: &ModelParams) -> BoundModel {
    let mut entries = Vec::new();
    let leaf_m = |tape: &mut Tape, entries: &mut Vec<(String, Var)>, name: &str, m: &Array2<f64>| {
        let v = tape.leaf_matrix(m.clone());
        entries.push((name.to_string(), v));
        v
    };
    let leaf_v = |tape: &mut Tape, entries: &mut Vec<(String, Var)>, name: &str, a: &Array1<f64>| {
        let v = tape.leaf_vector(a.clone());
        entries.push((name.to_string(), v));
        v
    };

    let w_a = leaf_m(tape, &mut entries, "rcr.w_a", &params.rcr.w_a);
    let e_w1 = leaf_m(tape, &mut entries, "rcr.e.w1", &params.rcr.e_mlp.w1);
    let e_b1 = leaf_v(tape, &mut entries, "rcr.e.b1", &params.rcr.e_mlp.b1);
    let e_w2 = leaf_m(tape, &mut entries, "rcr.e.w2", &params.rcr.e_mlp.w2);
    let e_b2 = leaf_v(tape, &mut entries, "rcr.e.b2", &params.rcr.e_mlp.b2);
    let lam_w1 = leaf_m(tape, &mut entries, "rcr.lam.w1", &params.rcr.lambda_mlp.w1);
    let lam_b1 = leaf_v(tape, &mut entries, "rcr.lam.b1", &params.rcr.lambda_mlp.b1);
    let lam_w2 = {
        let col = params.rcr.lambda_mlp.w2.column(0).to_owned();
        let v = tape.leaf_vector(col);
        entries.push(("rcr.lam.w2".to_string(), v));
        v
    };
    let lam_b2 = {
        let v = tape.leaf_scalar(params.rcr.lambda_mlp.b2[0]);
        entries.push(("rcr.lam.b2".to_string(), v));
        v
    };
    let w_g = leaf_m(tape, &mut entries, "rar.w_g", &params.rar.w_g);
    let w_l = leaf_m(tape, &mut entries, "rar.w_l", &params.rar.w_l);
    let w_beta = leaf_v(tape, &mut entries, "rar.w_beta", &params.rar.w_beta);
    let w_s = leaf_v(tape, &mut entries, "rar.w_s", &params.rar.w_s);
    let guid_w_a = match &params.w_a_rar {
        Some(w) => leaf_m(tape, &mut entries, "rar.w_a", w),
        None => w_a,
    };

    BoundModel {
        entries,
        vars: ModelVars {
            rcr: RcrVars {
                w_a,
                e_w1,
                e_b1,
                e_w2,
                e_b2,
                lam_w1,
                lam_b1,
                lam_w2,
                lam_b2,
            },
            rar: RarVars {
                w_g,
                w_l,
                w_beta,
                w_s,
                w_a: guid_w_a,
            },
        },
    }
}

/// Mutable flat view of the named parameter tensor inside `params`.
pub fn param_slice_mut<'a>(params: &'a mut ModelParams, name: &str) -> Option<&'a mut [f64]> {
    match name {
        "rcr.w_a" => params.rcr.w_a.as_slice_mut(),
        "rcr.e.w1" => params.rcr.e_mlp.w1.as_slice_mut(),
        "rcr.e.b1" => params.rcr.e_mlp.b1.as_slice_mut(),
        "rcr.e.w2" => params.rcr.e_mlp.w2.as_slice_mut(),
        "rcr.e.b2" => params.rcr.e_mlp.b2.as_slice_mut(),
        "rcr.lam.w1" => params.rcr.lambda_mlp.w1.as_slice_mut(),
        "rcr.lam.b1" => params.rcr.lambda_mlp.b1.as_slice_mut(),
        "rcr.lam.w2" => params.rcr.lambda_mlp.w2.as_slice_mut(),
        "rcr.lam.b2" => params.rcr.lambda_mlp.b2.as_slice_mut(),
        "rar.w_g" => params.rar.w_g.as_slice_mut(),
        "rar.w_l" => params.rar.w_l.as_slice_mut(),
        "rar.w_beta" => params.rar.w_beta.as_slice_mut(),
        "rar.w_s" => params.rar.w_s.as_slice_mut(),
        "rar.w_a" => params.w_a_rar.as_mut().and_then(|w| w.as_slice_mut()),
        _ => None,
    }
}

/// One attention pass as a graph: weighted cosines, positive-part key
/// row normalization, per-column temperature softmax, weighted sum of
/// keys. Returns the attended features [L×d].
pub fn d_attend(tape: &mut Tape, queries: Var, keys: Var, e: Var, lambda: Var) -> Var {
    let wq = tape.mul(e, queries);
    let raw = tape.matmul_t(keys, wq);
    let kn = tape.row_norms(keys);
    let qn = tape.row_norms(queries);
    let denom = tape.outer(kn, qn);
    let c = tape.div(raw, denom);
    let pos = tape.relu(c);
    let cbar = tape.row_normalize_floor(pos, NORMALIZE_EPS);
    let alpha = tape.col_softmax_scaled(cbar, lambda);
    tape.tmatmul(alpha, keys)
}

/// Alignment vectors as a graph: normalized projection of squared
/// query/attended differences, zero rows staying zero.
pub fn d_alignments(tape: &mut Tape, queries: Var, attended: Var, w_a: Var) -> Var {
    let diff = tape.sub(queries, attended);
    let sq = tape.square(diff);
    let pre = tape.matmul(sq, w_a);
    tape.row_normalize_zero_safe(pre)
}

/// Factor update as a graph. Returns the new (e, lambda).
pub fn d_regulate(
    tape: &mut Tape,
    vars: &RcrVars,
    alignments: Var,
    e_prev: Var,
    lambda_prev: Var,
    residual: bool,
) -> (Var, Var) {
    let h = tape.matmul(alignments, vars.e_w1);
    let h = tape.add_row_bcast(h, vars.e_b1);
    let h = tape.tanh(h);
    let o = tape.matmul(h, vars.e_w2);
    let o = tape.add_row_bcast(o, vars.e_b2);
    let o = tape.tanh(o);
    let e_raw = if residual { tape.add(o, e_prev) } else { o };
    let e_new = tape.clamp(e_raw, -1.0, 1.0);

    let h = tape.matmul(alignments, vars.lam_w1);
    let h = tape.add_row_bcast(h, vars.lam_b1);
    let h = tape.tanh(h);
    let o = tape.matvec(h, vars.lam_w2);
    let o = tape.add(o, vars.lam_b2);
    let l_raw = if residual { tape.add(o, lambda_prev) } else { o };
    let lambda_new = tape.relu(l_raw);
    (e_new, lambda_new)
}

/// Uniform-weight pooling of alignment rows. Returns (a_g, beta).
pub fn d_guidance_init(tape: &mut Tape, alignments: Var) -> (Var, Var) {
    let l = tape.value(alignments).matrix().nrows();
    let beta = tape.leaf_vector(Array1::from_elem(l, 1.0 / l as f64));
    let a_g = tape.tmatvec(alignments, beta);
    (a_g, beta)
}

/// One guidance re-weighting step. Returns (new a_g, beta).
pub fn d_guidance_step(
    tape: &mut Tape,
    vars: &RarVars,
    a_g: Var,
    alignments: Var,
    residual: bool,
) -> (Var, Var) {
    let gpre = tape.tmatvec(vars.w_g, a_g);
    let gate = tape.tanh(gpre);
    let rpre = tape.matmul(alignments, vars.w_l);
    let row_gate = tape.tanh(rpre);
    let u = tape.mul_row_bcast(row_gate, gate);
    let scores = tape.matvec(u, vars.w_beta);
    let beta = tape.vec_softmax(scores);
    let pooled = tape.tmatvec(alignments, beta);
    let a_g_new = if residual {
        let s = tape.add(pooled, a_g);
        tape.scale(s, 0.5)
    } else {
        pooled
    };
    (a_g_new, beta)
}

/// Sigmoid readout of the guidance vector.
pub fn d_head_sigmoid(tape: &mut Tape, w_s: Var, a_g: Var) -> Var {
    let logit = tape.dot(w_s, a_g);
    tape.sigmoid(logit)
}

/// Mean cosine between attended features and queries.
pub fn d_head_cosine(tape: &mut Tape, queries: Var, attended: Var) -> Var {
    let rd = tape.row_dot(attended, queries);
    let na = tape.row_norms(attended);
    let nq = tape.row_norms(queries);
    let dn = tape.mul(na, nq);
    let cos = tape.div(rd, dn);
    tape.mean(cos)
}

/// Fresh factor leaves: all-ones channel weights and a constant
/// temperature, bound as constants (their gradients exist but are never
/// applied to anything).
pub fn default_factor_leaves(tape: &mut Tape, l: usize, d: usize, lambda0: f64) -> (Var, Var) {
    let e = tape.leaf_matrix(Array2::ones((l, d)));
    let lambda = tape.leaf_vector(Array1::from_elem(l, lambda0));
    (e, lambda)
}

/// Full scoring graph for one pair under `config`; mirrors the pure
/// executor step for step. `vars` may be `None` only for the baseline
/// mode. Panics on shape mismatches (programmer error), like the rest
/// of the tape layer.
pub fn d_score(
    tape: &mut Tape,
    vars: Option<&ModelVars>,
    regions: Var,
    words: Var,
    e0: Var,
    lambda0: Var,
    config: &PipelineConfig,
) -> Var {
    let (queries, keys) = match config.direction {
        DirectionTag::T2i => (words, regions),
        DirectionTag::I2t => (regions, words),
        DirectionTag::Ensemble => panic!("ensemble is not a scoring direction"),
    };
    let mut e = e0;
    let mut lambda = lambda0;
    let mut attended = d_attend(tape, queries, keys, e, lambda);

    let guidance = config.head == HeadKind::Sigmoid || config.n_rar > 0;
    let mut a_guid = None;
    let mut a_g = None;
    if guidance {
        let v = vars.expect("guidance modes carry parameters");
        let a = d_alignments(tape, queries, attended, v.rar.w_a);
        let (g, _) = d_guidance_init(tape, a);
        a_guid = Some(a);
        a_g = Some(g);
    }

    for n in 1..=config.total_steps() {
        if n <= config.n_rcr {
            let v = vars.expect("refinement modes carry parameters");
            let a_mlp = d_alignments(tape, queries, attended, v.rcr.w_a);
            let (e2, l2) = d_regulate(tape, &v.rcr, a_mlp, e, lambda, config.residual_rcr);
            e = e2;
            lambda = l2;
            attended = d_attend(tape, queries, keys, e, lambda);
            if guidance {
                a_guid = Some(d_alignments(tape, queries, attended, v.rar.w_a));
            }
        }
        if n <= config.n_rar {
            let v = vars.expect("guidance modes carry parameters");
            let (g2, _) = d_guidance_step(
                tape,
                &v.rar,
                a_g.expect("guidance state initialized"),
                a_guid.expect("guidance alignments built"),
                config.residual_rar,
            );
            a_g = Some(g2);
        }
    }

    match config.head {
        HeadKind::Cosine => d_head_cosine(tape, queries, attended),
        HeadKind::Sigmoid => {
            let v = vars.expect("sigmoid head needs parameters");
            d_head_sigmoid(tape, v.rar.w_s, a_g.expect("guidance state initialized"))
        }
    }
}

/// A batch loss tape ready for backward: the bound parameters, the
/// loss node, and the pure-side loss value it should match.
pub struct BatchTape {
    pub tape: Tape,
    pub bound: BoundModel,
    pub loss: Var,
}

/// Build the hinge loss over a batch on a tape.
///
/// The hardest negatives are chosen from the pure similarity matrix and
/// held fixed, so only the contributing pairs (positives plus chosen
/// negatives) are re-scored differentiably.
pub fn build_batch_loss(
    params: &ModelParams,
    images: &[&Array2<f64>],
    captions: &[&Array2<f64>],
    sim: ArrayView2<f64>,
    config: &PipelineConfig,
    margin: f64,
) -> Result<BatchTape> {
    let b = images.len();
    if captions.len() != b || sim.dim() != (b, b) {
        return Err(Error::config(format!(
            "batch of {b} images, {} captions, {:?} similarity matrix",
            captions.len(),
            sim.dim()
        )));
    }
    let (row_neg, col_neg) = hardest_negatives(sim)?;

    let mut needed = BTreeSet::new();
    for i in 0..b {
        needed.insert((i, i));
        if let Some(j) = row_neg[i] {
            needed.insert((i, j));
        }
        if let Some(k) = col_neg[i] {
            needed.insert((k, i));
        }
    }

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params);
    let mut scores = std::collections::BTreeMap::new();
    for &(i, j) in &needed {
        let v = tape.leaf_matrix(images[i].clone());
        let t = tape.leaf_matrix(captions[j].clone());
        let (e0, l0) = default_factor_leaves(&mut tape, t_rows(captions[j], images[i], config), config.d, config.lambda0);
        let s = d_score(&mut tape, Some(&bound.vars), v, t, e0, l0, config);
        scores.insert((i, j), s);
    }

    let mut total = tape.leaf_scalar(0.0);
    for i in 0..b {
        let pos = scores[&(i, i)];
        if let Some(j) = row_neg[i] {
            let neg = scores[&(i, j)];
            let diff = tape.sub(neg, pos);
            let shifted = tape.add_const(diff, margin);
            let hinge = tape.relu(shifted);
            total = tape.add(total, hinge);
        }
        if let Some(k) = col_neg[i] {
            let neg = scores[&(k, i)];
            let diff = tape.sub(neg, pos);
            let shifted = tape.add_const(diff, margin);
            let hinge = tape.relu(shifted);
            total = tape.add(total, hinge);
        }
    }

    Ok(BatchTape {
        tape,
        bound,
        loss: total,
    })
}

/// Query count for a pair under the configured direction.
fn t_rows(caption: &Array2<f64>, image: &Array2<f64>, config: &PipelineConfig) -> usize {
    match config.direction {
        DirectionTag::T2i => caption.nrows(),
        DirectionTag::I2t => image.nrows(),
        DirectionTag::Ensemble => panic!("ensemble is not a scoring direction"),
    }
}
