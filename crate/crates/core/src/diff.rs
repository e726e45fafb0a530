//! Reverse-mode autodiff on an eager tape, covering exactly the tensor
//! operations the scoring pipeline is built from.
//!
//! Values are f64 scalars, vectors, or matrices. Building an op
//! evaluates it immediately; [`Tape::backward`] walks the node list in
//! reverse and accumulates gradients. Shape mismatches are programmer
//! errors and panic.
//!
//! The tape can track boundary hazards: when a margin is set, any
//! clamp/hinge-style op whose input lands within the margin of a
//! nondifferentiable point marks the tape, letting finite-difference
//! probes resample instead of comparing garbage.

use ndarray::{Array1, Array2};

/// A value on the tape.
#[derive(Debug, Clone)]
pub enum Tensor {
    Scalar(f64),
    Vector(Array1<f64>),
    Matrix(Array2<f64>),
}

impl Tensor {
    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Scalar(_) => Tensor::Scalar(0.0),
            Tensor::Vector(v) => Tensor::Vector(Array1::zeros(v.len())),
            Tensor::Matrix(m) => Tensor::Matrix(Array2::zeros(m.dim())),
        }
    }

    pub fn scalar(&self) -> f64 {
        match self {
            Tensor::Scalar(s) => *s,
            other => panic!("expected scalar, got {}", other.shape_desc()),
        }
    }

    pub fn vector(&self) -> &Array1<f64> {
        match self {
            Tensor::Vector(v) => v,
            other => panic!("expected vector, got {}", other.shape_desc()),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        match self {
            Tensor::Matrix(m) => m,
            other => panic!("expected matrix, got {}", other.shape_desc()),
        }
    }

    pub fn shape_desc(&self) -> String {
        match self {
            Tensor::Scalar(_) => "scalar".to_string(),
            Tensor::Vector(v) => format!("vector[{}]", v.len()),
            Tensor::Matrix(m) => format!("matrix[{}x{}]", m.nrows(), m.ncols()),
        }
    }

    /// Flat view of the values, row-major for matrices.
    pub fn flat(&self) -> Vec<f64> {
        match self {
            Tensor::Scalar(s) => vec![*s],
            Tensor::Vector(v) => v.to_vec(),
            Tensor::Matrix(m) => m.iter().copied().collect(),
        }
    }

    /// Mutate one flat coordinate; used by finite-difference probing.
    pub fn nudge(&mut self, index: usize, delta: f64) {
        match self {
            Tensor::Scalar(s) => {
                assert_eq!(index, 0);
                *s += delta;
            }
            Tensor::Vector(v) => v[index] += delta,
            Tensor::Matrix(m) => {
                let cols = m.ncols();
                m[[index / cols, index % cols]] += delta;
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Tensor::Scalar(_) => 1,
            Tensor::Vector(v) => v.len(),
            Tensor::Matrix(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    TMatMul(Var, Var),
    MatVec(Var, Var),
    TMatVec(Var, Var),
    Dot(Var, Var),
    Outer(Var, Var),
    AddRowBcast(Var, Var),
    MulRowBcast(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    RowNorms(Var),
    RowNormalizeFloor(Var, f64),
    RowNormalizeZeroSafe(Var),
    ColSoftmaxScaled(Var, Var),
    VecSoftmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eager autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
    hazard_margin: f64,
    hazard: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            hazard_margin: 0.0,
            hazard: None,
        }
    }

    /// Tape that flags forward values within `margin` of clamp, hinge,
    /// or normalization boundaries.
    pub fn with_hazard_margin(margin: f64) -> Self {
        Tape {
            nodes: Vec::new(),
            hazard_margin: margin,
            hazard: None,
        }
    }

    pub fn hazard(&self) -> Option<&str> {
        self.hazard.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn flag_hazard(&mut self, what: &str) {
        if self.hazard.is_none() {
            self.hazard = Some(what.to_string());
        }
    }

    // ───────────────────────── leaves ─────────────────────────

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, s: f64) -> Var {
        self.leaf(Tensor::Scalar(s))
    }

    pub fn leaf_vector(&mut self, v: Array1<f64>) -> Var {
        self.leaf(Tensor::Vector(v))
    }

    pub fn leaf_matrix(&mut self, m: Array2<f64>) -> Var {
        self.leaf(Tensor::Matrix(m))
    }

    // ─────────────────── elementwise binary ───────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        if self.hazard_margin > 0.0 {
            let margin = self.hazard_margin;
            if tensor_any(self.value(b), |x| x.abs() < margin) {
                self.flag_hazard("division by a near-zero value");
            }
        }
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = tensor_map(self.value(a), |x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = tensor_map(self.value(a), |x| x + k);
        self.push(value, Op::AddConst(a))
    }

    // ───────────────────── linear algebra ─────────────────────

    /// [p×q]·[q×r] → [p×r]
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::Matrix(self.value(a).matrix().dot(self.value(b).matrix()));
        self.push(value, Op::MatMul(a, b))
    }

    /// a·bᵀ: [p×q]·[r×q] → [p×r]
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::Matrix(self.value(a).matrix().dot(&self.value(b).matrix().t()));
        self.push(value, Op::MatMulT(a, b))
    }

    /// aᵀ·b: [p×q],[p×r] → [q×r]
    pub fn tmatmul(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::Matrix(self.value(a).matrix().t().dot(self.value(b).matrix()));
        self.push(value, Op::TMatMul(a, b))
    }

    /// [p×q]·[q] → [p]
    pub fn matvec(&mut self, a: Var, v: Var) -> Var {
        let value = Tensor::Vector(self.value(a).matrix().dot(self.value(v).vector()));
        self.push(value, Op::MatVec(a, v))
    }

    /// aᵀ·v: [p×q],[p] → [q]
    pub fn tmatvec(&mut self, a: Var, v: Var) -> Var {
        let value = Tensor::Vector(self.value(a).matrix().t().dot(self.value(v).vector()));
        self.push(value, Op::TMatVec(a, v))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let value = Tensor::Scalar(self.value(a).vector().dot(self.value(b).vector()));
        self.push(value, Op::Dot(a, b))
    }

    /// u⊗v: [p],[q] → [p×q]
    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let uv = self.value(u).vector();
        let vv = self.value(v).vector();
        let mut out = Array2::zeros((uv.len(), vv.len()));
        for i in 0..uv.len() {
            for j in 0..vv.len() {
                out[[i, j]] = uv[i] * vv[j];
            }
        }
        self.push(Tensor::Matrix(out), Op::Outer(u, v))
    }

    /// Matrix plus vector, broadcast across rows.
    pub fn add_row_bcast(&mut self, m: Var, v: Var) -> Var {
        let mat = self.value(m).matrix();
        let vec = self.value(v).vector();
        assert_eq!(mat.ncols(), vec.len(), "row-broadcast width mismatch");
        let mut out = mat.clone();
        for mut row in out.outer_iter_mut() {
            row += vec;
        }
        self.push(Tensor::Matrix(out), Op::AddRowBcast(m, v))
    }

    /// Matrix times vector, broadcast across rows.
    pub fn mul_row_bcast(&mut self, m: Var, v: Var) -> Var {
        let mat = self.value(m).matrix();
        let vec = self.value(v).vector();
        assert_eq!(mat.ncols(), vec.len(), "row-broadcast width mismatch");
        let mut out = mat.clone();
        for mut row in out.outer_iter_mut() {
            row *= vec;
        }
        self.push(Tensor::Matrix(out), Op::MulRowBcast(m, v))
    }

    // ──────────────────────── nonlinear ───────────────────────

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = tensor_map(self.value(a), f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = tensor_map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.hazard_margin > 0.0 {
            let margin = self.hazard_margin;
            if tensor_any(self.value(a), |x| x.abs() < margin) {
                self.flag_hazard("hinge input near zero");
            }
        }
        let value = tensor_map(self.value(a), |x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = tensor_map(self.value(a), |x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        if self.hazard_margin > 0.0 {
            let margin = self.hazard_margin;
            if tensor_any(self.value(a), |x| {
                (x - lo).abs() < margin || (x - hi).abs() < margin
            }) {
                self.flag_hazard("clamp input near a boundary");
            }
        }
        let value = tensor_map(self.value(a), |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    // ──────────────────────── reductions ──────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::Scalar(self.value(a).flat().iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let flat = self.value(a).flat();
        let value = Tensor::Scalar(flat.iter().sum::<f64>() / flat.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Per-row dot product of two equal-shape matrices → vector.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let am = self.value(a).matrix();
        let bm = self.value(b).matrix();
        assert_eq!(am.dim(), bm.dim(), "row_dot shape mismatch");
        let mut out = Array1::zeros(am.nrows());
        for i in 0..am.nrows() {
            out[i] = am.row(i).dot(&bm.row(i));
        }
        self.push(Tensor::Vector(out), Op::RowDot(a, b))
    }

    /// L2 norm of each row → vector.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let am = self.value(a).matrix();
        let mut out = Array1::zeros(am.nrows());
        for i in 0..am.nrows() {
            out[i] = am.row(i).dot(&am.row(i)).sqrt();
        }
        if self.hazard_margin > 0.0 {
            let margin = self.hazard_margin;
            if out.iter().any(|n| *n < margin) {
                self.flag_hazard("row norm near zero");
            }
        }
        self.push(Tensor::Vector(out), Op::RowNorms(a))
    }

    /// Scale each row by 1/max(‖row‖, eps).
    pub fn row_normalize_floor(&mut self, a: Var, eps: f64) -> Var {
        let am = self.value(a).matrix();
        let mut out = am.clone();
        let mut hazard = false;
        for mut row in out.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if (n - eps).abs() < self.hazard_margin {
                hazard = true;
            }
            let denom = n.max(eps);
            row.mapv_inplace(|x| x / denom);
        }
        if hazard {
            self.flag_hazard("row norm near the normalization floor");
        }
        self.push(Tensor::Matrix(out), Op::RowNormalizeFloor(a, eps))
    }

    /// Normalize each row to unit length; exactly-zero rows stay zero.
    pub fn row_normalize_zero_safe(&mut self, a: Var) -> Var {
        let am = self.value(a).matrix();
        let mut out = am.clone();
        let mut hazard = false;
        for mut row in out.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n < self.hazard_margin {
                hazard = true;
            }
            if n > 0.0 {
                row.mapv_inplace(|x| x / n);
            }
        }
        if hazard {
            self.flag_hazard("row norm near zero in normalization");
        }
        self.push(Tensor::Matrix(out), Op::RowNormalizeZeroSafe(a))
    }

    /// Column-wise softmax of `z` [K×L], column j scaled by `lambda[j]`
    /// before the (max-subtracted) softmax over the K rows.
    pub fn col_softmax_scaled(&mut self, z: Var, lambda: Var) -> Var {
        let zm = self.value(z).matrix();
        let lv = self.value(lambda).vector();
        assert_eq!(zm.ncols(), lv.len(), "one temperature per column");
        let mut out = Array2::zeros(zm.dim());
        for j in 0..zm.ncols() {
            let mut max_u = f64::NEG_INFINITY;
            for i in 0..zm.nrows() {
                max_u = max_u.max(lv[j] * zm[[i, j]]);
            }
            let mut denom = 0.0;
            for i in 0..zm.nrows() {
                let w = (lv[j] * zm[[i, j]] - max_u).exp();
                out[[i, j]] = w;
                denom += w;
            }
            for i in 0..zm.nrows() {
                out[[i, j]] /= denom;
            }
        }
        self.push(Tensor::Matrix(out), Op::ColSoftmaxScaled(z, lambda))
    }

    /// Max-subtracted softmax of a vector.
    pub fn vec_softmax(&mut self, s: Var) -> Var {
        let sv = self.value(s).vector();
        let max = sv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Array1<f64> = sv.mapv(|x| (x - max).exp());
        let denom = out.sum();
        out.mapv_inplace(|x| x / denom);
        self.push(Tensor::Vector(out), Op::VecSoftmax(s))
    }

    // ───────────────────────── backward ───────────────────────

    /// Gradients of a scalar loss with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(
            matches!(self.value(loss), Tensor::Scalar(_)),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::Scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to(&g, self.value(*a)));
                    self.accumulate(&mut grads, *b, reduce_to(&g, self.value(*b)));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, reduce_to(&g, self.value(*a)));
                    let neg = tensor_map(&g, |x| -x);
                    self.accumulate(&mut grads, *b, reduce_to(&neg, self.value(*b)));
                }
                Op::Mul(a, b) => {
                    let da = broadcast_zip(&g, self.value(*b), |x, y| x * y);
                    let db = broadcast_zip(&g, self.value(*a), |x, y| x * y);
                    self.accumulate(&mut grads, *a, reduce_to(&da, self.value(*a)));
                    self.accumulate(&mut grads, *b, reduce_to(&db, self.value(*b)));
                }
                Op::Div(a, b) => {
                    let da = broadcast_zip(&g, self.value(*b), |x, y| x / y);
                    self.accumulate(&mut grads, *a, reduce_to(&da, self.value(*a)));
                    let y = &self.nodes[idx].value;
                    let gy = broadcast_zip(&g, y, |x, v| x * v);
                    let db = broadcast_zip(&gy, self.value(*b), |x, y| -x / y);
                    self.accumulate(&mut grads, *b, reduce_to(&db, self.value(*b)));
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.accumulate(&mut grads, *a, tensor_map(&g, |x| x * k));
                }
                Op::AddConst(a) => {
                    self.accumulate(&mut grads, *a, g.clone());
                }
                Op::MatMul(a, b) => {
                    let gm = g.matrix();
                    let da = gm.dot(&self.value(*b).matrix().t());
                    let db = self.value(*a).matrix().t().dot(gm);
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *b, Tensor::Matrix(db));
                }
                Op::MatMulT(a, b) => {
                    let gm = g.matrix();
                    let da = gm.dot(self.value(*b).matrix());
                    let db = gm.t().dot(self.value(*a).matrix());
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *b, Tensor::Matrix(db));
                }
                Op::TMatMul(a, b) => {
                    let gm = g.matrix();
                    let da = self.value(*b).matrix().dot(&gm.t());
                    let db = self.value(*a).matrix().dot(gm);
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *b, Tensor::Matrix(db));
                }
                Op::MatVec(a, v) => {
                    let gv = g.vector();
                    let vv = self.value(*v).vector();
                    let mut da = Array2::zeros(self.value(*a).matrix().dim());
                    for i in 0..da.nrows() {
                        for j in 0..da.ncols() {
                            da[[i, j]] = gv[i] * vv[j];
                        }
                    }
                    let dv = self.value(*a).matrix().t().dot(gv);
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *v, Tensor::Vector(dv));
                }
                Op::TMatVec(a, v) => {
                    let gv = g.vector();
                    let vv = self.value(*v).vector();
                    let mut da = Array2::zeros(self.value(*a).matrix().dim());
                    for i in 0..da.nrows() {
                        for j in 0..da.ncols() {
                            da[[i, j]] = vv[i] * gv[j];
                        }
                    }
                    let dv = self.value(*a).matrix().dot(gv);
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *v, Tensor::Vector(dv));
                }
                Op::Dot(a, b) => {
                    let gs = g.scalar();
                    let da = self.value(*b).vector().mapv(|x| gs * x);
                    let db = self.value(*a).vector().mapv(|x| gs * x);
                    self.accumulate(&mut grads, *a, Tensor::Vector(da));
                    self.accumulate(&mut grads, *b, Tensor::Vector(db));
                }
                Op::Outer(u, v) => {
                    let gm = g.matrix();
                    let du = gm.dot(self.value(*v).vector());
                    let dv = gm.t().dot(self.value(*u).vector());
                    self.accumulate(&mut grads, *u, Tensor::Vector(du));
                    self.accumulate(&mut grads, *v, Tensor::Vector(dv));
                }
                Op::AddRowBcast(m, v) => {
                    let gm = g.matrix();
                    self.accumulate(&mut grads, *m, g.clone());
                    let dv = gm.sum_axis(ndarray::Axis(0));
                    self.accumulate(&mut grads, *v, Tensor::Vector(dv));
                }
                Op::MulRowBcast(m, v) => {
                    let gm = g.matrix();
                    let vv = self.value(*v).vector();
                    let mm = self.value(*m).matrix();
                    let mut dm = gm.clone();
                    for mut row in dm.outer_iter_mut() {
                        row *= vv;
                    }
                    let mut dv = Array1::zeros(vv.len());
                    for i in 0..mm.nrows() {
                        for j in 0..mm.ncols() {
                            dv[j] += gm[[i, j]] * mm[[i, j]];
                        }
                    }
                    self.accumulate(&mut grads, *m, Tensor::Matrix(dm));
                    self.accumulate(&mut grads, *v, Tensor::Vector(dv));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = broadcast_zip(&g, y, |gx, yx| gx * (1.0 - yx * yx));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = broadcast_zip(&g, y, |gx, yx| gx * yx * (1.0 - yx));
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = broadcast_zip(&g, self.value(*a), |gx, xx| {
                        if xx > 0.0 {
                            gx
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let da = broadcast_zip(&g, self.value(*a), |gx, xx| gx * 2.0 * xx);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let da = broadcast_zip(&g, self.value(*a), |gx, xx| {
                        if xx > lo && xx < hi {
                            gx
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let gs = g.scalar();
                    let da = tensor_map(self.value(*a), |_| gs);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let gs = g.scalar() / n;
                    let da = tensor_map(self.value(*a), |_| gs);
                    self.accumulate(&mut grads, *a, da);
                }
                Op::RowDot(a, b) => {
                    let gv = g.vector();
                    let am = self.value(*a).matrix();
                    let bm = self.value(*b).matrix();
                    let mut da = Array2::zeros(am.dim());
                    let mut db = Array2::zeros(bm.dim());
                    for i in 0..am.nrows() {
                        for j in 0..am.ncols() {
                            da[[i, j]] = gv[i] * bm[[i, j]];
                            db[[i, j]] = gv[i] * am[[i, j]];
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                    self.accumulate(&mut grads, *b, Tensor::Matrix(db));
                }
                Op::RowNorms(a) => {
                    let gv = g.vector();
                    let am = self.value(*a).matrix();
                    let norms = self.nodes[idx].value.vector();
                    let mut da = Array2::zeros(am.dim());
                    for i in 0..am.nrows() {
                        if norms[i] > 0.0 {
                            let s = gv[i] / norms[i];
                            for j in 0..am.ncols() {
                                da[[i, j]] = s * am[[i, j]];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                }
                Op::RowNormalizeFloor(a, eps) => {
                    let eps = *eps;
                    let gm = g.matrix();
                    let am = self.value(*a).matrix();
                    let ym = self.nodes[idx].value.matrix();
                    let mut da = Array2::zeros(am.dim());
                    for i in 0..am.nrows() {
                        let n = am.row(i).dot(&am.row(i)).sqrt();
                        if n > eps {
                            let gy = gm.row(i).dot(&ym.row(i));
                            for j in 0..am.ncols() {
                                da[[i, j]] = (gm[[i, j]] - gy * ym[[i, j]]) / n;
                            }
                        } else {
                            for j in 0..am.ncols() {
                                da[[i, j]] = gm[[i, j]] / eps;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                }
                Op::RowNormalizeZeroSafe(a) => {
                    let gm = g.matrix();
                    let am = self.value(*a).matrix();
                    let ym = self.nodes[idx].value.matrix();
                    let mut da = Array2::zeros(am.dim());
                    for i in 0..am.nrows() {
                        let n = am.row(i).dot(&am.row(i)).sqrt();
                        if n > 0.0 {
                            let gy = gm.row(i).dot(&ym.row(i));
                            for j in 0..am.ncols() {
                                da[[i, j]] = (gm[[i, j]] - gy * ym[[i, j]]) / n;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::Matrix(da));
                }
                Op::ColSoftmaxScaled(z, lambda) => {
                    let gm = g.matrix();
                    let s = self.nodes[idx].value.matrix();
                    let zm = self.value(*z).matrix();
                    let lv = self.value(*lambda).vector();
                    let mut dz = Array2::zeros(zm.dim());
                    let mut dl = Array1::zeros(lv.len());
                    for j in 0..zm.ncols() {
                        let mut gdots = 0.0;
                        for i in 0..zm.nrows() {
                            gdots += gm[[i, j]] * s[[i, j]];
                        }
                        for i in 0..zm.nrows() {
                            // du = dL/d(lambda_j * z_ij)
                            let du = s[[i, j]] * (gm[[i, j]] - gdots);
                            dz[[i, j]] = lv[j] * du;
                            dl[j] += zm[[i, j]] * du;
                        }
                    }
                    self.accumulate(&mut grads, *z, Tensor::Matrix(dz));
                    self.accumulate(&mut grads, *lambda, Tensor::Vector(dl));
                }
                Op::VecSoftmax(a) => {
                    let gv = g.vector();
                    let s = self.nodes[idx].value.vector();
                    let gdots = gv.dot(s);
                    let da = Array1::from_shape_fn(s.len(), |i| s[i] * (gv[i] - gdots));
                    self.accumulate(&mut grads, *a, Tensor::Vector(da));
                }
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
        let slot = &mut grads[var.0];
        match slot {
            Some(existing) => add_assign(existing, &delta),
            None => *slot = Some(delta),
        }
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; zeros if the loss does not depend on it.
    pub fn get(&self, tape: &Tape, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| tape.value(var).zeros_like())
    }
}

fn add_assign(target: &mut Tensor, delta: &Tensor) {
    match (target, delta) {
        (Tensor::Scalar(a), Tensor::Scalar(b)) => *a += b,
        (Tensor::Vector(a), Tensor::Vector(b)) => *a += b,
        (Tensor::Matrix(a), Tensor::Matrix(b)) => *a += b,
        (a, b) => panic!(
            "gradient shape mismatch: {} vs {}",
            a.shape_desc(),
            b.shape_desc()
        ),
    }
}

/// Collapse a gradient to the shape of a broadcast operand: a scalar
/// operand that was broadcast across a vector or matrix receives the
/// sum of the elementwise gradients.
fn reduce_to(grad: &Tensor, operand: &Tensor) -> Tensor {
    match (grad, operand) {
        (g, Tensor::Scalar(_)) if !matches!(g, Tensor::Scalar(_)) => {
            Tensor::Scalar(g.flat().iter().sum())
        }
        (g, _) => g.clone(),
    }
}

fn tensor_map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    match t {
        Tensor::Scalar(s) => Tensor::Scalar(f(*s)),
        Tensor::Vector(v) => Tensor::Vector(v.mapv(&f)),
        Tensor::Matrix(m) => Tensor::Matrix(m.mapv(&f)),
    }
}

fn tensor_any(t: &Tensor, f: impl Fn(f64) -> bool) -> bool {
    match t {
        Tensor::Scalar(s) => f(*s),
        Tensor::Vector(v) => v.iter().any(|x| f(*x)),
        Tensor::Matrix(m) => m.iter().any(|x| f(*x)),
    }
}

/// Elementwise combine with scalar broadcast on either side. Shapes of
/// two non-scalar operands must match exactly.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match (a, b) {
        (Tensor::Scalar(x), Tensor::Scalar(y)) => Tensor::Scalar(f(*x, *y)),
        (Tensor::Scalar(x), other) => tensor_map(other, |y| f(*x, y)),
        (other, Tensor::Scalar(y)) => tensor_map(other, |x| f(x, *y)),
        (Tensor::Vector(x), Tensor::Vector(y)) => {
            assert_eq!(x.len(), y.len(), "vector length mismatch");
            Tensor::Vector(Array1::from_shape_fn(x.len(), |i| f(x[i], y[i])))
        }
        (Tensor::Matrix(x), Tensor::Matrix(y)) => {
            assert_eq!(x.dim(), y.dim(), "matrix shape mismatch");
            Tensor::Matrix(Array2::from_shape_fn(x.dim(), |idx| f(x[idx], y[idx])))
        }
        (a, b) => panic!(
            "cannot combine {} with {}",
            a.shape_desc(),
            b.shape_desc()
        ),
    }
}
