//! Reverse-mode automatic differentiation over dense f64 scalars, vectors,
//! and matrices, sized for differentiating a fairness loss through a few
//! unrolled optimizer steps back to per-sample weights.
//!
//! The tape is an arena: every operation appends one node, so creation order
//! is already a topological order and `backward` is a single reverse sweep.
//! A tape lives for one outer iteration and is dropped afterwards, which
//! keeps peak memory linear in the number of unrolled steps.

use crate::error::{Error, Result};

pub const CLAMP_EPS: f64 = 1e-12;

/// Node index into a tape.
pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    /// row-major
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Mat),
}

impl Value {
    pub fn as_scalar(&self) -> f64 {
        match self {
            Value::Scalar(x) => *x,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn as_vector(&self) -> &[f64] {
        match self {
            Value::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Scalar(_) => Value::Scalar(0.0),
            Value::Vector(v) => Value::Vector(vec![0.0; v.len()]),
            Value::Matrix(m) => Value::Matrix(Mat::new(m.rows, m.cols, vec![0.0; m.data.len()])),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(x) => x.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.data.iter().all(|x| x.is_finite()),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// elementwise; (vector, scalar) and (scalar, vector) broadcast
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// multiply by a compile-time constant
    ScalarMul(NodeId, f64),
    /// matrix node times vector node
    MatVec(NodeId, NodeId),
    Sigmoid(NodeId),
    /// ln of the operand clamped to >= CLAMP_EPS
    Log(NodeId),
    Abs(NodeId),
    /// sqrt of the operand clamped to >= 0
    Sqrt(NodeId),
    /// elementwise or (vector, scalar); denominator magnitude clamped to >= CLAMP_EPS
    Div(NodeId, NodeId),
    Sum(NodeId),
    /// mean over a subset of vector indices
    MeanIdx(NodeId, Vec<usize>),
    /// subvector out[j] = in[idx[j]]
    Gather(NodeId, Vec<usize>),
}

struct Node {
    value: Value,
    op: Op,
    leaf: bool,
}

/// Gradients of one backward pass, indexed by node id.
pub struct GradMap {
    grads: Vec<Option<Value>>,
}

impl GradMap {
    /// Gradient of the root w.r.t. a leaf. Leaves unreachable from the root
    /// get a zero gradient of the leaf's shape.
    pub fn get(&self, id: NodeId, tape: &Tape) -> Value {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => tape.nodes[id].value.zeros_like(),
        }
    }

    pub fn scalar(&self, id: NodeId, tape: &Tape) -> f64 {
        self.get(id, tape).as_scalar()
    }

    pub fn vector(&self, id: NodeId, tape: &Tape) -> Vec<f64> {
        match self.get(id, tape) {
            Value::Vector(v) => v,
            _ => panic!("expected vector gradient"),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn bcast(a: &Value, b: &Value, f: impl Fn(f64, f64) -> f64, name: &str) -> Value {
    match (a, b) {
        (Value::Scalar(x), Value::Scalar(y)) => Value::Scalar(f(*x, *y)),
        (Value::Vector(x), Value::Vector(y)) => {
            assert_eq!(x.len(), y.len(), "{name}: vector length mismatch");
            Value::Vector(x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect())
        }
        (Value::Vector(x), Value::Scalar(y)) => Value::Vector(x.iter().map(|p| f(*p, *y)).collect()),
        (Value::Scalar(x), Value::Vector(y)) => Value::Vector(y.iter().map(|q| f(*x, *q)).collect()),
        _ => panic!("{name}: unsupported operand shapes"),
    }
}

fn map1(a: &Value, f: impl Fn(f64) -> f64) -> Value {
    match a {
        Value::Scalar(x) => Value::Scalar(f(*x)),
        Value::Vector(v) => Value::Vector(v.iter().map(|x| f(*x)).collect()),
        Value::Matrix(_) => panic!("elementwise op on matrix not supported"),
    }
}

#[inline]
fn clamp_denom(d: f64) -> f64 {
    if d.abs() >= CLAMP_EPS {
        d
    } else if d < 0.0 {
        -CLAMP_EPS
    } else {
        CLAMP_EPS
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Value, op: Op, leaf: bool) -> NodeId {
        self.nodes.push(Node { value, op, leaf });
        self.nodes.len() - 1
    }

    // constants (no gradient of interest, but still differentiated through)
    pub fn scalar(&mut self, x: f64) -> NodeId {
        self.push(Value::Scalar(x), Op::Leaf, false)
    }

    pub fn vector(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Value::Vector(v), Op::Leaf, false)
    }

    pub fn matrix(&mut self, m: Mat) -> NodeId {
        self.push(Value::Matrix(m), Op::Leaf, false)
    }

    // leaves whose gradients the caller will read back
    pub fn leaf_scalar(&mut self, x: f64) -> NodeId {
        self.push(Value::Scalar(x), Op::Leaf, true)
    }

    pub fn leaf_vector(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Value::Vector(v), Op::Leaf, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y, "add");
        self.push(v, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y, "sub");
        self.push(v, Op::Sub(a, b), false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y, "mul");
        self.push(v, Op::Mul(a, b), false)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = map1(&self.nodes[a].value, |x| c * x);
        self.push(v, Op::ScalarMul(a, c), false)
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> NodeId {
        let (mat, vx) = match (&self.nodes[m].value, &self.nodes[x].value) {
            (Value::Matrix(mm), Value::Vector(vv)) => (mm, vv),
            _ => panic!("matvec: expected (matrix, vector)"),
        };
        assert_eq!(mat.cols, vx.len(), "matvec: dimension mismatch");
        let mut out = vec![0.0; mat.rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = mat.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(vx) {
                acc += a * b;
            }
            *o = acc;
        }
        self.push(Value::Vector(out), Op::MatVec(m, x), false)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map1(&self.nodes[a].value, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a), false)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = map1(&self.nodes[a].value, |x| x.max(CLAMP_EPS).ln());
        self.push(v, Op::Log(a), false)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = map1(&self.nodes[a].value, f64::abs);
        self.push(v, Op::Abs(a), false)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = map1(&self.nodes[a].value, |x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a), false)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = bcast(
            &self.nodes[a].value,
            &self.nodes[b].value,
            |x, y| x / clamp_denom(y),
            "div",
        );
        self.push(v, Op::Div(a, b), false)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = match &self.nodes[a].value {
            Value::Vector(v) => v.iter().sum::<f64>(),
            Value::Scalar(x) => *x,
            _ => panic!("sum: expected vector"),
        };
        self.push(Value::Scalar(v), Op::Sum(a), false)
    }

    pub fn mean_idx(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        assert!(!idx.is_empty(), "mean_idx: empty index set");
        let v = match &self.nodes[a].value {
            Value::Vector(v) => {
                let mut acc = 0.0;
                for &i in &idx {
                    acc += v[i];
                }
                acc / idx.len() as f64
            }
            _ => panic!("mean_idx: expected vector"),
        };
        self.push(Value::Scalar(v), Op::MeanIdx(a, idx), false)
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        assert!(!idx.is_empty(), "gather: empty index set");
        let v = match &self.nodes[a].value {
            Value::Vector(v) => idx.iter().map(|&i| v[i]).collect::<Vec<f64>>(),
            _ => panic!("gather: expected vector"),
        };
        self.push(Value::Vector(v), Op::Gather(a, idx), false)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = match &self.nodes[a].value {
            Value::Vector(v) => v.len(),
            _ => panic!("mean: expected vector"),
        };
        let s = self.sum(a);
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// softplus(x) = ln(1 + e^x), composed as -ln(sigmoid(-x))
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scalar_mul(a, -1.0);
        let sig = self.sigmoid(neg);
        let lg = self.log(sig);
        self.scalar_mul(lg, -1.0)
    }

    /// Per-sample binary cross-entropy against constant targets:
    /// -[t ln p + (1-t) ln(1-p)], with the log operands clamped.
    pub fn bce(&mut self, probs: NodeId, targets: &[f64]) -> NodeId {
        let t = self.vector(targets.to_vec());
        let one_minus_t = self.vector(targets.iter().map(|y| 1.0 - y).collect());
        let one = self.scalar(1.0);
        let log_p = self.log(probs);
        let q = self.sub(one, probs);
        let log_q = self.log(q);
        let a = self.mul(t, log_p);
        let b = self.mul(one_minus_t, log_q);
        let s = self.add(a, b);
        self.scalar_mul(s, -1.0)
    }

    /// Accumulate gradients of a scalar root into every node; returns the map.
    pub fn backward(&self, root: NodeId) -> Result<GradMap> {
        if !matches!(self.nodes[root].value, Value::Scalar(_)) {
            return Err(Error::Autodiff("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        grads[root] = Some(Value::Scalar(1.0));
        for id in (0..=root).rev() {
            // Leaf gradients stay in the map for the caller; interior ones are
            // drained as they propagate since every consumer has already run.
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    self.accum_bcast(&mut grads, *a, &g, 1.0);
                    self.accum_bcast(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accum_bcast(&mut grads, *a, &g, 1.0);
                    self.accum_bcast(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[*b].value.clone();
                    let av = self.nodes[*a].value.clone();
                    let ga = bcast(&g, &bv, |x, y| x * y, "mul-bwd");
                    let gb = bcast(&g, &av, |x, y| x * y, "mul-bwd");
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                    self.accum_bcast(&mut grads, *b, &gb, 1.0);
                }
                Op::ScalarMul(a, c) => {
                    let ga = map1(&g, |x| c * x);
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                }
                Op::MatVec(m, x) => {
                    let (mat, vx) = match (&self.nodes[*m].value, &self.nodes[*x].value) {
                        (Value::Matrix(mm), Value::Vector(vv)) => (mm, vv),
                        _ => unreachable!(),
                    };
                    let gv = match &g {
                        Value::Vector(v) => v,
                        _ => panic!("matvec gradient must be a vector"),
                    };
                    let mut gx = vec![0.0; mat.cols];
                    for i in 0..mat.rows {
                        let row = mat.row(i);
                        let gi = gv[i];
                        for (j, r) in row.iter().enumerate() {
                            gx[j] += r * gi;
                        }
                    }
                    self.accum(&mut grads, *x, Value::Vector(gx));
                    if self.nodes[*m].leaf {
                        let mut gm = vec![0.0; mat.rows * mat.cols];
                        for i in 0..mat.rows {
                            for j in 0..mat.cols {
                                gm[i * mat.cols + j] = gv[i] * vx[j];
                            }
                        }
                        self.accum(&mut grads, *m, Value::Matrix(Mat::new(mat.rows, mat.cols, gm)));
                    }
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[id].value.clone();
                    let ga = bcast(&g, &out, |gi, y| gi * y * (1.0 - y), "sigmoid-bwd");
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                }
                Op::Log(a) => {
                    let av = self.nodes[*a].value.clone();
                    let ga = bcast(
                        &g,
                        &av,
                        |gi, x| if x < CLAMP_EPS { 0.0 } else { gi / x },
                        "log-bwd",
                    );
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                }
                Op::Abs(a) => {
                    let av = self.nodes[*a].value.clone();
                    let ga = bcast(&g, &av, |gi, x| gi * sign0(x), "abs-bwd");
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                }
                Op::Sqrt(a) => {
                    let out = self.nodes[id].value.clone();
                    let ga = bcast(
                        &g,
                        &out,
                        |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 },
                        "sqrt-bwd",
                    );
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                }
                Op::Div(a, b) => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let ga = bcast(&g, &bv, |gi, d| gi / clamp_denom(d), "div-bwd");
                    self.accum_bcast(&mut grads, *a, &ga, 1.0);
                    let num_over_d2 = bcast(&av, &bv, |x, d| {
                        if d.abs() >= CLAMP_EPS {
                            let dc = clamp_denom(d);
                            x / (dc * dc)
                        } else {
                            0.0
                        }
                    }, "div-bwd");
                    let gb = bcast(&g, &num_over_d2, |gi, q| -gi * q, "div-bwd");
                    self.accum_bcast(&mut grads, *b, &gb, 1.0);
                }
                Op::Sum(a) => {
                    let gs = g.as_scalar();
                    let av = &self.nodes[*a].value;
                    let ga = match av {
                        Value::Vector(v) => Value::Vector(vec![gs; v.len()]),
                        Value::Scalar(_) => Value::Scalar(gs),
                        _ => unreachable!(),
                    };
                    self.accum(&mut grads, *a, ga);
                }
                Op::MeanIdx(a, idx) => {
                    let gs = g.as_scalar() / idx.len() as f64;
                    let n = self.nodes[*a].value.as_vector().len();
                    let mut ga = vec![0.0; n];
                    for &i in idx {
                        ga[i] += gs;
                    }
                    self.accum(&mut grads, *a, Value::Vector(ga));
                }
                Op::Gather(a, idx) => {
                    let gv = match &g {
                        Value::Vector(v) => v,
                        _ => panic!("gather gradient must be a vector"),
                    };
                    let n = self.nodes[*a].value.as_vector().len();
                    let mut ga = vec![0.0; n];
                    for (j, &i) in idx.iter().enumerate() {
                        ga[i] += gv[j];
                    }
                    self.accum(&mut grads, *a, Value::Vector(ga));
                }
            }
        }
        Ok(GradMap { grads })
    }

    fn accum(&self, grads: &mut [Option<Value>], id: NodeId, g: Value) {
        match &mut grads[id] {
            Some(existing) => {
                *existing = bcast(existing, &g, |x, y| x + y, "grad-accum");
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate `sign * g` into node `id`, reducing a broadcast gradient
    /// back to the parent's shape (vector grad flowing into a scalar parent
    /// is summed).
    fn accum_bcast(&self, grads: &mut [Option<Value>], id: NodeId, g: &Value, sign: f64) {
        let target_shape = &self.nodes[id].value;
        let reduced = match (target_shape, g) {
            (Value::Scalar(_), Value::Vector(v)) => Value::Scalar(v.iter().sum::<f64>() * sign),
            _ => map1(g, |x| sign * x),
        };
        self.accum(grads, id, reduced);
    }

    pub fn check_finite(&self, id: NodeId) -> Result<()> {
        if self.nodes[id].value.is_finite() {
            Ok(())
        } else {
            Err(Error::Autodiff("non-finite value in computation graph".into()))
        }
    }

    /// Dump the graph as text, one node per line, for debugging.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let shape = match &n.value {
                Value::Scalar(_) => "scalar".to_string(),
                Value::Vector(v) => format!("vec[{}]", v.len()),
                Value::Matrix(m) => format!("mat[{}x{}]", m.rows, m.cols),
            };
            let _ = writeln!(out, "#{i} {:?} {} leaf={}", n.op, shape, n.leaf);
        }
        out
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Which differentiable optimizer drives the unrolled inner steps.
#[derive(Clone, Copy, Debug)]
pub enum InnerOpt {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl InnerOpt {
    pub fn adam(lr: f64) -> Self {
        InnerOpt::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Tracked optimizer state: moments are tape nodes so the unroll
/// differentiates through them.
pub struct TrackedOptimizer {
    kind: InnerOpt,
    step: u32,
    moments: Option<(Vec<NodeId>, Vec<NodeId>)>,
}

impl TrackedOptimizer {
    pub fn new(kind: InnerOpt) -> Self {
        TrackedOptimizer { kind, step: 0, moments: None }
    }

    /// One tracked update; returns the new parameter nodes.
    pub fn step(&mut self, tape: &mut Tape, params: &[NodeId], grads: &[NodeId]) -> Vec<NodeId> {
        assert_eq!(params.len(), grads.len());
        match self.kind {
            InnerOpt::Sgd { lr } => params
                .iter()
                .zip(grads)
                .map(|(&p, &g)| {
                    let step = tape.scalar_mul(g, lr);
                    tape.sub(p, step)
                })
                .collect(),
            InnerOpt::Adam { lr, beta1, beta2, eps } => {
                let (m_prev, v_prev) = match self.moments.take() {
                    Some(mv) => mv,
                    None => {
                        let zeros = |tape: &mut Tape| {
                            params
                                .iter()
                                .map(|&p| match tape.value(p) {
                                    Value::Scalar(_) => tape.scalar(0.0),
                                    Value::Vector(v) => {
                                        let n = v.len();
                                        tape.vector(vec![0.0; n])
                                    }
                                    _ => panic!("adam on matrix params not supported"),
                                })
                                .collect::<Vec<_>>()
                        };
                        (zeros(tape), zeros(tape))
                    }
                };
                self.step += 1;
                let (r1, r2) = crate::model::bias_corrections(beta1, beta2, self.step);
                let mut new_params = Vec::with_capacity(params.len());
                let mut m_new = Vec::with_capacity(params.len());
                let mut v_new = Vec::with_capacity(params.len());
                for i in 0..params.len() {
                    let g = grads[i];
                    let m1 = tape.scalar_mul(m_prev[i], beta1);
                    let m2 = tape.scalar_mul(g, 1.0 - beta1);
                    let m = tape.add(m1, m2);
                    let g2 = tape.mul(g, g);
                    let v1 = tape.scalar_mul(v_prev[i], beta2);
                    let v2 = tape.scalar_mul(g2, 1.0 - beta2);
                    let v = tape.add(v1, v2);
                    let mhat = tape.scalar_mul(m, r1);
                    let vhat = tape.scalar_mul(v, r2);
                    let eps_node = tape.scalar(eps);
                    let vhat_eps = tape.add(vhat, eps_node);
                    let denom = tape.sqrt(vhat_eps);
                    let upd = tape.div(mhat, denom);
                    let scaled = tape.scalar_mul(upd, lr);
                    new_params.push(tape.sub(params[i], scaled));
                    m_new.push(m);
                    v_new.push(v);
                }
                self.moments = Some((m_new, v_new));
                new_params
            }
        }
    }
}

/// One inner minibatch: constant features/targets plus the tracked
/// per-sample weight node for exactly these samples.
#[derive(Clone)]
pub struct InnerBatch {
    pub x: Mat,
    pub y: Vec<f64>,
    pub weights: NodeId,
}

/// Unrolls `batches.len()` tracked optimizer steps of weighted mean BCE for
/// a logistic-regression model and returns the final tracked parameters.
///
/// The gradient w.r.t. the parameters inside each step is constructed
/// symbolically from the logistic closed form (X'[(p - y) .* w] / B), so the
/// whole unroll stays differentiable back to the weight leaves.
pub fn unrolled_inner_loop(
    tape: &mut Tape,
    theta_w: NodeId,
    theta_b: NodeId,
    batches: &[InnerBatch],
    opt: &mut TrackedOptimizer,
) -> Result<(NodeId, NodeId, Vec<NodeId>)> {
    let (mut tw, mut tb) = (theta_w, theta_b);
    let mut losses = Vec::with_capacity(batches.len());
    for batch in batches {
        let bsz = batch.y.len();
        if bsz == 0 {
            return Err(Error::Autodiff("empty inner batch".into()));
        }
        let x = tape.matrix(batch.x.clone());
        let xt = {
            let mut t = vec![0.0; batch.x.rows * batch.x.cols];
            for i in 0..batch.x.rows {
                for j in 0..batch.x.cols {
                    t[j * batch.x.rows + i] = batch.x.data[i * batch.x.cols + j];
                }
            }
            tape.matrix(Mat::new(batch.x.cols, batch.x.rows, t))
        };
        let xw = tape.matvec(x, tw);
        let logits = tape.add(xw, tb);
        let p = tape.sigmoid(logits);
        let bce = tape.bce(p, &batch.y);
        let weighted = tape.mul(bce, batch.weights);
        let loss = tape.mean(weighted);
        tape.check_finite(loss)?;
        losses.push(loss);
        let y_const = tape.vector(batch.y.clone());
        let resid = tape.sub(p, y_const);
        let wres = tape.mul(resid, batch.weights);
        let gw_raw = tape.matvec(xt, wres);
        let gw = tape.scalar_mul(gw_raw, 1.0 / bsz as f64);
        let gb_raw = tape.sum(wres);
        let gb = tape.scalar_mul(gb_raw, 1.0 / bsz as f64);
        let updated = opt.step(tape, &[tw, tb], &[gw, gb]);
        tw = updated[0];
        tb = updated[1];
    }
    Ok((tw, tb, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_forward_and_grad() {
        let mut t = Tape::new();
        let x = t.leaf_scalar(0.0);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).as_scalar(), 0.5);
        let g = t.backward(s).unwrap();
        assert!((g.scalar(x, &t) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let mut t = Tape::new();
        let a = t.leaf_scalar(-3.0);
        let r = t.abs(a);
        assert_eq!(t.value(r).as_scalar(), 3.0);
        let g = t.backward(r).unwrap();
        assert_eq!(g.scalar(a, &t), -1.0);

        let mut t = Tape::new();
        let a = t.leaf_scalar(0.0);
        let r = t.abs(a);
        let g = t.backward(r).unwrap();
        assert_eq!(g.scalar(a, &t), 0.0);
    }

    #[test]
    fn mean_over_index_set() {
        let mut t = Tape::new();
        let v = t.leaf_vector(vec![5.0, 7.0, 9.0, 11.0]);
        let m = t.mean_idx(v, vec![1, 3]);
        assert_eq!(t.value(m).as_scalar(), 9.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.vector(v, &t), vec![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn linear_root_gradient_is_coefficients() {
        let mut t = Tape::new();
        let w = t.leaf_vector(vec![1.0, 2.0, 3.0]);
        let c = t.vector(vec![4.0, 5.0, 6.0]);
        let prod = t.mul(w, c);
        let root = t.sum(prod);
        let g = t.backward(root).unwrap();
        assert_eq!(g.vector(w, &t), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn abs_of_tie_has_zero_grads() {
        let mut t = Tape::new();
        let a = t.leaf_scalar(1.5);
        let b = t.leaf_scalar(1.5);
        let d = t.sub(a, b);
        let r = t.abs(d);
        let g = t.backward(r).unwrap();
        assert_eq!(g.scalar(a, &t), 0.0);
        assert_eq!(g.scalar(b, &t), 0.0);
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let a = t.leaf_scalar(2.0);
        let b = t.leaf_vector(vec![1.0, 2.0]);
        let r = t.mul(a, a);
        let g = t.backward(r).unwrap();
        assert_eq!(g.scalar(a, &t), 4.0);
        assert_eq!(g.vector(b, &t), vec![0.0, 0.0]);
    }

    #[test]
    fn softplus_matches_closed_form() {
        let mut t = Tape::new();
        let x = t.leaf_vector(vec![-2.0, 0.0, 0.5413248546129181, 3.0]);
        let sp = t.softplus(x);
        let got = t.value(sp).as_vector().to_vec();
        for (g, x) in got.iter().zip([-2.0f64, 0.0, 0.5413248546129181, 3.0]) {
            assert!((g - (1.0 + x.exp()).ln()).abs() < 1e-12);
        }
        // softplus(ln(e - 1)) = 1
        assert!((got[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_scatters_gradients_with_duplicates() {
        let mut t = Tape::new();
        let v = t.leaf_vector(vec![10.0, 20.0, 30.0]);
        let g1 = t.gather(v, vec![2, 0, 2]);
        assert_eq!(t.value(g1).as_vector(), &[30.0, 10.0, 30.0]);
        let c = t.vector(vec![1.0, 5.0, 7.0]);
        let prod = t.mul(g1, c);
        let s = t.sum(prod);
        let g = t.backward(s).unwrap();
        assert_eq!(g.vector(v, &t), vec![5.0, 0.0, 8.0]);
    }
}
