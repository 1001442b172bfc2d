//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it runs. Node indices are assigned
//! in creation order, which is already a topological order, so backward is a
//! single reverse sweep that visits each node once and accumulates gradients
//! additively into every input.

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{binary_mask, gemm, sigmoid, softmax_allowed, softplus, Tensor};
use std::rc::Rc;

/// Exponent floor applied before `exp` in the decay term.
pub const DECAY_EXPONENT_FLOOR: f64 = -60.0;
/// Probabilities entering the cross-entropy are clamped to `[EPS, 1 - EPS]`.
pub const BCE_CLAMP: f64 = 1e-7;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Counters gathered during forward evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraphDiagnostics {
    /// Softmax rows whose allowed set was empty (output forced to zero).
    pub fully_masked_rows: usize,
    /// Softmax rows that were normalised.
    pub normalized_rows: usize,
    /// Sum of Shannon entropies (nats) over normalised rows.
    pub entropy_sum: f64,
    /// Predictions clamped inside the cross-entropy.
    pub clamped_predictions: usize,
}

impl GraphDiagnostics {
    pub fn mean_row_entropy(&self) -> f64 {
        if self.normalized_rows == 0 {
            0.0
        } else {
            self.entropy_sum / self.normalized_rows as f64
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, c: f64 },
    RowScale { a: Var, s: Var },
    Concat { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Exp { a: Var },
    Log { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Softplus { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MaskedSoftmax { a: Var, allowed: Rc<[bool]> },
    DecayDistance { logits: Var, allowed: Rc<[bool]> },
    DecayScores { logits: Var, dist: Var, theta: Var },
    Bce { p: Var, targets: Vec<f64>, valid: Vec<bool>, count: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }
    fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }
}

/// A recorded computation. Confined to one thread; build one per sequence.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    diagnostics: GraphDiagnostics,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes the backward sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> GraphDiagnostics {
        self.diagnostics
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shapes are valid")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf; it receives a gradient iff the tensor is marked trainable.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.is_trainable(),
        )
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: None }, false)
    }

    /// Records a leaf bound to a store parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a), self.node(b));
        if sa.shape.len() != 2 || sb.shape.len() != 2 || sa.shape[1] != sb.shape[0] {
            return Err(Error::shape("matmul", &sa.shape, &sb.shape));
        }
        let (m, k, n) = (sa.shape[0], sa.shape[1], sb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &sa.data, (k, 1), &sb.data, (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 {
            return Err(Error::shape("transpose", &na.shape, &[2]));
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = na.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose { a }, rg))
    }

    /// `b` must match `a` exactly or be a row vector broadcast over `a`'s rows.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape == nb.shape {
            Ok(false)
        } else if nb.data.len() == na.cols() && (nb.shape.len() == 1 || nb.shape[0] == 1) {
            Ok(true)
        } else {
            Err(Error::shape(op, &na.shape, &nb.shape))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check("add", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let c = na.cols();
        let out = na
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + if broadcast { nb.data[i % c] } else { nb.data[i] })
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add { a, b, broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check("mul", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let c = na.cols();
        let out = na
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * if broadcast { nb.data[i % c] } else { nb.data[i] })
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul { a, b, broadcast }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let na = self.node(a);
        let out = na.data.iter().map(|x| x * c).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a);
        self.push(shape, out, Op::Scale { a, c }, rg)
    }

    /// Multiplies row `i` of `a` by the scalar `s[i]`; `s` has one entry per row.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (na, ns) = (self.node(a), self.node(s));
        if ns.data.len() != na.rows() {
            return Err(Error::shape("row_scale", &na.shape, &ns.shape));
        }
        let c = na.cols();
        let out = na
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * ns.data[i / c])
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(shape, out, Op::RowScale { a, s }, rg))
    }

    /// Concatenates 2-D tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let rows = self.node(*first).rows();
        for p in parts {
            let np = self.node(*p);
            if np.shape.len() != 2 || np.rows() != rows {
                return Err(Error::shape("concat", &self.node(*first).shape, &np.shape));
            }
        }
        let total: usize = parts.iter().map(|p| self.node(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let np = self.node(*p);
                let c = np.cols();
                out.extend_from_slice(&np.data[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 || len == 0 || start + len > na.cols() {
            return Err(Error::shape("slice_cols", &na.shape, &[start, len]));
        }
        let (rows, c) = (na.rows(), na.cols());
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&na.data[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start }, rg))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 || len == 0 || start + len > na.rows() {
            return Err(Error::shape("slice_rows", &na.shape, &[start, len]));
        }
        let c = na.cols();
        let out = na.data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![len, c], out, Op::SliceRows { a, start }, rg))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(Error::shape("gather", &nt.shape, &[2]));
        }
        let (vocab, c) = (nt.rows(), nt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Lookup(format!(
                "row {bad} out of range for table with {vocab} rows"
            )));
        }
        if indices.is_empty() {
            return Err(Error::Validation("gather with no indices".into()));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&nt.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![indices.len(), c],
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let na = self.node(a);
        let out = na.data.iter().map(|&x| f(x)).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a);
        self.push(shape, out, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.data.iter().sum::<f64>() / na.data.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let nx = self.node(x);
        let c = nx.cols();
        for p in [gamma, beta] {
            if self.node(p).data.len() != c {
                return Err(Error::shape("layer_norm", &nx.shape, &self.node(p).shape));
            }
        }
        let rows = nx.rows();
        let (g, b) = (&self.node(gamma).data, &self.node(beta).data);
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &nx.data[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax restricted to the entries where `mask` is 1.
    ///
    /// `mask` has one 0/1 entry per element of `a`. Fully masked rows produce
    /// zeros and are counted in [`GraphDiagnostics::fully_masked_rows`].
    pub fn masked_softmax(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let allowed = binary_mask(mask)?;
        self.masked_softmax_bool(a, allowed.into())
    }

    pub(crate) fn masked_softmax_bool(&mut self, a: Var, allowed: Rc<[bool]>) -> Result<Var> {
        let na = self.node(a);
        if allowed.len() != na.data.len() {
            return Err(Error::shape("masked_softmax", &na.shape, &[allowed.len()]));
        }
        let c = na.cols();
        let mut out = vec![0.0; na.data.len()];
        let mut diag = self.diagnostics;
        for r in 0..na.rows() {
            let span = r * c..(r + 1) * c;
            if softmax_allowed(&na.data[span.clone()], &allowed[span.clone()], &mut out[span.clone()]) {
                diag.normalized_rows += 1;
                diag.entropy_sum -= out[span]
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
            } else {
                diag.fully_masked_rows += 1;
            }
        }
        let shape = na.shape.clone();
        self.diagnostics = diag;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::MaskedSoftmax { a, allowed }, rg))
    }

    /// Context-aware distance from a square matrix of scaled attention logits.
    ///
    /// Row `t` normalises `logits[t, ·]` over its allowed positions into
    /// weights `gamma[t, ·]`; then `d[t, tau] = (t - tau) * prod(gamma[t, u])`
    /// over allowed `u` with `tau < u <= t`. Entries with `tau >= t` are zero.
    pub fn decay_distance(&mut self, logits: Var, allowed: Rc<[bool]>) -> Result<Var> {
        let nl = self.node(logits);
        let n = nl.cols();
        if nl.shape.len() != 2 || nl.rows() != n || allowed.len() != n * n {
            return Err(Error::shape("decay_distance", &nl.shape, &[allowed.len()]));
        }
        let mut gamma = vec![0.0; n];
        let mut out = vec![0.0; n * n];
        for t in 0..n {
            let row = t * n..(t + 1) * n;
            softmax_allowed(&nl.data[row.clone()], &allowed[row], &mut gamma);
            let mut prod = 1.0;
            for tau in (0..t).rev() {
                let u = tau + 1;
                if allowed[t * n + u] {
                    prod *= gamma[u];
                }
                out[t * n + tau] = (t - tau) as f64 * prod;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(vec![n, n], out, Op::DecayDistance { logits, allowed }, rg))
    }

    /// `exp(max(-theta * dist, floor)) * logits`, elementwise; `theta` is a scalar.
    pub fn decay_scores(&mut self, logits: Var, dist: Var, theta: Var) -> Result<Var> {
        let (nl, nd, nt) = (self.node(logits), self.node(dist), self.node(theta));
        if nl.shape != nd.shape {
            return Err(Error::shape("decay_scores", &nl.shape, &nd.shape));
        }
        if nt.data.len() != 1 {
            return Err(Error::shape("decay_scores", &nl.shape, &nt.shape));
        }
        let th = nt.data[0];
        let out = nl
            .data
            .iter()
            .zip(&nd.data)
            .map(|(l, d)| (-th * d).max(DECAY_EXPONENT_FLOOR).exp() * l)
            .collect();
        let shape = nl.shape.clone();
        let rg = self.rg(logits) || self.rg(dist) || self.rg(theta);
        Ok(self.push(shape, out, Op::DecayScores { logits, dist, theta }, rg))
    }

    /// Mean binary cross-entropy over the valid positions of `p`.
    pub fn bce(&mut self, p: Var, targets: &[f64], valid: &[bool]) -> Result<Var> {
        let np = self.node(p);
        if targets.len() != np.data.len() || valid.len() != np.data.len() {
            return Err(Error::shape("bce", &np.shape, &[targets.len(), valid.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&r| r != 0.0 && r != 1.0) {
            return Err(Error::Validation(format!("target {bad} is not 0 or 1")));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Contract("cross-entropy over zero valid positions".into()));
        }
        let mut total = 0.0;
        let mut clamped = 0;
        for ((&pr, &r), &v) in np.data.iter().zip(targets).zip(valid) {
            if !v {
                continue;
            }
            let pc = pr.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if pc != pr {
                clamped += 1;
            }
            total += r * pc.ln() + (1.0 - r) * (1.0 - pc).ln();
        }
        if clamped > 0 {
            log::debug!("bce: clamped {clamped} predictions");
        }
        self.diagnostics.clamped_predictions += clamped;
        let rg = self.rg(p);
        Ok(self.push(
            vec![1],
            vec![-total / count as f64],
            Op::Bce {
                p,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root with seed gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    /// Reverse sweep from a scalar root whose incoming gradient is `seed`.
    pub fn backward_seeded(&self, root: Var, seed: f64) -> Result<Gradients> {
        let rn = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Contract("root is not a node of this graph".into()))?;
        if rn.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                rn.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![seed]);
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited += 1;
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    /// Adds every parameter leaf's gradient into `out`.
    pub fn collect_param_grads(&self, grads: &Gradients, out: &mut ParamGrads) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = grads.grads.get(i).and_then(|g| g.as_deref()) {
                    out.add_into(id, g);
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.data;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (&self.node(*a).data, &self.node(*b).data);
                if self.rg(*a) {
                    // dA = G * B^T
                    acc(grads, *a, m * k, |ga| {
                        gemm(m, n, k, 1.0, g, (n, 1), db, (1, n), 1.0, ga)
                    });
                }
                if self.rg(*b) {
                    // dB = A^T * G
                    acc(grads, *b, k * n, |gb| {
                        gemm(k, m, n, 1.0, da, (1, k), g, (n, 1), 1.0, gb)
                    });
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                acc(grads, *a, r * c, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add { a, b, broadcast } => {
                if self.rg(*a) {
                    acc(grads, *a, g.len(), |ga| add_assign(ga, g));
                }
                if self.rg(*b) {
                    let nb = self.node(*b).data.len();
                    acc(grads, *b, nb, |gb| {
                        if *broadcast {
                            for (idx, gv) in g.iter().enumerate() {
                                gb[idx % nb] += gv;
                            }
                        } else {
                            add_assign(gb, g);
                        }
                    });
                }
            }
            Op::Mul { a, b, broadcast } => {
                let (va, vb) = (&self.node(*a).data, &self.node(*b).data);
                let nb = vb.len();
                if self.rg(*a) {
                    acc(grads, *a, g.len(), |ga| {
                        for idx in 0..g.len() {
                            let bv = if *broadcast { vb[idx % nb] } else { vb[idx] };
                            ga[idx] += g[idx] * bv;
                        }
                    });
                }
                if self.rg(*b) {
                    acc(grads, *b, nb, |gb| {
                        for idx in 0..g.len() {
                            let j = if *broadcast { idx % nb } else { idx };
                            gb[j] += g[idx] * va[idx];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                acc(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gv)| *x += c * gv)
                });
            }
            Op::RowScale { a, s } => {
                let (va, vs) = (&self.node(*a).data, &self.node(*s).data);
                let c = node.cols();
                if self.rg(*a) {
                    acc(grads, *a, g.len(), |ga| {
                        for idx in 0..g.len() {
                            ga[idx] += g[idx] * vs[idx / c];
                        }
                    });
                }
                if self.rg(*s) {
                    acc(grads, *s, vs.len(), |gs| {
                        for idx in 0..g.len() {
                            gs[idx / c] += g[idx] * va[idx];
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let total = node.cols();
                let rows = node.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.node(*p).cols();
                    if self.rg(*p) {
                        acc(grads, *p, rows * c, |gp| {
                            for r in 0..rows {
                                add_assign(
                                    &mut gp[r * c..(r + 1) * c],
                                    &g[r * total + offset..r * total + offset + c],
                                );
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::SliceCols { a, start } => {
                let na = self.node(*a);
                let (c, len, rows) = (na.cols(), node.cols(), node.rows());
                acc(grads, *a, na.data.len(), |ga| {
                    for r in 0..rows {
                        add_assign(
                            &mut ga[r * c + start..r * c + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let na = self.node(*a);
                let c = na.cols();
                acc(grads, *a, na.data.len(), |ga| {
                    add_assign(&mut ga[start * c..start * c + g.len()], g)
                });
            }
            Op::Gather { table, indices } => {
                let nt = self.node(*table);
                let c = nt.cols();
                acc(grads, *table, nt.data.len(), |gt| {
                    for (r, &row) in indices.iter().enumerate() {
                        add_assign(&mut gt[row * c..(row + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Exp { a } => acc(grads, *a, g.len(), |ga| {
                for idx in 0..g.len() {
                    ga[idx] += g[idx] * y[idx];
                }
            }),
            Op::Log { a } => {
                let x = &self.node(*a).data;
                acc(grads, *a, g.len(), |ga| {
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] / x[idx];
                    }
                })
            }
            Op::Sigmoid { a } => acc(grads, *a, g.len(), |ga| {
                for idx in 0..g.len() {
                    ga[idx] += g[idx] * y[idx] * (1.0 - y[idx]);
                }
            }),
            Op::Relu { a } => {
                let x = &self.node(*a).data;
                acc(grads, *a, g.len(), |ga| {
                    for idx in 0..g.len() {
                        if x[idx] > 0.0 {
                            ga[idx] += g[idx];
                        }
                    }
                })
            }
            Op::Softplus { a } => {
                let x = &self.node(*a).data;
                acc(grads, *a, g.len(), |ga| {
                    for idx in 0..g.len() {
                        ga[idx] += g[idx] * sigmoid(x[idx]);
                    }
                })
            }
            Op::Sum { a } => {
                let n = self.node(*a).data.len();
                acc(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = self.node(*a).data.len();
                let share = g[0] / n as f64;
                acc(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += share));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.cols();
                let rows = node.rows();
                let gam = &self.node(*gamma).data;
                if self.rg(*x) {
                    acc(grads, *x, g.len(), |gx| {
                        let mut dh = vec![0.0; c];
                        for r in 0..rows {
                            let span = r * c..(r + 1) * c;
                            let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for j in 0..c {
                                dh[j] = gr[j] * gam[j];
                                mean_dh += dh[j];
                                mean_dh_h += dh[j] * hr[j];
                            }
                            mean_dh /= c as f64;
                            mean_dh_h /= c as f64;
                            for j in 0..c {
                                gx[r * c + j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    });
                }
                if self.rg(*gamma) {
                    acc(grads, *gamma, c, |gg| {
                        for idx in 0..g.len() {
                            gg[idx % c] += g[idx] * xhat[idx];
                        }
                    });
                }
                if self.rg(*beta) {
                    acc(grads, *beta, c, |gb| {
                        for idx in 0..g.len() {
                            gb[idx % c] += g[idx];
                        }
                    });
                }
            }
            Op::MaskedSoftmax { a, allowed } => {
                let c = node.cols();
                acc(grads, *a, g.len(), |ga| {
                    for r in 0..node.rows() {
                        let span = r * c..(r + 1) * c;
                        let dot: f64 = g[span.clone()]
                            .iter()
                            .zip(&y[span.clone()])
                            .map(|(gv, yv)| gv * yv)
                            .sum();
                        for idx in span {
                            if allowed[idx] {
                                ga[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::DecayDistance { logits, allowed } => {
                let n = node.cols();
                let lv = &self.node(*logits).data;
                acc(grads, *logits, n * n, |gl| {
                    let mut gamma = vec![0.0; n];
                    let mut suffix = vec![1.0; n];
                    let mut dgamma = vec![0.0; n];
                    for t in 1..n {
                        let row = t * n..(t + 1) * n;
                        let al = &allowed[row.clone()];
                        softmax_allowed(&lv[row.clone()], al, &mut gamma);
                        // suffix[u] = prod of allowed gamma over (u, t]
                        suffix[t] = 1.0;
                        for u in (0..t).rev() {
                            let f = if al[u + 1] { gamma[u + 1] } else { 1.0 };
                            suffix[u] = suffix[u + 1] * f;
                        }
                        // running[u] = sum over tau < u of c_tau * prod of allowed gamma over (tau, u)
                        let mut running = 0.0;
                        for u in 0..=t {
                            dgamma[u] = if al[u] && u > 0 { running * suffix[u] } else { 0.0 };
                            if u < t {
                                let f = if al[u] { gamma[u] } else { 1.0 };
                                running = running * f + (t - u) as f64 * g[t * n + u];
                            }
                        }
                        // u = 0 has no tau < u, so its gamma never enters a product.
                        let dot: f64 = (0..=t).filter(|&u| al[u]).map(|u| gamma[u] * dgamma[u]).sum();
                        for u in 0..=t {
                            if al[u] {
                                gl[t * n + u] += gamma[u] * (dgamma[u] - dot);
                            }
                        }
                    }
                });
            }
            Op::DecayScores { logits, dist, theta } => {
                let dv = &self.node(*dist).data;
                let th = self.node(*theta).data[0];
                if self.rg(*logits) {
                    acc(grads, *logits, g.len(), |gl| {
                        for idx in 0..g.len() {
                            gl[idx] += g[idx] * (-th * dv[idx]).max(DECAY_EXPONENT_FLOOR).exp();
                        }
                    });
                }
                let live = |idx: usize| -th * dv[idx] > DECAY_EXPONENT_FLOOR;
                if self.rg(*dist) {
                    acc(grads, *dist, g.len(), |gd| {
                        for idx in 0..g.len() {
                            if live(idx) {
                                gd[idx] += g[idx] * -th * y[idx];
                            }
                        }
                    });
                }
                if self.rg(*theta) {
                    acc(grads, *theta, 1, |gt| {
                        for idx in 0..g.len() {
                            if live(idx) {
                                gt[0] += g[idx] * -dv[idx] * y[idx];
                            }
                        }
                    });
                }
            }
            Op::Bce {
                p,
                targets,
                valid,
                count,
            } => {
                let pv = &self.node(*p).data;
                let scale = -g[0] / *count as f64;
                acc(grads, *p, pv.len(), |gp| {
                    for idx in 0..pv.len() {
                        let pr = pv[idx];
                        if !valid[idx] || pr < BCE_CLAMP || pr > 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let r = targets[idx];
                        gp[idx] += scale * (r / pr - (1.0 - r) / (1.0 - pr));
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Runs `f` on the gradient buffer of `v`, allocating zeros on first touch.
fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = &mut grads[v.0];
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}
