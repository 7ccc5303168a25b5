//! Reverse-mode automatic differentiation over a recorded-operation tape.
//!
//! A [`Tape`] records every forward operation together with its operand
//! indices; [`Tape::backward`] replays the record in reverse, accumulating
//! vector-Jacobian products into a [`GradientRecord`] keyed by parameter
//! handle. Trainable tensors live in a [`ParamStore`] outside the tape and are
//! snapshotted onto it when bound, so the optimizer can mutate the store
//! between steps without invalidating anything.
//!
//! Every produced value is checked for finiteness: a NaN or infinity surfaces
//! as [`GradError::NonFinite`] at the op that created it instead of reaching
//! an optimizer step.

use std::collections::HashMap;

use thiserror::Error;

use crate::basis::{
    basis_vector_and_deriv, mexican_hat_full, rbf_vector_and_deriv, sigmoid, silu, silu_deriv,
    softplus, RbfSpec, SplineSpec,
};
use crate::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};

#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got {len} values")]
    NotScalar { len: usize },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("cross-entropy label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Which optimizer group a trainable tensor belongs to; each group gets its
/// own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Prompts,
    MetaLearner,
    KanWeights,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Prompts => "prompts",
            ParamGroup::MetaLearner => "meta-learner",
            ParamGroup::KanWeights => "kan-weights",
        }
    }
}

/// Opaque identifier binding one trainable tensor to the differentiation
/// record. Exactly one handle exists per trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamHandle {
    id: usize,
    group: ParamGroup,
}

impl ParamHandle {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }
}

/// Owns every trainable tensor of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(ParamGroup, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, group: ParamGroup, tensor: Tensor) -> ParamHandle {
        let id = self.entries.len();
        self.entries.push((group, tensor));
        ParamHandle { id, group }
    }

    pub fn get(&self, handle: ParamHandle) -> &Tensor {
        &self.entries[handle.id].1
    }

    pub fn set(&mut self, handle: ParamHandle, tensor: Tensor) {
        debug_assert_eq!(self.entries[handle.id].1.shape(), tensor.shape());
        self.entries[handle.id].1 = tensor;
    }

    pub fn handles(&self) -> Vec<ParamHandle> {
        self.entries
            .iter()
            .enumerate()
            .map(|(id, (group, _))| ParamHandle { id, group: *group })
            .collect()
    }

    /// Total number of stored trainable scalars (the "exact" parameter count).
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn scalars_in_group(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|(g, _)| *g == group)
            .map(|(_, t)| t.len())
            .sum()
    }
}

/// Gradients keyed by parameter handle. Handles that did not participate in
/// the loss are absent, which consumers treat the same as a zero gradient.
#[derive(Debug, Clone, Default)]
pub struct GradientRecord {
    grads: HashMap<usize, Tensor>,
}

impl GradientRecord {
    pub fn get(&self, handle: ParamHandle) -> Option<&Tensor> {
        self.grads.get(&handle.id())
    }

    pub fn insert(&mut self, handle: ParamHandle, grad: Tensor) {
        self.grads.insert(handle.id(), grad);
    }

    /// Add into an existing entry; a handle bound to several tape leaves
    /// (e.g. one learner serving every layer of its cluster) sums their
    /// contributions.
    fn accumulate(&mut self, handle: ParamHandle, grad: Tensor) {
        match self.grads.get_mut(&handle.id()) {
            Some(existing) => {
                for (acc, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *acc += g;
                }
            }
            None => {
                self.grads.insert(handle.id(), grad);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    /// Test fixtures use this to corrupt one gradient and prove the checker
    /// catches a wrong adjoint.
    pub fn scale_in_place(&mut self, handle: ParamHandle, factor: f64) {
        if let Some(t) = self.grads.get_mut(&handle.id()) {
            let scaled: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
            *t = Tensor::from_vec(t.shape().to_vec(), scaled).expect("same shape");
        }
    }
}

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Exp,
    Sin,
    Square,
    Cube,
    Neg,
    Sigmoid,
}

impl UnaryKind {
    fn apply(&self, t: f64) -> f64 {
        match self {
            UnaryKind::Silu => silu(t),
            UnaryKind::Exp => t.exp(),
            UnaryKind::Sin => t.sin(),
            UnaryKind::Square => t * t,
            UnaryKind::Cube => t * t * t,
            UnaryKind::Neg => -t,
            UnaryKind::Sigmoid => sigmoid(t),
        }
    }

    /// Local derivative given the input and the already-computed output.
    fn deriv(&self, input: f64, output: f64) -> f64 {
        match self {
            UnaryKind::Silu => silu_deriv(input),
            UnaryKind::Exp => output,
            UnaryKind::Sin => input.cos(),
            UnaryKind::Square => 2.0 * input,
            UnaryKind::Cube => 3.0 * input * input,
            UnaryKind::Neg => -1.0,
            UnaryKind::Sigmoid => output * (1.0 - output),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            UnaryKind::Silu => "silu",
            UnaryKind::Exp => "exp",
            UnaryKind::Sin => "sin",
            UnaryKind::Square => "square",
            UnaryKind::Cube => "cube",
            UnaryKind::Neg => "neg",
            UnaryKind::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    Unary(UnaryKind, usize),
    Sum(usize),
    Mean(usize),
    AddRow(usize, usize),
    /// Basis feature expansion `m x n -> m x (n * dim)`; the elementwise
    /// derivative in t computed during the forward pass rides along for the
    /// adjoint.
    SplineExpand {
        x: usize,
        deriv: Vec<f64>,
    },
    RbfExpand {
        x: usize,
        deriv: Vec<f64>,
    },
    /// Full wavelet KAN layer: inputs `m x n`, packed edge parameters
    /// `(3n) x j` laid out [amplitude, translation, raw_scale] per input.
    WaveletLayer {
        x: usize,
        params: usize,
    },
    /// Permutes generated per-edge weight rows `(n_in * n_out) x dim` into the
    /// layer weight layout `(n_in * dim) x n_out`.
    EdgeToLayer {
        w: usize,
        n_in: usize,
        n_out: usize,
        dim: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    handle: Option<ParamHandle>,
}

/// A single-threaded differentiation record. Build one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op) -> Result<Var, GradError> {
        if !value.all_finite() {
            return Err(GradError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            handle: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, GradError> {
        self.push("constant", value, Op::Leaf)
    }

    /// Snapshot a trainable tensor onto the tape, binding its handle so
    /// `backward` can route gradients to it.
    pub fn param(&mut self, store: &ParamStore, handle: ParamHandle) -> Result<Var, GradError> {
        let value = store.get(handle).clone();
        let var = self.push("param", value, Op::Leaf)?;
        self.nodes[var.0].handle = Some(handle);
        Ok(var)
    }

    fn check(&self, v: Var) -> Result<(), GradError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GradError::ForeignVar)
        }
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node_op: Op,
    ) -> Result<Var, GradError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(GradError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(op, value, node_op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2}"),
            });
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        self.push("matmul", value, Op::MatMul(a.0, b.0))
    }

    /// Multiply by a scalar constant (the only scalar-with-tensor broadcast).
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GradError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| c * x).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale(a.0, c))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var, GradError> {
        self.check(a)?;
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| kind.apply(x)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(kind.name(), value, Op::Unary(kind, a.0))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GradError> {
        self.unary(UnaryKind::Square, a)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        self.check(a)?;
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(GradError::ShapeMismatch {
                op: "mean",
                detail: "empty tensor".to_string(),
            });
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0))
    }

    /// `m x n` plus a length-n row vector broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var, GradError> {
        self.check(a)?;
        self.check(v)?;
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (m, n) = (ta.rows(), ta.cols());
        if tv.len() != n {
            return Err(GradError::ShapeMismatch {
                op: "add_row",
                detail: format!("matrix cols {n} vs row vector len {}", tv.len()),
            });
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += tv.data()[j];
            }
        }
        let value = Tensor::from_vec(vec![m, n], data)?;
        self.push("add_row", value, Op::AddRow(a.0, v.0))
    }

    /// Expand `m x n` inputs into the per-input activation basis vector
    /// `[SiLU(t), B_1(t), ..., B_{G+k}(t)]`, producing `m x (n * dim_w)`.
    pub fn spline_expand(&mut self, x: Var, spec: &SplineSpec) -> Result<Var, GradError> {
        self.check(x)?;
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        let dim = spec.dim_w();
        let mut data = vec![0.0; m * n * dim];
        let mut deriv = vec![0.0; m * n * dim];
        for r in 0..m {
            for i in 0..n {
                let t = tx.data()[r * n + i];
                let (v, dv) = basis_vector_and_deriv(spec, t);
                let base = r * n * dim + i * dim;
                data[base..base + dim].copy_from_slice(&v);
                deriv[base..base + dim].copy_from_slice(&dv);
            }
        }
        let value = Tensor::from_vec(vec![m, n * dim], data)?;
        self.push("spline_expand", value, Op::SplineExpand { x: x.0, deriv })
    }

    /// Expand `m x n` inputs into Gaussian RBF features, `m x (n * c)`.
    pub fn rbf_expand(&mut self, x: Var, spec: &RbfSpec) -> Result<Var, GradError> {
        self.check(x)?;
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        let dim = spec.dim_w();
        let mut data = vec![0.0; m * n * dim];
        let mut deriv = vec![0.0; m * n * dim];
        for r in 0..m {
            for i in 0..n {
                let t = tx.data()[r * n + i];
                let (v, dv) = rbf_vector_and_deriv(spec, t);
                let base = r * n * dim + i * dim;
                data[base..base + dim].copy_from_slice(&v);
                deriv[base..base + dim].copy_from_slice(&dv);
            }
        }
        let value = Tensor::from_vec(vec![m, n * dim], data)?;
        self.push("rbf_expand", value, Op::RbfExpand { x: x.0, deriv })
    }

    /// Wavelet KAN layer: `out[s, j] = sum_i w_ij * psi(x_si - mu_ij; softplus(r_ij))`
    /// with `params` packed `(3n) x j`, rows `3i..3i+3` holding
    /// `[w, mu, raw_sigma]` of input i.
    pub fn wavelet_layer(&mut self, x: Var, params: Var) -> Result<Var, GradError> {
        self.check(x)?;
        self.check(params)?;
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[params.0].value);
        let (m, n) = (tx.rows(), tx.cols());
        let (rows, j_out) = (tw.rows(), tw.cols());
        if rows != 3 * n {
            return Err(GradError::ShapeMismatch {
                op: "wavelet_layer",
                detail: format!("params rows {rows} != 3 * inputs {n}"),
            });
        }
        let mut data = vec![0.0; m * j_out];
        for i in 0..n {
            for j in 0..j_out {
                let w = tw.at(3 * i, j);
                let mu = tw.at(3 * i + 1, j);
                let sigma = softplus(tw.at(3 * i + 2, j));
                for s in 0..m {
                    let (psi, _, _) = mexican_hat_full(tx.data()[s * n + i] - mu, sigma);
                    data[s * j_out + j] += w * psi;
                }
            }
        }
        let value = Tensor::from_vec(vec![m, j_out], data)?;
        self.push(
            "wavelet_layer",
            value,
            Op::WaveletLayer {
                x: x.0,
                params: params.0,
            },
        )
    }

    /// Rearrange generated per-edge coefficient rows, edge index
    /// `alpha = i * n_out + j`, into the layer weight matrix consumed by the
    /// matmul/wavelet forms: `out[i * dim + d, j] = w[alpha, d]`.
    pub fn edge_to_layer(
        &mut self,
        w: Var,
        n_in: usize,
        n_out: usize,
        dim: usize,
    ) -> Result<Var, GradError> {
        self.check(w)?;
        let tw = &self.nodes[w.0].value;
        if tw.rows() != n_in * n_out || tw.cols() != dim {
            return Err(GradError::ShapeMismatch {
                op: "edge_to_layer",
                detail: format!(
                    "expected {} x {dim}, got {} x {}",
                    n_in * n_out,
                    tw.rows(),
                    tw.cols()
                ),
            });
        }
        let mut data = vec![0.0; n_in * dim * n_out];
        for i in 0..n_in {
            for j in 0..n_out {
                for d in 0..dim {
                    data[(i * dim + d) * n_out + j] = tw.data()[(i * n_out + j) * dim + d];
                }
            }
        }
        let value = Tensor::from_vec(vec![n_in * dim, n_out], data)?;
        self.push(
            "edge_to_layer",
            value,
            Op::EdgeToLayer {
                w: w.0,
                n_in,
                n_out,
                dim,
            },
        )
    }

    /// Mean negative log-softmax of the labeled class, stabilized by
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GradError> {
        self.check(logits)?;
        let tl = &self.nodes[logits.0].value;
        let (m, classes) = (tl.rows(), tl.cols());
        if labels.len() != m {
            return Err(GradError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{m} logit rows vs {} labels", labels.len()),
            });
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(GradError::LabelOutOfRange { label, classes });
            }
            let row = &tl.data()[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / m as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar loss. Every parameter that participated in
    /// the expression appears in the record; unreachable parameters are
    /// absent, which consumers read as zero.
    pub fn backward(&mut self, loss: Var) -> Result<GradientRecord, GradError> {
        self.check(loss)?;
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(GradError::NotScalar {
                len: loss_node.value.len(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    self.accumulate(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.cols();
                    // dA = g . B^T, dB = A^T . g
                    let ga = matmul_nt_raw(&g, self.nodes[b].value.data(), m, n, k);
                    let gb = matmul_tn_raw(self.nodes[a].value.data(), &g, k, m, n);
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| c * v).collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Unary(kind, a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(
                            self.nodes[a]
                                .value
                                .data()
                                .iter()
                                .zip(self.nodes[idx].value.data()),
                        )
                        .map(|(gi, (&x, &y))| gi * kind.deriv(x, y))
                        .collect();
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.nodes[a].value.len()];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    let ga = vec![g[0] / n as f64; n];
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::AddRow(a, v) => {
                    self.accumulate(&mut grads, a, &g);
                    let (m, n) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let mut gv = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            gv[j] += g[r * n + j];
                        }
                    }
                    self.accumulate(&mut grads, v, &gv);
                }
                Op::SplineExpand { x, deriv } | Op::RbfExpand { x, deriv } => {
                    let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let dim = deriv.len() / (m * n).max(1);
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        for i in 0..n {
                            let base = r * n * dim + i * dim;
                            let mut acc = 0.0;
                            for d in 0..dim {
                                acc += g[base + d] * deriv[base + d];
                            }
                            gx[r * n + i] = acc;
                        }
                    }
                    self.accumulate(&mut grads, x, &gx);
                }
                Op::WaveletLayer { x, params } => {
                    let (tx, tw) = (&self.nodes[x].value, &self.nodes[params].value);
                    let (m, n) = (tx.rows(), tx.cols());
                    let j_out = tw.cols();
                    let mut gx = vec![0.0; m * n];
                    let mut gw = vec![0.0; tw.len()];
                    for i in 0..n {
                        for j in 0..j_out {
                            let w = tw.at(3 * i, j);
                            let raw = tw.at(3 * i + 2, j);
                            let sigma = softplus(raw);
                            let dsig = sigmoid(raw);
                            let mut acc_w = 0.0;
                            let mut acc_mu = 0.0;
                            let mut acc_raw = 0.0;
                            let mu = tw.at(3 * i + 1, j);
                            for s in 0..m {
                                let t = tx.data()[s * n + i] - mu;
                                let (psi, dpsi_dt, dpsi_dsigma) = mexican_hat_full(t, sigma);
                                let go = g[s * j_out + j];
                                acc_w += go * psi;
                                acc_mu += go * w * (-dpsi_dt);
                                acc_raw += go * w * dpsi_dsigma * dsig;
                                gx[s * n + i] += go * w * dpsi_dt;
                            }
                            gw[(3 * i) * j_out + j] += acc_w;
                            gw[(3 * i + 1) * j_out + j] += acc_mu;
                            gw[(3 * i + 2) * j_out + j] += acc_raw;
                        }
                    }
                    self.accumulate(&mut grads, x, &gx);
                    self.accumulate(&mut grads, params, &gw);
                }
                Op::EdgeToLayer {
                    w,
                    n_in,
                    n_out,
                    dim,
                } => {
                    let mut gw = vec![0.0; n_in * n_out * dim];
                    for i in 0..n_in {
                        for j in 0..n_out {
                            for d in 0..dim {
                                gw[(i * n_out + j) * dim + d] = g[(i * dim + d) * n_out + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, w, &gw);
                }
                Op::CrossEntropy { logits, labels } => {
                    let tl = &self.nodes[logits].value;
                    let (m, classes) = (tl.rows(), tl.cols());
                    let mut gl = vec![0.0; m * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &tl.data()[r * classes..(r + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for cidx in 0..classes {
                            let softmax = (row[cidx] - max).exp() / denom;
                            let indicator = if cidx == label { 1.0 } else { 0.0 };
                            gl[r * classes + cidx] = g[0] * (softmax - indicator) / m as f64;
                        }
                    }
                    self.accumulate(&mut grads, logits, &gl);
                }
            }
        }

        let mut record = GradientRecord::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(handle), Some(g)) = (node.handle, grads[idx].take()) {
                let tensor = Tensor::from_vec(node.value.shape().to_vec(), g)?;
                record.accumulate(handle, tensor);
            }
        }
        Ok(record)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
        match &mut grads[idx] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            None => grads[idx] = Some(contribution.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(store: &mut ParamStore, x: f64) -> ParamHandle {
        store.register(ParamGroup::KanWeights, Tensor::scalar(x))
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.silu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let eye = tape
            .constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let a = tape
            .constant(Tensor::matrix(2, 2, vec![0.3, -1.2, 7.5, 0.01]).unwrap())
            .unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let h = scalar_param(&mut store, 3.0);
        let mut tape = Tape::new();
        let x = tape.param(&store, h).unwrap();
        let loss = tape.square(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(h).unwrap().data(), &[6.0]);
    }

    #[test]
    fn silu_gradient_at_zero() {
        let mut store = ParamStore::new();
        let h = scalar_param(&mut store, 0.0);
        let mut tape = Tape::new();
        let x = tape.param(&store, h).unwrap();
        let loss = tape.silu(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(h).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unreachable_param_has_no_gradient() {
        let mut store = ParamStore::new();
        let used = scalar_param(&mut store, 2.0);
        let unused = scalar_param(&mut store, 5.0);
        let mut tape = Tape::new();
        let x = tape.param(&store, used).unwrap();
        let _also_on_tape = tape.param(&store, unused).unwrap();
        let loss = tape.square(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let h = store.register(
            ParamGroup::KanWeights,
            Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&store, h).unwrap();
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(GradError::NotScalar { .. })));
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308)).unwrap();
        let doubled = tape.scale(x, 10.0);
        assert!(matches!(doubled, Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn gradient_linearity() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g), coordinate-wise to 1e-12.
        let mut store = ParamStore::new();
        let h = store.register(
            ParamGroup::KanWeights,
            Tensor::from_vec(vec![3], vec![0.4, -1.3, 0.9]).unwrap(),
        );
        let (a, b) = (1.7, -0.6);

        let f = |tape: &mut Tape, x: Var| -> Var {
            let s = tape.square(x).unwrap();
            tape.sum(s).unwrap()
        };
        let g = |tape: &mut Tape, x: Var| -> Var {
            let s = tape.silu(x).unwrap();
            tape.mean(s).unwrap()
        };

        let mut tape = Tape::new();
        let x = tape.param(&store, h).unwrap();
        let fv = f(&mut tape, x);
        let gv = g(&mut tape, x);
        let af = tape.scale(fv, a).unwrap();
        let bg = tape.scale(gv, b).unwrap();
        let loss = tape.add(af, bg).unwrap();
        let combined = tape.backward(loss).unwrap();

        let mut tape_f = Tape::new();
        let xf = tape_f.param(&store, h).unwrap();
        let lf = f(&mut tape_f, xf);
        let gf = tape_f.backward(lf).unwrap();

        let mut tape_g = Tape::new();
        let xg = tape_g.param(&store, h).unwrap();
        let lg = g(&mut tape_g, xg);
        let gg = tape_g.backward(lg).unwrap();

        for i in 0..3 {
            let want = a * gf.get(h).unwrap().data()[i] + b * gg.get(h).unwrap().data()[i];
            let got = combined.get(h).unwrap().data()[i];
            assert!((want - got).abs() < 1e-12, "coord {i}: {want} vs {got}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(Tensor::matrix(2, 4, vec![0.5; 8]).unwrap())
            .unwrap();
        let loss = tape.cross_entropy(logits, &[1, 3]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let data = vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.4];
        let shifted: Vec<f64> = data.iter().map(|v| v + 7.3).collect();
        let labels = [2usize, 0];
        let mut t1 = Tape::new();
        let l1 = t1.constant(Tensor::matrix(2, 3, data).unwrap()).unwrap();
        let v1 = t1.cross_entropy(l1, &labels).unwrap();
        let mut t2 = Tape::new();
        let l2 = t2.constant(Tensor::matrix(2, 3, shifted).unwrap()).unwrap();
        let v2 = t2.cross_entropy(l2, &labels).unwrap();
        let (a, b) = (t1.value(v1).item().unwrap(), t2.value(v2).item().unwrap());
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn cross_entropy_confident_logit_near_zero_loss() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(Tensor::matrix(1, 3, vec![100.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap())
            .unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(GradError::LabelOutOfRange { .. })
        ));
    }
}
