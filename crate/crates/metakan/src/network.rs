//! KAN and MetaKAN networks.
//!
//! A KAN layer carries one learnable univariate activation per edge; the
//! layer output is the column sum of activations. A MetaKAN stores one
//! low-dimensional prompt per edge plus a small two-layer MLP per layer
//! cluster that maps prompts to activation coefficient vectors, so the
//! trainable surface shrinks from `edges x dim_w` to roughly `edges`.
//!
//! Weight layout: layer `l` packs its per-edge coefficient vectors
//! `w[i][j] (dim_w values)` into one `(n_l * dim_w) x n_{l+1}` matrix with
//! `W[i * dim_w + d, j] = w[i][j][d]`, so the spline and RBF forward passes
//! are single matmuls against the expanded basis features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{
    basis_vector, rbf_vector, wavelet_activation, BasisError, RbfSpec, SplineSpec,
    WaveletActivation,
};
use crate::cluster::{cluster_layers, ClusterPlan};
use crate::rng::DetRng;
use crate::tape::{GradError, ParamGroup, ParamHandle, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network shape needs at least two widths, got {0}")]
    TooFewWidths(usize),
    #[error("network widths must be positive")]
    ZeroWidth,
    #[error("input length {got} does not match layer width {want}")]
    InputLength { got: usize, want: usize },
    #[error("coefficient vector length {got} does not match dim_w {want}")]
    CoeffLength { got: usize, want: usize },
    #[error("cluster count {clusters} out of range for {layers} layers")]
    ClusterCount { clusters: usize, layers: usize },
    #[error("cluster plan covers {got} layers, network has {want}")]
    PlanMismatch { got: usize, want: usize },
    #[error("ka_shape needs n >= 1, got {0}")]
    KaShape(usize),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Layer widths `[n_0, ..., n_L]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    widths: Vec<usize>,
}

impl NetworkShape {
    pub fn new(widths: Vec<usize>) -> Result<Self, NetworkError> {
        if widths.len() < 2 {
            return Err(NetworkError::TooFewWidths(widths.len()));
        }
        if widths.contains(&0) {
            return Err(NetworkError::ZeroWidth);
        }
        Ok(NetworkShape { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of layers L.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Edges of layer l: `n_l * n_{l+1}`.
    pub fn edge_count(&self, layer: usize) -> usize {
        self.widths[layer] * self.widths[layer + 1]
    }

    /// `sum_l n_l * n_{l+1}` over all layers.
    pub fn total_edges(&self) -> usize {
        (0..self.depth()).map(|l| self.edge_count(l)).sum()
    }
}

/// The KA representation shape `[n, 2n+1, 1]`.
pub fn ka_shape(n: usize) -> Result<NetworkShape, NetworkError> {
    if n < 1 {
        return Err(NetworkError::KaShape(n));
    }
    NetworkShape::new(vec![n, 2 * n + 1, 1])
}

/// Which univariate family parameterizes the activation edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    BSplineSilu(SplineSpec),
    GaussianRbf(RbfSpec),
    MexicanHatWavelet,
}

impl ActivationKind {
    /// Per-edge coefficient count: `G + k + 1`, `c`, or 3.
    pub fn dim_w(&self) -> usize {
        match self {
            ActivationKind::BSplineSilu(spec) => spec.dim_w(),
            ActivationKind::GaussianRbf(spec) => spec.dim_w(),
            ActivationKind::MexicanHatWavelet => WaveletActivation::DIM_W,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ActivationKind::BSplineSilu(_) => "bspline",
            ActivationKind::GaussianRbf(_) => "rbf",
            ActivationKind::MexicanHatWavelet => "wavelet",
        }
    }
}

/// One activation edge evaluated at `t`: `phi(t; w) = w . B(t)` for the
/// linear families, amplitude-scaled Mexican hat for the wavelet.
pub fn activation_eval(kind: &ActivationKind, coeffs: &[f64], t: f64) -> Result<f64, NetworkError> {
    if coeffs.len() != kind.dim_w() {
        return Err(NetworkError::CoeffLength {
            got: coeffs.len(),
            want: kind.dim_w(),
        });
    }
    Ok(match kind {
        ActivationKind::BSplineSilu(spec) => {
            let b = basis_vector(spec, t);
            coeffs.iter().zip(&b).map(|(w, v)| w * v).sum()
        }
        ActivationKind::GaussianRbf(spec) => {
            let b = rbf_vector(spec, t);
            coeffs.iter().zip(&b).map(|(w, v)| w * v).sum()
        }
        ActivationKind::MexicanHatWavelet => {
            wavelet_activation(&WaveletActivation::from_coeffs(coeffs), t)
        }
    })
}

/// One KAN layer on a tape: basis-expand then matmul for the linear families,
/// the dedicated wavelet op otherwise.
fn layer_forward_on_tape(
    tape: &mut Tape,
    kind: &ActivationKind,
    weights: Var,
    x: Var,
) -> Result<Var, GradError> {
    match kind {
        ActivationKind::BSplineSilu(spec) => {
            let phi = tape.spline_expand(x, spec)?;
            tape.matmul(phi, weights)
        }
        ActivationKind::GaussianRbf(spec) => {
            let phi = tape.rbf_expand(x, spec)?;
            tape.matmul(phi, weights)
        }
        ActivationKind::MexicanHatWavelet => tape.wavelet_layer(x, weights),
    }
}

/// A KAN with explicit per-edge coefficients.
#[derive(Debug, Clone)]
pub struct KanNetwork {
    shape: NetworkShape,
    kind: ActivationKind,
    pub params: ParamStore,
    layers: Vec<ParamHandle>,
}

impl KanNetwork {
    /// Random initialization: spline coefficients N(0, 0.1) with the SiLU
    /// channel weight set to 1 so the residual path is active from the start;
    /// RBF weights N(0, 0.1); wavelet edges get amplitude N(0, 0.1),
    /// translation uniform over [-1, 1], and unit scale.
    pub fn new(shape: NetworkShape, kind: ActivationKind, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = DetRng::keyed(seed, 0x006b_616e);
        let dim = kind.dim_w();
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(shape.depth());
        for l in 0..shape.depth() {
            let (n_in, n_out) = (shape.widths()[l], shape.widths()[l + 1]);
            let mut w = vec![0.0; n_in * dim * n_out];
            for i in 0..n_in {
                for j in 0..n_out {
                    for d in 0..dim {
                        let v = match &kind {
                            ActivationKind::BSplineSilu(_) => {
                                if d == 0 {
                                    1.0
                                } else {
                                    rng.normal(0.0, 0.1)
                                }
                            }
                            ActivationKind::GaussianRbf(_) => rng.normal(0.0, 0.1),
                            ActivationKind::MexicanHatWavelet => match d {
                                0 => rng.normal(0.0, 0.1),
                                1 => rng.uniform(-1.0, 1.0),
                                _ => crate::basis::softplus_inv(1.0),
                            },
                        };
                        w[(i * dim + d) * n_out + j] = v;
                    }
                }
            }
            let tensor = Tensor::matrix(n_in * dim, n_out, w)?;
            layers.push(params.register(ParamGroup::KanWeights, tensor));
        }
        Ok(KanNetwork {
            shape,
            kind,
            params,
            layers,
        })
    }

    /// All-zero coefficients.
    pub fn zeros(shape: NetworkShape, kind: ActivationKind) -> Result<Self, NetworkError> {
        let dim = kind.dim_w();
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(shape.depth());
        for l in 0..shape.depth() {
            let (n_in, n_out) = (shape.widths()[l], shape.widths()[l + 1]);
            let tensor = Tensor::zeros(vec![n_in * dim, n_out]);
            layers.push(params.register(ParamGroup::KanWeights, tensor));
        }
        Ok(KanNetwork {
            shape,
            kind,
            params,
            layers,
        })
    }

    /// Assemble from explicit layer weight matrices (used by materialization
    /// and model loading).
    pub fn from_weights(
        shape: NetworkShape,
        kind: ActivationKind,
        weights: Vec<Tensor>,
    ) -> Result<Self, NetworkError> {
        if weights.len() != shape.depth() {
            return Err(NetworkError::PlanMismatch {
                got: weights.len(),
                want: shape.depth(),
            });
        }
        let dim = kind.dim_w();
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(shape.depth());
        for (l, tensor) in weights.into_iter().enumerate() {
            let (n_in, n_out) = (shape.widths()[l], shape.widths()[l + 1]);
            if tensor.rows() != n_in * dim || tensor.cols() != n_out {
                return Err(NetworkError::CoeffLength {
                    got: tensor.rows(),
                    want: n_in * dim,
                });
            }
            layers.push(params.register(ParamGroup::KanWeights, tensor));
        }
        Ok(KanNetwork {
            shape,
            kind,
            params,
            layers,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn layer_weights(&self, layer: usize) -> &Tensor {
        self.params.get(self.layers[layer])
    }

    pub fn layer_handles(&self) -> &[ParamHandle] {
        &self.layers
    }

    /// Coefficient vector of edge (input i, output j) in layer l.
    pub fn edge_weights(&self, layer: usize, i: usize, j: usize) -> Vec<f64> {
        let dim = self.kind.dim_w();
        let w = self.layer_weights(layer);
        (0..dim).map(|d| w.at(i * dim + d, j)).collect()
    }

    /// Number of stored trainable scalars (exact parameter count).
    pub fn num_trainable_scalars(&self) -> usize {
        self.params.total_scalars()
    }

    /// Forward over an explicit store (usually `&self.params`; gradcheck
    /// passes a perturbed clone).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, GradError> {
        let mut cur = x;
        for l in 0..self.shape.depth() {
            let w = tape.param(store, self.layers[l])?;
            cur = layer_forward_on_tape(tape, &self.kind, w, cur)?;
        }
        Ok(cur)
    }

    /// Batch forward: `m x n_0` in, `m x n_L` out.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        if x.cols() != self.shape.input_dim() {
            return Err(NetworkError::InputLength {
                got: x.cols(),
                want: self.shape.input_dim(),
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let out = self.forward_on_tape(&mut tape, &self.params, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let input = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&input)?.data().to_vec())
    }

    /// One layer only: `out_j = sum_i phi_{i,j}(x_i)`.
    pub fn layer_forward(&self, layer: usize, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let n_in = self.shape.widths()[layer];
        if x.len() != n_in {
            return Err(NetworkError::InputLength {
                got: x.len(),
                want: n_in,
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, n_in, x.to_vec())?)?;
        let w = tape.param(&self.params, self.layers[layer])?;
        let out = layer_forward_on_tape(&mut tape, &self.kind, w, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// The two-layer MLP that maps a prompt to one edge's coefficient vector:
/// `w = W2 . SiLU(W1 z + b1) + b2`.
#[derive(Debug, Clone)]
pub struct MetaLearner {
    prompt_dim: usize,
    d_hidden: usize,
    out_dim: usize,
    w1: ParamHandle,
    b1: ParamHandle,
    w2: ParamHandle,
    b2: ParamHandle,
}

impl MetaLearner {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) on both linear maps.
    pub fn new(
        store: &mut ParamStore,
        prompt_dim: usize,
        d_hidden: usize,
        out_dim: usize,
        rng: &mut DetRng,
    ) -> Result<Self, NetworkError> {
        let bound1 = 1.0 / (prompt_dim as f64).sqrt();
        let bound2 = 1.0 / (d_hidden as f64).sqrt();
        let w1 = Tensor::matrix(
            prompt_dim,
            d_hidden,
            (0..prompt_dim * d_hidden)
                .map(|_| rng.uniform(-bound1, bound1))
                .collect(),
        )?;
        let b1 = Tensor::from_vec(
            vec![d_hidden],
            (0..d_hidden)
                .map(|_| rng.uniform(-bound1, bound1))
                .collect(),
        )?;
        let w2 = Tensor::matrix(
            d_hidden,
            out_dim,
            (0..d_hidden * out_dim)
                .map(|_| rng.uniform(-bound2, bound2))
                .collect(),
        )?;
        let b2 = Tensor::from_vec(
            vec![out_dim],
            (0..out_dim).map(|_| rng.uniform(-bound2, bound2)).collect(),
        )?;
        Ok(MetaLearner {
            prompt_dim,
            d_hidden,
            out_dim,
            w1: store.register(ParamGroup::MetaLearner, w1),
            b1: store.register(ParamGroup::MetaLearner, b1),
            w2: store.register(ParamGroup::MetaLearner, w2),
            b2: store.register(ParamGroup::MetaLearner, b2),
        })
    }

    pub fn zeros(
        store: &mut ParamStore,
        prompt_dim: usize,
        d_hidden: usize,
        out_dim: usize,
    ) -> Self {
        MetaLearner {
            prompt_dim,
            d_hidden,
            out_dim,
            w1: store.register(
                ParamGroup::MetaLearner,
                Tensor::zeros(vec![prompt_dim, d_hidden]),
            ),
            b1: store.register(ParamGroup::MetaLearner, Tensor::zeros(vec![d_hidden])),
            w2: store.register(
                ParamGroup::MetaLearner,
                Tensor::zeros(vec![d_hidden, out_dim]),
            ),
            b2: store.register(ParamGroup::MetaLearner, Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> Self {
        let (prompt_dim, d_hidden, out_dim) = (w1.rows(), w1.cols(), w2.cols());
        MetaLearner {
            prompt_dim,
            d_hidden,
            out_dim,
            w1: store.register(ParamGroup::MetaLearner, w1),
            b1: store.register(ParamGroup::MetaLearner, b1),
            w2: store.register(ParamGroup::MetaLearner, w2),
            b2: store.register(ParamGroup::MetaLearner, b2),
        }
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn handles(&self) -> [ParamHandle; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Exact trainable count: `(prompt_dim + 1) * d_hidden + (d_hidden + 1) * out_dim`.
    pub fn param_count(&self) -> usize {
        (self.prompt_dim + 1) * self.d_hidden + (self.d_hidden + 1) * self.out_dim
    }

    /// Generate coefficient rows for a batch of prompts (`rows x prompt_dim`
    /// in, `rows x out_dim` out).
    pub fn generate_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
    ) -> Result<Var, GradError> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.matmul(z, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h)?;
        let out = tape.matmul(h, w2)?;
        tape.add_row(out, b2)
    }

    /// Generate one coefficient vector from a single prompt.
    pub fn generate(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
        let out = self.generate_on_tape(&mut tape, store, zv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// A MetaKAN: prompts + clustered meta-learners in place of explicit edge
/// coefficients.
#[derive(Debug, Clone)]
pub struct MetaKanNetwork {
    shape: NetworkShape,
    kind: ActivationKind,
    plan: ClusterPlan,
    prompt_dim: usize,
    d_hidden: usize,
    pub params: ParamStore,
    prompts: Vec<ParamHandle>,
    learners: Vec<MetaLearner>,
}

impl MetaKanNetwork {
    /// Random initialization with a cluster plan derived from the layer
    /// output channels `[n_1, ..., n_L]`. Prompts are standard normal.
    pub fn new(
        shape: NetworkShape,
        kind: ActivationKind,
        clusters: usize,
        d_hidden: usize,
        prompt_dim: usize,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        let channels: Vec<f64> = shape.widths()[1..].iter().map(|&w| w as f64).collect();
        let plan = cluster_layers(&channels, clusters).map_err(|_| NetworkError::ClusterCount {
            clusters,
            layers: shape.depth(),
        })?;
        Self::with_plan(shape, kind, plan, d_hidden, prompt_dim, seed)
    }

    pub fn with_plan(
        shape: NetworkShape,
        kind: ActivationKind,
        plan: ClusterPlan,
        d_hidden: usize,
        prompt_dim: usize,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        if plan.num_layers() != shape.depth() {
            return Err(NetworkError::PlanMismatch {
                got: plan.num_layers(),
                want: shape.depth(),
            });
        }
        let mut rng = DetRng::keyed(seed, 0x6d65_7461);
        let mut params = ParamStore::new();
        let mut prompts = Vec::with_capacity(shape.depth());
        for l in 0..shape.depth() {
            let edges = shape.edge_count(l);
            let z = Tensor::matrix(
                edges,
                prompt_dim,
                (0..edges * prompt_dim)
                    .map(|_| rng.normal(0.0, 1.0))
                    .collect(),
            )?;
            prompts.push(params.register(ParamGroup::Prompts, z));
        }
        let dim = kind.dim_w();
        let learners = (0..plan.num_clusters())
            .map(|_| MetaLearner::new(&mut params, prompt_dim, d_hidden, dim, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetaKanNetwork {
            shape,
            kind,
            plan,
            prompt_dim,
            d_hidden,
            params,
            prompts,
            learners,
        })
    }

    /// All-zero prompts and learners (every generated weight is zero).
    pub fn zeros(
        shape: NetworkShape,
        kind: ActivationKind,
        clusters: usize,
        d_hidden: usize,
        prompt_dim: usize,
    ) -> Result<Self, NetworkError> {
        let channels: Vec<f64> = shape.widths()[1..].iter().map(|&w| w as f64).collect();
        let plan = cluster_layers(&channels, clusters).map_err(|_| NetworkError::ClusterCount {
            clusters,
            layers: shape.depth(),
        })?;
        let mut params = ParamStore::new();
        let mut prompts = Vec::with_capacity(shape.depth());
        for l in 0..shape.depth() {
            let edges = shape.edge_count(l);
            prompts
                .push(params.register(ParamGroup::Prompts, Tensor::zeros(vec![edges, prompt_dim])));
        }
        let dim = kind.dim_w();
        let learners = (0..plan.num_clusters())
            .map(|_| MetaLearner::zeros(&mut params, prompt_dim, d_hidden, dim))
            .collect();
        Ok(MetaKanNetwork {
            shape,
            kind,
            plan,
            prompt_dim,
            d_hidden,
            params,
            prompts,
            learners,
        })
    }

    pub fn from_parts(
        shape: NetworkShape,
        kind: ActivationKind,
        plan: ClusterPlan,
        prompt_tensors: Vec<Tensor>,
        learner_tensors: Vec<[Tensor; 4]>,
    ) -> Result<Self, NetworkError> {
        if plan.num_layers() != shape.depth() || prompt_tensors.len() != shape.depth() {
            return Err(NetworkError::PlanMismatch {
                got: prompt_tensors.len(),
                want: shape.depth(),
            });
        }
        let mut params = ParamStore::new();
        let prompt_dim = prompt_tensors.first().map(|t| t.cols()).unwrap_or(1);
        let mut prompts = Vec::with_capacity(shape.depth());
        for z in prompt_tensors {
            prompts.push(params.register(ParamGroup::Prompts, z));
        }
        let mut learners = Vec::with_capacity(learner_tensors.len());
        let mut d_hidden = 0;
        for [w1, b1, w2, b2] in learner_tensors {
            d_hidden = w1.cols();
            learners.push(MetaLearner::from_tensors(&mut params, w1, b1, w2, b2));
        }
        Ok(MetaKanNetwork {
            shape,
            kind,
            plan,
            prompt_dim,
            d_hidden,
            params,
            prompts,
            learners,
        })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn plan(&self) -> &ClusterPlan {
        &self.plan
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn prompts(&self, layer: usize) -> &Tensor {
        self.params.get(self.prompts[layer])
    }

    pub fn prompt_handles(&self) -> &[ParamHandle] {
        &self.prompts
    }

    pub fn learners(&self) -> &[MetaLearner] {
        &self.learners
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.total_scalars()
    }

    /// The generated layer weight matrix as a tape subgraph; gradients flow
    /// into the prompts and the cluster's learner.
    fn layer_weights_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
    ) -> Result<Var, GradError> {
        let cluster = self.plan.cluster_of(layer);
        let learner = &self.learners[cluster];
        let z = tape.param(store, self.prompts[layer])?;
        let generated = learner.generate_on_tape(tape, store, z)?;
        let (n_in, n_out) = (self.shape.widths()[layer], self.shape.widths()[layer + 1]);
        tape.edge_to_layer(generated, n_in, n_out, self.kind.dim_w())
    }

    /// Forward over an explicit store (usually `&self.params`; gradcheck
    /// passes a perturbed clone).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, GradError> {
        let mut cur = x;
        for l in 0..self.shape.depth() {
            let w = self.layer_weights_on_tape(tape, store, l)?;
            cur = layer_forward_on_tape(tape, &self.kind, w, cur)?;
        }
        Ok(cur)
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        if x.cols() != self.shape.input_dim() {
            return Err(NetworkError::InputLength {
                got: x.cols(),
                want: self.shape.input_dim(),
            });
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let out = self.forward_on_tape(&mut tape, &self.params, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        let input = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.forward_batch(&input)?.data().to_vec())
    }

    /// The generated weight matrix of one layer as a plain tensor.
    pub fn generated_layer_weights(&self, layer: usize) -> Result<Tensor, NetworkError> {
        let mut tape = Tape::new();
        let w = self.layer_weights_on_tape(&mut tape, &self.params, layer)?;
        Ok(tape.value(w).clone())
    }

    /// Expand into an ordinary KAN by evaluating every prompt through its
    /// cluster's learner. The expansion runs the identical tape subgraph the
    /// forward pass uses, so `materialize(..).forward_batch` reproduces
    /// [`MetaKanNetwork::forward_batch`] exactly.
    pub fn materialize(&self) -> Result<KanNetwork, NetworkError> {
        let weights = (0..self.shape.depth())
            .map(|l| self.generated_layer_weights(l))
            .collect::<Result<Vec<_>, _>>()?;
        KanNetwork::from_weights(self.shape.clone(), self.kind.clone(), weights)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn cubic_kind(grid: usize) -> ActivationKind {
        ActivationKind::BSplineSilu(SplineSpec::default_cubic(grid).unwrap())
    }

    #[test]
    fn ka_shape_values() {
        assert_eq!(ka_shape(2).unwrap().widths(), &[2, 5, 1]);
        assert_eq!(ka_shape(1).unwrap().widths(), &[1, 3, 1]);
        assert_eq!(ka_shape(4).unwrap().widths(), &[4, 9, 1]);
        assert!(ka_shape(0).is_err());
    }

    #[test]
    fn activation_eval_basis_selection() {
        let kind = cubic_kind(5);
        let spec = SplineSpec::default_cubic(5).unwrap();
        let dim = kind.dim_w();
        let t = 0.37;
        // Zero coefficients.
        assert_eq!(activation_eval(&kind, &vec![0.0; dim], t).unwrap(), 0.0);
        // e_0 selects the SiLU channel.
        let mut e0 = vec![0.0; dim];
        e0[0] = 1.0;
        assert_eq!(
            activation_eval(&kind, &e0, t).unwrap(),
            crate::basis::silu(t)
        );
        // e_j selects basis function j.
        for j in 1..dim {
            let mut ej = vec![0.0; dim];
            ej[j] = 1.0;
            let b = basis_vector(&spec, t);
            assert_eq!(activation_eval(&kind, &ej, t).unwrap(), b[j]);
        }
        // Wrong length errors.
        assert!(activation_eval(&kind, &vec![0.0; dim + 1], t).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        for kind in [
            cubic_kind(5),
            ActivationKind::GaussianRbf(RbfSpec::uniform(8, (-1.0, 1.0)).unwrap()),
            ActivationKind::MexicanHatWavelet,
        ] {
            let net =
                KanNetwork::zeros(NetworkShape::new(vec![2, 3, 2, 1]).unwrap(), kind).unwrap();
            let y = net.forward(&[0.3, -0.8]).unwrap();
            assert_eq!(y, vec![0.0]);
        }
    }

    #[test]
    fn single_edge_silu_selection() {
        // Shape [1,1] with w = e_0 computes y = SiLU(x).
        let kind = cubic_kind(5);
        let mut net = KanNetwork::zeros(NetworkShape::new(vec![1, 1]).unwrap(), kind).unwrap();
        let handle = net.layer_handles()[0];
        let mut w = net.params.get(handle).clone();
        w.data_mut()[0] = 1.0;
        net.params.set(handle, w);
        for &x in &[-1.3, 0.0, 0.42, 2.0] {
            let y = net.forward(&[x]).unwrap();
            assert!((y[0] - crate::basis::silu(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_forward_matches_double_loop_oracle() {
        // Random 3-in 2-out single layer vs the naive scalar summation.
        for (kind, label) in [
            (cubic_kind(5), "bspline"),
            (
                ActivationKind::GaussianRbf(RbfSpec::uniform(6, (-1.0, 1.0)).unwrap()),
                "rbf",
            ),
            (ActivationKind::MexicanHatWavelet, "wavelet"),
        ] {
            let shape = NetworkShape::new(vec![3, 2]).unwrap();
            let net = KanNetwork::new(shape, kind.clone(), 99).unwrap();
            let x = [0.31, -0.62, 0.85];
            let got = net.forward(&x).unwrap();
            for j in 0..2 {
                let mut want = 0.0;
                for (i, &xi) in x.iter().enumerate() {
                    let w = net.edge_weights(0, i, j);
                    want += activation_eval(&kind, &w, xi).unwrap();
                }
                assert!(
                    (got[j] - want).abs() < 1e-12,
                    "{label} output {j}: {} vs {}",
                    got[j],
                    want
                );
            }
        }
    }

    #[test]
    fn depth_one_forward_is_the_layer_map() {
        let net =
            KanNetwork::new(NetworkShape::new(vec![3, 2]).unwrap(), cubic_kind(5), 13).unwrap();
        let x = [0.2, -0.5, 0.9];
        assert_eq!(net.forward(&x).unwrap(), net.layer_forward(0, &x).unwrap());
    }

    #[test]
    fn deep_forward_composes_layers() {
        let kind = cubic_kind(5);
        let net =
            KanNetwork::new(NetworkShape::new(vec![2, 3, 1]).unwrap(), kind.clone(), 7).unwrap();
        let x = [0.4, -0.9];
        let got = net.forward(&x).unwrap();

        // Oracle: evaluate layer by layer through the scalar path.
        let mut cur = x.to_vec();
        for l in 0..net.shape().depth() {
            let n_out = net.shape().widths()[l + 1];
            let mut next = vec![0.0; n_out];
            for (j, slot) in next.iter_mut().enumerate() {
                for (i, &xi) in cur.iter().enumerate() {
                    *slot += activation_eval(&kind, &net.edge_weights(l, i, j), xi).unwrap();
                }
            }
            cur = next;
        }
        assert!((got[0] - cur[0]).abs() < 1e-12, "{} vs {}", got[0], cur[0]);
    }

    #[test]
    fn meta_generate_constant_head() {
        // W1 = 0, b1 = 0, b2 = v makes the generator constant in z.
        let mut store = ParamStore::new();
        let learner = MetaLearner::zeros(&mut store, 1, 4, 3);
        let b2 = learner.handles()[3];
        store.set(b2, Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        for &z in &[-3.0, 0.0, 0.7] {
            let w = learner.generate(&store, &[z]).unwrap();
            assert_eq!(w, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn meta_generate_matches_straight_line_arithmetic() {
        let mut store = ParamStore::new();
        let mut rng = DetRng::new(17);
        let learner = MetaLearner::new(&mut store, 1, 5, 4, &mut rng).unwrap();
        let z = 0.7;
        let got = learner.generate(&store, &[z]).unwrap();

        // Straight-line oracle: h = silu(z*W1 + b1); w = h.W2 + b2.
        let [w1, b1, w2, b2] = learner.handles();
        let (w1, b1, w2, b2) = (store.get(w1), store.get(b1), store.get(w2), store.get(b2));
        let mut h = [0.0; 5];
        for (k, slot) in h.iter_mut().enumerate() {
            *slot = crate::basis::silu(z * w1.data()[k] + b1.data()[k]);
        }
        for j in 0..4 {
            let mut want = b2.data()[j];
            for (k, &hk) in h.iter().enumerate() {
                want += hk * w2.at(k, j);
            }
            assert!(
                (got[j] - want).abs() < 1e-14,
                "coord {j}: {} vs {want}",
                got[j]
            );
        }
    }

    #[test]
    fn zero_learners_materialize_to_zero_weights() {
        let net = MetaKanNetwork::zeros(
            NetworkShape::new(vec![2, 3, 1]).unwrap(),
            cubic_kind(5),
            1,
            8,
            1,
        )
        .unwrap();
        let kan = net.materialize().unwrap();
        for l in 0..2 {
            assert!(kan.layer_weights(l).data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(net.forward(&[0.5, -0.5]).unwrap(), vec![0.0]);
    }

    #[test]
    fn materialization_equivalence() {
        let mut rng = DetRng::new(2024);
        for trial in 0..20 {
            let kind = match trial % 3 {
                0 => cubic_kind(5),
                1 => ActivationKind::GaussianRbf(RbfSpec::uniform(5, (-1.0, 1.0)).unwrap()),
                _ => ActivationKind::MexicanHatWavelet,
            };
            let shape = NetworkShape::new(vec![2, 4, 3, 1]).unwrap();
            let clusters = 1 + (trial % 2);
            let net =
                MetaKanNetwork::new(shape, kind, clusters, 8, 1, 1000 + trial as u64).unwrap();
            let kan = net.materialize().unwrap();
            for _ in 0..5 {
                let x = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
                let a = net.forward(&x).unwrap();
                let b = kan.forward(&x).unwrap();
                assert!((a[0] - b[0]).abs() <= 1e-12, "{} vs {}", a[0], b[0]);
            }
        }
    }

    #[test]
    fn cluster_isolation() {
        // Perturbing one cluster's learner only changes that cluster's
        // generated weights.
        let shape = NetworkShape::new(vec![2, 8, 8, 64, 64]).unwrap();
        let mut net = MetaKanNetwork::new(shape, cubic_kind(5), 2, 8, 1, 5).unwrap();
        assert_eq!(net.plan().num_clusters(), 2);
        let before: Vec<Tensor> = (0..4)
            .map(|l| net.generated_layer_weights(l).unwrap())
            .collect();

        // Nudge cluster 1's output bias.
        let b2 = net.learners()[1].handles()[3];
        let mut t = net.params.get(b2).clone();
        t.data_mut()[0] += 1.0;
        net.params.set(b2, t);

        for l in 0..4 {
            let after = net.generated_layer_weights(l).unwrap();
            let changed = after.data() != before[l].data();
            let in_cluster_1 = net.plan().cluster_of(l) == 1;
            assert_eq!(changed, in_cluster_1, "layer {l}");
        }
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = KanNetwork::zeros(NetworkShape::new(vec![3, 1]).unwrap(), cubic_kind(5)).unwrap();
        assert!(net.forward(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn forward_rejects_non_finite_input() {
        let net = KanNetwork::zeros(NetworkShape::new(vec![2, 1]).unwrap(), cubic_kind(5)).unwrap();
        let bad = Tensor::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(net.forward_batch(&bad).is_err());
    }
}
