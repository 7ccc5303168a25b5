//! Losses, AdamW with per-group learning rates, and the training loops.
//!
//! Three parameter groups (prompts, meta-learner, plain KAN weights) each get
//! their own learning rate, mirroring a setup with three optimizers. Batches
//! come from a full shuffle per epoch keyed by (seed, epoch), so a run is a
//! pure function of its config and seed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{KanNetwork, MetaKanNetwork, NetworkError};
use crate::rng::DetRng;
use crate::tape::{GradError, GradientRecord, ParamGroup, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("targets have {got} rows, inputs have {want}")]
    TargetMismatch { got: usize, want: usize },
    #[error("loss kind {kind:?} does not match the provided targets")]
    LossTargetKind { kind: LossKind },
    #[error("no optimizer state for a gradient handle")]
    MissingState,
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Training targets: a real matrix for regression, class indices for
/// cross-entropy.
#[derive(Debug, Clone)]
pub enum TrainTargets<'a> {
    Regression(&'a Tensor),
    Classes(&'a [usize]),
}

impl TrainTargets<'_> {
    fn rows(&self) -> usize {
        match self {
            TrainTargets::Regression(t) => t.rows(),
            TrainTargets::Classes(labels) => labels.len(),
        }
    }
}

/// Learning-rate decay applied multiplicatively on top of the group rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
    Exponential { gamma: f64 },
}

impl LrSchedule {
    /// Multiplier for `step` of `total`; always in (0, 1].
    pub fn multiplier(&self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            LrSchedule::Exponential { gamma } => gamma.powf(step as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_prompts: f64,
    pub lr_meta: f64,
    pub lr_kan: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 64,
            seed: 0,
            lr_prompts: 1e-2,
            lr_meta: 1e-3,
            lr_kan: 1e-3,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".to_string()));
        }
        for (name, lr) in [
            ("lr_prompts", self.lr_prompts),
            ("lr_meta", self.lr_meta),
            ("lr_kan", self.lr_kan),
        ] {
            if lr < 0.0 || !lr.is_finite() {
                return Err(TrainError::Config(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if self.weight_decay < 0.0 || self.weight_decay.is_nan() {
            return Err(TrainError::Config("weight_decay must be >= 0".to_string()));
        }
        if let LrSchedule::Exponential { gamma } = self.schedule {
            if gamma.is_nan() || gamma <= 0.0 || gamma > 1.0 {
                return Err(TrainError::Config(
                    "exponential gamma must be in (0, 1]".to_string(),
                ));
            }
        }
        Ok(())
    }

    fn group_lrs(&self, step: usize) -> GroupLrs {
        let mult = self.schedule.multiplier(step, self.steps);
        GroupLrs {
            prompts: self.lr_prompts * mult,
            meta: self.lr_meta * mult,
            kan: self.lr_kan * mult,
        }
    }
}

/// Effective learning rates per parameter group at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub prompts: f64,
    pub meta: f64,
    pub kan: f64,
}

impl GroupLrs {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Prompts => self.prompts,
            ParamGroup::MetaLearner => self.meta,
            ParamGroup::KanWeights => self.kan,
        }
    }
}

/// Mean squared error over all entries, built from tape ops so it is
/// differentiable.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, GradError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Stabilized mean cross-entropy of logits against integer labels.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
) -> Result<Var, GradError> {
    tape.cross_entropy(logits, labels)
}

/// Plain MSE between two tensors (evaluation helper, same definition as
/// [`mse_loss`]).
pub fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64, GradError> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let t = tape.constant(target.clone())?;
    let loss = mse_loss(&mut tape, p, t)?;
    tape.value(loss).item()
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Decoupled weight-decay Adam. Decay is applied to the parameter before the
/// moment update; bias correction is the standard one.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    state: HashMap<usize, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    pub fn with_betas(beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Allocate zero moments for every parameter in the store.
    pub fn init(&mut self, store: &ParamStore) {
        for handle in store.handles() {
            let len = store.get(handle).len();
            self.state.entry(handle.id()).or_insert_with(|| Moments {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            });
        }
    }

    /// One update over every parameter in the store. Handles absent from the
    /// gradient record receive a zero gradient (their moments still decay).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradientRecord,
        lrs: &GroupLrs,
    ) -> Result<(), TrainError> {
        for handle in store.handles() {
            let lr = lrs.for_group(handle.group());
            let state = self
                .state
                .get_mut(&handle.id())
                .ok_or(TrainError::MissingState)?;
            state.t += 1;
            let bc1 = 1.0 - self.beta1.powf(state.t as f64);
            let bc2 = 1.0 - self.beta2.powf(state.t as f64);

            let current = store.get(handle);
            let grad = grads.get(handle);
            let mut data = current.data().to_vec();
            for (idx, theta) in data.iter_mut().enumerate() {
                let g = grad.map(|t| t.data()[idx]).unwrap_or(0.0);
                *theta -= lr * self.weight_decay * *theta;
                state.m[idx] = self.beta1 * state.m[idx] + (1.0 - self.beta1) * g;
                state.v[idx] = self.beta2 * state.v[idx] + (1.0 - self.beta2) * g * g;
                let m_hat = state.m[idx] / bc1;
                let v_hat = state.v[idx] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            let shape = current.shape().to_vec();
            store.set(handle, Tensor::from_vec(shape, data)?);
        }
        Ok(())
    }
}

/// One row of the per-step loss trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr_meta: f64,
    pub lr_prompts: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// CSV with a fixed schema. The wall_ms column is reserved and always 0:
    /// artifacts are byte-identical across reruns, timing belongs in logs.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("step,loss,lr_meta,lr_prompts,wall_ms\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},0\n",
                row.step, row.loss, row.lr_meta, row.lr_prompts
            ));
        }
        out
    }
}

/// Deterministic minibatch sampler: full shuffle per epoch, PRNG keyed by
/// (seed, epoch). A partial tail smaller than the batch size starts a new
/// epoch instead of emitting a short batch.
struct BatchSampler {
    samples: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchSampler {
    fn new(samples: usize, batch_size: usize, seed: u64) -> Self {
        let mut sampler = BatchSampler {
            samples,
            batch: batch_size.min(samples),
            seed,
            epoch: 0,
            pos: 0,
            order: (0..samples).collect(),
        };
        sampler.reshuffle();
        sampler
    }

    fn reshuffle(&mut self) {
        let mut rng = DetRng::keyed(self.seed, self.epoch);
        self.order = (0..self.samples).collect();
        rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.samples {
            self.epoch += 1;
            self.reshuffle();
        }
        let batch = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        batch
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::matrix(rows.len(), cols, data).expect("gather shape")
}

/// The pieces of a model the training loop needs.
pub(crate) trait TrainableModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn model_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, GradError>;
    fn input_dim(&self) -> usize;
}

impl TrainableModel for KanNetwork {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn model_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        self.forward_on_tape(tape, store, x)
    }
    fn input_dim(&self) -> usize {
        self.shape().input_dim()
    }
}

impl TrainableModel for MetaKanNetwork {
    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn model_forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        self.forward_on_tape(tape, store, x)
    }
    fn input_dim(&self) -> usize {
        self.shape().input_dim()
    }
}

fn train_loop<M: TrainableModel>(
    net: &mut M,
    inputs: &Tensor,
    targets: &TrainTargets,
    config: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainTrace, TrainError> {
    config.validate()?;
    let samples = inputs.rows();
    if samples == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if targets.rows() != samples {
        return Err(TrainError::TargetMismatch {
            got: targets.rows(),
            want: samples,
        });
    }
    if inputs.cols() != net.input_dim() {
        return Err(TrainError::Network(NetworkError::InputLength {
            got: inputs.cols(),
            want: net.input_dim(),
        }));
    }
    match (loss_kind, targets) {
        (LossKind::Mse, TrainTargets::Regression(_)) => {}
        (LossKind::CrossEntropy, TrainTargets::Classes(_)) => {}
        _ => return Err(TrainError::LossTargetKind { kind: loss_kind }),
    }

    let mut optimizer = AdamW::new(config.weight_decay);
    optimizer.init(net.params());
    let mut sampler = BatchSampler::new(samples, config.batch_size, config.seed);
    let mut trace = TrainTrace::default();

    for step in 0..config.steps {
        let batch = sampler.next_batch().to_vec();
        let batch_x = gather_rows(inputs, &batch);

        let mut tape = Tape::new();
        let step_result: Result<(f64, GradientRecord), GradError> = (|| {
            let xv = tape.constant(batch_x)?;
            let pred = net.model_forward(&mut tape, net.params(), xv)?;
            let loss_var = match (&loss_kind, targets) {
                (LossKind::Mse, TrainTargets::Regression(y)) => {
                    let batch_y = gather_rows(y, &batch);
                    let yv = tape.constant(batch_y)?;
                    mse_loss(&mut tape, pred, yv)?
                }
                (LossKind::CrossEntropy, TrainTargets::Classes(labels)) => {
                    let batch_labels: Vec<usize> = batch.iter().map(|&r| labels[r]).collect();
                    cross_entropy_loss(&mut tape, pred, &batch_labels)?
                }
                _ => unreachable!("validated above"),
            };
            let loss = tape.value(loss_var).item()?;
            let grads = tape.backward(loss_var)?;
            Ok((loss, grads))
        })();

        let (loss, grads) = match step_result {
            Ok(ok) => ok,
            Err(GradError::NonFinite { .. }) => return Err(TrainError::Diverged { step }),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }

        let lrs = config.group_lrs(step);
        optimizer.step(net.params_mut(), &grads, &lrs)?;
        trace.rows.push(TraceRow {
            step,
            loss,
            lr_meta: lrs.meta,
            lr_prompts: lrs.prompts,
        });
    }
    Ok(trace)
}

/// Minibatch AdamW over a plain KAN's edge coefficients.
pub fn train_kan(
    net: &mut KanNetwork,
    inputs: &Tensor,
    targets: &TrainTargets,
    config: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainTrace, TrainError> {
    train_loop(net, inputs, targets, config, loss_kind)
}

/// Minibatch AdamW over a MetaKAN: each step regenerates layer weights from
/// the prompts, propagates, and updates prompts and learners with their group
/// learning rates. A single cluster reproduces the shallow algorithm exactly.
pub fn train_metakan(
    net: &mut MetaKanNetwork,
    inputs: &Tensor,
    targets: &TrainTargets,
    config: &TrainConfig,
    loss_kind: LossKind,
) -> Result<TrainTrace, TrainError> {
    train_loop(net, inputs, targets, config, loss_kind)
}
