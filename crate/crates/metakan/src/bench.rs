//! Function-fitting benchmarks: target registry, deterministic dataset
//! generation, experiment runner, and comparison sweeps.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, RbfSpec, SplineSpec};
use crate::count::{count_params, CountError, ModelKind};
use crate::network::{ActivationKind, KanNetwork, MetaKanNetwork, NetworkError, NetworkShape};
use crate::rng::DetRng;
use crate::tape::{GradError, ParamGroup};
use crate::tensor::Tensor;
use crate::train::{
    mse_value, train_kan, train_metakan, LossKind, TrainConfig, TrainError, TrainTargets,
    TrainTrace,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown target function '{0}'")]
    UnknownTarget(String),
    #[error("target '{name}' requires an input dimension")]
    DimRequired { name: String },
    #[error("target '{name}' has fixed dimension {expected}, got {got}")]
    DimMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("model input dim {model} does not match target dim {target}")]
    ShapeTargetMismatch { model: usize, target: usize },
    #[error("test set must be nonempty")]
    EmptyTestSet,
    #[error("train set must be nonempty")]
    EmptyTrainSet,
    #[error("a sweep needs at least two model configs, got {0}")]
    TooFewConfigs(usize),
    #[error("model kind {0:?} cannot be trained (counting only)")]
    UntrainableKind(ModelKind),
    #[error(transparent)]
    Count(#[from] CountError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// Shared evaluator of a target function.
pub type TargetEval = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A named deterministic target `R^n -> R` with a per-coordinate box domain.
#[derive(Clone)]
pub struct TargetFunction {
    name: String,
    input_dim: usize,
    domain: Vec<(f64, f64)>,
    eval: TargetEval,
}

impl std::fmt::Debug for TargetFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetFunction")
            .field("name", &self.name)
            .field("input_dim", &self.input_dim)
            .finish()
    }
}

impl TargetFunction {
    /// User extension point: any deterministic finite evaluator works.
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        TargetFunction {
            name: name.into(),
            input_dim,
            domain: vec![(-1.0, 1.0); input_dim],
            eval: Arc::new(eval),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.eval)(x)
    }
}

pub const BUILTIN_TARGETS: &[&str] = &[
    "product2",
    "sinsq_exp4",
    "f1_mean_sinsq",
    "f2_poly",
    "f3_gauss",
];

/// Look up a shipped target. `product2` and `sinsq_exp4` have fixed
/// dimensions; the `f1/f2/f3` families require `input_dim`.
pub fn lookup(name: &str, input_dim: Option<usize>) -> Result<TargetFunction, BenchError> {
    let fixed = |expected: usize| -> Result<usize, BenchError> {
        match input_dim {
            None => Ok(expected),
            Some(n) if n == expected => Ok(expected),
            Some(n) => Err(BenchError::DimMismatch {
                name: name.to_string(),
                expected,
                got: n,
            }),
        }
    };
    let required = || -> Result<usize, BenchError> {
        input_dim.ok_or_else(|| BenchError::DimRequired {
            name: name.to_string(),
        })
    };
    match name {
        "product2" => {
            let n = fixed(2)?;
            Ok(TargetFunction::new("product2", n, |x| x[0] * x[1]))
        }
        "sinsq_exp4" => {
            let n = fixed(4)?;
            Ok(TargetFunction::new("sinsq_exp4", n, |x| {
                let pi = std::f64::consts::PI;
                (0.5 * ((pi * (x[0] * x[0] + x[1] * x[1])).sin()
                    + (pi * (x[2] * x[2] + x[3] * x[3])).sin()))
                .exp()
            }))
        }
        "f1_mean_sinsq" => {
            let n = required()?;
            Ok(TargetFunction::new("f1_mean_sinsq", n, move |x| {
                let mean: f64 = x
                    .iter()
                    .map(|&xi| {
                        let s = (std::f64::consts::PI * xi / 2.0).sin();
                        s * s
                    })
                    .sum::<f64>()
                    / n as f64;
                mean.exp()
            }))
        }
        "f2_poly" => {
            let n = required()?;
            Ok(TargetFunction::new("f2_poly", n, |x| {
                x.iter().map(|&xi| xi * xi + xi * xi * xi).sum()
            }))
        }
        "f3_gauss" => {
            let n = required()?;
            Ok(TargetFunction::new("f3_gauss", n, move |x| {
                (-x.iter().map(|&xi| xi * xi).sum::<f64>() / n as f64).exp()
            }))
        }
        other => Err(BenchError::UnknownTarget(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub function: String,
    pub seed: u64,
    pub samples: usize,
}

/// Inputs with exact (noise-free) labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub provenance: Provenance,
}

/// Sample `samples` points i.i.d. uniformly over the target's domain and
/// label them by exact evaluation.
pub fn generate(f: &TargetFunction, samples: usize, seed: u64) -> Dataset {
    let n = f.input_dim();
    let mut rng = DetRng::keyed(seed, 0x6461_7461);
    let mut xs = Vec::with_capacity(samples * n);
    let mut ys = Vec::with_capacity(samples);
    let mut point = vec![0.0; n];
    for _ in 0..samples {
        for (d, slot) in point.iter_mut().enumerate() {
            let (lo, hi) = f.domain()[d];
            *slot = rng.uniform(lo, hi);
        }
        xs.extend_from_slice(&point);
        ys.push(f.eval(&point));
    }
    Dataset {
        x: Tensor::matrix(samples, n, xs).expect("sample shape"),
        y: Tensor::matrix(samples, 1, ys).expect("label shape"),
        provenance: Provenance {
            function: f.name().to_string(),
            seed,
            samples,
        },
    }
}

impl Dataset {
    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    /// Split by index: the first `n_train` rows train, the rest test.
    /// Disjoint and exhaustive by construction.
    pub fn split(&self, n_train: usize) -> Result<(Dataset, Dataset), BenchError> {
        let total = self.samples();
        if n_train == 0 {
            return Err(BenchError::EmptyTrainSet);
        }
        if n_train >= total {
            return Err(BenchError::EmptyTestSet);
        }
        let take = |range: std::ops::Range<usize>| -> Dataset {
            let cols = self.x.cols();
            let xs = self.x.data()[range.start * cols..range.end * cols].to_vec();
            let ys = self.y.data()[range.start..range.end].to_vec();
            Dataset {
                x: Tensor::matrix(range.end - range.start, cols, xs).expect("split"),
                y: Tensor::matrix(range.end - range.start, 1, ys).expect("split"),
                provenance: self.provenance.clone(),
            }
        };
        Ok((take(0..n_train), take(n_train..total)))
    }
}

/// Declarative model description shared by the experiment runner and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub shape: Vec<usize>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_centers")]
    pub centers: usize,
    #[serde(default)]
    pub rbf_bandwidth: Option<f64>,
    #[serde(default = "default_d_hidden")]
    pub d_hidden: usize,
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    #[serde(default = "default_prompt_dim")]
    pub prompt_dim: usize,
}

fn default_grid() -> usize {
    5
}
fn default_order() -> usize {
    3
}
fn default_centers() -> usize {
    8
}
fn default_d_hidden() -> usize {
    32
}
fn default_clusters() -> usize {
    1
}
fn default_prompt_dim() -> usize {
    1
}

impl ModelSpec {
    pub fn new(kind: ModelKind, shape: Vec<usize>) -> Self {
        ModelSpec {
            kind,
            shape,
            grid: default_grid(),
            order: default_order(),
            centers: default_centers(),
            rbf_bandwidth: None,
            d_hidden: default_d_hidden(),
            clusters: default_clusters(),
            prompt_dim: default_prompt_dim(),
        }
    }

    pub fn network_shape(&self) -> Result<NetworkShape, BenchError> {
        Ok(NetworkShape::new(self.shape.clone())?)
    }

    pub fn dim_w(&self) -> usize {
        self.kind.dim_w(self.grid, self.order, self.centers)
    }

    pub fn activation_kind(&self) -> Result<ActivationKind, BenchError> {
        Ok(match self.kind {
            ModelKind::Kan | ModelKind::MetaKan => ActivationKind::BSplineSilu(
                SplineSpec::uniform(self.grid, self.order, (-1.0, 1.0))?,
            ),
            ModelKind::FastKan | ModelKind::MetaFastKan => {
                let spec = match self.rbf_bandwidth {
                    Some(bw) => {
                        let base = RbfSpec::uniform(self.centers, (-1.0, 1.0))?;
                        RbfSpec::new(base.centers().to_vec(), bw)?
                    }
                    None => RbfSpec::uniform(self.centers, (-1.0, 1.0))?,
                };
                ActivationKind::GaussianRbf(spec)
            }
            ModelKind::WavKan | ModelKind::MetaWavKan => ActivationKind::MexicanHatWavelet,
            ModelKind::Mlp => return Err(BenchError::UntrainableKind(ModelKind::Mlp)),
        })
    }

    /// Formula-mode parameter count.
    pub fn params_formula(&self) -> Result<u64, BenchError> {
        let shape = self.network_shape()?;
        Ok(count_params(
            self.kind,
            &shape,
            self.dim_w(),
            self.d_hidden,
            self.clusters,
            self.prompt_dim,
        ))
    }

    pub fn build(&self, seed: u64) -> Result<BuiltModel, BenchError> {
        let shape = self.network_shape()?;
        let kind = self.activation_kind()?;
        Ok(if self.kind.is_meta() {
            BuiltModel::MetaKan(MetaKanNetwork::new(
                shape,
                kind,
                self.clusters,
                self.d_hidden,
                self.prompt_dim,
                seed,
            )?)
        } else {
            BuiltModel::Kan(KanNetwork::new(shape, kind, seed)?)
        })
    }
}

#[derive(Debug, Clone)]
pub enum BuiltModel {
    Kan(KanNetwork),
    MetaKan(MetaKanNetwork),
}

impl BuiltModel {
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        match self {
            BuiltModel::Kan(net) => net.forward_batch(x),
            BuiltModel::MetaKan(net) => net.forward_batch(x),
        }
    }

    pub fn num_trainable_scalars(&self) -> usize {
        match self {
            BuiltModel::Kan(net) => net.num_trainable_scalars(),
            BuiltModel::MetaKan(net) => net.num_trainable_scalars(),
        }
    }

    pub fn train(
        &mut self,
        x: &Tensor,
        y: &TrainTargets,
        config: &TrainConfig,
        loss: LossKind,
    ) -> Result<TrainTrace, TrainError> {
        match self {
            BuiltModel::Kan(net) => train_kan(net, x, y, config, loss),
            BuiltModel::MetaKan(net) => train_metakan(net, x, y, config, loss),
        }
    }

    pub fn scalars_by_group(&self) -> Vec<(ParamGroup, usize)> {
        let params = match self {
            BuiltModel::Kan(net) => &net.params,
            BuiltModel::MetaKan(net) => &net.params,
        };
        [
            ParamGroup::Prompts,
            ParamGroup::MetaLearner,
            ParamGroup::KanWeights,
        ]
        .into_iter()
        .map(|g| (g, params.scalars_in_group(g)))
        .filter(|(_, n)| *n > 0)
        .collect()
    }
}

/// Everything one experiment needs besides the target itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

fn default_train_samples() -> usize {
    3000
}
fn default_test_samples() -> usize {
    1000
}

/// Result of one training run. `wall_ms` is always 0 in artifacts so reruns
/// are byte-identical; timing goes to logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub model: String,
    pub shape: Vec<usize>,
    pub grid: Option<usize>,
    pub order: Option<usize>,
    pub centers: Option<usize>,
    pub d_hidden: Option<usize>,
    pub clusters: Option<usize>,
    pub prompt_dim: Option<usize>,
    pub params_formula: u64,
    pub params_exact: u64,
    pub train_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub wall_ms: u64,
    pub diverged: bool,
    pub divergence_step: Option<usize>,
}

impl RunReport {
    /// CSV header matching [`RunReport::csv_row`].
    pub fn csv_header() -> &'static str {
        "name,model,shape,G,k,c,d_hidden,C,prompt_dim,params_formula,params_exact,train_mse,test_mse,steps,seed,wall_ms,diverged"
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let mse = |v: &Option<f64>| {
            v.map(|x| x.to_string())
                .unwrap_or_else(|| "NaN".to_string())
        };
        let shape = self
            .shape
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join("x");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.name,
            self.model,
            shape,
            opt(&self.grid),
            opt(&self.order),
            opt(&self.centers),
            opt(&self.d_hidden),
            opt(&self.clusters),
            opt(&self.prompt_dim),
            self.params_formula,
            self.params_exact,
            mse(&self.train_mse),
            mse(&self.test_mse),
            self.steps,
            self.seed,
            self.wall_ms,
            self.diverged
        )
    }
}

fn spec_report_fields(spec: &ModelSpec) -> (Option<usize>, Option<usize>, Option<usize>) {
    match spec.kind {
        ModelKind::Kan | ModelKind::MetaKan => (Some(spec.grid), Some(spec.order), None),
        ModelKind::FastKan | ModelKind::MetaFastKan => (None, None, Some(spec.centers)),
        _ => (None, None, None),
    }
}

/// Train one configured model on a target and evaluate on a held-out split.
/// Divergence lands in the report rather than an error; the wall time is
/// logged to stderr only.
pub fn run_experiment(
    target: &TargetFunction,
    config: &ExperimentConfig,
) -> Result<RunReport, BenchError> {
    if config.test_samples == 0 {
        return Err(BenchError::EmptyTestSet);
    }
    if config.train_samples == 0 {
        return Err(BenchError::EmptyTrainSet);
    }
    let shape = config.model.network_shape()?;
    if shape.input_dim() != target.input_dim() {
        return Err(BenchError::ShapeTargetMismatch {
            model: shape.input_dim(),
            target: target.input_dim(),
        });
    }

    let seed = config.train.seed;
    let data = generate(target, config.train_samples + config.test_samples, seed);
    let (train_set, test_set) = data.split(config.train_samples)?;

    let mut model = config.model.build(seed)?;
    let params_formula = config.model.params_formula()?;
    let params_exact = model.num_trainable_scalars() as u64;
    let (grid, order, centers) = spec_report_fields(&config.model);
    let meta_fields = config.model.kind.is_meta();

    let started = Instant::now();
    let outcome = model.train(
        &train_set.x,
        &TrainTargets::Regression(&train_set.y),
        &config.train,
        LossKind::Mse,
    );
    let elapsed = started.elapsed();
    eprintln!(
        "run {} / {}: {} steps in {:.1?}",
        target.name(),
        config.model.kind.label(),
        config.train.steps,
        elapsed
    );

    let mut report = RunReport {
        name: target.name().to_string(),
        model: config.model.kind.label().to_string(),
        shape: config.model.shape.clone(),
        grid,
        order,
        centers,
        d_hidden: meta_fields.then_some(config.model.d_hidden),
        clusters: meta_fields.then_some(config.model.clusters),
        prompt_dim: meta_fields.then_some(config.model.prompt_dim),
        params_formula,
        params_exact,
        train_mse: None,
        test_mse: None,
        steps: config.train.steps,
        seed,
        wall_ms: 0,
        diverged: false,
        divergence_step: None,
    };

    match outcome {
        Ok(_trace) => {
            let train_pred = model.forward_batch(&train_set.x)?;
            let test_pred = model.forward_batch(&test_set.x)?;
            report.train_mse = Some(mse_value(&train_pred, &train_set.y)?);
            report.test_mse = Some(mse_value(&test_pred, &test_set.y)?);
        }
        Err(TrainError::Diverged { step }) => {
            report.diverged = true;
            report.divergence_step = Some(step);
        }
        Err(other) => return Err(other.into()),
    }
    Ok(report)
}

/// Like [`run_experiment`] but also returns the trained model and its loss
/// trace (used by the CLI fit command).
pub fn run_experiment_with_artifacts(
    target: &TargetFunction,
    config: &ExperimentConfig,
) -> Result<(RunReport, Option<BuiltModel>, TrainTrace), BenchError> {
    if config.test_samples == 0 {
        return Err(BenchError::EmptyTestSet);
    }
    if config.train_samples == 0 {
        return Err(BenchError::EmptyTrainSet);
    }
    let shape = config.model.network_shape()?;
    if shape.input_dim() != target.input_dim() {
        return Err(BenchError::ShapeTargetMismatch {
            model: shape.input_dim(),
            target: target.input_dim(),
        });
    }
    let seed = config.train.seed;
    let data = generate(target, config.train_samples + config.test_samples, seed);
    let (train_set, test_set) = data.split(config.train_samples)?;
    let mut model = config.model.build(seed)?;
    let params_formula = config.model.params_formula()?;
    let params_exact = model.num_trainable_scalars() as u64;
    let (grid, order, centers) = spec_report_fields(&config.model);
    let meta_fields = config.model.kind.is_meta();

    let mut report = RunReport {
        name: target.name().to_string(),
        model: config.model.kind.label().to_string(),
        shape: config.model.shape.clone(),
        grid,
        order,
        centers,
        d_hidden: meta_fields.then_some(config.model.d_hidden),
        clusters: meta_fields.then_some(config.model.clusters),
        prompt_dim: meta_fields.then_some(config.model.prompt_dim),
        params_formula,
        params_exact,
        train_mse: None,
        test_mse: None,
        steps: config.train.steps,
        seed,
        wall_ms: 0,
        diverged: false,
        divergence_step: None,
    };

    match model.train(
        &train_set.x,
        &TrainTargets::Regression(&train_set.y),
        &config.train,
        LossKind::Mse,
    ) {
        Ok(trace) => {
            let train_pred = model.forward_batch(&train_set.x)?;
            let test_pred = model.forward_batch(&test_set.x)?;
            report.train_mse = Some(mse_value(&train_pred, &train_set.y)?);
            report.test_mse = Some(mse_value(&test_pred, &test_set.y)?);
            Ok((report, Some(model), trace))
        }
        Err(TrainError::Diverged { step }) => {
            report.diverged = true;
            report.divergence_step = Some(step);
            Ok((report, None, TrainTrace::default()))
        }
        Err(other) => Err(other.into()),
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One report per config, in input order.
    pub reports: Vec<RunReport>,
    /// Indices into `reports` ranked by (diverged, params_formula, test_mse).
    pub ranking: Vec<usize>,
}

impl SweepResult {
    /// Ranked CSV summary.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(RunReport::csv_header());
        out.push('\n');
        for &idx in &self.ranking {
            out.push_str(&self.reports[idx].csv_row());
            out.push('\n');
        }
        out
    }

    /// One JSON object per line, input order.
    pub fn to_jsonl(&self) -> String {
        self.reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("report serializes"))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Run every config against the target; runs execute in parallel, each owning
/// its model and PRNG stream. A diverging run flags its own report without
/// stopping the sweep.
pub fn compare_sweep(
    target: &TargetFunction,
    models: &[ModelSpec],
    train: &TrainConfig,
    train_samples: usize,
    test_samples: usize,
) -> Result<SweepResult, BenchError> {
    if models.len() < 2 {
        return Err(BenchError::TooFewConfigs(models.len()));
    }
    if test_samples == 0 {
        return Err(BenchError::EmptyTestSet);
    }

    let mut slots: Vec<Option<Result<RunReport, BenchError>>> = Vec::new();
    slots.resize_with(models.len(), || None);
    std::thread::scope(|scope| {
        let mut join = Vec::new();
        for (idx, spec) in models.iter().enumerate() {
            let config = ExperimentConfig {
                model: spec.clone(),
                train: train.clone(),
                train_samples,
                test_samples,
            };
            join.push((idx, scope.spawn(move || run_experiment(target, &config))));
        }
        for (idx, handle) in join {
            slots[idx] = Some(handle.join().expect("sweep thread panicked"));
        }
    });

    let mut reports = Vec::with_capacity(models.len());
    for slot in slots {
        reports.push(slot.expect("every slot filled")?);
    }

    let mut ranking: Vec<usize> = (0..reports.len()).collect();
    ranking.sort_by(|&a, &b| {
        let ra = &reports[a];
        let rb = &reports[b];
        ra.diverged
            .cmp(&rb.diverged)
            .then(ra.params_formula.cmp(&rb.params_formula))
            .then_with(|| {
                let ma = ra.test_mse.unwrap_or(f64::INFINITY);
                let mb = rb.test_mse.unwrap_or(f64::INFINITY);
                ma.total_cmp(&mb)
            })
            .then(a.cmp(&b))
    });
    Ok(SweepResult { reports, ranking })
}
