//! Kolmogorov-Arnold networks with meta-learned activation weights.
//!
//! A KAN puts a learnable univariate function on every edge; that costs
//! `dim_w` coefficients per edge, a factor of `G + k + 1` (splines), `c`
//! (Gaussian RBFs), or `3` (wavelets) over an MLP of the same shape. The
//! MetaKAN construction in this crate replaces those coefficients with one
//! learnable prompt per edge plus a small shared two-layer MLP per layer
//! cluster that generates the coefficients on the fly, bringing the trainable
//! count back to roughly MLP scale while the forward pass stays a KAN.
//!
//! The crate is organized around that idea:
//!
//! - [`tensor`] / [`tape`] / [`mod@gradcheck`]: dense f64 tensors, a
//!   recorded-operation reverse-mode autodiff tape, and a finite-difference
//!   checker for every adjoint.
//! - [`basis`]: B-spline (Cox-de Boor), Gaussian RBF, and Mexican-hat
//!   wavelet activation families.
//! - [`network`]: KAN and MetaKAN forward passes, weight generation, and
//!   materialization (expanding a MetaKAN into the equivalent plain KAN).
//! - [`cluster`]: optimal contiguous layer clustering for deep nets.
//! - [`count`]: closed-form and exact trainable-parameter accounting, plus
//!   the memory-efficiency break-even check.
//! - [`train`]: MSE / cross-entropy losses, AdamW with per-group learning
//!   rates, deterministic minibatch training loops.
//! - [`mod@bench`]: target-function registry, dataset generation, experiment
//!   runner and sweeps.
//! - [`analysis`]: prompt-distance and coefficient-cosine similarity
//!   matrices.
//! - [`model_io`]: versioned JSON model files with bit-exact round trips.

pub mod analysis;
pub mod basis;
pub mod bench;
pub mod cluster;
pub mod count;
pub mod gradcheck;
pub mod model_io;
pub mod network;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use analysis::{coeff_cosine_matrix, prompt_distance_matrix, AnalysisError};
pub use basis::{
    basis_vector, bspline_basis, mexican_hat, rbf_vector, silu, wavelet_activation, BasisError,
    RbfSpec, SplineSpec, WaveletActivation,
};
pub use bench::{
    compare_sweep, generate, lookup, run_experiment, BenchError, BuiltModel, Dataset,
    ExperimentConfig, ModelSpec, RunReport, SweepResult, TargetFunction, BUILTIN_TARGETS,
};
pub use cluster::{cluster_layers, ClusterError, ClusterPlan};
pub use count::{count_params, memory_efficient, CountError, MemoryVerdict, ModelKind};
pub use gradcheck::{
    analytic_gradients, compare_records, fd_gradients, gradcheck, GradCheckEntry, GradCheckReport,
};
pub use model_io::{
    load_model, model_from_json, save_kan, save_metakan, LoadedModel, ModelIoError,
};
pub use network::{
    activation_eval, ka_shape, ActivationKind, KanNetwork, MetaKanNetwork, MetaLearner,
    NetworkError, NetworkShape,
};
pub use rng::DetRng;
pub use tape::{GradError, GradientRecord, ParamGroup, ParamHandle, ParamStore, Tape, Var};
pub use tensor::Tensor;
pub use train::{
    cross_entropy_loss, mse_loss, mse_value, train_kan, train_metakan, AdamW, GroupLrs, LossKind,
    LrSchedule, TrainConfig, TrainError, TrainTargets, TrainTrace,
};
