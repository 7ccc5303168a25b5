//! Finite-difference verification of the tape's adjoints.
//!
//! The checker evaluates a loss expression twice per parameter coordinate
//! (central differences) and compares against [`Tape::backward`]. The FD side
//! never touches the reverse sweep, so it stays an independent oracle for the
//! analytic path.

use std::collections::BTreeMap;

use crate::tape::{GradError, GradientRecord, ParamGroup, ParamHandle, ParamStore, Tape, Var};
use crate::tensor::Tensor;

/// Closure that rebuilds the loss expression on a fresh tape from the current
/// parameter values.
pub trait LossBuilder: Fn(&mut Tape, &ParamStore) -> Result<Var, GradError> {}
impl<F: Fn(&mut Tape, &ParamStore) -> Result<Var, GradError>> LossBuilder for F {}

/// Evaluate the loss once, discarding the tape.
pub fn loss_value(store: &ParamStore, build: &impl LossBuilder) -> Result<f64, GradError> {
    let mut tape = Tape::new();
    let var = build(&mut tape, store)?;
    tape.value(var).item()
}

/// Loss and analytic gradients from one forward + reverse sweep.
pub fn analytic_gradients(
    store: &ParamStore,
    build: &impl LossBuilder,
) -> Result<(f64, GradientRecord), GradError> {
    let mut tape = Tape::new();
    let var = build(&mut tape, store)?;
    let loss = tape.value(var).item()?;
    let record = tape.backward(var)?;
    Ok((loss, record))
}

/// Central finite differences of the loss with respect to every coordinate of
/// the given handles.
pub fn fd_gradients(
    store: &ParamStore,
    handles: &[ParamHandle],
    build: &impl LossBuilder,
    fd_step: f64,
) -> Result<GradientRecord, GradError> {
    if fd_step.is_nan() || fd_step <= 0.0 {
        return Err(GradError::ShapeMismatch {
            op: "fd_gradients",
            detail: format!("fd_step must be positive, got {fd_step}"),
        });
    }
    let mut scratch = store.clone();
    let mut record = GradientRecord::default();
    for &handle in handles {
        let base = store.get(handle).clone();
        let mut grad = vec![0.0; base.len()];
        for (coord, slot) in grad.iter_mut().enumerate() {
            let original = base.data()[coord];

            let mut plus = base.clone();
            plus.data_mut()[coord] = original + fd_step;
            scratch.set(handle, plus);
            let f_plus = loss_value(&scratch, build)?;

            let mut minus = base.clone();
            minus.data_mut()[coord] = original - fd_step;
            scratch.set(handle, minus);
            let f_minus = loss_value(&scratch, build)?;

            *slot = (f_plus - f_minus) / (2.0 * fd_step);
        }
        scratch.set(handle, base.clone());
        record.insert(handle, Tensor::from_vec(base.shape().to_vec(), grad)?);
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub handle: ParamHandle,
    /// max over coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.rel_tol)
    }

    /// Worst relative error across all handles.
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// Worst relative error per parameter group.
    pub fn by_group(&self) -> BTreeMap<ParamGroup, f64> {
        let mut map = BTreeMap::new();
        for entry in &self.entries {
            let slot = map.entry(entry.handle.group()).or_insert(0.0f64);
            *slot = slot.max(entry.max_rel_err);
        }
        map
    }
}

/// Compare two gradient records over the given handles. A handle absent from
/// a record counts as an all-zero gradient.
pub fn compare_records(
    store: &ParamStore,
    handles: &[ParamHandle],
    analytic: &GradientRecord,
    fd: &GradientRecord,
    rel_tol: f64,
) -> GradCheckReport {
    let entries = handles
        .iter()
        .map(|&handle| {
            let len = store.get(handle).len();
            let zeros = vec![0.0; len];
            let a = analytic
                .get(handle)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| zeros.clone());
            let f = fd.get(handle).map(|t| t.data().to_vec()).unwrap_or(zeros);
            let max_rel_err = a
                .iter()
                .zip(&f)
                .map(|(&ai, &fi)| (ai - fi).abs() / ai.abs().max(fi.abs()).max(1e-8))
                .fold(0.0, f64::max);
            GradCheckEntry {
                handle,
                max_rel_err,
            }
        })
        .collect();
    GradCheckReport { entries, rel_tol }
}

/// Run the full check: analytic backward vs central finite differences.
pub fn gradcheck(
    store: &ParamStore,
    handles: &[ParamHandle],
    build: &impl LossBuilder,
    fd_step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, GradError> {
    if rel_tol.is_nan() || rel_tol <= 0.0 {
        return Err(GradError::ShapeMismatch {
            op: "gradcheck",
            detail: format!("rel_tol must be positive, got {rel_tol}"),
        });
    }
    let (_, analytic) = analytic_gradients(store, build)?;
    let fd = fd_gradients(store, handles, build, fd_step)?;
    Ok(compare_records(store, handles, &analytic, &fd, rel_tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn quadratic_passes() {
        let mut store = ParamStore::new();
        let h = store.register(
            ParamGroup::KanWeights,
            Tensor::from_vec(vec![3], vec![0.7, -0.2, 1.5]).unwrap(),
        );
        let build = |tape: &mut Tape, store: &ParamStore| {
            let x = tape.param(store, h)?;
            let sq = tape.square(x)?;
            tape.sum(sq)
        };
        let report = gradcheck(&store, &[h], &build, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn linear_form_matches_fd_tightly() {
        // loss = sum(W . v): FD is exact for linear maps up to roundoff.
        let mut rng = DetRng::new(11);
        let mut store = ParamStore::new();
        let w = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(3, 4, (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap(),
        );
        let v = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(4, 2, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap(),
        );
        let build = |tape: &mut Tape, store: &ParamStore| {
            let wv = tape.param(store, w)?;
            let vv = tape.param(store, v)?;
            let prod = tape.matmul(wv, vv)?;
            tape.sum(prod)
        };
        let report = gradcheck(&store, &[w, v], &build, 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn corrupted_adjoint_fails() {
        let mut store = ParamStore::new();
        let h = store.register(
            ParamGroup::KanWeights,
            Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap(),
        );
        let build = |tape: &mut Tape, store: &ParamStore| {
            let x = tape.param(store, h)?;
            let sq = tape.square(x)?;
            tape.sum(sq)
        };
        let (_, mut analytic) = analytic_gradients(&store, &build).unwrap();
        analytic.scale_in_place(h, 1.05); // deliberately wrong adjoint
        let fd = fd_gradients(&store, &[h], &build, 1e-5).unwrap();
        let report = compare_records(&store, &[h], &analytic, &fd, 1e-4);
        assert!(!report.passed());
    }

    #[test]
    fn every_op_matches_fd() {
        // One composite expression touching each differentiable op; inputs
        // drawn from [-2, 2].
        let mut rng = DetRng::new(5);
        let mut store = ParamStore::new();
        let a = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(2, 3, (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap(),
        );
        let b = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(2, 3, (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap(),
        );
        let c = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(3, 2, (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap(),
        );
        let bias = store.register(
            ParamGroup::KanWeights,
            Tensor::from_vec(vec![2], (0..2).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap(),
        );
        let build = |tape: &mut Tape, store: &ParamStore| {
            use crate::tape::UnaryKind::*;
            let av = tape.param(store, a)?;
            let bv = tape.param(store, b)?;
            let cv = tape.param(store, c)?;
            let biasv = tape.param(store, bias)?;
            let sum_ab = tape.add(av, bv)?;
            let diff = tape.sub(sum_ab, bv)?;
            let prod = tape.mul(diff, bv)?;
            let mm = tape.matmul(prod, cv)?; // 2x2
            let mm = tape.add_row(mm, biasv)?;
            let mut acc = tape.unary(Silu, mm)?;
            for kind in [Exp, Sin, Square, Cube, Neg, Sigmoid] {
                let term = tape.unary(kind, mm)?;
                acc = tape.add(acc, term)?;
            }
            let scaled = tape.scale(acc, 0.37)?;
            let total = tape.sum(scaled)?;
            let avg = tape.mean(mm)?;
            tape.add(total, avg)
        };
        let report = gradcheck(&store, &[a, b, c, bias], &build, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }

    fn model_loss_check(
        build_model: impl Fn() -> crate::network::MetaKanNetwork,
    ) -> GradCheckReport {
        let net = build_model();
        let mut rng = DetRng::new(303);
        let n = net.shape().input_dim();
        let batch =
            Tensor::matrix(8, n, (0..8 * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let target =
            Tensor::matrix(8, 1, (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let store = net.params.clone();
        let handles = store.handles();
        let build = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.constant(batch.clone())?;
            let pred = net.forward_on_tape(tape, store, xv)?;
            let yv = tape.constant(target.clone())?;
            let diff = tape.sub(pred, yv)?;
            let sq = tape.square(diff)?;
            tape.mean(sq)
        };
        gradcheck(&store, &handles, &build, 1e-5, 1e-4).unwrap()
    }

    #[test]
    fn full_metakan_loss_passes_gradcheck() {
        use crate::basis::SplineSpec;
        use crate::network::{ActivationKind, MetaKanNetwork, NetworkShape};
        // B-spline MetaKAN, depth 2, the canonical configuration.
        let report = model_loss_check(|| {
            MetaKanNetwork::new(
                NetworkShape::new(vec![2, 3, 1]).unwrap(),
                ActivationKind::BSplineSilu(SplineSpec::default_cubic(5).unwrap()),
                1,
                8,
                1,
                42,
            )
            .unwrap()
        });
        assert!(report.passed(), "worst {}", report.worst());
        // Both groups must show up in the report.
        assert!(report.by_group().contains_key(&ParamGroup::Prompts));
        assert!(report.by_group().contains_key(&ParamGroup::MetaLearner));
    }

    #[test]
    fn wavelet_metakan_loss_passes_gradcheck() {
        use crate::network::{ActivationKind, MetaKanNetwork, NetworkShape};
        let report = model_loss_check(|| {
            MetaKanNetwork::new(
                NetworkShape::new(vec![2, 3, 2, 1]).unwrap(),
                ActivationKind::MexicanHatWavelet,
                2,
                6,
                1,
                43,
            )
            .unwrap()
        });
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn rbf_metakan_loss_passes_gradcheck() {
        use crate::basis::RbfSpec;
        use crate::network::{ActivationKind, MetaKanNetwork, NetworkShape};
        let report = model_loss_check(|| {
            MetaKanNetwork::new(
                NetworkShape::new(vec![3, 2, 1]).unwrap(),
                ActivationKind::GaussianRbf(RbfSpec::uniform(6, (-1.0, 1.0)).unwrap()),
                1,
                8,
                2,
                44,
            )
            .unwrap()
        });
        assert!(report.passed(), "worst {}", report.worst());
    }

    #[test]
    fn basis_input_derivatives_match_fd() {
        // d/dt of each basis family as wired through the tape, against
        // central differences at rel 1e-5. Points sit at least 1e-3 away
        // from every knot.
        use crate::basis::{RbfSpec, SplineSpec};
        let spec = SplineSpec::default_cubic(5).unwrap();
        let rbf = RbfSpec::uniform(6, (-1.0, 1.0)).unwrap();
        let points = [-0.8137, -0.3361, 0.0493, 0.5122, 0.9477];
        for &t in &points {
            let near_knot = spec.knots().iter().any(|&k| (t - k).abs() < 1e-3);
            assert!(!near_knot, "test point {t} too close to a knot");
        }

        let mut rng = DetRng::new(61);
        let mut store = ParamStore::new();
        let x = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(1, points.len(), points.to_vec()).unwrap(),
        );
        let spline_w: Vec<f64> = (0..points.len() * spec.dim_w())
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        let rbf_w: Vec<f64> = (0..points.len() * rbf.dim_w())
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();

        let spec2 = spec.clone();
        let build_spline = move |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.param(store, x)?;
            let phi = tape.spline_expand(xv, &spec2)?;
            let w = tape.constant(Tensor::matrix(1, spline_w.len(), spline_w.clone())?)?;
            let weighted = tape.mul(phi, w)?;
            tape.sum(weighted)
        };
        let report = gradcheck(&store, &[x], &build_spline, 1e-5, 1e-5).unwrap();
        assert!(report.passed(), "spline d/dt worst {}", report.worst());

        let rbf2 = rbf.clone();
        let build_rbf = move |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.param(store, x)?;
            let phi = tape.rbf_expand(xv, &rbf2)?;
            let w = tape.constant(Tensor::matrix(1, rbf_w.len(), rbf_w.clone())?)?;
            let weighted = tape.mul(phi, w)?;
            tape.sum(weighted)
        };
        let report = gradcheck(&store, &[x], &build_rbf, 1e-5, 1e-5).unwrap();
        assert!(report.passed(), "rbf d/dt worst {}", report.worst());

        // Wavelet layer input derivative.
        let params: Vec<f64> = (0..3 * points.len() * 2)
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        let build_wavelet = move |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.param(store, x)?;
            let w = tape.constant(Tensor::matrix(3 * points.len(), 2, params.clone())?)?;
            let out = tape.wavelet_layer(xv, w)?;
            tape.sum(out)
        };
        let report = gradcheck(&store, &[x], &build_wavelet, 1e-5, 1e-5).unwrap();
        assert!(report.passed(), "wavelet d/dt worst {}", report.worst());
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut rng = DetRng::new(7);
        let mut store = ParamStore::new();
        let logits = store.register(
            ParamGroup::KanWeights,
            Tensor::matrix(4, 3, (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect()).unwrap(),
        );
        let labels = vec![0usize, 2, 1, 1];
        let build = move |tape: &mut Tape, store: &ParamStore| {
            let lv = tape.param(store, logits)?;
            tape.cross_entropy(lv, &labels)
        };
        let report = gradcheck(&store, &[logits], &build, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "worst {}", report.worst());
    }
}
