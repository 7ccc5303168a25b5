//! Univariate basis families that parameterize KAN activation edges.
//!
//! Three families ship: B-spline plus a SiLU residual channel, Gaussian
//! radial basis functions, and the Mexican-hat wavelet. Each family fixes the
//! per-edge coefficient dimension `dim_w` used everywhere in parameter
//! accounting: `G + k + 1`, `c`, and `3` respectively.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("grid size must be >= 1, got {0}")]
    BadGrid(usize),
    #[error("domain [{0}, {1}] is empty")]
    BadDomain(f64, f64),
    #[error("center count must be >= 1, got {0}")]
    BadCenters(usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("wavelet scale must be positive, got {0}")]
    BadScale(f64),
}

pub fn silu(t: f64) -> f64 {
    t / (1.0 + (-t).exp())
}

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// d/dt SiLU(t) = sigmoid(t) * (1 + t * (1 - sigmoid(t))).
pub fn silu_deriv(t: f64) -> f64 {
    let s = sigmoid(t);
    s * (1.0 + t * (1.0 - s))
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: the raw value r with softplus(r) = y (y > 0).
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), rewritten to stay stable for large y.
    y + (-(-y).exp()).ln_1p()
}

/// Uniform B-spline specification: `G` grid intervals of order `k` over a
/// closed domain, with `k` extra uniform knots extended past each end.
///
/// The knot vector has `G + 2k + 1` entries; the family holds `G + k` spline
/// basis functions, and the full activation basis vector adds one SiLU
/// channel in front (`dim_w = G + k + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    grid: usize,
    order: usize,
    domain: (f64, f64),
    knots: Vec<f64>,
}

impl SplineSpec {
    /// Uniform knots with spacing `(b - a) / G`, extended `k` past each side.
    pub fn uniform(grid: usize, order: usize, domain: (f64, f64)) -> Result<Self, BasisError> {
        if grid == 0 {
            return Err(BasisError::BadGrid(grid));
        }
        let (a, b) = domain;
        if b <= a || !a.is_finite() || !b.is_finite() {
            return Err(BasisError::BadDomain(a, b));
        }
        let h = (b - a) / grid as f64;
        let knots = (0..=grid + 2 * order)
            .map(|j| a + (j as f64 - order as f64) * h)
            .collect();
        Ok(SplineSpec {
            grid,
            order,
            domain,
            knots,
        })
    }

    /// Default experimental setup: cubic splines on [-1, 1].
    pub fn default_cubic(grid: usize) -> Result<Self, BasisError> {
        Self::uniform(grid, 3, (-1.0, 1.0))
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of B-spline basis functions: `G + k`.
    pub fn num_basis(&self) -> usize {
        self.grid + self.order
    }

    /// Per-edge coefficient dimension: SiLU channel + splines = `G + k + 1`.
    pub fn dim_w(&self) -> usize {
        self.grid + self.order + 1
    }
}

/// Evaluate all `G + k` B-spline basis functions at `t` by the Cox-de Boor
/// recursion over the extended knot vector. Total in `t`: outside the knot
/// range every entry is zero; no clamping is applied.
pub fn bspline_basis(spec: &SplineSpec, t: f64) -> Vec<f64> {
    bspline_all_degrees(spec, t).0
}

/// Basis values together with their first derivatives
/// `B'_{i,k}(t) = k * (B_{i,k-1}/(t_{i+k}-t_i) - B_{i+1,k-1}/(t_{i+k+1}-t_{i+1}))`.
pub fn bspline_basis_and_deriv(spec: &SplineSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    let (vals, lower) = bspline_all_degrees(spec, t);
    let k = spec.order;
    let n = spec.num_basis();
    let knots = &spec.knots;
    let mut derivs = vec![0.0; n];
    if k > 0 {
        for i in 0..n {
            let left = lower[i] / (knots[i + k] - knots[i]);
            let right = lower[i + 1] / (knots[i + k + 1] - knots[i + 1]);
            derivs[i] = k as f64 * (left - right);
        }
    }
    (vals, derivs)
}

/// Runs the iterative recursion bottom-up, returning the degree-`k` values
/// (truncated to the `G + k` family members) and the full degree-`k-1` row
/// needed for derivatives. For `k = 0` the second vector is empty-degree and
/// unused by callers.
fn bspline_all_degrees(spec: &SplineSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    let k = spec.order;
    let knots = &spec.knots;
    let intervals = knots.len() - 1; // G + 2k degree-0 indicators

    // Degree-0 indicators: [knot_j, knot_{j+1}), the final interval closed so
    // the basis is defined at the very last knot.
    let mut vals = vec![0.0; intervals];
    let last = knots[intervals];
    if t >= knots[0] && t <= last {
        let mut span = None;
        for j in 0..intervals {
            let closed_right = j == intervals - 1;
            if t >= knots[j] && (t < knots[j + 1] || (closed_right && t <= knots[j + 1])) {
                span = Some(j);
                break;
            }
        }
        if let Some(j) = span {
            vals[j] = 1.0;
        }
    }

    let mut lower = Vec::new();
    for d in 1..=k {
        if d == k {
            lower = vals.clone();
        }
        for i in 0..intervals - d {
            let left = (t - knots[i]) / (knots[i + d] - knots[i]) * vals[i];
            let right = (knots[i + d + 1] - t) / (knots[i + d + 1] - knots[i + 1]) * vals[i + 1];
            vals[i] = left + right;
        }
    }
    vals.truncate(spec.num_basis());
    if k > 0 {
        lower.truncate(spec.num_basis() + 1);
    }
    (vals, lower)
}

/// The full activation basis vector of Eq.-(2) form:
/// `[SiLU(t), B_1(t), ..., B_{G+k}(t)]`, length `dim_w = G + k + 1`.
pub fn basis_vector(spec: &SplineSpec, t: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(spec.dim_w());
    v.push(silu(t));
    v.extend(bspline_basis(spec, t));
    v
}

/// [`basis_vector`] together with its elementwise derivative in `t`.
pub fn basis_vector_and_deriv(spec: &SplineSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    let (b, db) = bspline_basis_and_deriv(spec, t);
    let mut v = Vec::with_capacity(spec.dim_w());
    let mut dv = Vec::with_capacity(spec.dim_w());
    v.push(silu(t));
    dv.push(silu_deriv(t));
    v.extend(b);
    dv.extend(db);
    (v, dv)
}

/// Gaussian RBF specification: `c` centers with a shared bandwidth `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfSpec {
    centers: Vec<f64>,
    bandwidth: f64,
}

impl RbfSpec {
    /// `c` centers uniformly spaced over the closed domain. The default
    /// bandwidth is the center spacing, giving neighbor overlap exp(-1/2).
    pub fn uniform(count: usize, domain: (f64, f64)) -> Result<Self, BasisError> {
        let (a, b) = domain;
        if count == 0 {
            return Err(BasisError::BadCenters(count));
        }
        if b <= a || !a.is_finite() || !b.is_finite() {
            return Err(BasisError::BadDomain(a, b));
        }
        let centers: Vec<f64> = if count == 1 {
            vec![0.5 * (a + b)]
        } else {
            (0..count)
                .map(|i| a + (b - a) * i as f64 / (count - 1) as f64)
                .collect()
        };
        let bandwidth = if count == 1 {
            0.5 * (b - a)
        } else {
            (b - a) / (count - 1) as f64
        };
        Self::new(centers, bandwidth)
    }

    pub fn new(centers: Vec<f64>, bandwidth: f64) -> Result<Self, BasisError> {
        if centers.is_empty() {
            return Err(BasisError::BadCenters(0));
        }
        if bandwidth <= 0.0 || !bandwidth.is_finite() {
            return Err(BasisError::BadBandwidth(bandwidth));
        }
        if centers
            .windows(2)
            .any(|w| w[1] <= w[0] || w[0].is_nan() || w[1].is_nan())
        {
            return Err(BasisError::BadCenters(centers.len()));
        }
        Ok(RbfSpec { centers, bandwidth })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Per-edge coefficient dimension: one weight per center.
    pub fn dim_w(&self) -> usize {
        self.centers.len()
    }
}

/// Entry i = exp(-(t - c_i)^2 / (2 h^2)).
pub fn rbf_vector(spec: &RbfSpec, t: f64) -> Vec<f64> {
    let h2 = spec.bandwidth * spec.bandwidth;
    spec.centers
        .iter()
        .map(|&c| {
            let r = t - c;
            (-r * r / (2.0 * h2)).exp()
        })
        .collect()
}

/// [`rbf_vector`] with elementwise derivatives in `t`.
pub fn rbf_vector_and_deriv(spec: &RbfSpec, t: f64) -> (Vec<f64>, Vec<f64>) {
    let h2 = spec.bandwidth * spec.bandwidth;
    let mut v = Vec::with_capacity(spec.centers.len());
    let mut dv = Vec::with_capacity(spec.centers.len());
    for &c in &spec.centers {
        let r = t - c;
        let e = (-r * r / (2.0 * h2)).exp();
        v.push(e);
        dv.push(-r / h2 * e);
    }
    (v, dv)
}

/// Mexican-hat mother wavelet
/// `psi(t; sigma) = 2 / (pi^{1/4} sqrt(3 sigma)) * (t^2/sigma^2 - 1) * exp(-t^2 / (2 sigma^2))`.
///
/// The sign of the polynomial factor follows the source formulation (negative
/// at t = 0); the learnable amplitude absorbs the convention.
pub fn mexican_hat(t: f64, sigma: f64) -> Result<f64, BasisError> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(BasisError::BadScale(sigma));
    }
    let amp = 2.0 / (std::f64::consts::PI.powf(0.25) * (3.0 * sigma).sqrt());
    let u = t / sigma;
    Ok(amp * (u * u - 1.0) * (-0.5 * u * u).exp())
}

/// (psi, d psi/dt, d psi/d sigma) in one pass; used by the wavelet layer
/// adjoint.
pub(crate) fn mexican_hat_full(t: f64, sigma: f64) -> (f64, f64, f64) {
    let amp = 2.0 / (std::f64::consts::PI.powf(0.25) * (3.0 * sigma).sqrt());
    let u = t / sigma;
    let u2 = u * u;
    let e = (-0.5 * u2).exp();
    let psi = amp * (u2 - 1.0) * e;
    let dpsi_dt = amp * e * u / sigma * (3.0 - u2);
    let dpsi_dsigma = -amp * e / (2.0 * sigma) * (7.0 * u2 - 2.0 * u2 * u2 - 1.0);
    (psi, dpsi_dt, dpsi_dsigma)
}

/// One wavelet activation edge: amplitude, translation, and a raw scale that
/// maps to sigma through softplus so a gradient step can never produce a
/// non-positive scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletActivation {
    pub amplitude: f64,
    pub translation: f64,
    pub raw_scale: f64,
}

impl WaveletActivation {
    pub fn new(amplitude: f64, translation: f64, scale: f64) -> Result<Self, BasisError> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(BasisError::BadScale(scale));
        }
        Ok(WaveletActivation {
            amplitude,
            translation,
            raw_scale: softplus_inv(scale),
        })
    }

    /// Unpack from a stored 3-vector `[w, mu, raw_sigma]`.
    pub fn from_coeffs(coeffs: &[f64]) -> Self {
        WaveletActivation {
            amplitude: coeffs[0],
            translation: coeffs[1],
            raw_scale: coeffs[2],
        }
    }

    pub fn scale(&self) -> f64 {
        softplus(self.raw_scale)
    }

    pub const DIM_W: usize = 3;
}

/// `phi(t) = w * psi(t - mu; sigma)`.
pub fn wavelet_activation(act: &WaveletActivation, t: f64) -> f64 {
    let sigma = act.scale();
    let (psi, _, _) = mexican_hat_full(t - act.translation, sigma);
    act.amplitude * psi
}
