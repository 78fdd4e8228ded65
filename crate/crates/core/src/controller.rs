//! Per-agent adaptive neural control law.
//!
//! ```text
//! u  = -Wᵀσ(r) - θ ρ(ζ) ζ - Ψ η
//! Ẇ  = -ℓ (W - W⁰) + σ(r) ζᵀ
//! θ̇  = -ℓ (θ - θ⁰) + ρ(ζ) |ζ|²
//! ```
//!
//! with the filtered tracking error `ζ = k_1 (x - r) + Σ_{j=2}^{n-1} k_j x^{(j-1)} + x^{(n-1)}`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exosystem::InternalModel;
use crate::linalg::MonicPolynomial;
use crate::plant::AgentSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("stabilizing polynomial with coefficients {0:?} is not Hurwitz")]
    NotHurwitz(Vec<f64>),
    #[error("RBF width must be positive and finite, got {0}")]
    InvalidWidth(f64),
    #[error("RBF network needs at least one finite center")]
    InvalidCenters,
    #[error("leakage rate must be positive, got {0}")]
    NonPositiveLeakage(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// `p(λ) = λ^{n-1} + k_{n-1} λ^{n-2} + ... + k_1` is Hurwitz
pub fn hurwitz_check(poly: &MonicPolynomial) -> bool {
    poly.is_hurwitz()
}

/// Coefficients `k_1, ..., k_{n-1}` of the filtered error.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizerCoeffs {
    k: Vec<f64>,
}

impl StabilizerCoeffs {
    pub fn new(k: Vec<f64>) -> Result<Self, ControllerError> {
        if k.is_empty() || !hurwitz_check(&MonicPolynomial::from_ascending(&k)) {
            return Err(ControllerError::NotHurwitz(k));
        }
        Ok(Self { k })
    }

    /// Skips the stability check; only for deliberately forced runs.
    pub fn new_unchecked(k: Vec<f64>) -> Self {
        Self { k }
    }

    /// Binomial coefficients of `(λ + 1)^{n-1}`, e.g. `(1, 3, 3)` for `n = 4`.
    pub fn binomial(order: usize) -> Self {
        let m = order.saturating_sub(1).max(1);
        let mut row = vec![1.0f64];
        for _ in 0..m {
            let mut next = vec![1.0; row.len() + 1];
            for j in 1..row.len() {
                next[j] = row[j - 1] + row[j];
            }
            row = next;
        }
        // row = C(m, 0..=m); k_j = C(m, j-1) for j = 1..m
        Self { k: row[..m].to_vec() }
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    /// Plant order `n` these coefficients belong to.
    pub fn order(&self) -> usize {
        self.k.len() + 1
    }
}

pub(crate) fn zeta_into(x: &[f64], r: &[f64], coeffs: &StabilizerCoeffs, out: &mut [f64]) {
    let q = r.len();
    let k = coeffs.k();
    let n = coeffs.order();
    for c in 0..q {
        let mut z = k[0] * (x[c] - r[c]);
        for (j, &kj) in k.iter().enumerate().skip(1) {
            z += kj * x[j * q + c];
        }
        z += x[(n - 1) * q + c];
        out[c] = z;
    }
}

pub fn zeta(x_stack: &DVector<f64>, r: &DVector<f64>, coeffs: &StabilizerCoeffs) -> Result<DVector<f64>, ControllerError> {
    let q = r.len();
    if q == 0 || x_stack.len() != q * coeffs.order() {
        return Err(ControllerError::DimensionMismatch(format!(
            "x has {} entries, expected {} blocks of {q}",
            x_stack.len(),
            coeffs.order()
        )));
    }
    let mut out = DVector::zeros(q);
    zeta_into(x_stack.as_slice(), r.as_slice(), coeffs, out.as_mut_slice());
    Ok(out)
}

/// Gaussian RBF layer `σ_j(r) = exp(-|r - c_j|² / κ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfNetwork {
    centers: Vec<DVector<f64>>,
    width: f64,
}

impl RbfNetwork {
    pub fn new(centers: Vec<DVector<f64>>, width: f64) -> Result<Self, ControllerError> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(ControllerError::InvalidWidth(width));
        }
        let q = centers.first().map_or(0, |c| c.len());
        if q == 0 || centers.iter().any(|c| c.len() != q || c.iter().any(|v| !v.is_finite())) {
            return Err(ControllerError::InvalidCenters);
        }
        Ok(Self { centers, width })
    }

    /// `n_w` evenly spaced scalar centers covering `[lo, hi]`.
    pub fn grid_1d(lo: f64, hi: f64, n_w: usize, width: f64) -> Result<Self, ControllerError> {
        Self::tensor_grid(&[lo], &[hi], &[n_w], Some(width))
    }

    /// Cartesian grid with `counts[k]` points along axis `k`; width defaults
    /// to 1.5 × the finest grid spacing.
    pub fn tensor_grid(lo: &[f64], hi: &[f64], counts: &[usize], width: Option<f64>) -> Result<Self, ControllerError> {
        if lo.len() != hi.len() || lo.len() != counts.len() || lo.is_empty() || counts.contains(&0) {
            return Err(ControllerError::InvalidCenters);
        }
        let axes: Vec<Vec<f64>> = (0..lo.len())
            .map(|k| {
                let n = counts[k];
                if n == 1 {
                    vec![0.5 * (lo[k] + hi[k])]
                } else {
                    (0..n).map(|j| lo[k] + (hi[k] - lo[k]) * j as f64 / (n - 1) as f64).collect()
                }
            })
            .collect();
        let spacing = (0..lo.len())
            .filter(|&k| counts[k] > 1)
            .map(|k| (hi[k] - lo[k]) / (counts[k] - 1) as f64)
            .fold(f64::INFINITY, f64::min);
        let width = width.unwrap_or(if spacing.is_finite() { 1.5 * spacing } else { 1.0 });
        let mut centers = vec![Vec::new()];
        for axis in &axes {
            centers = centers
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&c| {
                        let mut p = prefix.clone();
                        p.push(c);
                        p
                    })
                })
                .collect();
        }
        Self::new(centers.into_iter().map(DVector::from_vec).collect(), width)
    }

    pub fn n_neurons(&self) -> usize {
        self.centers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn centers(&self) -> &[DVector<f64>] {
        &self.centers
    }

    pub(crate) fn activations_into(&self, r: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (self.width * self.width);
        for (o, c) in out.iter_mut().zip(&self.centers) {
            let d2: f64 = c.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            *o = (-d2 * inv).exp();
        }
    }

    pub fn activations(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_neurons());
        self.activations_into(r.as_slice(), out.as_mut_slice());
        out
    }
}

pub fn rbf_activations(net: &RbfNetwork, r: &DVector<f64>) -> DVector<f64> {
    net.activations(r)
}

/// Nonlinear damping gain `ρ(ζ) ≥ 1`.
#[derive(Clone)]
pub enum GainFunction {
    /// `|ζ|⁴ + 1`
    Quartic,
    /// Caller guarantees `ρ ≥ 1`.
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl fmt::Debug for GainFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Quartic => write!(f, "Quartic"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl GainFunction {
    pub fn rho(&self, zeta: &[f64]) -> f64 {
        match self {
            Self::Quartic => {
                let n2: f64 = zeta.iter().map(|z| z * z).sum();
                n2 * n2 + 1.0
            }
            Self::Custom(f) => f(zeta),
        }
    }
}

/// Adaptive weights `W` (`n_w × q`), damping gain `θ`, their priors and the
/// leakage rate `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub w: DMatrix<f64>,
    pub theta: f64,
    pub w0: DMatrix<f64>,
    pub theta0: f64,
    pub ell: f64,
}

impl AdaptiveState {
    /// Starts at the priors `W⁰ = 0`, `θ⁰ = 0`.
    pub fn zero(n_w: usize, q: usize, ell: f64) -> Result<Self, ControllerError> {
        if !(ell > 0.0) {
            return Err(ControllerError::NonPositiveLeakage(ell));
        }
        Ok(Self { w: DMatrix::zeros(n_w, q), theta: 0.0, w0: DMatrix::zeros(n_w, q), theta0: 0.0, ell })
    }
}

/// `u = -Wᵀσ(r) - θ ρ(ζ) ζ - Ψ η`
pub fn control(
    adaptive: &AdaptiveState,
    net: &RbfNetwork,
    gain: &GainFunction,
    zeta: &DVector<f64>,
    r: &DVector<f64>,
    im: &InternalModel,
    eta: &DVector<f64>,
) -> Result<DVector<f64>, ControllerError> {
    let q = zeta.len();
    if r.len() != q
        || adaptive.w.shape() != (net.n_neurons(), q)
        || net.input_dim() != q
        || im.q != q
        || eta.len() != im.dim()
    {
        return Err(ControllerError::DimensionMismatch("control inputs disagree on sizes".into()));
    }
    let sigma = net.activations(r);
    let damping = adaptive.theta * gain.rho(zeta.as_slice());
    Ok(-(adaptive.w.transpose() * sigma) - zeta * damping + im.output(eta))
}

/// `(Ẇ, θ̇)`
pub fn adaptive_rhs(
    adaptive: &AdaptiveState,
    net: &RbfNetwork,
    gain: &GainFunction,
    zeta: &DVector<f64>,
    r: &DVector<f64>,
) -> Result<(DMatrix<f64>, f64), ControllerError> {
    if adaptive.w.shape() != (net.n_neurons(), zeta.len()) || r.len() != net.input_dim() {
        return Err(ControllerError::DimensionMismatch("adaptive law inputs disagree on sizes".into()));
    }
    let sigma = net.activations(r);
    let dw = -(&adaptive.w - &adaptive.w0) * adaptive.ell + sigma * zeta.transpose();
    let dtheta = -adaptive.ell * (adaptive.theta - adaptive.theta0) + gain.rho(zeta.as_slice()) * zeta.norm_squared();
    Ok((dw, dtheta))
}

/// Realized approximation error `g(col(r, 0, ...), μ) - Wᵀσ(r)`. Uses the true
/// plant, so it is a diagnostic only.
pub fn nn_approximation_error(plant: &AgentSpec, net: &RbfNetwork, w: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    plant.feedforward(r.as_slice()) - w.transpose() * net.activations(r)
}
