//! Local objectives, convex constraint sets and Euclidean projection.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("dimension mismatch: set has dimension {set}, point has {point}")]
    DimensionMismatch { set: usize, point: usize },
    #[error("constraint set is empty (coordinate {coordinate}: [{lo}, {hi}])")]
    EmptySet { coordinate: usize, lo: f64, hi: f64 },
    #[error("invalid set description: {0}")]
    Invalid(String),
}

pub type Projector = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Closed convex set `Ω ⊂ R^q`.
#[derive(Clone)]
pub enum ConvexSet {
    Whole { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Intersection of boxes, kept unreduced; projection reduces it on the fly.
    BoxIntersection(Vec<ConvexSet>),
    /// User-supplied projection map. The caller vouches for its correctness.
    Custom { dim: usize, name: String, projector: Projector },
}

impl fmt::Debug for ConvexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Whole { dim } => write!(f, "Whole(R^{dim})"),
            Self::Box { lo, hi } => write!(f, "Box({lo:?}, {hi:?})"),
            Self::Ball { center, radius } => write!(f, "Ball({center:?}, {radius})"),
            Self::BoxIntersection(sets) => f.debug_tuple("BoxIntersection").field(sets).finish(),
            Self::Custom { dim, name, .. } => write!(f, "Custom({name}, R^{dim})"),
        }
    }
}

impl PartialEq for ConvexSet {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Whole { dim: a }, Self::Whole { dim: b }) => a == b,
            (Self::Box { lo: l1, hi: h1 }, Self::Box { lo: l2, hi: h2 }) => l1 == l2 && h1 == h2,
            (Self::Ball { center: c1, radius: r1 }, Self::Ball { center: c2, radius: r2 }) => {
                c1 == c2 && r1 == r2
            }
            (Self::BoxIntersection(a), Self::BoxIntersection(b)) => a == b,
            (Self::Custom { projector: a, .. }, Self::Custom { projector: b, .. }) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl ConvexSet {
    /// Scalar interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self, ConvexError> {
        Self::new_box(vec![lo], vec![hi])
    }

    pub fn new_box(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ConvexError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ConvexError::Invalid(format!(
                "box bounds of lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (k, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(ConvexError::EmptySet { coordinate: k, lo: l, hi: h });
            }
        }
        Ok(Self::Box { lo, hi })
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, ConvexError> {
        if center.is_empty() || !(radius >= 0.0) {
            return Err(ConvexError::Invalid(format!("ball radius {radius}")));
        }
        Ok(Self::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Whole { dim } | Self::Custom { dim, .. } => *dim,
            Self::Box { lo, .. } => lo.len(),
            Self::Ball { center, .. } => center.len(),
            Self::BoxIntersection(sets) => sets.first().map_or(0, Self::dim),
        }
    }

    /// Componentwise bounds when the set is a box (or whole space, or a box
    /// intersection).
    pub fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Whole { dim } => Some((vec![f64::NEG_INFINITY; *dim], vec![f64::INFINITY; *dim])),
            Self::Box { lo, hi } => Some((lo.clone(), hi.clone())),
            Self::BoxIntersection(sets) => {
                let dim = self.dim();
                let mut lo = vec![f64::NEG_INFINITY; dim];
                let mut hi = vec![f64::INFINITY; dim];
                for s in sets {
                    let (l, h) = s.bounds()?;
                    for k in 0..dim {
                        lo[k] = lo[k].max(l[k]);
                        hi[k] = hi[k].min(h[k]);
                    }
                }
                Some((lo, hi))
            }
            _ => None,
        }
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, ConvexError> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(ConvexError::DimensionMismatch { set: dim, point: x.len() });
        }
        match self {
            Self::Whole { .. } => Ok(x.clone()),
            Self::Box { lo, hi } => Ok(clamp(x, lo, hi)),
            Self::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let offset = x - &c;
                let dist = offset.norm();
                if dist <= *radius {
                    Ok(x.clone())
                } else {
                    Ok(c + offset * (*radius / dist))
                }
            }
            Self::BoxIntersection(_) => {
                let (lo, hi) = self.bounds().ok_or_else(|| {
                    ConvexError::Invalid("intersection contains a non-box set".into())
                })?;
                for k in 0..dim {
                    if lo[k] > hi[k] {
                        return Err(ConvexError::EmptySet { coordinate: k, lo: lo[k], hi: hi[k] });
                    }
                }
                Ok(clamp(x, &lo, &hi))
            }
            Self::Custom { projector, .. } => Ok(projector(x)),
        }
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self.project(x) {
            Ok(p) => (p - x).amax() <= tol,
            Err(_) => false,
        }
    }

    /// Box from which Assumption-style sampling draws points: the set's
    /// bounding box widened by `max(1, width/4)` per side. Unbounded
    /// directions fall back to `[-10, 10]`.
    fn sampling_box(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let (lo, hi) = match self {
            Self::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            _ => self
                .bounds()
                .unwrap_or((vec![f64::NEG_INFINITY; dim], vec![f64::INFINITY; dim])),
        };
        lo.iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                if l.is_finite() && h.is_finite() && l <= h {
                    let margin = (0.25 * (h - l)).max(1.0);
                    (l - margin, h + margin)
                } else {
                    (-10.0, 10.0)
                }
            })
            .unzip()
    }
}

fn clamp(x: &DVector<f64>, lo: &[f64], hi: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().enumerate().map(|(k, &v)| v.clamp(lo[k], hi[k])))
}

/// The four scalar costs of the reference scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceCost {
    /// `(y - 8)^2`
    F1,
    /// `y^2 / (80 ln(y^2 + 2)) + (y - 5)^2`
    F2,
    /// `y^2 / (20 sqrt(y^2 + 1)) + y^2`
    F3,
    /// `ln(e^{-0.05 y} + e^{0.05 y}) + y^2`
    F4,
}

impl ReferenceCost {
    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            1 => Some(Self::F1),
            2 => Some(Self::F2),
            3 => Some(Self::F3),
            4 => Some(Self::F4),
            _ => None,
        }
    }

    pub fn value(self, y: f64) -> f64 {
        match self {
            Self::F1 => (y - 8.0).powi(2),
            Self::F2 => y * y / (80.0 * (y * y + 2.0).ln()) + (y - 5.0).powi(2),
            Self::F3 => y * y / (20.0 * (y * y + 1.0).sqrt()) + y * y,
            Self::F4 => {
                let a = (0.05 * y).abs();
                a + (-2.0 * a).exp().ln_1p() + y * y
            }
        }
    }

    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Self::F1 => 2.0 * (y - 8.0),
            Self::F2 => {
                let s = y * y + 2.0;
                let ln = s.ln();
                (2.0 * y * ln - 2.0 * y.powi(3) / s) / (80.0 * ln * ln) + 2.0 * (y - 5.0)
            }
            Self::F3 => {
                let s = y * y + 1.0;
                y * (y * y + 2.0) / (20.0 * s * s.sqrt()) + 2.0 * y
            }
            Self::F4 => 0.05 * (0.05 * y).tanh() + 2.0 * y,
        }
    }
}

pub type ScalarField = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub enum ObjectiveFn {
    Reference(ReferenceCost),
    /// `(y - c)ᵀ Q (y - c) / 2`
    Quadratic { center: DVector<f64>, hessian: DMatrix<f64> },
    /// `aᵀ y + b`
    Affine { slope: DVector<f64>, offset: f64 },
    Custom { dim: usize, value: ScalarField, gradient: VectorField },
}

impl fmt::Debug for ObjectiveFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Reference(c) => write!(f, "Reference({c:?})"),
            Self::Quadratic { center, hessian } => f
                .debug_struct("Quadratic")
                .field("center", &center.as_slice())
                .field("hessian", &hessian.as_slice())
                .finish(),
            Self::Affine { slope, offset } => f
                .debug_struct("Affine")
                .field("slope", &slope.as_slice())
                .field("offset", offset)
                .finish(),
            Self::Custom { dim, .. } => write!(f, "Custom(R^{dim})"),
        }
    }
}

/// Private cost `f_i` with optional declared curvature bounds.
#[derive(Debug, Clone)]
pub struct LocalObjective {
    pub function: ObjectiveFn,
    /// Declared strong-convexity modulus.
    pub strong_convexity_lb: Option<f64>,
    /// Declared gradient Lipschitz constant.
    pub gradient_lipschitz_ub: Option<f64>,
}

impl LocalObjective {
    pub fn new(function: ObjectiveFn) -> Self {
        Self { function, strong_convexity_lb: None, gradient_lipschitz_ub: None }
    }

    pub fn with_bounds(mut self, lower: Option<f64>, upper: Option<f64>) -> Self {
        self.strong_convexity_lb = lower;
        self.gradient_lipschitz_ub = upper;
        self
    }

    /// Reference cost `f_i` with its analytic bounds `l = 1`, `L = 3`.
    pub fn reference(cost: ReferenceCost) -> Self {
        Self::new(ObjectiveFn::Reference(cost)).with_bounds(Some(1.0), Some(3.0))
    }

    pub fn quadratic(center: DVector<f64>, hessian: DMatrix<f64>) -> Self {
        Self::new(ObjectiveFn::Quadratic { center, hessian })
    }

    pub fn dim(&self) -> usize {
        match &self.function {
            ObjectiveFn::Reference(_) => 1,
            ObjectiveFn::Quadratic { center, .. } => center.len(),
            ObjectiveFn::Affine { slope, .. } => slope.len(),
            ObjectiveFn::Custom { dim, .. } => *dim,
        }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        match &self.function {
            ObjectiveFn::Reference(c) => c.value(y[0]),
            ObjectiveFn::Quadratic { center, hessian } => {
                let e = y - center;
                0.5 * e.dot(&(hessian * &e))
            }
            ObjectiveFn::Affine { slope, offset } => slope.dot(y) + offset,
            ObjectiveFn::Custom { value, .. } => value(y),
        }
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.function {
            ObjectiveFn::Reference(c) => DVector::from_element(1, c.derivative(y[0])),
            ObjectiveFn::Quadratic { center, hessian } => hessian * (y - center),
            ObjectiveFn::Affine { slope, .. } => slope.clone(),
            ObjectiveFn::Custom { gradient, .. } => gradient(y),
        }
    }
}

pub fn evaluate_gradient(obj: &LocalObjective, y: &DVector<f64>) -> DVector<f64> {
    obj.gradient(y)
}

/// Central-difference gradient with step `1e-6 · max(1, |y_k|)`.
pub fn finite_difference_gradient(obj: &LocalObjective, y: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(y.len());
    for k in 0..y.len() {
        let h = 1e-6 * y[k].abs().max(1.0);
        let mut plus = y.clone();
        let mut minus = y.clone();
        plus[k] += h;
        minus[k] -= h;
        g[k] = (obj.value(&plus) - obj.value(&minus)) / (2.0 * h);
    }
    g
}

/// Largest mixed-relative disagreement `|g - g_fd| / max(1, |g|)` over
/// coordinates.
pub fn gradient_check_error(obj: &LocalObjective, y: &DVector<f64>) -> f64 {
    let g = obj.gradient(y);
    let fd = finite_difference_gradient(obj, y);
    g.iter()
        .zip(fd.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub samples: usize,
    /// Smallest `(∇f(a) - ∇f(b))ᵀ(a - b) / |a - b|^2` seen.
    pub min_strong_convexity_ratio: f64,
    /// Largest `|∇f(a) - ∇f(b)| / |a - b|` seen.
    pub max_lipschitz_ratio: f64,
    pub declared_lower: Option<f64>,
    pub declared_upper: Option<f64>,
    pub pass: bool,
}

/// Sampling check of strong convexity and gradient Lipschitz continuity over
/// an inflated neighbourhood of `set`. Without declared bounds the check only
/// asks for a positive observed curvature.
pub fn check_assumption1(
    obj: &LocalObjective,
    set: &ConvexSet,
    n_samples: usize,
    seed: u64,
) -> ConvexityReport {
    let n_samples = n_samples.max(2);
    let (lo, hi) = set.sampling_box();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_iterator(lo.len(), lo.iter().zip(&hi).map(|(&l, &h)| rng.random_range(l..=h)))
    };
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    let mut used = 0;
    for _ in 0..n_samples {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let diff = &a - &b;
        let dist2 = diff.norm_squared();
        if dist2 < 1e-12 {
            continue;
        }
        let dg = obj.gradient(&a) - obj.gradient(&b);
        min_ratio = min_ratio.min(dg.dot(&diff) / dist2);
        max_ratio = max_ratio.max(dg.norm() / dist2.sqrt());
        used += 1;
    }
    let slack = 1e-9;
    let lower_ok = match obj.strong_convexity_lb {
        Some(l) => min_ratio >= l * (1.0 - slack),
        None => min_ratio > 0.0,
    };
    let upper_ok = obj.gradient_lipschitz_ub.is_none_or(|u| max_ratio <= u * (1.0 + slack));
    ConvexityReport {
        samples: used,
        min_strong_convexity_ratio: min_ratio,
        max_lipschitz_ratio: max_ratio,
        declared_lower: obj.strong_convexity_lb,
        declared_upper: obj.gradient_lipschitz_ub,
        pass: used > 0 && lower_ok && upper_ok,
    }
}
