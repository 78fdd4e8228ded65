//! High-order agent dynamics in integrator-chain form
//! `x^{(n)} = g([x], μ) + b u + d(t)`, output `y = x`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::convex::{ConvexSet, LocalObjective};
use crate::exosystem::ExosystemSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("agent order must be at least 2, got {0}")]
    OrderTooLow(usize),
    #[error("input gain b is not invertible")]
    SingularGain,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Parameters of a single-link arm with a flexible joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlexJointParams {
    pub j1: f64,
    pub j2: f64,
    pub mass: f64,
    pub gravity: f64,
    /// Effective (uncertain) link length.
    pub length: f64,
    pub spring: f64,
}

impl FlexJointParams {
    /// Input gain `k / (J1 J2)` of the chain form.
    pub fn input_gain(&self) -> f64 {
        self.spring / (self.j1 * self.j2)
    }
}

/// The unknown nonlinearity `g([x], μ)`, with its uncertainty folded in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Nonlinearity {
    /// Pure integrator chain, `g ≡ 0`.
    Zero,
    VanDerPol { mu1: f64, mu2: f64, mu3: f64 },
    FlexJoint(FlexJointParams),
}

/// `-(1 + μ1) x + (1 + μ2)(μ3 - x²) ẋ`
pub fn vanderpol_g(x: &[f64], mu: (f64, f64, f64)) -> f64 {
    let (p, v) = (x[0], x[1]);
    -(1.0 + mu.0) * p + (1.0 + mu.1) * (mu.2 - p * p) * v
}

/// `-x⁽²⁾ (c cos x + k/J1 + k/J2) + c (ẋ² - k/J2) sin x` with `c = M g L / J1`.
pub fn flexjoint_g(x: &[f64], p: &FlexJointParams) -> f64 {
    let c = p.mass * p.gravity * p.length / p.j1;
    let (pos, vel, acc) = (x[0], x[1], x[2]);
    -acc * (c * pos.cos() + p.spring / p.j1 + p.spring / p.j2) + c * (vel * vel - p.spring / p.j2) * pos.sin()
}

impl Nonlinearity {
    /// `(n, q)` this nonlinearity is defined for; `None` means any.
    pub fn required_shape(&self) -> Option<(usize, usize)> {
        match self {
            Self::Zero => None,
            Self::VanDerPol { .. } => Some((2, 1)),
            Self::FlexJoint(_) => Some((4, 1)),
        }
    }

    pub fn eval(&self, x_stack: &[f64], q: usize) -> DVector<f64> {
        match self {
            Self::Zero => DVector::zeros(q),
            Self::VanDerPol { mu1, mu2, mu3 } => DVector::from_element(1, vanderpol_g(x_stack, (*mu1, *mu2, *mu3))),
            Self::FlexJoint(p) => DVector::from_element(1, flexjoint_g(x_stack, p)),
        }
    }
}

/// Everything that defines one physical agent.
#[derive(Debug, Clone)]
pub struct AgentSpec {
    pub order: usize,
    pub output_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub b: DMatrix<f64>,
    /// When set, the controller pre-multiplies its output by `b⁻¹`.
    pub b_known: bool,
    pub exosystem: ExosystemSpec,
    pub objective: LocalObjective,
    pub constraint: ConvexSet,
    pub x0: DVector<f64>,
}

impl AgentSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        order: usize,
        output_dim: usize,
        nonlinearity: Nonlinearity,
        b: DMatrix<f64>,
        b_known: bool,
        exosystem: ExosystemSpec,
        objective: LocalObjective,
        constraint: ConvexSet,
        x0: DVector<f64>,
    ) -> Result<Self, PlantError> {
        if order < 2 {
            return Err(PlantError::OrderTooLow(order));
        }
        let q = output_dim;
        if let Some((n, qq)) = nonlinearity.required_shape() {
            if (n, qq) != (order, q) {
                return Err(PlantError::DimensionMismatch(format!(
                    "{nonlinearity:?} needs n = {n}, q = {qq}; got n = {order}, q = {q}"
                )));
            }
        }
        if b.shape() != (q, q) {
            return Err(PlantError::DimensionMismatch(format!("b is {}x{}, q = {q}", b.nrows(), b.ncols())));
        }
        if b.clone().lu().determinant().abs() < 1e-12 {
            return Err(PlantError::SingularGain);
        }
        if x0.len() != q * order {
            return Err(PlantError::DimensionMismatch(format!("x0 has {} entries, expected {}", x0.len(), q * order)));
        }
        if exosystem.output_dim() != q || objective.dim() != q || constraint.dim() != q {
            return Err(PlantError::DimensionMismatch(format!(
                "disturbance/objective/constraint dimensions ({}, {}, {}) differ from q = {q}",
                exosystem.output_dim(),
                objective.dim(),
                constraint.dim()
            )));
        }
        Ok(Self { order, output_dim, nonlinearity, b, b_known, exosystem, objective, constraint, x0 })
    }

    pub fn state_dim(&self) -> usize {
        self.order * self.output_dim
    }

    /// Feedforward input `g(col(r, 0, ..., 0), μ)` that holds the output at `r`.
    pub fn feedforward(&self, r: &[f64]) -> DVector<f64> {
        let mut x = vec![0.0; self.state_dim()];
        x[..self.output_dim].copy_from_slice(r);
        self.nonlinearity.eval(&x, self.output_dim)
    }
}

/// Chain-form derivative written into `out`.
pub(crate) fn plant_rhs_into(spec: &AgentSpec, x: &[f64], u: &DVector<f64>, d: &DVector<f64>, out: &mut [f64]) {
    let q = spec.output_dim;
    let n = spec.order;
    out[..(n - 1) * q].copy_from_slice(&x[q..n * q]);
    let top = spec.nonlinearity.eval(x, q) + &spec.b * u + d;
    out[(n - 1) * q..].copy_from_slice(top.as_slice());
}

pub fn plant_rhs(spec: &AgentSpec, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
    let q = spec.output_dim;
    if x.len() != spec.state_dim() || u.len() != q || d.len() != q {
        return Err(PlantError::DimensionMismatch(format!(
            "x: {} (expected {}), u: {}, d: {} (expected {q})",
            x.len(),
            spec.state_dim(),
            u.len(),
            d.len()
        )));
    }
    let mut out = DVector::zeros(x.len());
    plant_rhs_into(spec, x.as_slice(), u, d, out.as_mut_slice());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::ReferenceCost;

    fn scalar_exo() -> ExosystemSpec {
        ExosystemSpec::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0), DVector::zeros(1)).unwrap()
    }

    fn agent(order: usize, g: Nonlinearity) -> AgentSpec {
        AgentSpec::new(
            order,
            1,
            g,
            DMatrix::identity(1, 1),
            false,
            scalar_exo(),
            LocalObjective::reference(ReferenceCost::F1),
            ConvexSet::Whole { dim: 1 },
            DVector::zeros(order),
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn chain_examples() {
        let a = agent(2, Nonlinearity::Zero);
        assert_eq!(plant_rhs(&a, &v(&[0.0, 0.0]), &v(&[0.0]), &v(&[0.0])).unwrap(), v(&[0.0, 0.0]));
        assert_eq!(plant_rhs(&a, &v(&[1.0, 2.0]), &v(&[3.0]), &v(&[4.0])).unwrap(), v(&[2.0, 7.0]));
        assert!(plant_rhs(&a, &v(&[1.0]), &v(&[3.0]), &v(&[4.0])).is_err());
    }

    #[test]
    fn vanderpol_examples() {
        let a = agent(2, Nonlinearity::VanDerPol { mu1: 0.0, mu2: 0.0, mu3: 0.0 });
        assert_eq!(plant_rhs(&a, &v(&[1.0, 1.0]), &v(&[0.0]), &v(&[0.0])).unwrap(), v(&[1.0, -2.0]));
        assert_eq!(vanderpol_g(&[0.0, 0.0], (0.3, -0.2, 0.4)), 0.0);
        assert_eq!(vanderpol_g(&[1.0, 0.0], (0.0, 0.0, 0.0)), -1.0);
    }

    #[test]
    fn flexjoint_examples() {
        let p = FlexJointParams { j1: 1.0, j2: 1.0, mass: 1.0, gravity: 9.8, length: 1.0, spring: 1.0 };
        assert_eq!(flexjoint_g(&[0.0; 4], &p), 0.0);
        let g = flexjoint_g(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0], &p);
        assert!((g + 9.8).abs() < 1e-12);
        assert_eq!(p.input_gain(), 1.0);
    }

    #[test]
    fn construction_invariants() {
        let exo = scalar_exo();
        let obj = LocalObjective::reference(ReferenceCost::F1);
        let set = ConvexSet::Whole { dim: 1 };
        let build = |order, b: f64, x0: usize| {
            AgentSpec::new(order, 1, Nonlinearity::Zero, DMatrix::from_element(1, 1, b), false, exo.clone(), obj.clone(), set.clone(), DVector::zeros(x0))
        };
        assert!(matches!(build(1, 1.0, 1), Err(PlantError::OrderTooLow(1))));
        assert!(matches!(build(2, 0.0, 2), Err(PlantError::SingularGain)));
        assert!(matches!(build(2, 1.0, 3), Err(PlantError::DimensionMismatch(_))));
        let vdp_wrong_order = AgentSpec::new(3, 1, Nonlinearity::VanDerPol { mu1: 0.0, mu2: 0.0, mu3: 0.0 }, DMatrix::identity(1, 1), false, exo, obj, set, DVector::zeros(3));
        assert!(vdp_wrong_order.is_err());
    }

    #[test]
    fn feedforward_vanishes_at_origin() {
        let vdp = agent(2, Nonlinearity::VanDerPol { mu1: 0.2, mu2: -0.1, mu3: 0.3 });
        assert_eq!(vdp.feedforward(&[0.0])[0], 0.0);
        assert!((vdp.feedforward(&[1.0])[0] + 1.2).abs() < 1e-15);
        let p = FlexJointParams { j1: 1.0, j2: 1.0, mass: 1.0, gravity: 9.8, length: 1.0, spring: 1.0 };
        let arm = agent(4, Nonlinearity::FlexJoint(p));
        assert_eq!(arm.feedforward(&[0.0])[0], 0.0);
        assert!(arm.feedforward(&[2.0])[0].abs() > 1.0);
    }
}
