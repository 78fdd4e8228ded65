//! Centralized reference solver for `min Σ f_i(y)` over `Ω_0 = ∩ Ω_i`.

use nalgebra::DVector;
use thiserror::Error;

use crate::convex::{check_assumption1, ConvexError, ConvexSet, LocalObjective};
use crate::graph::{laplacian, WeightedGraph};

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("constraint intersection is empty (coordinate {coordinate}: [{lo}, {hi}])")]
    EmptyIntersection { coordinate: usize, lo: f64, hi: f64 },
    #[error("no iterate met tol after {iterations} iterations (last residual {last_residual:e})")]
    MaxIterations { iterations: usize, last_residual: f64 },
    #[error("step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

/// `min_y Σ f_i(y)` subject to `y ∈ ∩ Ω_i`.
#[derive(Debug, Clone)]
pub struct CentralProblem {
    pub objectives: Vec<LocalObjective>,
    pub sets: Vec<ConvexSet>,
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub y: DVector<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub step: f64,
}

/// Componentwise `[max lo, min hi]`.
pub fn intersect_boxes(sets: &[ConvexSet]) -> Result<ConvexSet, OracleError> {
    let dim = sets.first().map(ConvexSet::dim).ok_or_else(|| OracleError::DimensionMismatch("no sets".into()))?;
    let mut lo = vec![f64::NEG_INFINITY; dim];
    let mut hi = vec![f64::INFINITY; dim];
    for s in sets {
        if s.dim() != dim {
            return Err(OracleError::DimensionMismatch(format!("sets of dimension {dim} and {}", s.dim())));
        }
        let (l, h) = s
            .bounds()
            .ok_or_else(|| OracleError::DimensionMismatch(format!("{s:?} is not a box")))?;
        for k in 0..dim {
            lo[k] = lo[k].max(l[k]);
            hi[k] = hi[k].min(h[k]);
        }
    }
    for k in 0..dim {
        if lo[k] > hi[k] {
            return Err(OracleError::EmptyIntersection { coordinate: k, lo: lo[k], hi: hi[k] });
        }
    }
    if lo.iter().all(|l| l.is_infinite()) && hi.iter().all(|h| h.is_infinite()) {
        return Ok(ConvexSet::Whole { dim });
    }
    Ok(ConvexSet::Box { lo, hi })
}

/// Projection onto `Ω_0`: exact for boxes, Dykstra's alternating scheme
/// otherwise.
#[derive(Debug, Clone)]
enum Intersection {
    Exact(ConvexSet),
    Dykstra(Vec<ConvexSet>),
}

impl Intersection {
    fn build(sets: &[ConvexSet]) -> Result<Self, OracleError> {
        if sets.iter().all(|s| s.bounds().is_some()) {
            return intersect_boxes(sets).map(Self::Exact);
        }
        Ok(Self::Dykstra(sets.to_vec()))
    }

    fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        match self {
            Self::Exact(s) => Ok(s.project(x)?),
            Self::Dykstra(sets) => {
                let mut y = x.clone();
                let mut incr = vec![DVector::zeros(x.len()); sets.len()];
                for _ in 0..10_000 {
                    let prev = y.clone();
                    for (s, p) in sets.iter().zip(incr.iter_mut()) {
                        let z = s.project(&(&y + &*p))?;
                        *p = &y + &*p - &z;
                        y = z;
                    }
                    if (&y - &prev).amax() <= 1e-14 * (1.0 + y.amax()) {
                        break;
                    }
                }
                if !sets.iter().all(|s| s.contains(&y, 1e-8)) {
                    return Err(OracleError::EmptyIntersection { coordinate: 0, lo: f64::NAN, hi: f64::NAN });
                }
                Ok(y)
            }
        }
    }
}

impl CentralProblem {
    pub fn new(objectives: Vec<LocalObjective>, sets: Vec<ConvexSet>) -> Result<Self, OracleError> {
        let q = objectives.first().map(LocalObjective::dim).unwrap_or(0);
        if q == 0 || objectives.len() != sets.len() {
            return Err(OracleError::DimensionMismatch(format!(
                "{} objectives and {} sets",
                objectives.len(),
                sets.len()
            )));
        }
        if objectives.iter().any(|o| o.dim() != q) || sets.iter().any(|s| s.dim() != q) {
            return Err(OracleError::DimensionMismatch("objectives and sets must share one dimension".into()));
        }
        Ok(Self { objectives, sets, q })
    }

    /// Same objectives with every constraint dropped.
    pub fn unconstrained(&self) -> Self {
        Self { objectives: self.objectives.clone(), sets: vec![ConvexSet::Whole { dim: self.q }; self.sets.len()], q: self.q }
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        self.objectives.iter().map(|o| o.value(y)).sum()
    }

    pub fn gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        self.objectives.iter().fold(DVector::zeros(self.q), |acc, o| acc + o.gradient(y))
    }

    /// `Ω_0` when every local set is a box.
    pub fn feasible_box(&self) -> Result<ConvexSet, OracleError> {
        intersect_boxes(&self.sets)
    }

    /// `1 / Σ L_i` with declared Lipschitz bounds, falling back to 1.5× the
    /// sampled ratio where none is declared.
    pub fn default_step(&self) -> f64 {
        let total: f64 = self
            .objectives
            .iter()
            .zip(&self.sets)
            .enumerate()
            .map(|(i, (o, s))| {
                o.gradient_lipschitz_ub.unwrap_or_else(|| 1.5 * check_assumption1(o, s, 256, i as u64).max_lipschitz_ratio)
            })
            .sum();
        if total > 0.0 && total.is_finite() {
            1.0 / total
        } else {
            1.0
        }
    }
}

/// `|y - P_Ω0(y - Σ ∇f_i(y))|`
pub fn kkt_residual(problem: &CentralProblem, y: &DVector<f64>) -> Result<f64, OracleError> {
    let omega = Intersection::build(&problem.sets)?;
    kkt_with(problem, &omega, y)
}

fn kkt_with(problem: &CentralProblem, omega: &Intersection, y: &DVector<f64>) -> Result<f64, OracleError> {
    if y.len() != problem.q {
        return Err(OracleError::DimensionMismatch(format!("point of length {} for q = {}", y.len(), problem.q)));
    }
    let p = omega.project(&(y - problem.gradient(y)))?;
    Ok((y - p).norm())
}

/// Projected gradient from `P_Ω0(0)`.
pub fn solve(problem: &CentralProblem, step: f64, tol: f64, max_iter: usize) -> Result<OracleSolution, OracleError> {
    solve_from(problem, &DVector::zeros(problem.q), step, tol, max_iter)
}

/// [`solve`] with the default step, tolerance and iteration cap.
pub fn solve_default(problem: &CentralProblem) -> Result<OracleSolution, OracleError> {
    solve(problem, problem.default_step(), DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn solve_from(
    problem: &CentralProblem,
    start: &DVector<f64>,
    step: f64,
    tol: f64,
    max_iter: usize,
) -> Result<OracleSolution, OracleError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(OracleError::InvalidStep(step));
    }
    if start.len() != problem.q {
        return Err(OracleError::DimensionMismatch(format!("start of length {} for q = {}", start.len(), problem.q)));
    }
    let omega = Intersection::build(&problem.sets)?;
    let mut y = omega.project(start)?;
    let mut residual = kkt_with(problem, &omega, &y)?;
    for it in 0..max_iter {
        if residual <= tol {
            return Ok(OracleSolution { y, kkt_residual: residual, iterations: it, step });
        }
        y = omega.project(&(&y - problem.gradient(&y) * step))?;
        residual = kkt_with(problem, &omega, &y)?;
    }
    if residual <= tol {
        return Ok(OracleSolution { y, kkt_residual: residual, iterations: max_iter, step });
    }
    Err(OracleError::MaxIterations { iterations: max_iter, last_residual: residual })
}

/// Whether `(L ⊗ I_q) y = 0` and "all blocks equal" agree for `y_stack`.
/// Always true on a connected graph.
pub fn check_consensus_equivalence(graph: &WeightedGraph, y_stack: &[f64], q: usize) -> bool {
    let n = graph.n_nodes();
    if q == 0 || y_stack.len() != n * q {
        return false;
    }
    let scale = y_stack.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale;
    let ly = laplacian(graph).apply_stacked(y_stack, q);
    let in_kernel = ly.iter().all(|v| v.abs() <= tol * n as f64);
    let equal_blocks = (1..n).all(|i| (0..q).all(|k| (y_stack[i * q + k] - y_stack[k]).abs() <= tol));
    in_kernel == equal_blocks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::ReferenceCost;
    use crate::graph::reference_graph;
    use approx::assert_abs_diff_eq;

    fn example1(constrained: bool) -> CentralProblem {
        let objectives = (1..=4).map(|i| LocalObjective::reference(ReferenceCost::from_index(i).unwrap())).collect();
        let sets = (1..=4)
            .map(|i| {
                if constrained {
                    ConvexSet::interval(-3.0 + i as f64, 1.0 + i as f64).unwrap()
                } else {
                    ConvexSet::Whole { dim: 1 }
                }
            })
            .collect();
        CentralProblem::new(objectives, sets).unwrap()
    }

    fn s(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn example1_optimum() {
        let p = example1(true);
        let sol = solve_default(&p).unwrap();
        assert_abs_diff_eq!(sol.y[0], 2.0, epsilon = 1e-6);
        assert!(sol.kkt_residual <= 1e-9);
        let u = solve_default(&example1(false)).unwrap();
        assert!((u.y[0] - 3.24).abs() <= 0.01, "unconstrained {}", u.y[0]);
        assert!(!p.feasible_box().unwrap().contains(&u.y, 0.0));
    }

    #[test]
    fn single_quadratic() {
        let p = CentralProblem::new(
            vec![LocalObjective::reference(ReferenceCost::F1)],
            vec![ConvexSet::Whole { dim: 1 }],
        )
        .unwrap();
        let sol = solve(&p, 0.25, 1e-12, 1000).unwrap();
        assert_abs_diff_eq!(sol.y[0], 8.0, epsilon = 1e-9);
        assert_eq!(kkt_residual(&p, &s(8.0)).unwrap(), 0.0);
    }

    #[test]
    fn kkt_examples() {
        let p = example1(true);
        assert!(kkt_residual(&p, &s(2.0)).unwrap() <= 1e-6);
        assert!(kkt_residual(&p, &s(1.5)).unwrap() > 0.01);
    }

    #[test]
    fn intersect_examples() {
        let sets: Vec<_> = (1..=4).map(|i| ConvexSet::interval(-3.0 + i as f64, 1.0 + i as f64).unwrap()).collect();
        assert_eq!(intersect_boxes(&sets).unwrap(), ConvexSet::interval(1.0, 2.0).unwrap());
        let same = vec![sets[0].clone(), sets[0].clone()];
        assert_eq!(intersect_boxes(&same).unwrap(), sets[0]);
        let disjoint = vec![ConvexSet::interval(0.0, 1.0).unwrap(), ConvexSet::interval(2.0, 3.0).unwrap()];
        assert!(matches!(intersect_boxes(&disjoint), Err(OracleError::EmptyIntersection { .. })));
    }

    #[test]
    fn max_iter_reports_residual() {
        let p = example1(true);
        match solve(&p, 1e-6, 1e-12, 3) {
            Err(OracleError::MaxIterations { iterations: 3, last_residual }) => assert!(last_residual > 0.0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(solve(&p, 0.0, 1e-9, 10), Err(OracleError::InvalidStep(_))));
    }

    #[test]
    fn ball_and_box_via_dykstra() {
        // min |y - (3, 3)|² over unit ball ∩ [0, 2]² → (1/√2, 1/√2)
        let obj = LocalObjective::quadratic(DVector::from_vec(vec![3.0, 3.0]), nalgebra::DMatrix::identity(2, 2) * 2.0)
            .with_bounds(Some(2.0), Some(2.0));
        let p = CentralProblem::new(
            vec![obj.clone(), obj],
            vec![ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap(), ConvexSet::new_box(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap()],
        )
        .unwrap();
        let sol = solve(&p, p.default_step(), 1e-9, 10_000).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(sol.y[0], h, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.y[1], h, epsilon = 1e-7);
    }

    #[test]
    fn consensus_equivalence_examples() {
        let g = reference_graph();
        assert!(check_consensus_equivalence(&g, &[2.5; 4], 1));
        let y = [1.0, 1.0, 3.0, 1.0];
        assert!(check_consensus_equivalence(&g, &y, 1));
        let l = laplacian(&g).apply_stacked(&y, 1);
        assert!(l.iter().any(|v| v.abs() > 1.0));
    }
}
