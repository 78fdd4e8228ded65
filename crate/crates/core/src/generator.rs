//! Distributed optimal-signal generator.
//!
//! Each virtual agent runs the projected primal-dual flow
//!
//! ```text
//! ṙ_i = -2 r_i + 2 P_Ωi( r_i - ∇f_i(r_i) - Σ_j a_ij (r_i - r_j) - Σ_j a_ij (v_i - v_j) )
//! v̇_i = r_i
//! ```
//!
//! whose primal states `r_i` converge to the constrained minimizer of
//! `Σ f_i` over `∩ Ω_i` on a connected graph.

use nalgebra::DVector;
use thiserror::Error;

use crate::convex::{ConvexError, ConvexSet, LocalObjective};
use crate::graph::LaplacianMatrix;
use crate::ode::{step_count, OdeSystem, Rk4};

/// Magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("projection failed for agent {agent}: {source}")]
    Projection { agent: usize, source: ConvexError },
    #[error("non-finite generator derivative for agent {agent}")]
    NonFinite { agent: usize },
    #[error("generator diverged at t = {t:.4} (agent {agent}, |state| = {magnitude:e})")]
    Divergence { t: f64, agent: usize, magnitude: f64 },
}

/// Per-agent primal estimate `r_i` and integral state `v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub r: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl GeneratorState {
    pub fn new(r: Vec<DVector<f64>>, v: Vec<DVector<f64>>) -> Result<Self, GeneratorError> {
        let q = r.first().map_or(0, |x| x.len());
        if r.len() != v.len() || r.iter().chain(&v).any(|x| x.len() != q) || q == 0 {
            return Err(GeneratorError::DimensionMismatch(
                "r and v must hold N vectors of one common dimension".into(),
            ));
        }
        Ok(Self { r, v })
    }

    pub fn n_agents(&self) -> usize {
        self.r.len()
    }

    pub fn dim(&self) -> usize {
        self.r[0].len()
    }

    fn stacked(blocks: &[DVector<f64>]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    fn unstack(data: &[f64], q: usize) -> Vec<DVector<f64>> {
        data.chunks(q).map(DVector::from_column_slice).collect()
    }
}

/// Static data of the generator layer.
#[derive(Debug, Clone)]
pub struct GeneratorProblem {
    pub laplacian: LaplacianMatrix,
    pub objectives: Vec<LocalObjective>,
    pub sets: Vec<ConvexSet>,
    pub q: usize,
}

impl GeneratorProblem {
    pub fn new(
        laplacian: LaplacianMatrix,
        objectives: Vec<LocalObjective>,
        sets: Vec<ConvexSet>,
    ) -> Result<Self, GeneratorError> {
        let n = laplacian.n_nodes();
        if objectives.len() != n || sets.len() != n {
            return Err(GeneratorError::DimensionMismatch(format!(
                "{n} nodes, {} objectives, {} sets",
                objectives.len(),
                sets.len()
            )));
        }
        let q = objectives[0].dim();
        if objectives.iter().any(|o| o.dim() != q) || sets.iter().any(|s| s.dim() != q) {
            return Err(GeneratorError::DimensionMismatch(
                "objectives and sets must share one output dimension".into(),
            ));
        }
        Ok(Self { laplacian, objectives, sets, q })
    }

    pub fn n_agents(&self) -> usize {
        self.objectives.len()
    }

    /// Derivative of the stacked states `r`, `v` (each `N·q` long).
    pub(crate) fn rhs_stacked(
        &self,
        r: &[f64],
        v: &[f64],
        dr: &mut [f64],
        dv: &mut [f64],
    ) -> Result<(), GeneratorError> {
        let q = self.q;
        let mut lr = vec![0.0; q];
        let mut lv = vec![0.0; q];
        for i in 0..self.n_agents() {
            let ri = &r[i * q..(i + 1) * q];
            self.laplacian.row_apply_into(i, r, q, &mut lr);
            self.laplacian.row_apply_into(i, v, q, &mut lv);
            let ri_vec = DVector::from_column_slice(ri);
            let grad = self.objectives[i].gradient(&ri_vec);
            let arg = DVector::from_iterator(q, (0..q).map(|k| ri[k] - grad[k] - lr[k] - lv[k]));
            let proj = self.sets[i]
                .project(&arg)
                .map_err(|source| GeneratorError::Projection { agent: i + 1, source })?;
            for k in 0..q {
                let d = -2.0 * ri[k] + 2.0 * proj[k];
                if !d.is_finite() {
                    return Err(GeneratorError::NonFinite { agent: i + 1 });
                }
                dr[i * q + k] = d;
                dv[i * q + k] = ri[k];
            }
        }
        Ok(())
    }

    /// `max_i |r_i - P_Ωi(r_i - ∇f_i(r_i) - (L r)_i - (L v)_i)|_∞`, i.e. half the
    /// primal speed; zero exactly at equilibria of the flow.
    pub fn fixed_point_residual(&self, state: &GeneratorState) -> Result<f64, GeneratorError> {
        let d = generator_rhs(state, &self.laplacian, &self.objectives, &self.sets)?;
        Ok(d.r.iter().map(|x| 0.5 * x.amax()).fold(0.0, f64::max))
    }
}

pub fn generator_rhs(
    state: &GeneratorState,
    laplacian: &LaplacianMatrix,
    objectives: &[LocalObjective],
    sets: &[ConvexSet],
) -> Result<GeneratorState, GeneratorError> {
    let n = laplacian.n_nodes();
    if state.n_agents() != n || objectives.len() != n || sets.len() != n {
        return Err(GeneratorError::DimensionMismatch(format!(
            "graph has {n} nodes but got {} states, {} objectives, {} sets",
            state.n_agents(),
            objectives.len(),
            sets.len()
        )));
    }
    let problem = GeneratorProblem::new(laplacian.clone(), objectives.to_vec(), sets.to_vec())?;
    if state.dim() != problem.q {
        return Err(GeneratorError::DimensionMismatch(format!(
            "state dimension {} vs objective dimension {}",
            state.dim(),
            problem.q
        )));
    }
    let r = GeneratorState::stacked(&state.r);
    let v = GeneratorState::stacked(&state.v);
    let mut dr = vec![0.0; r.len()];
    let mut dv = vec![0.0; v.len()];
    problem.rhs_stacked(&r, &v, &mut dr, &mut dv)?;
    Ok(GeneratorState {
        r: GeneratorState::unstack(&dr, problem.q),
        v: GeneratorState::unstack(&dv, problem.q),
    })
}

impl OdeSystem for GeneratorProblem {
    type Error = GeneratorError;

    fn dim(&self) -> usize {
        2 * self.n_agents() * self.q
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), GeneratorError> {
        let half = self.n_agents() * self.q;
        let (r, v) = y.split_at(half);
        let (dr, dv) = dy.split_at_mut(half);
        self.rhs_stacked(r, v, dr, dv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSample {
    pub t: f64,
    pub state: GeneratorState,
    /// `max_{i,j} |r_i - r_j|`
    pub consensus_residual: f64,
    /// `max_i |r_i - y*|`, when `y*` is known.
    pub distance_to_optimum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorTrajectory {
    pub samples: Vec<GeneratorSample>,
}

impl GeneratorTrajectory {
    pub fn last(&self) -> &GeneratorSample {
        self.samples.last().expect("trajectory holds at least the initial sample")
    }
}

pub fn consensus_residual(r: &[DVector<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in r.iter().enumerate() {
        for b in &r[i + 1..] {
            worst = worst.max((a - b).norm());
        }
    }
    worst
}

fn sample(t: f64, y: &[f64], n: usize, q: usize, y_star: Option<&DVector<f64>>) -> GeneratorSample {
    let (r, v) = y.split_at(n * q);
    let state = GeneratorState {
        r: GeneratorState::unstack(r, q),
        v: GeneratorState::unstack(v, q),
    };
    let consensus = consensus_residual(&state.r);
    let distance = y_star.map(|ys| state.r.iter().map(|ri| (ri - ys).norm()).fold(0.0, f64::max));
    GeneratorSample { t, state, consensus_residual: consensus, distance_to_optimum: distance }
}

/// Integrate the standalone generator with RK4, recording every
/// `record_every` steps (the initial state is always recorded).
pub fn run_generator(
    problem: &GeneratorProblem,
    initial: &GeneratorState,
    t_end: f64,
    dt: f64,
    record_every: usize,
    y_star: Option<&DVector<f64>>,
) -> Result<GeneratorTrajectory, GeneratorError> {
    if !(dt > 0.0) || !(t_end > 0.0) || record_every == 0 {
        return Err(GeneratorError::DimensionMismatch(format!(
            "invalid integration settings dt = {dt}, t_end = {t_end}, record_every = {record_every}"
        )));
    }
    if initial.n_agents() != problem.n_agents() || initial.dim() != problem.q {
        return Err(GeneratorError::DimensionMismatch("initial state does not match problem".into()));
    }
    let (n, q) = (problem.n_agents(), problem.q);
    let mut y: Vec<f64> = GeneratorState::stacked(&initial.r)
        .into_iter()
        .chain(GeneratorState::stacked(&initial.v))
        .collect();
    let mut rk = Rk4::new(y.len());
    let steps = step_count(t_end, dt);
    let mut samples = vec![sample(0.0, &y, n, q, y_star)];
    for k in 0..steps {
        rk.step(problem, k as f64 * dt, &mut y, dt)?;
        let t = (k + 1) as f64 * dt;
        if let Some((idx, mag)) = y
            .iter()
            .map(|x| x.abs())
            .enumerate()
            .find(|(_, m)| !(*m <= DIVERGENCE_LIMIT))
        {
            return Err(GeneratorError::Divergence { t, agent: (idx % (n * q)) / q + 1, magnitude: mag });
        }
        if (k + 1) % record_every == 0 {
            samples.push(sample(t, &y, n, q, y_star));
        }
    }
    Ok(GeneratorTrajectory { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::ReferenceCost;
    use crate::graph::{laplacian, WeightedGraph};
    use nalgebra::DMatrix;

    fn scalar(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    // f(y) = (y - 8)^2 on the whole line
    fn single_agent() -> GeneratorProblem {
        let l = laplacian(&WeightedGraph::from_edges(1, &[]).unwrap());
        GeneratorProblem::new(
            l,
            vec![LocalObjective::reference(ReferenceCost::F1)],
            vec![ConvexSet::Whole { dim: 1 }],
        )
        .unwrap()
    }

    #[test]
    fn single_agent_at_minimizer_is_still() {
        let p = single_agent();
        let state = GeneratorState::new(vec![scalar(8.0)], vec![scalar(-3.7)]).unwrap();
        let d = generator_rhs(&state, &p.laplacian, &p.objectives, &p.sets).unwrap();
        assert_eq!(d.r[0][0], 0.0);
        assert_eq!(d.v[0][0], 8.0);
    }

    #[test]
    fn zero_data_origin_is_equilibrium() {
        let g = crate::graph::reference_graph();
        let zero = LocalObjective::quadratic(DVector::zeros(2), DMatrix::zeros(2, 2));
        let state = GeneratorState::new(vec![DVector::zeros(2); 4], vec![DVector::zeros(2); 4]).unwrap();
        let d = generator_rhs(&state, &laplacian(&g), &vec![zero; 4], &vec![ConvexSet::Whole { dim: 2 }; 4]).unwrap();
        assert!(d.r.iter().chain(&d.v).all(|x| x.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn single_agent_matches_closed_form() {
        let p = single_agent();
        let init = GeneratorState::new(vec![scalar(0.0)], vec![scalar(0.0)]).unwrap();
        let traj = run_generator(&p, &init, 2.0, 1e-3, 10, None).unwrap();
        for s in &traj.samples {
            let exact = 8.0 * (1.0 - (-4.0 * s.t).exp());
            assert!((s.state.r[0][0] - exact).abs() < 1e-9, "t = {}", s.t);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = single_agent();
        let two = GeneratorState::new(vec![scalar(0.0); 2], vec![scalar(0.0); 2]).unwrap();
        assert!(generator_rhs(&two, &p.laplacian, &p.objectives, &p.sets).is_err());
        assert!(GeneratorState::new(vec![scalar(0.0)], vec![DVector::zeros(2)]).is_err());
    }
}
