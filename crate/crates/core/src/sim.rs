//! Closed-loop assembly of all agents, fixed-step integration and run
//! diagnostics.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::controller::{zeta_into, GainFunction, RbfNetwork, StabilizerCoeffs};
use crate::exosystem::InternalModel;
use crate::generator::{GeneratorError, GeneratorProblem, DIVERGENCE_LIMIT};
use crate::ode::{step_count, OdeSystem, Rk4};
use crate::plant::{plant_rhs_into, AgentSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("state diverged at t = {t:.4} s in agent {agent} (|entry| = {magnitude:e})")]
    Divergence { t: f64, agent: usize, magnitude: f64 },
    #[error("non-finite {subsystem} derivative in agent {agent} at t = {t:.4} s")]
    NonFinite { t: f64, agent: usize, subsystem: &'static str },
    #[error("invalid closed-loop setup: {0}")]
    Setup(String),
    #[error("invalid integration settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

/// Controller blocks of one agent.
#[derive(Debug, Clone)]
pub struct AgentController {
    pub coeffs: StabilizerCoeffs,
    pub network: RbfNetwork,
    pub gain: GainFunction,
    pub internal_model: InternalModel,
    pub ell: f64,
    /// Prior `W⁰`, `n_w × q`.
    pub w_prior: DMatrix<f64>,
    pub theta_prior: f64,
}

/// Initial values of the controller and generator states; `x(0)` and
/// `ω(0)` come from the plant and exosystem specs.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentInitial {
    pub eta: DVector<f64>,
    pub w: DMatrix<f64>,
    pub theta: f64,
    pub r: DVector<f64>,
    pub v: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentSetup {
    pub plant: AgentSpec,
    pub controller: AgentController,
    pub initial: AgentInitial,
}

/// Offsets of one agent's block in the flat state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentLayout {
    pub x: usize,
    pub omega: usize,
    pub eta: usize,
    pub w: usize,
    pub theta: usize,
    pub r: usize,
    pub v: usize,
    pub end: usize,
}

/// Flat closed-loop state; per agent `x, ω, η, W (row-major), θ, r, v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub data: Vec<f64>,
}

pub struct ClosedLoopSystem {
    agents: Vec<AgentSetup>,
    generator: GeneratorProblem,
    layout: Vec<AgentLayout>,
    b_inv: Vec<Option<DMatrix<f64>>>,
    q: usize,
}

/// One agent's diagnostics at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentMetrics {
    pub y: DVector<f64>,
    pub r: DVector<f64>,
    /// `|y - y*|`, NaN when `y*` is unavailable.
    pub coordination_error: f64,
    pub generator_error: f64,
    pub tracking_error: f64,
    /// `𝒖(r) - Wᵀσ(r)`
    pub nn_error: DVector<f64>,
    /// `u_d + d = -Ψη + d`
    pub disturbance_rejection: DVector<f64>,
    /// ∞-norm of the agent's whole state block.
    pub state_norm: f64,
    pub w_frobenius: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub t: f64,
    pub agents: Vec<AgentMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ClosedLoopState>,
    pub metrics: Vec<MetricRecord>,
}

impl ClosedLoopSystem {
    pub fn new(agents: Vec<AgentSetup>, generator: GeneratorProblem) -> Result<Self, SimError> {
        if agents.len() != generator.n_agents() || agents.is_empty() {
            return Err(SimError::Setup(format!("{} agents for a {}-node generator", agents.len(), generator.n_agents())));
        }
        let q = generator.q;
        let mut layout = Vec::with_capacity(agents.len());
        let mut b_inv = Vec::with_capacity(agents.len());
        let mut off = 0;
        for (i, a) in agents.iter().enumerate() {
            let id = i + 1;
            let c = &a.controller;
            let p = &a.plant;
            let n_w = c.network.n_neurons();
            let problems = [
                (p.output_dim != q, "plant output dimension"),
                (c.coeffs.order() != p.order, "stabilizer order"),
                (c.network.input_dim() != q, "RBF input dimension"),
                (c.internal_model.q != q, "internal model output dimension"),
                (c.w_prior.shape() != (n_w, q), "W prior shape"),
                (a.initial.w.shape() != (n_w, q), "initial W shape"),
                (a.initial.eta.len() != c.internal_model.dim(), "initial eta length"),
                (a.initial.r.len() != q || a.initial.v.len() != q, "initial generator state length"),
            ];
            if let Some((_, what)) = problems.iter().find(|(bad, _)| *bad) {
                return Err(SimError::Setup(format!("agent {id}: {what} mismatch")));
            }
            let x = off;
            let omega = x + p.state_dim();
            let eta = omega + p.exosystem.order();
            let w = eta + c.internal_model.dim();
            let theta = w + n_w * q;
            let r = theta + 1;
            let v = r + q;
            let end = v + q;
            layout.push(AgentLayout { x, omega, eta, w, theta, r, v, end });
            off = end;
            b_inv.push(if p.b_known {
                Some(p.b.clone().try_inverse().ok_or_else(|| SimError::Setup(format!("agent {id}: b is singular")))?)
            } else {
                None
            });
        }
        Ok(Self { agents, generator, layout, b_inv, q })
    }

    pub fn agents(&self) -> &[AgentSetup] {
        &self.agents
    }

    pub fn layout(&self) -> &[AgentLayout] {
        &self.layout
    }

    pub fn generator(&self) -> &GeneratorProblem {
        &self.generator
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn initial_state(&self) -> ClosedLoopState {
        let mut data = vec![0.0; self.dim()];
        for (a, l) in self.agents.iter().zip(&self.layout) {
            data[l.x..l.omega].copy_from_slice(a.plant.x0.as_slice());
            data[l.omega..l.eta].copy_from_slice(a.plant.exosystem.w0().as_slice());
            data[l.eta..l.w].copy_from_slice(a.initial.eta.as_slice());
            write_row_major(&a.initial.w, &mut data[l.w..l.theta]);
            data[l.theta] = a.initial.theta;
            data[l.r..l.v].copy_from_slice(a.initial.r.as_slice());
            data[l.v..l.end].copy_from_slice(a.initial.v.as_slice());
        }
        ClosedLoopState { data }
    }

    /// Agent owning flat index `idx` (1-based).
    pub fn agent_of(&self, idx: usize) -> usize {
        self.layout.iter().position(|l| idx < l.end).map_or(self.layout.len(), |i| i + 1)
    }

    fn stacked_generator(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let q = self.q;
        let mut r = Vec::with_capacity(self.layout.len() * q);
        let mut v = Vec::with_capacity(self.layout.len() * q);
        for l in &self.layout {
            r.extend_from_slice(&y[l.r..l.v]);
            v.extend_from_slice(&y[l.v..l.end]);
        }
        (r, v)
    }

    /// Controller output `u` of agent `i` (zero-based) and its pieces.
    fn agent_control(&self, i: usize, y: &[f64], sigma: &mut [f64], zeta: &mut [f64]) -> (DVector<f64>, f64) {
        let q = self.q;
        let l = &self.layout[i];
        let c = &self.agents[i].controller;
        zeta_into(&y[l.x..l.omega], &y[l.r..l.v], &c.coeffs, zeta);
        c.network.activations_into(&y[l.r..l.v], sigma);
        let rho = c.gain.rho(zeta);
        let theta = y[l.theta];
        let w = &y[l.w..l.theta];
        let eta = &y[l.eta..l.w];
        let psi = &c.internal_model.psi;
        let u = DVector::from_fn(q, |k, _| {
            let nn: f64 = sigma.iter().enumerate().map(|(j, s)| w[j * q + k] * s).sum();
            let comp: f64 = (0..eta.len()).map(|m| psi[(k, m)] * eta[m]).sum();
            -nn - theta * rho * zeta[k] - comp
        });
        (u, rho)
    }

    pub fn closed_loop_rhs(&self, state: &ClosedLoopState, t: f64) -> Result<ClosedLoopState, SimError> {
        if state.data.len() != self.dim() {
            return Err(SimError::Setup(format!("state has {} entries, expected {}", state.data.len(), self.dim())));
        }
        let mut dy = vec![0.0; self.dim()];
        self.rhs(t, &state.data, &mut dy)?;
        Ok(ClosedLoopState { data: dy })
    }

    pub fn metrics(&self, state: &ClosedLoopState, t: f64, y_star: Option<&DVector<f64>>) -> MetricRecord {
        let q = self.q;
        let y = &state.data;
        let agents = self
            .agents
            .iter()
            .zip(&self.layout)
            .map(|(a, l)| {
                let out = DVector::from_column_slice(&y[l.x..l.x + q]);
                let r = DVector::from_column_slice(&y[l.r..l.v]);
                let w = read_row_major(&y[l.w..l.theta], q);
                let eta = DVector::from_column_slice(&y[l.eta..l.w]);
                let omega = DVector::from_column_slice(&y[l.omega..l.eta]);
                let d = a.plant.exosystem.d() * omega;
                let nn_error = a.plant.feedforward(r.as_slice()) - w.transpose() * a.controller.network.activations(&r);
                let (coordination_error, generator_error) = match y_star {
                    Some(ys) => ((&out - ys).norm(), (&r - ys).norm()),
                    None => (f64::NAN, f64::NAN),
                };
                AgentMetrics {
                    tracking_error: (&out - &r).norm(),
                    coordination_error,
                    generator_error,
                    nn_error,
                    disturbance_rejection: a.controller.internal_model.output(&eta) + d,
                    state_norm: y[l.x..l.end].iter().fold(0.0, |m: f64, v| m.max(v.abs())),
                    w_frobenius: w.norm(),
                    theta: y[l.theta],
                    y: out,
                    r,
                }
            })
            .collect();
        MetricRecord { t, agents }
    }

    fn check_divergence(&self, t: f64, y: &[f64]) -> Result<(), SimError> {
        match y.iter().enumerate().find(|(_, v)| !(v.abs() <= DIVERGENCE_LIMIT)) {
            Some((idx, v)) => Err(SimError::Divergence { t, agent: self.agent_of(idx), magnitude: v.abs() }),
            None => Ok(()),
        }
    }

    /// RK4 over `[0, t_end]`, recording the initial state and every
    /// `record_every`-th step.
    pub fn integrate(&self, t_end: f64, dt: f64, record_every: usize, y_star: Option<&DVector<f64>>) -> Result<Trajectory, SimError> {
        if !(dt > 0.0) || !(t_end >= dt) || record_every == 0 {
            return Err(SimError::Settings(format!("dt = {dt}, t_end = {t_end}, record_every = {record_every}")));
        }
        let mut state = self.initial_state();
        let mut rk = Rk4::new(self.dim());
        let steps = step_count(t_end, dt);
        let mut traj = Trajectory { times: vec![0.0], metrics: vec![self.metrics(&state, 0.0, y_star)], states: vec![state.clone()] };
        for k in 0..steps {
            let t = k as f64 * dt;
            rk.step(self, t, &mut state.data, dt)?;
            let t_next = (k + 1) as f64 * dt;
            self.check_divergence(t_next, &state.data)?;
            if (k + 1) % record_every == 0 {
                traj.metrics.push(self.metrics(&state, t_next, y_star));
                traj.times.push(t_next);
                traj.states.push(state.clone());
            }
        }
        Ok(traj)
    }
}

fn write_row_major(m: &DMatrix<f64>, out: &mut [f64]) {
    let q = m.ncols();
    for j in 0..m.nrows() {
        for k in 0..q {
            out[j * q + k] = m[(j, k)];
        }
    }
}

fn read_row_major(data: &[f64], q: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.len() / q, q, data)
}

fn ensure_finite(values: &[f64], t: f64, agent: usize, subsystem: &'static str) -> Result<(), SimError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SimError::NonFinite { t, agent, subsystem })
    }
}

impl OdeSystem for ClosedLoopSystem {
    type Error = SimError;

    fn dim(&self) -> usize {
        self.layout.last().map_or(0, |l| l.end)
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<(), SimError> {
        let q = self.q;
        let (r, v) = self.stacked_generator(y);
        let mut dr = vec![0.0; r.len()];
        let mut dv = vec![0.0; v.len()];
        self.generator.rhs_stacked(&r, &v, &mut dr, &mut dv).map_err(|e| match e {
            GeneratorError::NonFinite { agent } => SimError::NonFinite { t, agent, subsystem: "generator" },
            other => SimError::Generator(other),
        })?;
        let mut zeta = vec![0.0; q];
        for (i, (a, l)) in self.agents.iter().zip(&self.layout).enumerate() {
            let id = i + 1;
            let c = &a.controller;
            let mut sigma = vec![0.0; c.network.n_neurons()];
            let (u, rho) = self.agent_control(i, y, &mut sigma, &mut zeta);
            ensure_finite(u.as_slice(), t, id, "control")?;

            // exosystem and disturbance
            let s = a.plant.exosystem.s();
            let omega = &y[l.omega..l.eta];
            let m = omega.len();
            for row in 0..m {
                dy[l.omega + row] = (0..m).map(|col| s[(row, col)] * omega[col]).sum();
            }
            let dm = a.plant.exosystem.d();
            let d = DVector::from_fn(q, |k, _| (0..m).map(|col| dm[(k, col)] * omega[col]).sum());

            let u_plant = match &self.b_inv[i] {
                Some(inv) => inv * &u,
                None => u.clone(),
            };
            plant_rhs_into(&a.plant, &y[l.x..l.omega], &u_plant, &d, &mut dy[l.x..l.omega]);
            ensure_finite(&dy[l.x..l.eta], t, id, "plant")?;

            let im = &c.internal_model;
            let eta = &y[l.eta..l.w];
            for row in 0..eta.len() {
                let fe: f64 = (0..eta.len()).map(|col| im.f[(row, col)] * eta[col]).sum();
                let gu: f64 = (0..q).map(|k| im.g[(row, k)] * u[k]).sum();
                dy[l.eta + row] = fe + gu;
            }
            ensure_finite(&dy[l.eta..l.w], t, id, "internal model")?;

            let w = &y[l.w..l.theta];
            for (j, sj) in sigma.iter().enumerate() {
                for k in 0..q {
                    let idx = j * q + k;
                    dy[l.w + idx] = -c.ell * (w[idx] - c.w_prior[(j, k)]) + sj * zeta[k];
                }
            }
            let z2: f64 = zeta.iter().map(|z| z * z).sum();
            dy[l.theta] = -c.ell * (y[l.theta] - c.theta_prior) + rho * z2;
            ensure_finite(&dy[l.w..l.r], t, id, "adaptive law")?;

            dy[l.r..l.v].copy_from_slice(&dr[i * q..(i + 1) * q]);
            dy[l.v..l.end].copy_from_slice(&dv[i * q..(i + 1) * q]);
        }
        Ok(())
    }
}

/// Aggregate diagnostics of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub t_end: f64,
    /// `max_i sup |y_i - y*|` over the final window.
    pub terminal_coordination_error: f64,
    /// Same over the opening window.
    pub initial_coordination_error: f64,
    pub terminal_tracking_error: f64,
    pub terminal_generator_error: f64,
    pub terminal_disturbance_rejection: f64,
    /// Per agent `sup |ε_i|` over the final window.
    pub terminal_nn_error: Vec<f64>,
    /// Per agent `|ε_i|` at the sample closest to `t = 1 s`.
    pub nn_error_at_1s: Vec<f64>,
    pub max_state_norm: f64,
    pub terminal_outputs: Vec<DVector<f64>>,
}

/// Suprema over the last (and first) `fraction` of the horizon.
pub fn summarize(traj: &Trajectory, fraction: f64) -> RunSummary {
    let t_end = *traj.times.last().unwrap_or(&0.0);
    let tail_start = t_end * (1.0 - fraction);
    let head_end = t_end * fraction;
    let tail: Vec<&MetricRecord> = traj.metrics.iter().filter(|m| m.t >= tail_start - 1e-12).collect();
    let head: Vec<&MetricRecord> = traj.metrics.iter().filter(|m| m.t <= head_end + 1e-12).collect();
    let sup = |recs: &[&MetricRecord], f: &dyn Fn(&AgentMetrics) -> f64| {
        recs.iter().flat_map(|m| m.agents.iter().map(f)).fold(0.0f64, |a, b| if b.is_nan() { f64::NAN } else { a.max(b) })
    };
    let n_agents = traj.metrics.first().map_or(0, |m| m.agents.len());
    let near_1s = traj
        .metrics
        .iter()
        .min_by(|a, b| (a.t - 1.0).abs().total_cmp(&(b.t - 1.0).abs()));
    RunSummary {
        t_end,
        terminal_coordination_error: sup(&tail, &|a| a.coordination_error),
        initial_coordination_error: sup(&head, &|a| a.coordination_error),
        terminal_tracking_error: sup(&tail, &|a| a.tracking_error),
        terminal_generator_error: sup(&tail, &|a| a.generator_error),
        terminal_disturbance_rejection: sup(&tail, &|a| a.disturbance_rejection.norm()),
        terminal_nn_error: (0..n_agents)
            .map(|i| tail.iter().map(|m| m.agents[i].nn_error.norm()).fold(0.0, f64::max))
            .collect(),
        nn_error_at_1s: (0..n_agents).map(|i| near_1s.map_or(f64::NAN, |m| m.agents[i].nn_error.norm())).collect(),
        max_state_norm: traj.metrics.iter().flat_map(|m| m.agents.iter().map(|a| a.state_norm)).fold(0.0, f64::max),
        terminal_outputs: traj.metrics.last().map_or_else(Vec::new, |m| m.agents.iter().map(|a| a.y.clone()).collect()),
    }
}

fn push_vector(header: &mut Vec<String>, name: &str, i: usize, q: usize) {
    if q == 1 {
        header.push(format!("{name}_{i}"));
    } else {
        header.extend((1..=q).map(|k| format!("{name}_{i}_{k}")));
    }
}

/// Column names: `t`, then per agent `y_i, r_i, coord_err_i, track_err_i,
/// nn_err_i, eid_i, theta_i, W_fro_i`. Vector quantities with `q > 1` expand
/// to `name_i_k`; `nn_err` and `eid` are signed for `q = 1` and norms
/// otherwise.
pub fn csv_header(n_agents: usize, q: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 1..=n_agents {
        push_vector(&mut h, "y", i, q);
        push_vector(&mut h, "r", i, q);
        for name in ["coord_err", "track_err", "nn_err", "eid", "theta", "W_fro"] {
            h.push(format!("{name}_{i}"));
        }
    }
    h
}

fn signed_or_norm(v: &DVector<f64>) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v.norm()
    }
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n_agents = traj.metrics.first().map_or(0, |m| m.agents.len());
    let q = traj.metrics.first().and_then(|m| m.agents.first()).map_or(1, |a| a.y.len());
    let mut out = csv_header(n_agents, q).join(",");
    out.push('\n');
    for m in &traj.metrics {
        let mut row = vec![format!("{}", m.t)];
        for a in &m.agents {
            row.extend(a.y.iter().map(|v| format!("{v}")));
            row.extend(a.r.iter().map(|v| format!("{v}")));
            for v in [
                a.coordination_error,
                a.tracking_error,
                signed_or_norm(&a.nn_error),
                signed_or_norm(&a.disturbance_rejection),
                a.theta,
                a.w_frobenius,
            ] {
                row.push(format!("{v}"));
            }
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}
