//! Scenario documents (TOML), compiled-in presets, seeded resolution of every
//! random draw, and assumption checks.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{GainFunction, RbfNetwork, StabilizerCoeffs};
use crate::convex::{check_assumption1, ConvexSet, ConvexityReport, LocalObjective, ReferenceCost};
use crate::exosystem::{build_ssg, design_g, minimal_polynomial, ExosystemSpec, InternalModel};
use crate::generator::{GeneratorProblem, GeneratorState};
use crate::graph::{laplacian, LaplacianMatrix, WeightedGraph};
use crate::linalg::{self, MonicPolynomial};
use crate::oracle::{intersect_boxes, CentralProblem};
use crate::plant::{AgentSpec, FlexJointParams, Nonlinearity};
use crate::sim::{AgentController, AgentInitial, AgentSetup, ClosedLoopSystem, SimError};

pub type Matrix = Vec<Vec<f64>>;

pub const PRESETS: [&str; 2] = ["example1", "example2"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub output_dim: usize,
    pub graph: GraphConfig,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub validation: ValidationConfig,
    pub agents: Vec<AgentConfig>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub n_nodes: usize,
    /// `[i, j, weight]`, 1-based, undirected.
    pub edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_t_end() -> f64 {
    100.0
}
fn default_record_every() -> usize {
    100
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { dt: default_dt(), t_end: default_t_end(), record_every: default_record_every() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    /// Sample pairs per agent for the convexity check.
    #[serde(default = "default_samples")]
    pub convexity_samples: usize,
    /// Run even when assumptions fail.
    #[serde(default)]
    pub force: bool,
}

fn default_samples() -> usize {
    1000
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { convexity_samples: default_samples(), force: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub plant: PlantConfig,
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default)]
    pub internal_model: InternalModelConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub generator: GeneratorInitConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PlantConfig {
    /// `mu = [μ1, μ2, μ3, μ4]`; `μ4` scales preset disturbances.
    Vanderpol {
        mu: Option<Vec<f64>>,
        x0: Option<Vec<f64>>,
    },
    /// `mu = [μ1, ..., μ5]`; `L = (1 + μ4) L0`, `μ5` scales preset
    /// disturbances.
    Flexjoint {
        #[serde(default = "unit")]
        j1: f64,
        #[serde(default = "unit")]
        j2: f64,
        #[serde(default = "unit")]
        mass: f64,
        #[serde(default = "gravity")]
        gravity: f64,
        #[serde(default = "unit")]
        length0: f64,
        #[serde(default = "unit")]
        spring: f64,
        #[serde(default)]
        b_known: bool,
        mu: Option<Vec<f64>>,
        x0: Option<Vec<f64>>,
    },
    /// Pure integrator chain of the given order.
    Chain {
        order: usize,
        b: Option<Matrix>,
        #[serde(default)]
        b_known: bool,
        x0: Option<Vec<f64>>,
    },
}

fn unit() -> f64 {
    1.0
}
fn gravity() -> f64 {
    9.8
}

impl PlantConfig {
    fn order(&self) -> usize {
        match self {
            Self::Vanderpol { .. } => 2,
            Self::Flexjoint { .. } => 4,
            Self::Chain { order, .. } => *order,
        }
    }

    fn mu_len(&self) -> usize {
        match self {
            Self::Vanderpol { .. } => 4,
            Self::Flexjoint { .. } => 5,
            Self::Chain { .. } => 0,
        }
    }

    fn mu(&self) -> &[f64] {
        match self {
            Self::Vanderpol { mu, .. } | Self::Flexjoint { mu, .. } => mu.as_deref().unwrap_or(&[]),
            Self::Chain { .. } => &[],
        }
    }

    /// Scale of preset disturbances, `1 + μ_last`.
    fn disturbance_gain(&self) -> f64 {
        self.mu().last().map_or(1.0, |m| 1.0 + m)
    }

    fn x0_mut(&mut self) -> &mut Option<Vec<f64>> {
        match self {
            Self::Vanderpol { x0, .. } | Self::Flexjoint { x0, .. } | Self::Chain { x0, .. } => x0,
        }
    }

    fn mu_mut(&mut self) -> Option<&mut Option<Vec<f64>>> {
        match self {
            Self::Vanderpol { mu, .. } | Self::Flexjoint { mu, .. } => Some(mu),
            Self::Chain { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObjectiveConfig {
    F1,
    F2,
    F3,
    F4,
    /// `½ (y - center)ᵀ H (y - center)`
    Quadratic {
        center: Vec<f64>,
        hessian: Matrix,
        strong_convexity: Option<f64>,
        lipschitz: Option<f64>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConstraintConfig {
    #[default]
    Whole,
    Interval {
        lo: f64,
        hi: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
}

/// Either explicit `S`, `D` or a named preset (`zero`, `example1`,
/// `example2`, `example2-growing`) evaluated at `index` (defaults to the agent
/// position). Resolution replaces presets by explicit matrices.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceConfig {
    pub preset: Option<String>,
    pub index: Option<usize>,
    #[serde(rename = "S")]
    pub s: Option<Matrix>,
    #[serde(rename = "D")]
    pub d: Option<Matrix>,
    pub w0: Option<Vec<f64>>,
}

/// Explicit `F`, `G`, or poles (`[re, im]` pairs) for the placement of
/// `F = Φ + GΨ`; resolution fills in `F`, `G`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InternalModelConfig {
    #[serde(rename = "F")]
    pub f: Option<Matrix>,
    #[serde(rename = "G")]
    pub g: Option<Matrix>,
    pub poles: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// `k_1, ..., k_{n-1}`; defaults to the binomial coefficients of
    /// `(λ + 1)^{n-1}`.
    pub k: Option<Vec<f64>>,
    #[serde(default = "default_ell")]
    pub ell: f64,
    #[serde(default = "default_rho")]
    pub rho: String,
    #[serde(default)]
    pub rbf: RbfConfig,
    /// Fill value of `W⁰`.
    #[serde(default)]
    pub weight_prior: f64,
    #[serde(default)]
    pub theta_prior: f64,
}

fn default_ell() -> f64 {
    0.01
}
fn default_rho() -> String {
    "quartic".into()
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { k: None, ell: default_ell(), rho: default_rho(), rbf: RbfConfig::default(), weight_prior: 0.0, theta_prior: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RbfConfig {
    /// Centers per axis.
    #[serde(default = "default_nw")]
    pub n_w: usize,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    /// Defaults to 1.5 × grid spacing.
    pub kappa: Option<f64>,
}

fn default_nw() -> usize {
    21
}
fn default_lo() -> f64 {
    -5.0
}
fn default_hi() -> f64 {
    5.0
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self { n_w: default_nw(), lo: default_lo(), hi: default_hi(), kappa: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorInitConfig {
    pub r0: Option<Vec<f64>>,
    pub v0: Option<Vec<f64>>,
}

/// One failed structural or assumption check.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    /// `None` for scenario-wide checks, otherwise the 1-based agent.
    pub agent: Option<usize>,
    pub check: &'static str,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            Some(i) => write!(f, "agent {i}: {} ({})", self.check, self.detail),
            None => write!(f, "{} ({})", self.check, self.detail),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("scenario invalid:\n  {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Issue>),
    #[error("unknown sweep parameter {0:?} (expected n_w, ell, dt or t_end)")]
    UnknownParameter(String),
    #[error("bad sweep value {0:?}")]
    BadValue(String),
}

pub const CHECK_GRAPH: &str = "graph not connected";
pub const CHECK_HURWITZ_K: &str = "stabilizing polynomial not Hurwitz";
pub const CHECK_HURWITZ_F: &str = "internal model matrix F not Hurwitz";
pub const CHECK_CONVEXITY: &str = "strong convexity / Lipschitz gradient check failed";
pub const CHECK_FEASIBLE: &str = "constraint intersection empty";
pub const CHECK_EXOSYSTEM: &str = "exosystem has decaying modes";
pub const CHECK_EMBEDDING: &str = "internal model does not embed the exosystem";
pub const CHECK_LEAKAGE: &str = "leakage rate must be positive";
pub const CHECK_STRUCTURE: &str = "malformed scenario";

/// A resolved, built and (unless forced) validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub graph: WeightedGraph,
    pub laplacian: LaplacianMatrix,
    pub agents: Vec<AgentSetup>,
    pub convexity: Vec<ConvexityReport>,
    /// Assumption failures; empty unless `validation.force` was set.
    pub waived: Vec<Issue>,
}

fn to_dmatrix(m: &Matrix) -> Result<DMatrix<f64>, String> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || m.iter().any(|r| r.len() != cols) {
        return Err(format!("matrix rows must be non-empty and of equal length, got {m:?}"));
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| m[i][j]))
}

fn from_dmatrix(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn rotation(omega: f64) -> Matrix {
    vec![vec![0.0, omega], vec![-omega, 0.0]]
}

/// Exosystem `(S, D)` of a named preset for agent `index` with gain `c`.
pub fn disturbance_preset(name: &str, index: usize, c: f64) -> Option<(Matrix, Matrix)> {
    let i = index as f64;
    match (name, index) {
        ("zero", _) => Some((vec![vec![0.0]], vec![vec![0.0]])),
        ("example1", 1..) => Some((vec![vec![0.0, 1.0], vec![-i, 0.0]], vec![vec![c, 0.0]])),
        ("example2" | "example2-growing", 1) => Some((vec![vec![0.0]], vec![vec![c]])),
        ("example2", 2) => Some((vec![vec![0.0, 1.0], vec![0.0, 0.0]], vec![vec![c, 0.0]])),
        ("example2-growing", 2) => Some((vec![vec![1.0]], vec![vec![c]])),
        ("example2" | "example2-growing", 3) => Some((rotation(1.0), vec![vec![c, 0.0]])),
        ("example2", 4) => Some((rotation(2.0), vec![vec![c, 0.0]])),
        ("example2-growing", 4) => Some((
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0], vec![0.0, -2.0, 0.0]],
            vec![vec![1.0, c, 0.0]],
        )),
        _ => None,
    }
}

fn reference_edges() -> Vec<(usize, usize, f64)> {
    vec![(1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0), (1, 3, 1.0)]
}

fn reference_objective(i: usize) -> ObjectiveConfig {
    match i {
        1 => ObjectiveConfig::F1,
        2 => ObjectiveConfig::F2,
        3 => ObjectiveConfig::F3,
        _ => ObjectiveConfig::F4,
    }
}

fn reference_controller(k: Vec<f64>) -> ControllerConfig {
    ControllerConfig {
        k: Some(k),
        ell: 0.01,
        rho: "quartic".into(),
        rbf: RbfConfig { n_w: 21, lo: -5.0, hi: 5.0, kappa: Some(1.62) },
        weight_prior: 0.0,
        theta_prior: 0.0,
    }
}

/// Four Van der Pol oscillators with interval constraints.
pub fn example1() -> ScenarioConfig {
    let agents = (1..=4)
        .map(|i| {
            let fi = i as f64;
            AgentConfig {
                plant: PlantConfig::Vanderpol { mu: None, x0: None },
                objective: reference_objective(i),
                constraint: ConstraintConfig::Interval { lo: -3.0 + fi, hi: 1.0 + fi },
                disturbance: DisturbanceConfig { preset: Some("example1".into()), index: Some(i), ..Default::default() },
                internal_model: InternalModelConfig {
                    f: Some(vec![vec![-2.0 * fi, 1.0], vec![-fi, 0.0]]),
                    g: Some(vec![vec![-2.0 * fi], vec![0.0]]),
                    poles: None,
                },
                controller: reference_controller(vec![1.0]),
                generator: GeneratorInitConfig::default(),
            }
        })
        .collect();
    ScenarioConfig {
        name: "example1".into(),
        seed: 1,
        output_dim: 1,
        graph: GraphConfig { n_nodes: 4, edges: reference_edges() },
        integration: IntegrationConfig { dt: 1e-3, t_end: 100.0, record_every: 100 },
        validation: ValidationConfig::default(),
        agents,
    }
}

/// Four flexible-joint manipulators sharing the first example's costs,
/// constraints and graph.
pub fn example2() -> ScenarioConfig {
    let fg: [(Matrix, Matrix); 4] = [
        (vec![vec![-1.0]], vec![vec![-1.0]]),
        (vec![vec![-4.0, 1.0], vec![-4.0, 0.0]], vec![vec![-4.0], vec![-4.0]]),
        (vec![vec![-2.0, 1.0], vec![-1.0, 0.0]], vec![vec![-2.0], vec![0.0]]),
        (vec![vec![-4.0, 2.0], vec![-2.0, 0.0]], vec![vec![-4.0], vec![0.0]]),
    ];
    let mut cfg = example1();
    cfg.name = "example2".into();
    cfg.integration.t_end = 200.0;
    for (i, (a, (f, g))) in cfg.agents.iter_mut().zip(fg).enumerate() {
        a.plant = PlantConfig::Flexjoint {
            j1: 1.0,
            j2: 1.0,
            mass: 1.0,
            gravity: 9.8,
            length0: 1.0,
            spring: 1.0,
            b_known: false,
            mu: None,
            x0: None,
        };
        a.disturbance = DisturbanceConfig { preset: Some("example2".into()), index: Some(i + 1), ..Default::default() };
        a.internal_model = InternalModelConfig { f: Some(f), g: Some(g), poles: None };
        a.controller = reference_controller(vec![1.0, 3.0, 3.0]);
    }
    cfg
}

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    match name {
        "example1" => Some(example1()),
        "example2" => Some(example2()),
        _ => None,
    }
}

pub fn parse_config(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
}

/// A preset name or a path to a TOML document.
pub fn load_config(source: &str) -> Result<ScenarioConfig, ScenarioError> {
    if let Some(cfg) = preset(source) {
        return Ok(cfg);
    }
    let text = std::fs::read_to_string(Path::new(source))
        .map_err(|e| ScenarioError::Io { path: source.to_string(), source: e })?;
    parse_config(&text)
}

pub fn load_and_validate(source: &str) -> Result<Scenario, ScenarioError> {
    Scenario::build(load_config(source)?)
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, half_width: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-half_width..=half_width)).collect()
}

/// Fill every omitted random or derived field. Each agent draws from its
/// own ChaCha8 stream in the fixed order `μ, x0, ω0, r0, v0`, whether or not
/// a value is supplied, so overriding one field never shifts the others.
pub fn resolve(mut cfg: ScenarioConfig) -> Result<ScenarioConfig, ScenarioError> {
    let q = cfg.output_dim;
    let mut issues = Vec::new();
    for (i, a) in cfg.agents.iter_mut().enumerate() {
        let id = i + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(id as u64);
        let order = a.plant.order();

        let mu = uniform(&mut rng, a.plant.mu_len(), 0.5);
        if let Some(slot) = a.plant.mu_mut() {
            slot.get_or_insert(mu);
        }
        let x0 = uniform(&mut rng, order * q, 1.0);
        a.plant.x0_mut().get_or_insert(x0);

        let dist = &mut a.disturbance;
        if let Some(name) = dist.preset.take() {
            let index = dist.index.take().unwrap_or(id);
            match disturbance_preset(&name, index, a.plant.disturbance_gain()) {
                Some((s, d)) => {
                    dist.s = Some(s);
                    dist.d = Some(d);
                }
                None => issues.push(Issue {
                    agent: Some(id),
                    check: CHECK_STRUCTURE,
                    detail: format!("unknown disturbance preset {name:?} for index {index}"),
                }),
            }
        }
        dist.index = None;
        if dist.s.is_none() && dist.d.is_none() {
            let (s, d) = disturbance_preset("zero", 0, 1.0).expect("zero preset");
            dist.s = Some(s);
            dist.d = Some(d);
        }
        let m = dist.s.as_ref().map_or(0, Vec::len);
        let w0 = uniform(&mut rng, m, 1.0);
        dist.w0.get_or_insert(w0);

        let r0 = uniform(&mut rng, q, 1.0);
        let v0 = uniform(&mut rng, q, 1.0);
        a.generator.r0.get_or_insert(r0);
        a.generator.v0.get_or_insert(v0);

        let c = &mut a.controller;
        c.k.get_or_insert_with(|| StabilizerCoeffs::binomial(order).k().to_vec());
        if c.rbf.kappa.is_none() {
            let spacing = if c.rbf.n_w > 1 { (c.rbf.hi - c.rbf.lo) / (c.rbf.n_w - 1) as f64 } else { 1.0 / 1.5 };
            c.rbf.kappa = Some(1.5 * spacing);
        }

        let im = &mut a.internal_model;
        if im.f.is_none() || im.g.is_none() {
            match design_internal_model(dist.s.as_ref(), im.poles.as_deref(), q) {
                Ok(model) => {
                    im.f = Some(from_dmatrix(&model.f));
                    im.g = Some(from_dmatrix(&model.g));
                }
                Err(detail) => issues.push(Issue { agent: Some(id), check: CHECK_STRUCTURE, detail }),
            }
        }
        im.poles = None;
    }
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ScenarioError::Invalid(issues))
    }
}

fn design_internal_model(s: Option<&Matrix>, poles: Option<&[[f64; 2]]>, q: usize) -> Result<InternalModel, String> {
    let s = to_dmatrix(s.ok_or("missing S")?)?;
    let poly: MonicPolynomial = minimal_polynomial(&s);
    let ssg = build_ssg(&poly, q).map_err(|e| e.to_string())?;
    let poles: Vec<Complex64> = match poles {
        Some(p) => p.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
        None => vec![Complex64::new(-1.0, 0.0); ssg.n_p],
    };
    design_g(&ssg, &poles).map_err(|e| e.to_string())
}

fn build_constraint(c: &ConstraintConfig, q: usize) -> Result<ConvexSet, String> {
    let set = match c {
        ConstraintConfig::Whole => Ok(ConvexSet::Whole { dim: q }),
        ConstraintConfig::Interval { lo, hi } => ConvexSet::interval(*lo, *hi),
        ConstraintConfig::Box { lo, hi } => ConvexSet::new_box(lo.clone(), hi.clone()),
        ConstraintConfig::Ball { center, radius } => ConvexSet::ball(center.clone(), *radius),
    }
    .map_err(|e| e.to_string())?;
    if set.dim() != q {
        return Err(format!("constraint has dimension {}, output dimension is {q}", set.dim()));
    }
    Ok(set)
}

fn build_objective(o: &ObjectiveConfig) -> Result<LocalObjective, String> {
    let cost = |c| Ok(LocalObjective::reference(c));
    match o {
        ObjectiveConfig::F1 => cost(ReferenceCost::F1),
        ObjectiveConfig::F2 => cost(ReferenceCost::F2),
        ObjectiveConfig::F3 => cost(ReferenceCost::F3),
        ObjectiveConfig::F4 => cost(ReferenceCost::F4),
        ObjectiveConfig::Quadratic { center, hessian, strong_convexity, lipschitz } => {
            let h = to_dmatrix(hessian)?;
            if h.shape() != (center.len(), center.len()) {
                return Err(format!("hessian is {}x{}, center has {} entries", h.nrows(), h.ncols(), center.len()));
            }
            Ok(LocalObjective::quadratic(DVector::from_column_slice(center), h).with_bounds(*strong_convexity, *lipschitz))
        }
    }
}

fn build_plant(p: &PlantConfig, q: usize) -> Result<(Nonlinearity, DMatrix<f64>, bool), String> {
    let need_mu = |mu: &Option<Vec<f64>>, len: usize| match mu {
        Some(m) if m.len() == len => Ok(m.clone()),
        Some(m) => Err(format!("mu has {} entries, expected {len}", m.len())),
        None => Err("mu unresolved".to_string()),
    };
    match p {
        PlantConfig::Vanderpol { mu, .. } => {
            let mu = need_mu(mu, 4)?;
            Ok((Nonlinearity::VanDerPol { mu1: mu[0], mu2: mu[1], mu3: mu[2] }, DMatrix::identity(1, 1), false))
        }
        PlantConfig::Flexjoint { j1, j2, mass, gravity, length0, spring, b_known, mu, .. } => {
            let mu = need_mu(mu, 5)?;
            let params = FlexJointParams { j1: *j1, j2: *j2, mass: *mass, gravity: *gravity, length: (1.0 + mu[3]) * length0, spring: *spring };
            Ok((Nonlinearity::FlexJoint(params), DMatrix::from_element(1, 1, params.input_gain()), *b_known))
        }
        PlantConfig::Chain { b, b_known, .. } => {
            let b = match b {
                Some(b) => to_dmatrix(b)?,
                None => DMatrix::identity(q, q),
            };
            Ok((Nonlinearity::Zero, b, *b_known))
        }
    }
}

impl Scenario {
    /// Resolve, build and validate; all problems are reported together.
    /// With `validation.force` assumption failures are kept in `waived`
    /// instead of aborting.
    pub fn build(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        let cfg = resolve(cfg)?;
        let q = cfg.output_dim;
        let force = cfg.validation.force;
        let mut structural = Vec::new();
        let mut assumptions = Vec::new();
        let mut bad = |agent: Option<usize>, check: &'static str, detail: String| {
            let issue = Issue { agent, check, detail };
            if check == CHECK_STRUCTURE {
                structural.push(issue);
            } else {
                assumptions.push(issue);
            }
        };

        if q == 0 {
            bad(None, CHECK_STRUCTURE, "output_dim must be positive".into());
        }
        if cfg.agents.len() != cfg.graph.n_nodes {
            bad(None, CHECK_STRUCTURE, format!("{} agents for {} graph nodes", cfg.agents.len(), cfg.graph.n_nodes));
        }
        let integ = &cfg.integration;
        if !(integ.dt > 0.0) || !(integ.t_end >= integ.dt) || integ.record_every == 0 {
            bad(None, CHECK_STRUCTURE, format!("integration dt = {}, t_end = {}, record_every = {}", integ.dt, integ.t_end, integ.record_every));
        }
        let graph = WeightedGraph::from_edges(cfg.graph.n_nodes, &cfg.graph.edges);
        let (graph, lap) = match graph {
            Ok(g) => {
                let l = laplacian(&g);
                if !crate::graph::is_connected(&g) {
                    bad(None, CHECK_GRAPH, format!("algebraic connectivity {:.3e}", crate::graph::algebraic_connectivity(&l)));
                }
                (Some(g), Some(l))
            }
            Err(e) => {
                bad(None, CHECK_STRUCTURE, format!("graph: {e}"));
                (None, None)
            }
        };

        let mut agents = Vec::new();
        let mut convexity = Vec::new();
        for (i, a) in cfg.agents.iter().enumerate() {
            let id = Some(i + 1);
            let order = a.plant.order();
            let objective = build_objective(&a.objective).and_then(|o| {
                if o.dim() == q {
                    Ok(o)
                } else {
                    Err(format!("objective has dimension {}, output dimension is {q}", o.dim()))
                }
            });
            let constraint = build_constraint(&a.constraint, q);
            let plant = build_plant(&a.plant, q);

            let d = &a.disturbance;
            let exo = (|| {
                let s = to_dmatrix(d.s.as_ref().ok_or("missing S")?)?;
                let dm = to_dmatrix(d.d.as_ref().ok_or("missing D")?)?;
                let w0 = DVector::from_vec(d.w0.clone().ok_or("missing w0")?);
                ExosystemSpec::new_unchecked(s, dm, w0).map_err(|e| e.to_string())
            })();
            if let Ok(exo) = &exo {
                let slowest = linalg::eigenvalues(exo.s()).iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
                if slowest < -crate::exosystem::SPECTRAL_TOL {
                    bad(id, CHECK_EXOSYSTEM, format!("eigenvalue with real part {slowest:.3e}"));
                }
            }

            let c = &a.controller;
            let k = c.k.clone().unwrap_or_default();
            if k.len() + 1 != order {
                bad(id, CHECK_STRUCTURE, format!("k has {} entries, plant order is {order}", k.len()));
            }
            let coeffs = match StabilizerCoeffs::new(k.clone()) {
                Ok(s) => s,
                Err(_) => {
                    bad(id, CHECK_HURWITZ_K, format!("k = {k:?}"));
                    StabilizerCoeffs::new_unchecked(k)
                }
            };
            if !(c.ell > 0.0) {
                bad(id, CHECK_LEAKAGE, format!("ell = {}", c.ell));
            }
            let gain = match c.rho.as_str() {
                "quartic" => Some(GainFunction::Quartic),
                other => {
                    bad(id, CHECK_STRUCTURE, format!("unknown gain function {other:?}"));
                    None
                }
            };
            let network = RbfNetwork::tensor_grid(&vec![c.rbf.lo; q], &vec![c.rbf.hi; q], &vec![c.rbf.n_w; q], c.rbf.kappa)
                .map_err(|e| e.to_string());

            let im_cfg = &a.internal_model;
            let im = (|| {
                let f = to_dmatrix(im_cfg.f.as_ref().ok_or("missing F")?)?;
                let g = to_dmatrix(im_cfg.g.as_ref().ok_or("missing G")?)?;
                InternalModel::from_matrices_unchecked(f, g, q).map_err(|e| e.to_string())
            })();
            if let Ok(im) = &im {
                let abscissa = linalg::spectral_abscissa(&im.f);
                if abscissa > -crate::exosystem::SPECTRAL_TOL {
                    bad(id, CHECK_HURWITZ_F, format!("spectral abscissa {abscissa:.3e}"));
                }
                if let Ok(exo) = &exo {
                    if exo.output_dim() == q && !im.embeds(exo) {
                        bad(id, CHECK_EMBEDDING, format!("minimal polynomial of S is {:?}", minimal_polynomial(exo.s()).coeffs()));
                    }
                }
            }

            if let (Ok(o), Ok(s)) = (&objective, &constraint) {
                let report = check_assumption1(o, s, cfg.validation.convexity_samples, cfg.seed.wrapping_add(i as u64));
                if !report.pass {
                    bad(
                        id,
                        CHECK_CONVEXITY,
                        format!("observed curvature in [{:.3}, {:.3}]", report.min_strong_convexity_ratio, report.max_lipschitz_ratio),
                    );
                }
                convexity.push(report);
            }

            let x0 = DVector::from_vec(match &a.plant {
                PlantConfig::Vanderpol { x0, .. } | PlantConfig::Flexjoint { x0, .. } | PlantConfig::Chain { x0, .. } => x0.clone().unwrap_or_default(),
            });
            match (objective, constraint, plant, exo, network, im, gain) {
                (Ok(objective), Ok(constraint), Ok((g, b, b_known)), Ok(exo), Ok(network), Ok(im), Some(gain)) => {
                    let n_w = network.n_neurons();
                    let spec = AgentSpec::new(order, q, g, b, b_known, exo, objective, constraint, x0);
                    let r0 = a.generator.r0.clone().unwrap_or_default();
                    let v0 = a.generator.v0.clone().unwrap_or_default();
                    if r0.len() != q || v0.len() != q {
                        bad(id, CHECK_STRUCTURE, "generator initial state length".into());
                        continue;
                    }
                    match spec {
                        Ok(plant) => {
                            let prior = DMatrix::from_element(n_w, q, c.weight_prior);
                            agents.push(AgentSetup {
                                plant,
                                initial: AgentInitial {
                                    eta: DVector::zeros(im.dim()),
                                    w: prior.clone(),
                                    theta: c.theta_prior,
                                    r: DVector::from_vec(r0),
                                    v: DVector::from_vec(v0),
                                },
                                controller: AgentController {
                                    coeffs,
                                    network,
                                    gain,
                                    internal_model: im,
                                    ell: c.ell,
                                    w_prior: prior,
                                    theta_prior: c.theta_prior,
                                },
                            });
                        }
                        Err(e) => bad(id, CHECK_STRUCTURE, e.to_string()),
                    }
                }
                (o, s, p, e, n, m, _) => {
                    for detail in [o.err(), s.err(), p.err(), e.err(), n.err(), m.err()].into_iter().flatten() {
                        bad(id, CHECK_STRUCTURE, detail);
                    }
                }
            }
        }

        if agents.len() == cfg.agents.len() && !agents.is_empty() {
            let sets: Vec<ConvexSet> = agents.iter().map(|a| a.plant.constraint.clone()).collect();
            if sets.iter().all(|s| s.bounds().is_some()) {
                if let Err(e) = intersect_boxes(&sets) {
                    bad(None, CHECK_FEASIBLE, e.to_string());
                }
            }
        }

        if !structural.is_empty() || (!force && !assumptions.is_empty()) {
            structural.extend(assumptions);
            return Err(ScenarioError::Invalid(structural));
        }
        Ok(Self {
            config: cfg,
            graph: graph.expect("graph checked above"),
            laplacian: lap.expect("graph checked above"),
            agents,
            convexity,
            waived: assumptions,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn q(&self) -> usize {
        self.config.output_dim
    }

    pub fn central_problem(&self) -> CentralProblem {
        CentralProblem {
            objectives: self.agents.iter().map(|a| a.plant.objective.clone()).collect(),
            sets: self.agents.iter().map(|a| a.plant.constraint.clone()).collect(),
            q: self.q(),
        }
    }

    pub fn generator_problem(&self) -> GeneratorProblem {
        GeneratorProblem {
            laplacian: self.laplacian.clone(),
            objectives: self.agents.iter().map(|a| a.plant.objective.clone()).collect(),
            sets: self.agents.iter().map(|a| a.plant.constraint.clone()).collect(),
            q: self.q(),
        }
    }

    pub fn generator_initial(&self) -> GeneratorState {
        GeneratorState {
            r: self.agents.iter().map(|a| a.initial.r.clone()).collect(),
            v: self.agents.iter().map(|a| a.initial.v.clone()).collect(),
        }
    }

    pub fn closed_loop(&self) -> Result<ClosedLoopSystem, SimError> {
        ClosedLoopSystem::new(self.agents.clone(), self.generator_problem())
    }

    /// Fully resolved TOML; re-loading it reproduces this scenario.
    pub fn echo(&self) -> String {
        toml::to_string(&self.config).expect("scenario config serializes")
    }

    /// SHA-256 of [`Scenario::echo`], hex encoded.
    pub fn config_hash(&self) -> String {
        Sha256::digest(self.echo().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Apply a sweep override to every agent (`n_w`, `ell`) or to the horizon
/// (`dt`, `t_end`).
pub fn apply_override(cfg: &mut ScenarioConfig, param: &str, value: f64) -> Result<(), ScenarioError> {
    match param {
        "n_w" => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(ScenarioError::BadValue(format!("n_w = {value}")));
            }
            for a in &mut cfg.agents {
                a.controller.rbf.n_w = value as usize;
            }
        }
        "ell" => cfg.agents.iter_mut().for_each(|a| a.controller.ell = value),
        "dt" => cfg.integration.dt = value,
        "t_end" => cfg.integration.t_end = value,
        other => return Err(ScenarioError::UnknownParameter(other.to_string())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issues(err: ScenarioError) -> Vec<Issue> {
        match err {
            ScenarioError::Invalid(v) => v,
            other => panic!("expected validation failure, got {other}"),
        }
    }

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let s = load_and_validate(name).unwrap();
            assert_eq!(s.n_agents(), 4);
            assert!(s.waived.is_empty());
        }
    }

    #[test]
    fn example1_resolution() {
        let s = Scenario::build(example1()).unwrap();
        let a4 = &s.config.agents[3];
        assert_eq!(a4.disturbance.s, Some(vec![vec![0.0, 1.0], vec![-4.0, 0.0]]));
        let PlantConfig::Vanderpol { mu: Some(mu), x0: Some(x0) } = &a4.plant else { panic!() };
        assert_eq!(mu.len(), 4);
        assert!(mu.iter().all(|m| m.abs() <= 0.5));
        assert_eq!(x0.len(), 2);
        assert_eq!(a4.disturbance.d, Some(vec![vec![1.0 + mu[3], 0.0]]));
        assert_eq!(s.agents[0].controller.network.n_neurons(), 21);
    }

    #[test]
    fn echo_round_trips() {
        for name in PRESETS {
            let s = load_and_validate(name).unwrap();
            let again = Scenario::build(parse_config(&s.echo()).unwrap()).unwrap();
            assert_eq!(again.config, s.config);
            assert_eq!(again.config_hash(), s.config_hash());
        }
    }

    #[test]
    fn seeds_change_draws() {
        let mut cfg = example1();
        let a = Scenario::build(cfg.clone()).unwrap();
        cfg.seed = 2;
        let b = Scenario::build(cfg).unwrap();
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash(), Scenario::build(example1()).unwrap().config_hash());
    }

    #[test]
    fn disconnected_graph_rejected() {
        let mut cfg = example1();
        cfg.graph.edges = vec![(3, 4, 1.0)];
        let found = issues(Scenario::build(cfg).unwrap_err());
        assert!(found.iter().any(|i| i.check == CHECK_GRAPH));
    }

    #[test]
    fn failures_reported_together() {
        let mut cfg = example1();
        cfg.graph.edges.retain(|&(i, j, _)| !matches!((i, j), (1, 2) | (1, 3) | (2, 3)));
        cfg.agents[0].controller.k = Some(vec![-1.0]);
        cfg.agents[1].internal_model.f = Some(vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
        cfg.agents[2].constraint = ConstraintConfig::Interval { lo: 10.0, hi: 11.0 };
        let found = issues(Scenario::build(cfg).unwrap_err());
        for check in [CHECK_GRAPH, CHECK_HURWITZ_K, CHECK_HURWITZ_F, CHECK_FEASIBLE] {
            assert!(found.iter().any(|i| i.check == check), "missing {check}: {found:?}");
        }
        assert_eq!(found.iter().find(|i| i.check == CHECK_HURWITZ_K).unwrap().agent, Some(1));
    }

    #[test]
    fn growing_exosystems_fail_embedding() {
        let mut cfg = example2();
        cfg.agents[1].disturbance.preset = Some("example2-growing".into());
        let found = issues(Scenario::build(cfg).unwrap_err());
        assert!(found.iter().any(|i| i.check == CHECK_EMBEDDING && i.agent == Some(2)));
    }

    #[test]
    fn force_waives_assumptions() {
        let mut cfg = example1();
        cfg.agents.iter_mut().for_each(|a| a.controller.ell = -1.0);
        assert!(Scenario::build(cfg.clone()).is_err());
        cfg.validation.force = true;
        let s = Scenario::build(cfg).unwrap();
        assert_eq!(s.waived.len(), 4);
    }

    #[test]
    fn designed_internal_model_embeds() {
        let mut cfg = example1();
        cfg.agents[2].internal_model = InternalModelConfig { f: None, g: None, poles: Some(vec![[-1.0, 1.0], [-1.0, -1.0]]) };
        let s = Scenario::build(cfg).unwrap();
        let f = &s.agents[2].controller.internal_model.f;
        let chi = linalg::characteristic_polynomial(f);
        assert!((chi.coeffs()[0] - 2.0).abs() < 1e-9 && (chi.coeffs()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn chain_with_defaults() {
        let text = r#"
            name = "chain"
            [graph]
            n_nodes = 2
            edges = [[1, 2, 1.0]]
            [[agents]]
            plant = { kind = "chain", order = 3 }
            objective = { kind = "quadratic", center = [1.0], hessian = [[2.0]] }
            [[agents]]
            plant = { kind = "chain", order = 2 }
            objective = { kind = "quadratic", center = [3.0], hessian = [[2.0]] }
            constraint = { kind = "interval", lo = 0.0, hi = 1.5 }
        "#;
        let s = Scenario::build(parse_config(text).unwrap()).unwrap();
        assert_eq!(s.config.agents[0].controller.k, Some(vec![1.0, 2.0]));
        assert_eq!(s.config.agents[0].controller.rbf.kappa, Some(0.75));
        assert_eq!(s.agents[0].controller.internal_model.dim(), 1);
    }

    #[test]
    fn parse_errors_are_reported() {
        let err = parse_config("name = 3").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(_)));
        assert!(matches!(load_config("/nonexistent/file.toml"), Err(ScenarioError::Io { .. })));
    }

    #[test]
    fn overrides() {
        let mut cfg = example1();
        apply_override(&mut cfg, "n_w", 5.0).unwrap();
        apply_override(&mut cfg, "ell", 0.1).unwrap();
        apply_override(&mut cfg, "dt", 5e-4).unwrap();
        assert!(cfg.agents.iter().all(|a| a.controller.rbf.n_w == 5 && a.controller.ell == 0.1));
        assert_eq!(cfg.integration.dt, 5e-4);
        assert!(matches!(apply_override(&mut cfg, "kappa", 1.0), Err(ScenarioError::UnknownParameter(_))));
        assert!(matches!(apply_override(&mut cfg, "n_w", 2.5), Err(ScenarioError::BadValue(_))));
    }
}
