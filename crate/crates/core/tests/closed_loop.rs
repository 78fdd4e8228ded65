use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use optcoord::cli::{simulate, TERMINAL_FRACTION};
use optcoord::controller::{adaptive_rhs, control, zeta, AdaptiveState};
use optcoord::exosystem::internal_model_rhs;
use optcoord::generator::{generator_rhs, run_generator, GeneratorState};
use optcoord::oracle::solve_default;
use optcoord::plant::plant_rhs;
use optcoord::scenario::{example1, example2, Scenario};
use optcoord::sim::{summarize, ClosedLoopState};

fn random_state(len: usize, seed: u64) -> ClosedLoopState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ClosedLoopState { data: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect() }
}

fn block(state: &ClosedLoopState, from: usize, to: usize) -> DVector<f64> {
    DVector::from_column_slice(&state.data[from..to])
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-11 * a.abs().max(b.abs()).max(1.0)
}

fn assert_composition(s: &Scenario, seed: u64) {
    let sys = s.closed_loop().unwrap();
    let q = sys.q();
    let state = random_state(sys.layout().last().unwrap().end, seed);
    let d = sys.closed_loop_rhs(&state, 0.7).unwrap();

    let gen_state = GeneratorState {
        r: sys.layout().iter().map(|l| block(&state, l.r, l.v)).collect(),
        v: sys.layout().iter().map(|l| block(&state, l.v, l.end)).collect(),
    };
    let g = sys.generator();
    let dgen = generator_rhs(&gen_state, &g.laplacian, &g.objectives, &g.sets).unwrap();

    for (i, (a, l)) in sys.agents().iter().zip(sys.layout()).enumerate() {
        let c = &a.controller;
        let x = block(&state, l.x, l.omega);
        let omega = block(&state, l.omega, l.eta);
        let eta = block(&state, l.eta, l.w);
        let r = block(&state, l.r, l.v);
        let adaptive = AdaptiveState {
            w: DMatrix::from_row_slice(c.network.n_neurons(), q, &state.data[l.w..l.theta]),
            theta: state.data[l.theta],
            w0: c.w_prior.clone(),
            theta0: c.theta_prior,
            ell: c.ell,
        };
        let z = zeta(&x, &r, &c.coeffs).unwrap();
        let u = control(&adaptive, &c.network, &c.gain, &z, &r, &c.internal_model, &eta).unwrap();
        let dist = a.plant.exosystem.d() * &omega;
        let expected = [
            plant_rhs(&a.plant, &x, &u, &dist).unwrap(),
            a.plant.exosystem.s() * &omega,
            internal_model_rhs(&c.internal_model, &eta, &u).unwrap(),
        ];
        let (dw, dtheta) = adaptive_rhs(&adaptive, &c.network, &c.gain, &z, &r).unwrap();
        let mut want: Vec<f64> = expected.iter().flat_map(|v| v.iter().copied()).collect();
        want.extend((0..dw.nrows()).flat_map(|j| (0..q).map(move |k| (j, k))).map(|(j, k)| dw[(j, k)]));
        want.push(dtheta);
        want.extend(dgen.r[i].iter());
        want.extend(dgen.v[i].iter());
        let got = &d.data[l.x..l.end];
        assert_eq!(got.len(), want.len());
        for (k, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(close(*g, *w), "agent {} entry {k}: {g} vs {w}", i + 1);
        }
    }
}

#[test]
fn closed_loop_matches_module_composition() {
    let s1 = Scenario::build(example1()).unwrap();
    let s2 = Scenario::build(example2()).unwrap();
    for seed in 0..5 {
        assert_composition(&s1, seed);
        assert_composition(&s2, seed);
    }
}

#[test]
fn zero_controller_leaves_open_loop_plant() {
    let s = Scenario::build(example1()).unwrap();
    let sys = s.closed_loop().unwrap();
    let mut state = random_state(sys.layout().last().unwrap().end, 9);
    for l in sys.layout() {
        state.data[l.eta..l.r].iter_mut().for_each(|v| *v = 0.0);
    }
    let d = sys.closed_loop_rhs(&state, 0.0).unwrap();
    for (a, l) in sys.agents().iter().zip(sys.layout()) {
        let x = block(&state, l.x, l.omega);
        let dist = a.plant.exosystem.d() * block(&state, l.omega, l.eta);
        let open = plant_rhs(&a.plant, &x, &DVector::zeros(1), &dist).unwrap();
        assert_eq!(&d.data[l.x..l.omega], open.as_slice());
    }
}

#[test]
fn example1_run_invariants() {
    let s = Scenario::build(example1()).unwrap();
    let (sol, traj, summary, _) = simulate(&s).unwrap();
    assert!((sol.y[0] - 2.0).abs() < 1e-9);

    for w in traj.times.windows(2) {
        assert!(w[1] > w[0]);
    }
    assert_eq!(traj.times.len(), traj.states.len());
    assert_eq!(traj.times.len(), 1001);

    for m in &traj.metrics {
        for a in &m.agents {
            // tight in one dimension (y, r, y* collinear): allow rounding only
            let bound = (a.tracking_error + a.generator_error) * (1.0 + 4.0 * f64::EPSILON);
            assert!(a.coordination_error <= bound, "triangle at t = {}: {} > {} + {}", m.t, a.coordination_error, a.tracking_error, a.generator_error);
            assert!(a.state_norm < 1e4);
            assert!(a.w_frobenius < 1e6 && a.theta.abs() < 1e6);
        }
    }
    assert!(summary.terminal_coordination_error <= 0.1);
    assert!(summary.terminal_coordination_error < summary.initial_coordination_error);
    assert!((summary.t_end - 100.0).abs() < 1e-9 && TERMINAL_FRACTION == 0.2);
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let mut cfg = example2();
    cfg.integration.t_end = 5.0;
    let a = simulate(&Scenario::build(cfg.clone()).unwrap()).unwrap().1;
    let b = simulate(&Scenario::build(cfg).unwrap()).unwrap().1;
    assert_eq!(a.states, b.states);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn halving_dt_keeps_terminal_error() {
    let coarse = simulate(&Scenario::build(example1()).unwrap()).unwrap().2;
    let mut cfg = example1();
    cfg.integration.dt = 5e-4;
    cfg.integration.record_every = 200;
    let fine = simulate(&Scenario::build(cfg).unwrap()).unwrap().2;
    let rel = (fine.terminal_coordination_error - coarse.terminal_coordination_error).abs() / coarse.terminal_coordination_error;
    assert!(rel < 0.01, "relative change {rel}");
}

#[test]
fn generator_invariants_on_example1() {
    let s = Scenario::build(example1()).unwrap();
    let y_star = solve_default(&s.central_problem()).unwrap().y;
    let problem = s.generator_problem();
    let traj = run_generator(&problem, &s.generator_initial(), 100.0, 1e-3, 100, Some(&y_star)).unwrap();
    let last = traj.last();
    for (r, set) in last.state.r.iter().zip(&problem.sets) {
        assert!(set.contains(r, 1e-6));
    }
    assert!(last.consensus_residual <= 1e-3);

    let n = traj.samples.len();
    let window = n / 10;
    let head = traj.samples[..window].iter().map(|s| s.distance_to_optimum.unwrap()).fold(0.0, f64::max);
    let tail = traj.samples[n - window..].iter().map(|s| s.distance_to_optimum.unwrap()).fold(0.0, f64::max);
    assert!(tail <= head);

    // a numerically stationary point satisfies the projected fixed-point condition
    assert!(problem.fixed_point_residual(&last.state).unwrap() <= 1e-6);
}

#[test]
fn summary_windows() {
    let mut cfg = example1();
    cfg.integration.t_end = 10.0;
    let s = Scenario::build(cfg).unwrap();
    let (_, traj, _, _) = simulate(&s).unwrap();
    let summary = summarize(&traj, 0.2);
    let tail_max = traj
        .metrics
        .iter()
        .filter(|m| m.t >= 8.0 - 1e-12)
        .flat_map(|m| m.agents.iter().map(|a| a.coordination_error))
        .fold(0.0, f64::max);
    assert_eq!(summary.terminal_coordination_error, tail_max);
    assert_eq!(summary.nn_error_at_1s.len(), 4);
}
