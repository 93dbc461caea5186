use fdcoop_core::config::{explicit_config, PerNode, ScenarioConfig};
use fdcoop_core::graph::{self, DirectedGraph};
use fdcoop_core::linalg::{self, Mat, Vector};
use fdcoop_core::node::{self, NeighborView, NodeMode, NodeModel, NodeState};
use fdcoop_core::scenarios;
use fdcoop_core::sim;
use fdcoop_core::synthesis::{self, consensus_matrix_flow, FlowOptions};
use fdcoop_core::verification::{self, random_plant, random_strongly_connected, PlantClass};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
    let m = uniform(n, n, rng);
    &m * m.transpose() + Mat::identity(n, n) * 0.1
}

/// Regression config on a random strongly connected 3-node graph with perturbed numbers.
fn perturbed_regression(seed: u64) -> ScenarioConfig {
    let mut r = rng(seed);
    let mut cfg = scenarios::regression_config();
    let g = random_strongly_connected(3, &mut r);
    cfg.graph.edges = g.edges().iter().map(|&(a, b)| [a + 1, b + 1]).collect();
    for row in &mut cfg.plant.a {
        for v in row.iter_mut() {
            *v += r.random_range(-0.2..0.2);
        }
    }
    cfg.plant.x0 = vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
    cfg.nodes.mu = r.random_range(0.01..2.0);
    if r.random_bool(0.5) {
        cfg.nodes.mode = NodeMode::Robust {
            eps: r.random_range(0.001..0.5),
        };
        cfg.nodes.gamma0 = Some(PerNode::All(r.random_range(1.001..4.0)));
    } else {
        cfg.nodes.gamma0 = Some(PerNode::All(r.random_range(0.0..4.0)));
    }
    cfg.integrator.dt = r.random_range(1e-4..1e-2);
    cfg
}

fn model_and_graph(seed: u64) -> (NodeModel, DirectedGraph, f64) {
    let cfg = perturbed_regression(seed);
    let s = cfg.build().expect("perturbed regression builds").scenario;
    let model = s.node_model().expect("controller model");
    (model, s.graph.clone(), s.nodes.mu)
}

fn random_states(
    model: &NodeModel,
    mode: NodeMode,
    gain: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<NodeState>, Vec<Vector>) {
    let nn = model.n_nodes();
    let vec =
        |m: usize, rng: &mut ChaCha8Rng| Vector::from_fn(m, |_, _| rng.random_range(-4.0..4.0));
    let states = (0..nn)
        .map(|_| NodeState {
            y_hat: model.output_dims().iter().map(|&m| vec(m, rng)).collect(),
            x_hat: vec(model.n(), rng),
            gain,
            mode,
        })
        .collect();
    let y = model.output_dims().iter().map(|&m| vec(m, rng)).collect();
    (states, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip(seed in any::<u64>()) {
        let cfg = perturbed_regression(seed);
        let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(&back, &cfg);
        let a = cfg.build().unwrap().scenario;
        let b = back.build().unwrap().scenario;
        prop_assert_eq!(&a, &b);
        // explicit gains reproduce the synthesized scenario
        let explicit = ScenarioConfig::from_json(&explicit_config(&a).to_json()).unwrap();
        prop_assert_eq!(explicit.build().unwrap().scenario, a);
    }

    #[test]
    fn plant_derivative_is_linear(seed in any::<u64>(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
        let mut r = rng(seed);
        let p = random_plant(5, 4, PlantClass::Any, &mut r);
        let x1 = uniform(p.n(), 1, &mut r).column(0).into_owned();
        let x2 = uniform(p.n(), 1, &mut r).column(0).into_owned();
        let u1: Vec<Vector> = p.input_dims().iter().map(|&m| uniform(m, 1, &mut r).column(0).into_owned()).collect();
        let u2: Vec<Vector> = p.input_dims().iter().map(|&m| uniform(m, 1, &mut r).column(0).into_owned()).collect();
        let mix: Vec<Vector> = u1.iter().zip(&u2).map(|(a, b)| a * alpha + b * beta).collect();
        let lhs = p.derivative(&(&x1 * alpha + &x2 * beta), &mix, 0.7).unwrap();
        let rhs = p.derivative(&x1, &u1, 0.7).unwrap() * alpha + p.derivative(&x2, &u2, 0.7).unwrap() * beta;
        prop_assert!((&lhs - &rhs).amax() <= 1e-12 * (1.0 + rhs.amax()));
        for i in 0..p.n_nodes() {
            let y = p.measure(&(&x1 * alpha), i, 0.7).unwrap();
            let y1 = p.measure(&x1, i, 0.7).unwrap() * alpha;
            prop_assert!((&y - &y1).amax() <= 1e-12 * (1.0 + y1.amax()));
        }
    }

    #[test]
    fn innovation_is_nonnegative_and_gain_nondecreasing(seed in any::<u64>()) {
        let (model, g, mu) = model_and_graph(seed);
        let mut r = rng(seed ^ 0x5eed);
        for (mode, gain) in [(NodeMode::Nominal, 2.0), (NodeMode::Robust { eps: 0.3 }, 1.0)] {
            let (states, y) = random_states(&model, mode, gain, &mut r);
            let all: Vec<Vec<Vector>> = states.iter().map(|s| s.y_hat.clone()).collect();
            for i in 0..model.n_nodes() {
                let view = NeighborView::gather(&g, i, &all, &y).unwrap();
                let d = node::node_derivative(&model, &states[i], &view).unwrap();
                for (z, &psi) in d.zeta.iter().zip(&d.psi) {
                    prop_assert!(psi >= 0.0);
                    prop_assert!((psi - mu * z.dot(z)).abs() <= 1e-12 * (1.0 + psi));
                }
                // the damping term vanishes at gamma = 1
                prop_assert!((d.d_gain - d.psi.iter().sum::<f64>()).abs() <= 1e-12 * (1.0 + d.d_gain));
            }
        }
    }

    #[test]
    fn node_derivatives_are_local(seed in any::<u64>()) {
        let s = perturbed_regression(seed).build().unwrap().scenario;
        let rep = verification::locality_fuzz(&s, 4, seed).unwrap();
        prop_assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn grounded_laplacians_are_m_matrices(seed in any::<u64>(), n in 2usize..10) {
        let mut r = rng(seed);
        let g = random_strongly_connected(n, &mut r);
        let dims: Vec<usize> = (0..n).map(|_| r.random_range(0..=2)).collect();
        for j in 0..n {
            let lj = g.grounded_laplacian(j).unwrap();
            prop_assert!(graph::is_nonsingular_m_matrix(&lj, graph::SPECTRAL_TOL));
            let gd = graph::find_diagonal_g(&lj).unwrap();
            prop_assert!(graph::lyapunov_margin(&lj, &gd) > 0.0);
        }
        let lh = g.block_grounded_laplacian(&dims).unwrap();
        prop_assert!(lh.nrows() == 0 || graph::is_nonsingular_m_matrix(&lh, graph::SPECTRAL_TOL));
    }

    #[test]
    fn care_solution_is_symmetric_definite_and_stabilizing(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_plant(6, 4, PlantClass::Any, &mut r);
        let (a, b) = (p.a(), p.stacked_b());
        let t = random_spd(p.n(), &mut r);
        let sol = synthesis::solve_care(a, &b, &t).unwrap();
        prop_assert!((&sol - sol.transpose()).amax() <= 1e-10 * sol.amax());
        prop_assert!(linalg::min_sym_eigenvalue(&sol) > 0.0);
        prop_assert!(linalg::spectral_abscissa(&(a - &b * b.transpose() * &sol)).unwrap() < 0.0);
        prop_assert!(verification::scaled_care_residual(a, &b, &t, &sol) <= synthesis::CARE_TOL);
        // duality
        let c = p.stacked_c();
        let q = synthesis::solve_dual_care(a, &c, &t).unwrap();
        let q2 = synthesis::solve_care(&a.transpose(), &c.transpose(), &t).unwrap();
        prop_assert!((&q - &q2).amax() <= 1e-9 * (1.0 + q.amax()));
    }

    #[test]
    fn lyapunov_routes_agree(seed in any::<u64>(), n in 1usize..9) {
        let mut r = rng(seed);
        let mut a = uniform(n, n, &mut r);
        let alpha = linalg::spectral_abscissa(&a).unwrap();
        a -= Mat::identity(n, n) * (alpha + 0.2);
        let q = random_spd(n, &mut r);
        let xk = synthesis::solve_lyapunov_kronecker(&a, &q).unwrap();
        let xs = synthesis::solve_lyapunov_sign(&a, &q).unwrap();
        prop_assert!((&xk - &xs).amax() <= 1e-8 * (1.0 + xk.amax()));
        prop_assert!(synthesis::lyapunov_residual(&a, &xk, &q) <= 1e-10);
    }

    #[test]
    fn anchored_flow_at_its_anchor_is_stationary(seed in any::<u64>(), n in 2usize..7) {
        let mut r = rng(seed);
        let g = random_strongly_connected(n, &mut r);
        let target = uniform(2, 3, &mut r);
        let anchor = r.random_range(0..n);
        let init = vec![target.clone(); n];
        let f = consensus_matrix_flow(&g, Some((anchor, &target)), &init, &FlowOptions::fixed(1e-2, 5.0)).unwrap();
        for m in &f.final_values {
            prop_assert_eq!(m, &target);
        }
    }

    #[test]
    fn ring_flow_preserves_the_average(seed in any::<u64>(), n in 2usize..7) {
        let mut r = rng(seed);
        let g = DirectedGraph::ring(n).unwrap();
        let init: Vec<Mat> = (0..n).map(|_| uniform(2, 2, &mut r)).collect();
        let mean = init.iter().fold(Mat::zeros(2, 2), |acc, m| acc + m) / n as f64;
        let f = consensus_matrix_flow(&g, None, &init, &FlowOptions::fixed(1e-2, 200.0)).unwrap();
        for m in &f.final_values {
            prop_assert!((m - &mean).amax() <= 1e-8);
        }
    }
}

#[test]
fn designed_error_dynamics_are_hurwitz() {
    let mut r = rng(21);
    let mut checked = 0;
    while checked < 40 {
        let p = random_plant(4, 3, PlantClass::NoUnstableModes, &mut r);
        let d = synthesis::design_gains(&p, &synthesis::SynthesisWeights::identity(p.n())).unwrap();
        let acl = sim::closed_loop_error_matrix(&p, &d.gains);
        assert!(linalg::spectral_abscissa(&acl).unwrap() < 0.0);
        checked += 1;
    }
}
