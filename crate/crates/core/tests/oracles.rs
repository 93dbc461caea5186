use fdcoop_core::config::{BaselineSpec, MatrixSpec, PerNode};
use fdcoop_core::linalg::{self, Mat};
use fdcoop_core::node::baseline_error_matrix;
use fdcoop_core::ode::{Method, Stepper};
use fdcoop_core::scenarios;
use fdcoop_core::sim;
use fdcoop_core::synthesis::{self, kappa_check, SynthesisWeights};
use fdcoop_core::verification::{random_plant, PlantClass};
use fdcoop_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rk4_matches_harmonic_oscillator_closed_form() {
    let mut st = Stepper::new(Method::Rk4, 2);
    let mut y = [1.0, 0.0];
    let dt = 1e-3;
    let steps = 10_000;
    let mut f = |_t: f64, y: &[f64], d: &mut [f64]| -> fdcoop_core::Result<()> {
        d[0] = y[1];
        d[1] = -y[0];
        Ok(())
    };
    for k in 0..steps {
        st.step(&mut f, k as f64 * dt, dt, &mut y).unwrap();
    }
    let t = steps as f64 * dt;
    assert!((y[0] - t.cos()).abs() <= 1e-8);
    assert!((y[1] + t.sin()).abs() <= 1e-8);
}

#[test]
fn scalar_care_closed_form() {
    // a p + p a - b^2 p^2 + t = 0, positive root
    let (a, b, t) = (0.3, 2.0, 5.0);
    let p = synthesis::solve_care(
        &Mat::from_element(1, 1, a),
        &Mat::from_element(1, 1, b),
        &Mat::from_element(1, 1, t),
    )
    .unwrap();
    let expected = (a + (a * a + b * b * t).sqrt()) / (b * b);
    assert!((p[(0, 0)] - expected).abs() <= 1e-12);

    let q = synthesis::solve_dual_care(
        &Mat::zeros(1, 1),
        &Mat::identity(1, 1),
        &Mat::identity(1, 1),
    )
    .unwrap();
    assert!((q[(0, 0)] - 1.0).abs() <= 1e-12);
}

#[test]
fn double_integrator_care_closed_form() {
    let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
    let p = synthesis::solve_care(&a, &b, &Mat::identity(2, 2)).unwrap();
    let s3 = 3f64.sqrt();
    let expected = Mat::from_row_slice(2, 2, &[s3, 1.0, 1.0, s3]);
    assert!((p - expected).amax() <= 1e-10);
}

#[test]
fn chain_dual_care_has_small_residual() {
    let n = 4;
    let a = Mat::from_fn(n, n, |r, c| if c == r + 1 { 0.01 } else { 0.0 });
    let c = Mat::identity(n, n);
    let q = synthesis::solve_dual_care(&a, &c, &Mat::identity(n, n)).unwrap();
    let res = synthesis::care_residual(&a.transpose(), &c.transpose(), &Mat::identity(n, n), &q);
    assert!(res.norm() <= 1e-8);
    assert!(linalg::min_sym_eigenvalue(&q) > 0.0);
}

/// The stabilizing solution is monotone and concave in the weight, not linear.
/// Feasibility of the averaged weight still held on every sampled pair.
#[test]
fn care_weight_averaging_is_concave_and_kept_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut tried, mut violations) = (0, 0);
    let (mut nonlinearity, mut concavity) = (0.0f64, f64::INFINITY);
    for _ in 0..150 {
        let p = random_plant(5, 3, PlantClass::NoUnstableModes, &mut rng);
        let n = p.n();
        let (a, b) = (p.a(), p.stacked_b());
        let Ok(d) = synthesis::design_gains(&p, &SynthesisWeights::identity(n)) else {
            continue;
        };
        let bbt = linalg::norm2(&(&b * b.transpose()));
        let kappa = d.kappa.unwrap().kappa1;
        let scale = linalg::max_sym_eigenvalue(d.t1.as_ref().unwrap());
        let mut spd = |s: f64| {
            let m = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            (&m * m.transpose() + Mat::identity(n, n) * 0.05) * s
        };
        let ta = spd(scale);
        let tb = spd(scale * 0.3);
        let pa = synthesis::solve_care(a, &b, &ta).unwrap();
        let pb = synthesis::solve_care(a, &b, &tb).unwrap();
        let feasible = |p1: &Mat| kappa_check(&d.t2, &d.q1, bbt, p1, Some(kappa)).holds();
        if !(feasible(&pa) && feasible(&pb)) {
            continue;
        }
        for l in [0.25, 0.5, 0.75] {
            let mixed = synthesis::solve_care(a, &b, &(&ta * l + &tb * (1.0 - l))).unwrap();
            tried += 1;
            if !feasible(&mixed) {
                violations += 1;
            }
            let combo = &pa * l + &pb * (1.0 - l);
            nonlinearity = nonlinearity.max((&mixed - &combo).norm() / mixed.norm());
            concavity =
                concavity.min(linalg::min_sym_eigenvalue(&(&mixed - &combo)) / mixed.norm());
        }
    }
    assert!(tried >= 100, "{tried}");
    assert_eq!(violations, 0);
    assert!(nonlinearity > 1e-2, "{nonlinearity}");
    assert!(concavity >= -1e-9, "{concavity}");
}

fn baseline_regression(gamma: f64) -> (sim::Scenario, fdcoop_core::node::BaselineModel) {
    let mut cfg = scenarios::regression_config();
    cfg.baseline = Some(BaselineSpec {
        coupling: PerNode::All(MatrixSpec::Scalar(1.0)),
        gamma: None,
    });
    let built = cfg.build().unwrap();
    let model = cfg.baseline_model(&built, Some(gamma)).unwrap();
    (built.scenario, model)
}

#[test]
fn baseline_decay_follows_the_error_matrix_spectrum() {
    // eigencheck first, then the run
    let (s, model) = baseline_regression(4.0);
    let alpha = linalg::spectral_abscissa(&baseline_error_matrix(&model, &s.graph)).unwrap();
    assert!(alpha < -0.25, "{alpha}");
    let traj = sim::integrate_baseline(&s, &model).unwrap();
    let m = sim::extract_metrics(&traj, &s).unwrap();
    let first = m.est_error.iter().map(|e| e[0]).fold(0.0, f64::max);
    let last = m
        .est_error
        .iter()
        .map(|e| *e.last().unwrap())
        .fold(0.0, f64::max);
    let horizon = *m.times.last().unwrap();
    assert!(
        last <= 20.0 * first * (alpha * horizon).exp(),
        "{first} -> {last}"
    );
}

#[test]
fn baseline_without_coupling_diverges_on_an_unstable_plant() {
    let mut cfg = scenarios::regression_config();
    cfg.plant.a = vec![vec![0.5, 1.0], vec![-1.0, 0.5]];
    cfg.integrator.t_final = 80.0;
    cfg.baseline = Some(BaselineSpec {
        coupling: PerNode::All(MatrixSpec::Scalar(1.0)),
        gamma: Some(0.0),
    });
    let built = cfg.build().unwrap();
    let model = cfg.baseline_model(&built, None).unwrap();
    // node 2 sees nothing, so its decoupled error matrix is A itself
    let alpha =
        linalg::spectral_abscissa(&baseline_error_matrix(&model, &built.scenario.graph)).unwrap();
    assert!((alpha - 0.5).abs() <= 1e-9, "{alpha}");
    match sim::integrate_baseline(&built.scenario, &model) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn designed_error_dynamics_are_hurwitz_on_example1() {
    let s = scenarios::example1_config().build().unwrap().scenario;
    let acl = sim::closed_loop_error_matrix(&s.plant, &s.gains);
    assert!(linalg::spectral_abscissa(&acl).unwrap() < 0.0);
}
