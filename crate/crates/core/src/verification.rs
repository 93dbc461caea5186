//! Property suites behind the `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{self, DirectedGraph, SPECTRAL_TOL};
use crate::linalg::{self, Mat, Vector};
use crate::node::{self, NeighborView, NodeMode, NodeState};
use crate::plant::PlantModel;
use crate::scenarios;
use crate::sim::{self, IntegratorConfig, Scenario};
use crate::synthesis::{self, care_residual, SynthesisWeights, RANK_TOL};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepReport {
    pub checked: usize,
    pub failures: Vec<String>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Out-neighbor bitmasks of a digraph on at most 8 nodes; bit `b` of `mask`
/// encodes the `b`-th ordered pair `(src, dst)`, `src != dst`.
fn pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * (n - 1));
    for s in 0..n {
        for d in 0..n {
            if s != d {
                v.push((s, d));
            }
        }
    }
    v
}

fn out_masks(n: usize, pairs: &[(usize, usize)], mask: u64) -> [u8; 8] {
    let mut out = [0u8; 8];
    for (b, &(s, d)) in pairs.iter().enumerate() {
        if mask >> b & 1 == 1 {
            out[s] |= 1 << d;
        }
    }
    let _ = n;
    out
}

fn strongly_connected_bits(n: usize, out: &[u8; 8]) -> bool {
    let full = ((1u16 << n) - 1) as u8;
    let reach = |adj: &dyn Fn(usize) -> u8| {
        let mut seen = 1u8;
        let mut frontier = 1u8;
        while frontier != 0 {
            let mut next = 0u8;
            for v in 0..n {
                if frontier >> v & 1 == 1 {
                    next |= adj(v);
                }
            }
            frontier = next & !seen;
            seen |= next;
        }
        seen == full
    };
    let mut inm = [0u8; 8];
    for s in 0..n {
        for d in 0..n {
            if out[s] >> d & 1 == 1 {
                inm[d] |= 1 << s;
            }
        }
    }
    reach(&|v| out[v]) && reach(&|v| inm[v])
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    fn rec(k: usize, p: &mut Vec<usize>, all: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            all.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, all);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut all);
    all
}

/// Strongly connected digraphs on `n` nodes, one representative per isomorphism class.
pub fn strongly_connected_classes(n: usize) -> Vec<DirectedGraph> {
    assert!(
        (1..=5).contains(&n),
        "exhaustive enumeration supports 1..=5 nodes"
    );
    if n == 1 {
        return vec![DirectedGraph::from_edges(1, &[]).expect("single node")];
    }
    let pr = pairs(n);
    let index = |s: usize, d: usize| pr.iter().position(|&q| q == (s, d)).expect("pair");
    let perms: Vec<Vec<usize>> = permutations(n);
    // bit maps of every permutation
    let maps: Vec<Vec<usize>> = perms
        .iter()
        .map(|p| pr.iter().map(|&(s, d)| index(p[s], p[d])).collect())
        .collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for mask in 0u64..(1u64 << pr.len()) {
        if !strongly_connected_bits(n, &out_masks(n, &pr, mask)) {
            continue;
        }
        let canon = maps
            .iter()
            .map(|m| {
                let mut c = 0u64;
                for (b, &t) in m.iter().enumerate() {
                    if mask >> b & 1 == 1 {
                        c |= 1 << t;
                    }
                }
                c
            })
            .min()
            .expect("non-empty");
        if seen.insert(canon) {
            let edges: Vec<(usize, usize)> = pr
                .iter()
                .enumerate()
                .filter(|(b, _)| canon >> b & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            out.push(DirectedGraph::from_edges(n, &edges).expect("valid edges"));
        }
    }
    out
}

/// Strongly connected digraph with edge probability drawn per graph.
pub fn random_strongly_connected<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DirectedGraph {
    loop {
        let p: f64 = rng.random_range(0.15..0.6);
        let mut edges = Vec::new();
        for s in 0..n {
            for d in 0..n {
                if s != d && rng.random::<f64>() < p {
                    edges.push((s, d));
                }
            }
        }
        let g = DirectedGraph::from_edges(n, &edges).expect("valid edges");
        if g.is_strongly_connected() {
            return g;
        }
    }
}

fn check_grounded(g: &DirectedGraph, dims: &[usize], label: &str, report: &mut SweepReport) {
    for j in 0..g.n_nodes() {
        let lj = g.grounded_laplacian(j).expect("anchor in range");
        if !graph::is_nonsingular_m_matrix(&lj, SPECTRAL_TOL) {
            report
                .failures
                .push(format!("{label}: L^{} edges {:?}", j + 1, g.edges()));
        }
    }
    let lhat = g.block_grounded_laplacian(dims).expect("dims match");
    if !graph::is_nonsingular_m_matrix(&lhat, SPECTRAL_TOL) {
        report
            .failures
            .push(format!("{label}: block Laplacian edges {:?}", g.edges()));
    }
    report.checked += 1;
}

/// Every grounded Laplacian `L^j` and the block Laplacian of each strongly connected
/// graph: all classes on `2..=exhaustive_max` nodes plus `random` graphs on up to
/// `random_max_nodes` nodes.
pub fn m_matrix_sweep(
    exhaustive_max: usize,
    random: usize,
    random_max_nodes: usize,
    seed: u64,
) -> SweepReport {
    let mut report = SweepReport::default();
    for n in 2..=exhaustive_max {
        let dims: Vec<usize> = (0..n).map(|i| 1 + i % 2).collect();
        for g in strongly_connected_classes(n) {
            check_grounded(&g, &dims, &format!("n={n}"), &mut report);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..random {
        let n = rng.random_range(2..=random_max_nodes);
        let g = random_strongly_connected(n, &mut rng);
        let dims: Vec<usize> = (0..n).map(|_| rng.random_range(0..=2)).collect();
        check_grounded(&g, &dims, &format!("random #{k}"), &mut report);
    }
    report
}

/// Diagonal certificates for the grounded Laplacians of random graphs, each
/// re-verified by an eigenvalue check of `GM + M^T G`.
pub fn diagonal_certificate_check(graphs: usize, seed: u64) -> SweepReport {
    let mut report = SweepReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..graphs {
        let n = rng.random_range(2..=8);
        let g = random_strongly_connected(n, &mut rng);
        for j in 0..n {
            let m = g.grounded_laplacian(j).expect("anchor in range");
            match graph::find_diagonal_g(&m) {
                Ok(gd) => {
                    let off_diag = (0..n).any(|r| (0..n).any(|c| r != c && gd[(r, c)] != 0.0));
                    let pos = (0..n).all(|r| gd[(r, r)] > 0.0);
                    let sym = &gd * &m + m.transpose() * &gd;
                    if off_diag || !pos || linalg::min_sym_eigenvalue(&sym) <= 0.0 {
                        report
                            .failures
                            .push(format!("graph #{k}, anchor {}", j + 1));
                    }
                }
                Err(e) => report
                    .failures
                    .push(format!("graph #{k}, anchor {}: {e}", j + 1)),
            }
            report.checked += 1;
        }
    }
    report
}

fn uniform_matrix<R: Rng + ?Sized>(r: usize, c: usize, scale: f64, rng: &mut R) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

/// Random plant with `n <= max_n`, `N <= max_nodes`, collectively controllable and observable.
/// Spectral class of the random `A` matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantClass {
    /// Uniform entries, typically with unstable modes.
    Any,
    /// Uniform entries shifted left until no eigenvalue has positive real part.
    NoUnstableModes,
}

pub fn random_plant<R: Rng + ?Sized>(
    max_n: usize,
    max_nodes: usize,
    class: PlantClass,
    rng: &mut R,
) -> PlantModel {
    loop {
        let n = rng.random_range(1..=max_n);
        let nn = rng.random_range(1..=max_nodes);
        let mut a = uniform_matrix(n, n, 1.0, rng);
        if class == PlantClass::NoUnstableModes {
            let alpha = linalg::spectral_abscissa(&a).expect("finite entries");
            if alpha > 0.0 {
                a -= Mat::identity(n, n) * alpha;
            }
        }
        let b: Vec<Mat> = (0..nn)
            .map(|_| {
                let p = rng.random_range(0..=2);
                uniform_matrix(n, p, 1.0, rng)
            })
            .collect();
        let c: Vec<Mat> = (0..nn)
            .map(|_| {
                let m = rng.random_range(0..=2);
                uniform_matrix(m, n, 1.0, rng)
            })
            .collect();
        let plant = PlantModel::new(a, b, c).expect("consistent shapes");
        let ctrb = linalg::controllability_matrix(plant.a(), &plant.stacked_b());
        let obsv = linalg::observability_matrix(plant.a(), &plant.stacked_c());
        if linalg::rank(&ctrb, RANK_TOL) == n && linalg::rank(&obsv, RANK_TOL) == n {
            return plant;
        }
    }
}

/// `||R||_F / (||T||_F + ||A^T P + P A||_F + ||P B B^T P||_F)`.
pub fn scaled_care_residual(a: &Mat, b: &Mat, t: &Mat, p: &Mat) -> f64 {
    let r = care_residual(a, b, t, p);
    let lin = a.transpose() * p + p * a;
    let quad = p * b * b.transpose() * p;
    r.norm() / (t.norm() + lin.norm() + quad.norm())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SynthesisSuiteReport {
    pub instances: usize,
    /// Largest spectral abscissa over all three closed loops and instances.
    pub worst_abscissa: f64,
    pub worst_scaled_residual: f64,
    /// Largest `||R||_F / ||T||_F` over both Riccati equations.
    pub worst_weight_residual: f64,
    pub lmi_infeasible: usize,
    pub failures: Vec<String>,
}

impl SynthesisSuiteReport {
    pub fn passed(&self, margin: f64, residual_tol: f64) -> bool {
        self.failures.is_empty()
            && self.worst_abscissa < margin
            && self.worst_scaled_residual <= residual_tol
    }
}

/// Centralized design on random triples; residuals are recomputed from the returned Riccati solutions.
pub fn synthesis_suite(
    count: usize,
    max_n: usize,
    max_nodes: usize,
    class: PlantClass,
    seed: u64,
) -> SynthesisSuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = SynthesisSuiteReport {
        worst_abscissa: f64::NEG_INFINITY,
        ..Default::default()
    };
    for k in 0..count {
        let plant = random_plant(max_n, max_nodes, class, &mut rng);
        let n = plant.n();
        rep.instances += 1;
        let d = match synthesis::design_gains(&plant, &SynthesisWeights::identity(n)) {
            Ok(d) => d,
            Err(e) => {
                rep.failures.push(format!("instance #{k} (n = {n}): {e}"));
                continue;
            }
        };
        let a = plant.a();
        let b = plant.stacked_b();
        let c = plant.stacked_c();
        let margins = d.gains.hurwitz_margins(&plant).expect("shapes checked");
        rep.worst_abscissa = margins.iter().copied().fold(rep.worst_abscissa, f64::max);
        let p1 = d.p1.as_ref().expect("controller design");
        let t1 = d.t1.as_ref().expect("controller design");
        let at = a.transpose();
        let ct = c.transpose();
        let res = [
            (
                scaled_care_residual(a, &b, t1, p1),
                care_residual(a, &b, t1, p1).norm() / t1.norm(),
            ),
            (
                scaled_care_residual(&at, &ct, &d.t2, &d.q1),
                care_residual(&at, &ct, &d.t2, &d.q1).norm() / d.t2.norm(),
            ),
        ];
        for (s, w) in res {
            rep.worst_scaled_residual = rep.worst_scaled_residual.max(s);
            rep.worst_weight_residual = rep.worst_weight_residual.max(w);
        }
        if !d.lmi.as_ref().is_some_and(|l| l.feasible) {
            rep.lmi_infeasible += 1;
        }
    }
    rep
}

/// Perturbs every non-neighbor's estimates and measurement and checks that each
/// node's derivative is unchanged bit for bit.
pub fn locality_fuzz(s: &Scenario, trials: usize, seed: u64) -> Result<SweepReport> {
    let mut report = SweepReport::default();
    let model = s.node_model()?;
    let nn = s.graph.n_nodes();
    let dims = s.plant.output_dims();
    let n = s.plant.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_vec =
        |len: usize, rng: &mut ChaCha8Rng| Vector::from_fn(len, |_, _| rng.random_range(-5.0..5.0));
    for trial in 0..trials {
        let states: Vec<NodeState> = (0..nn)
            .map(|_| NodeState {
                y_hat: dims.iter().map(|&m| rand_vec(m, &mut rng)).collect(),
                x_hat: rand_vec(n, &mut rng),
                gain: rng.random_range(1.0..3.0),
                mode: s.nodes.mode,
            })
            .collect();
        let y: Vec<Vector> = dims.iter().map(|&m| rand_vec(m, &mut rng)).collect();
        for i in 0..nn {
            let derive = |states: &[NodeState], y: &[Vector]| -> Result<node::NodeDerivative> {
                let all: Vec<Vec<Vector>> = states.iter().map(|st| st.y_hat.clone()).collect();
                let view = NeighborView::gather(&s.graph, i, &all, y)?;
                if s.nodes.mode.is_observer() {
                    node::pure_observer_derivative(&model, &states[i], &view)
                } else {
                    node::node_derivative(&model, &states[i], &view)
                }
            };
            let base = derive(&states, &y)?;
            let mut st2 = states.clone();
            let mut y2 = y.clone();
            for k in 0..nn {
                if k == i || s.graph.a(i, k) {
                    continue;
                }
                st2[k].y_hat = dims.iter().map(|&m| rand_vec(m, &mut rng)).collect();
                st2[k].x_hat = rand_vec(n, &mut rng);
                st2[k].gain = rng.random_range(1.0..3.0);
                y2[k] = rand_vec(dims[k], &mut rng);
            }
            let other = derive(&st2, &y2)?;
            if other != base {
                report
                    .failures
                    .push(format!("trial {trial}, node {}", i + 1));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Largest per-step decrease of any nominal gain, and the smallest robust gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainLawReport {
    pub max_nominal_decrease: f64,
    pub min_robust_gain: f64,
}

pub fn gain_law_checks() -> Result<GainLawReport> {
    let mut s = scenarios::regression_scenario()?;
    s.integrator = IntegratorConfig::new(1e-3, 10.0, 1);
    let traj = sim::integrate(&s)?;
    let mut dec = 0.0f64;
    for i in 0..s.graph.n_nodes() {
        for w in traj.gain_series(i).windows(2) {
            dec = dec.max(w[0] - w[1]);
        }
    }
    let mut r = scenarios::regression_scenario()?;
    r.nodes.mode = NodeMode::Robust { eps: 0.5 };
    r.nodes.gain0 = vec![1.01, 3.0, 1.5];
    r.plant = r
        .plant
        .with_process_noise(crate::plant::Waveform::uniform_sinusoid(
            crate::plant::Shape::Sin,
            2,
            0.05,
            1.0,
        ))?;
    r.integrator = IntegratorConfig::new(1e-3, 20.0, 1);
    let traj = sim::integrate(&r)?;
    let min_robust = (0..3)
        .flat_map(|i| traj.gain_series(i))
        .fold(f64::INFINITY, f64::min);
    Ok(GainLawReport {
        max_nominal_decrease: dec,
        min_robust_gain: min_robust,
    })
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

fn check_result<T>(name: &str, r: Result<T>, f: impl FnOnce(T) -> (bool, String)) -> CheckResult {
    match r {
        Ok(v) => {
            let (p, d) = f(v);
            check(name, p, d)
        }
        Err(e) => check(name, false, format!("error: {e}")),
    }
}

/// Runs every suite at reduced size; the acceptance tests run the full sizes.
/// Flips the anchor sign in `zeta`; detection is an oracle deviation or a divergence.
fn mutation_check(s: &Scenario) -> CheckResult {
    let name = "mutation: flipped anchor sign is detected";
    let mut flipped = s.clone();
    flipped.flip_anchor_sign = true;
    flipped.integrator.t_final = flipped.integrator.t_final.min(2.0);
    match sim::integrate(&flipped).and_then(|t| sim::error_oracle(&flipped, &t)) {
        Ok(r) => check(
            name,
            r.max_deviation > 1e-6,
            format!("oracle deviation under fault {:e}", r.max_deviation),
        ),
        Err(e @ Error::Divergence { .. }) => check(name, true, format!("faulted run {e}")),
        Err(e) => check(name, false, format!("error: {e}")),
    }
}

pub fn run_all() -> VerificationReport {
    let mut checks = Vec::new();

    let l1 = m_matrix_sweep(4, 60, 10, 11);
    checks.push(check(
        "grounded Laplacian M-matrix sweep",
        l1.passed(),
        format!("{} graphs, {} failures", l1.checked, l1.failures.len()),
    ));

    let l2 = diagonal_certificate_check(20, 12);
    checks.push(check(
        "diagonal Lyapunov certificate",
        l2.passed(),
        format!("{} matrices, {} failures", l2.checked, l2.failures.len()),
    ));

    // the constructive feasibility argument needs sigma(A) in the closed left half-plane
    let syn = synthesis_suite(25, 6, 4, PlantClass::NoUnstableModes, 13);
    checks.push(check(
        "riccati residuals",
        syn.instances > syn.failures.len() && syn.worst_scaled_residual <= synthesis::CARE_TOL,
        format!(
            "worst scaled residual {:e} over {} instances",
            syn.worst_scaled_residual, syn.instances
        ),
    ));
    checks.push(check(
        "closed-loop Hurwitz suite",
        syn.failures.is_empty() && syn.worst_abscissa < -1e-6,
        format!(
            "worst abscissa {:e}, {} failures{}",
            syn.worst_abscissa,
            syn.failures.len(),
            syn.failures
                .first()
                .map(|f| format!(" (first: {f})"))
                .unwrap_or_default()
        ),
    ));

    checks.push(check_result(
        "locality fuzzing",
        scenarios::example1_config()
            .build()
            .and_then(|b| locality_fuzz(&b.scenario, 20, 14)),
        |r| {
            (
                r.passed(),
                format!("{} derivatives, {} failures", r.checked, r.failures.len()),
            )
        },
    ));

    checks.push(check_result(
        "gain monotonicity and floor",
        gain_law_checks(),
        |r| {
            (
                r.max_nominal_decrease <= 1e-12 && r.min_robust_gain >= 1.0 - 1e-9,
                format!(
                    "largest nominal decrease {:e}, smallest robust gain {}",
                    r.max_nominal_decrease, r.min_robust_gain
                ),
            )
        },
    ));

    let reg = scenarios::regression_scenario().and_then(|s| {
        let t = sim::integrate(&s)?;
        Ok((s, t))
    });
    match reg {
        Ok((s, traj)) => {
            checks.push(check_result(
                "stacked vs per-pair equality",
                sim::structural_report(&s, &traj),
                |r| {
                    (
                        r.stacked_equal
                            && r.psi_identity_error <= 1e-10
                            && r.zeta_identity_error <= 1e-10,
                        format!(
                            "exact: {}, psi identity {:e}, zeta identity {:e}",
                            r.stacked_equal, r.psi_identity_error, r.zeta_identity_error
                        ),
                    )
                },
            ));
            checks.push(check_result(
                "error-oracle regression",
                sim::error_oracle(&s, &traj),
                |r| {
                    (
                        r.max_deviation <= 1e-6,
                        format!("max deviation {:e}", r.max_deviation),
                    )
                },
            ));
            checks.push(mutation_check(&s));
        }
        Err(e) => checks.push(check("regression scenario", false, format!("error: {e}"))),
    }

    let self_loop = DirectedGraph::from_adjacency(&[vec![1, 0], vec![1, 0]]);
    checks.push(check(
        "self-loop rejection",
        self_loop.is_err(),
        match self_loop {
            Err(e) => e.to_string(),
            Ok(_) => "accepted a_ii = 1".into(),
        },
    ));

    VerificationReport { checks }
}
