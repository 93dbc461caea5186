//! Built-in scenarios: the cooperative transport and large sensor network
//! examples, and a small regression case.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{
    GeometricGenerator, GraphSpec, MatrixSpec, NodesSpec, OutputsSpec, PerNode, PlantSpec,
    ScenarioConfig, SynthesisSpec, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::linalg::{self, Mat};
use crate::node::NodeMode;
use crate::plant::{PlantModel, Shape, Waveform};
use crate::sim::{IntegratorConfig, Scenario};

pub const EXAMPLE1_MASS: f64 = 5.0;
pub const EXAMPLE1_ANGLES: [f64; 6] = [
    PI / 3.0,
    3.0 * PI / 4.0,
    4.0 * PI / 3.0,
    3.0 * PI / 2.0,
    7.0 * PI / 4.0,
    2.0 * PI,
];
pub const EXAMPLE1_P_INI: [f64; 2] = [30.0, 40.0];
pub const EXAMPLE1_P_DES: [f64; 2] = [230.0, 200.0];
pub const EXAMPLE2_DEFAULT_SEED: u64 = 2024;
/// Geometric-graph neighbor threshold.
pub const EXAMPLE2_RADIUS: f64 = 60.0;
/// Seeds tried after the requested one before giving up.
pub const EXAMPLE2_MAX_SEEDS: u64 = 1000;

fn example1_matrices() -> (Mat, Vec<Mat>, Vec<Mat>) {
    let mut a = Mat::zeros(4, 4);
    a[(0, 2)] = 1.0;
    a[(1, 3)] = 1.0;
    let b = EXAMPLE1_ANGLES
        .iter()
        .map(|al| Mat::from_column_slice(4, 1, &[0.0, 0.0, al.cos(), al.sin()]) / EXAMPLE1_MASS)
        .collect();
    let pos = Mat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let c = (0..6)
        .map(|i| {
            if i == 0 || i == 2 {
                pos.clone()
            } else {
                Mat::zeros(2, 4)
            }
        })
        .collect();
    (a, b, c)
}

fn example1_process_noise() -> Waveform {
    Waveform::Sinusoid {
        shape: Shape::Sin,
        amplitudes: vec![0.02; 4],
        frequencies: vec![1.0, 2.0, 3.0, 4.0],
    }
}

fn example1_measurement_noise() -> Vec<Waveform> {
    (0..6)
        .map(|i| {
            if i == 0 || i == 2 {
                Waveform::Sinusoid {
                    shape: Shape::Cos,
                    amplitudes: vec![0.02; 2],
                    frequencies: vec![1.0, 2.0],
                }
            } else {
                Waveform::None
            }
        })
        .collect()
}

/// Six robots moving one rigid body: double-integrator pair, state `[p - p_des, v]`,
/// with the published sinusoidal disturbances.
pub fn example1_plant() -> Result<PlantModel> {
    let (a, b, c) = example1_matrices();
    PlantModel::new(a, b, c)?
        .with_process_noise(example1_process_noise())?
        .with_measurement_noise(example1_measurement_noise())
}

/// `[p_ini - p_des, 0, 0]`.
pub fn example1_x0() -> Vec<f64> {
    vec![
        EXAMPLE1_P_INI[0] - EXAMPLE1_P_DES[0],
        EXAMPLE1_P_INI[1] - EXAMPLE1_P_DES[1],
        0.0,
        0.0,
    ]
}

fn ring_edges(n: usize) -> Vec<[usize; 2]> {
    (1..=n).map(|i| [i, i % n + 1]).collect()
}

/// The published cooperative transport run: directed ring, robust gains,
/// `mu = 0.003`, `eps = 0.01`, 300 s.
pub fn example1_config() -> ScenarioConfig {
    let (a, b, c) = example1_matrices();
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "example1".into(),
        graph: GraphSpec {
            nodes: 6,
            edges: ring_edges(6),
            generator: None,
        },
        plant: PlantSpec {
            a: linalg::to_rows(&a),
            b: b.iter().map(linalg::to_rows).collect(),
            c: c.iter().map(linalg::to_rows).collect(),
            x0: example1_x0(),
            process_noise: example1_process_noise(),
            measurement_noise: example1_measurement_noise(),
        },
        synthesis: SynthesisSpec::Centralized {
            t1: MatrixSpec::Scalar(1.0),
            t2: MatrixSpec::Scalar(10.0),
            kappa: None,
        },
        nodes: NodesSpec {
            mode: NodeMode::Robust { eps: 0.01 },
            mu: 0.003,
            gamma0: Some(PerNode::All(1.01)),
            x_hat0: None,
            y_hat0: None,
        },
        integrator: IntegratorConfig::new(1e-3, 300.0, 100),
        outputs: OutputsSpec::default(),
        baseline: None,
    }
}

/// [`example1_config`] with both disturbances removed and the nominal gain law.
pub fn example1_noise_free_config() -> ScenarioConfig {
    let mut cfg = example1_config();
    cfg.name = "example1-noise-free".into();
    cfg.plant.process_noise = Waveform::None;
    cfg.plant.measurement_noise.clear();
    cfg.nodes.mode = NodeMode::Nominal;
    cfg.nodes.gamma0 = Some(PerNode::All(0.0));
    cfg
}

/// `n x n` with `0.01` on the super-diagonal, `C_i = e_i^T`, no inputs.
pub fn example2_plant(n: usize, noisy: bool) -> Result<PlantModel> {
    let (a, c) = example2_matrices(n)?;
    let plant = PlantModel::new(a, vec![Mat::zeros(n, 0); n], c)?;
    if noisy {
        let (w, v) = example2_noise(n);
        plant.with_process_noise(w)?.with_measurement_noise(v)
    } else {
        Ok(plant)
    }
}

fn example2_matrices(n: usize) -> Result<(Mat, Vec<Mat>)> {
    if n == 0 {
        return Err(Error::config("example2.n", "must be positive"));
    }
    let a = Mat::from_fn(n, n, |r, c| if c == r + 1 { 0.01 } else { 0.0 });
    let c = (0..n)
        .map(|i| Mat::from_fn(1, n, |_, h| if h == i { 1.0 } else { 0.0 }))
        .collect();
    Ok((a, c))
}

fn example2_noise(n: usize) -> (Waveform, Vec<Waveform>) {
    (
        Waveform::uniform_sinusoid(Shape::Sin, n, 0.2, 0.01),
        vec![Waveform::uniform_sinusoid(Shape::Cos, 1, 0.2, 0.01); n],
    )
}

/// Square side scaled so the node density matches 100 nodes on `[0, 300]^2`.
pub fn example2_side(n: usize) -> f64 {
    300.0 * (n as f64 / 100.0).sqrt()
}

/// First strongly connected geometric graph from `seed, seed + 1, ...`.
pub fn example2_graph(n: usize, seed: u64) -> Result<(DirectedGraph, u64)> {
    let side = example2_side(n);
    for s in seed..seed.saturating_add(EXAMPLE2_MAX_SEEDS) {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (g, _) = DirectedGraph::random_geometric(n, side, EXAMPLE2_RADIUS, &mut rng)?;
        if g.is_strongly_connected() {
            return Ok((g, s));
        }
    }
    Err(Error::InvalidGraph(format!(
        "no strongly connected geometric graph on {n} nodes within {EXAMPLE2_MAX_SEEDS} seeds from {seed}"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example2Options {
    /// Nodes and plant order.
    pub n: usize,
    pub noisy: bool,
    pub seed: u64,
}

impl Default for Example2Options {
    fn default() -> Self {
        Self {
            n: 20,
            noisy: false,
            seed: EXAMPLE2_DEFAULT_SEED,
        }
    }
}

/// Sensor network observing a chain plant. The noise-free run uses the
/// monotone gain law; the noisy run uses the damped one.
pub fn example2_config(opts: Example2Options) -> Result<ScenarioConfig> {
    let n = opts.n;
    let (a, c) = example2_matrices(n)?;
    let (graph, seed) = example2_graph(n, opts.seed)?;
    let (process_noise, measurement_noise) = if opts.noisy {
        example2_noise(n)
    } else {
        (Waveform::None, Vec::new())
    };
    let mode = if opts.noisy {
        NodeMode::PureObserverRobust { eps: 0.01 }
    } else {
        NodeMode::PureObserver
    };
    Ok(ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: format!("example2-n{n}{}", if opts.noisy { "-noisy" } else { "" }),
        graph: GraphSpec {
            nodes: n,
            edges: graph.edges().iter().map(|&(s, d)| [s + 1, d + 1]).collect(),
            generator: Some(GeometricGenerator {
                seed,
                side: example2_side(n),
                radius: EXAMPLE2_RADIUS,
            }),
        },
        plant: PlantSpec {
            a: linalg::to_rows(&a),
            b: Vec::new(),
            c: c.iter().map(linalg::to_rows).collect(),
            x0: (1..=n).map(|h| 1.0 + 0.01 * h as f64).collect(),
            process_noise,
            measurement_noise,
        },
        synthesis: SynthesisSpec::Observer {
            t2: MatrixSpec::Scalar(1.0),
        },
        nodes: NodesSpec {
            mode,
            mu: 0.01,
            gamma0: Some(PerNode::All(1.01)),
            x_hat0: Some(PerNode::Each((1..=n).map(|i| vec![i as f64; n]).collect())),
            y_hat0: None,
        },
        integrator: IntegratorConfig::new(1e-3, 200.0, 100),
        outputs: OutputsSpec::default(),
        baseline: None,
    })
}

/// Three nodes on the cycle `1 -> 2 -> 3 -> 1`, harmonic-oscillator plant with
/// one actuator and one sensor channel per node, nominal gain law.
pub fn regression_config() -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: "regression".into(),
        graph: GraphSpec {
            nodes: 3,
            edges: ring_edges(3),
            generator: None,
        },
        plant: PlantSpec {
            a: vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            b: vec![
                vec![vec![0.0], vec![1.0]],
                vec![vec![1.0], vec![0.0]],
                vec![vec![0.0], vec![0.5]],
            ],
            c: vec![
                vec![vec![1.0, 0.0]],
                vec![vec![0.0, 0.0]],
                vec![vec![0.0, 1.0]],
            ],
            x0: vec![1.0, -1.0],
            process_noise: Waveform::None,
            measurement_noise: Vec::new(),
        },
        synthesis: SynthesisSpec::Centralized {
            t1: MatrixSpec::Scalar(1.0),
            t2: MatrixSpec::Scalar(1.0),
            kappa: None,
        },
        nodes: NodesSpec {
            mode: NodeMode::Nominal,
            mu: 0.1,
            gamma0: Some(PerNode::All(0.5)),
            x_hat0: None,
            y_hat0: None,
        },
        integrator: IntegratorConfig::new(1e-3, 10.0, 10),
        outputs: OutputsSpec::default(),
        baseline: None,
    }
}

pub fn regression_scenario() -> Result<Scenario> {
    Ok(regression_config().build()?.scenario)
}
