//! JSON scenario documents.
//!
//! Node indices in documents are 1-based; everything in memory is 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::linalg::{self, Mat, Vector};
use crate::node::{BaselineModel, NodeMode};
use crate::plant::{PlantModel, Waveform};
use crate::sim::{IntegratorConfig, NodeParams, Scenario};
use crate::synthesis::{
    design_gains, design_observer_gains, distributed_design, DistributedDesign, FlowOptions,
    GainDesign, GainSet, SynthesisWeights,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Nested rows, `[[a11, a12], [a21, a22]]`.
pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub graph: GraphSpec,
    pub plant: PlantSpec,
    pub synthesis: SynthesisSpec,
    pub nodes: NodesSpec,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub outputs: OutputsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    /// `[source, destination]`, 1-based.
    pub edges: Vec<[usize; 2]>,
    /// How the edge list was generated; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeometricGenerator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometricGenerator {
    pub seed: u64,
    pub side: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub a: Rows,
    /// One `n x p_i` matrix per node; empty means no inputs anywhere.
    #[serde(default)]
    pub b: Vec<Rows>,
    pub c: Vec<Rows>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Waveform::is_none")]
    pub process_noise: Waveform,
    /// One waveform per node; empty means none.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub measurement_noise: Vec<Waveform>,
}

/// `2.0` (times identity), `{"diag": [...]}`, or full rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Diag { diag: Vec<f64> },
    Full(Rows),
}

impl MatrixSpec {
    pub fn to_matrix(&self, n: usize, field: &str) -> Result<Mat> {
        let m = match self {
            MatrixSpec::Scalar(v) => Mat::identity(n, n) * *v,
            MatrixSpec::Diag { diag } => {
                if diag.len() != n {
                    return Err(Error::config(
                        field,
                        format!("diagonal has {} entries, expected {n}", diag.len()),
                    ));
                }
                Mat::from_diagonal(&Vector::from_column_slice(diag))
            }
            MatrixSpec::Full(rows) => {
                let m = matrix(rows, field)?;
                if m.shape() != (n, n) {
                    return Err(Error::config(
                        field,
                        format!("{}x{} matrix, expected {n}x{n}", m.nrows(), m.ncols()),
                    ));
                }
                m
            }
        };
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthesisSpec {
    /// `K = -B^T P1`, `F = -Q1 C^T` from the two Riccati equations.
    Centralized {
        t1: MatrixSpec,
        t2: MatrixSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kappa: Option<f64>,
    },
    /// Estimator gains only; controller gains are zero.
    Observer {
        t2: MatrixSpec,
    },
    /// Consensus flows recover `B`, `C` and a common `T1` at every node first.
    Distributed {
        per_node_t1: Vec<MatrixSpec>,
        t2: MatrixSpec,
    },
    Explicit {
        k: Vec<Rows>,
        f: Vec<Rows>,
    },
}

/// A value shared by all nodes, or one per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerNode<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerNode<T> {
    fn expand(&self, nodes: usize, field: &str) -> Result<Vec<T>> {
        match self {
            PerNode::All(v) => Ok(vec![v.clone(); nodes]),
            PerNode::Each(vs) if vs.len() == nodes => Ok(vs.clone()),
            PerNode::Each(vs) => Err(Error::config(
                field,
                format!("{} entries for {nodes} nodes", vs.len()),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodesSpec {
    pub mode: NodeMode,
    pub mu: f64,
    /// Defaults to the mode's default initial gain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma0: Option<PerNode<f64>>,
    /// Defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_hat0: Option<PerNode<Vec<f64>>>,
    /// `y_hat0[i][j]`; defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_hat0: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Trajectory,
    Metrics,
    Summary,
    Gnuplot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(default = "all_formats")]
    pub formats: Vec<OutputFormat>,
}

fn all_formats() -> Vec<OutputFormat> {
    vec![
        OutputFormat::Trajectory,
        OutputFormat::Metrics,
        OutputFormat::Summary,
        OutputFormat::Gnuplot,
    ]
}

impl Default for OutputsSpec {
    fn default() -> Self {
        Self {
            dir: None,
            formats: all_formats(),
        }
    }
}

/// Inputs of the fixed-gain baseline. Both are global quantities and are never derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub coupling: PerNode<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

/// A validated scenario together with the synthesis that produced its gains.
#[derive(Debug, Clone)]
pub struct Built {
    pub scenario: Scenario,
    pub design: Option<GainDesign>,
    pub distributed: Option<DistributedDesign>,
}

fn matrix(rows: &Rows, field: &str) -> Result<Mat> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "non-finite entry"));
    }
    linalg::from_rows(rows).map_err(|_| Error::config(field, "rows have different lengths"))
}

/// `rows` is `n x p`; an empty list of rows is not allowed since `n` is known.
fn tall(rows: &Rows, n: usize, field: &str) -> Result<Mat> {
    if rows.len() != n {
        return Err(Error::config(
            field,
            format!("{} rows, expected {n}", rows.len()),
        ));
    }
    matrix(rows, field)
}

fn wide(rows: &Rows, n: usize, field: &str) -> Result<Mat> {
    let m = matrix(rows, field)?;
    if m.nrows() > 0 && m.ncols() != n {
        return Err(Error::config(
            field,
            format!("{} columns, expected {n}", m.ncols()),
        ));
    }
    Ok(Mat::from_fn(m.nrows(), n, |r, c| m[(r, c)]))
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    cfg.schema_version
                ),
            ));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn graph(&self) -> Result<DirectedGraph> {
        let nn = self.graph.nodes;
        let mut edges = Vec::with_capacity(self.graph.edges.len());
        for (k, &[s, d]) in self.graph.edges.iter().enumerate() {
            if s == 0 || d == 0 || s > nn || d > nn {
                return Err(Error::config(
                    format!("graph.edges[{}]", k + 1),
                    format!("[{s}, {d}] is outside 1..={nn}"),
                ));
            }
            if s == d {
                return Err(Error::config(
                    format!("graph.edges[{}]", k + 1),
                    format!("self-loop at node {s}"),
                ));
            }
            edges.push((s - 1, d - 1));
        }
        let g = DirectedGraph::from_edges(nn, &edges)
            .map_err(|e| Error::config("graph.edges", e.to_string()))?;
        if !g.is_strongly_connected() {
            return Err(Error::config(
                "graph.edges",
                "graph is not strongly connected",
            ));
        }
        Ok(g)
    }

    pub fn plant(&self) -> Result<PlantModel> {
        let p = &self.plant;
        let a = matrix(&p.a, "plant.a")?;
        if !a.is_square() {
            return Err(Error::config("plant.a", "state matrix must be square"));
        }
        let n = a.nrows();
        let nn = p.c.len();
        if nn != self.graph.nodes {
            return Err(Error::config(
                "plant.c",
                format!("{nn} output matrices for {} nodes", self.graph.nodes),
            ));
        }
        let inputs = if p.b.is_empty() {
            vec![Mat::zeros(n, 0); nn]
        } else {
            if p.b.len() != nn {
                return Err(Error::config(
                    "plant.b",
                    format!("{} input matrices for {nn} nodes", p.b.len()),
                ));
            }
            p.b.iter()
                .enumerate()
                .map(|(i, b)| tall(b, n, &format!("plant.b[{}]", i + 1)))
                .collect::<Result<_>>()?
        };
        let outputs =
            p.c.iter()
                .enumerate()
                .map(|(i, c)| wide(c, n, &format!("plant.c[{}]", i + 1)))
                .collect::<Result<_>>()?;
        let mut plant =
            PlantModel::new(a, inputs, outputs)?.with_process_noise(p.process_noise.clone())?;
        if !p.measurement_noise.is_empty() {
            plant = plant.with_measurement_noise(p.measurement_noise.clone())?;
        }
        if p.x0.len() != n {
            return Err(Error::config(
                "plant.x0",
                format!("{} entries, plant order is {n}", p.x0.len()),
            ));
        }
        Ok(plant)
    }

    fn node_params(&self, plant: &PlantModel) -> Result<NodeParams> {
        let ns = &self.nodes;
        let nn = plant.n_nodes();
        let n = plant.n();
        let mut np = NodeParams::defaults(plant, ns.mode, ns.mu);
        if let Some(g) = &ns.gamma0 {
            np.gain0 = g.expand(nn, "nodes.gamma0")?;
        }
        if let Some(x) = &ns.x_hat0 {
            let xs = x.expand(nn, "nodes.x_hat0")?;
            np.x_hat0 = xs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if v.len() != n {
                        return Err(Error::config(
                            format!("nodes.x_hat0[{}]", i + 1),
                            format!("{} entries, plant order is {n}", v.len()),
                        ));
                    }
                    Ok(Vector::from_column_slice(v))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(y) = &ns.y_hat0 {
            if y.len() != nn {
                return Err(Error::config(
                    "nodes.y_hat0",
                    format!("{} entries for {nn} nodes", y.len()),
                ));
            }
            np.y_hat0 = y
                .iter()
                .map(|row| row.iter().map(|v| Vector::from_column_slice(v)).collect())
                .collect();
        }
        Ok(np)
    }

    fn gains(
        &self,
        graph: &DirectedGraph,
        plant: &PlantModel,
    ) -> Result<(GainSet, Option<GainDesign>, Option<DistributedDesign>)> {
        let n = plant.n();
        match &self.synthesis {
            SynthesisSpec::Centralized { t1, t2, kappa } => {
                let w = SynthesisWeights {
                    t1: t1.to_matrix(n, "synthesis.t1")?,
                    t2: t2.to_matrix(n, "synthesis.t2")?,
                    kappa: *kappa,
                };
                let d = design_gains(plant, &w)?;
                Ok((d.gains.clone(), Some(d), None))
            }
            SynthesisSpec::Observer { t2 } => {
                let d = design_observer_gains(plant, &t2.to_matrix(n, "synthesis.t2")?)?;
                Ok((d.gains.clone(), Some(d), None))
            }
            SynthesisSpec::Distributed { per_node_t1, t2 } => {
                if per_node_t1.len() != plant.n_nodes() {
                    return Err(Error::config(
                        "synthesis.per_node_t1",
                        format!(
                            "{} entries for {} nodes",
                            per_node_t1.len(),
                            plant.n_nodes()
                        ),
                    ));
                }
                let t1s = per_node_t1
                    .iter()
                    .enumerate()
                    .map(|(i, m)| m.to_matrix(n, &format!("synthesis.per_node_t1[{}]", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                let t2 = t2.to_matrix(n, "synthesis.t2")?;
                let r = distributed_design(graph, plant, &t1s, &t2, &FlowOptions::default())?;
                let gains = r.gains().clone();
                Ok((gains, None, Some(r)))
            }
            SynthesisSpec::Explicit { k, f } => {
                let nn = plant.n_nodes();
                if k.len() != nn || f.len() != nn {
                    return Err(Error::config(
                        "synthesis",
                        format!("{} K and {} F matrices for {nn} nodes", k.len(), f.len()),
                    ));
                }
                let ks = k
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let field = format!("synthesis.k[{}]", i + 1);
                        if r.is_empty() {
                            Ok(Mat::zeros(0, n))
                        } else {
                            wide(r, n, &field)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let fs = f
                    .iter()
                    .enumerate()
                    .map(|(i, r)| tall(r, n, &format!("synthesis.f[{}]", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                let gains = GainSet::new(n, ks, fs)
                    .map_err(|e| Error::config("synthesis", e.to_string()))?;
                gains
                    .check_against(plant)
                    .map_err(|e| Error::config("synthesis", e.to_string()))?;
                Ok((gains, None, None))
            }
        }
    }

    /// Parses every section, runs the requested synthesis, and validates the result.
    pub fn build(&self) -> Result<Built> {
        let graph = self.graph()?;
        let plant = self.plant()?;
        let nodes = self.node_params(&plant)?;
        let (gains, design, distributed) = self.gains(&graph, &plant)?;
        let scenario = Scenario {
            name: self.name.clone(),
            graph,
            plant,
            gains,
            nodes,
            x0: Vector::from_column_slice(&self.plant.x0),
            integrator: self.integrator.clone(),
            flip_anchor_sign: false,
        };
        scenario.validate()?;
        Ok(Built {
            scenario,
            design,
            distributed,
        })
    }

    /// Fixed-gain baseline model; `gamma` overrides the document's value.
    pub fn baseline_model(&self, built: &Built, gamma: Option<f64>) -> Result<BaselineModel> {
        let spec = self.baseline.as_ref().ok_or_else(|| {
            Error::config(
                "baseline",
                "the baseline needs user-supplied coupling matrices P_i; none given",
            )
        })?;
        let gamma = gamma.or(spec.gamma).ok_or_else(|| {
            Error::config("baseline.gamma", "the baseline needs a user-supplied gamma")
        })?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(
                "baseline.gamma",
                "must be non-negative and finite",
            ));
        }
        let s = &built.scenario;
        let n = s.plant.n();
        let coupling = spec
            .coupling
            .expand(s.plant.n_nodes(), "baseline.coupling")?
            .iter()
            .enumerate()
            .map(|(i, m)| m.to_matrix(n, &format!("baseline.coupling[{}]", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        BaselineModel::from_design(&s.plant, &s.gains, coupling, gamma)
    }
}

/// Config document for an already-built scenario with explicit gains.
pub fn explicit_config(s: &Scenario) -> ScenarioConfig {
    let plant = &s.plant;
    let nn = plant.n_nodes();
    let noisy_outputs = plant.measurement_noise().iter().any(|w| !w.is_none());
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: s.name.clone(),
        graph: GraphSpec {
            nodes: nn,
            edges: s
                .graph
                .edges()
                .iter()
                .map(|&(a, b)| [a + 1, b + 1])
                .collect(),
            generator: None,
        },
        plant: PlantSpec {
            a: linalg::to_rows(plant.a()),
            b: plant.inputs().iter().map(linalg::to_rows).collect(),
            c: plant.outputs().iter().map(linalg::to_rows).collect(),
            x0: s.x0.as_slice().to_vec(),
            process_noise: plant.process_noise().clone(),
            measurement_noise: if noisy_outputs {
                plant.measurement_noise().to_vec()
            } else {
                Vec::new()
            },
        },
        synthesis: SynthesisSpec::Explicit {
            k: s.gains
                .controller_gains()
                .iter()
                .map(linalg::to_rows)
                .collect(),
            f: s.gains
                .estimator_gains()
                .iter()
                .map(linalg::to_rows)
                .collect(),
        },
        nodes: NodesSpec {
            mode: s.nodes.mode,
            mu: s.nodes.mu,
            gamma0: Some(PerNode::Each(s.nodes.gain0.clone())),
            x_hat0: Some(PerNode::Each(
                s.nodes
                    .x_hat0
                    .iter()
                    .map(|v| v.as_slice().to_vec())
                    .collect(),
            )),
            y_hat0: Some(
                s.nodes
                    .y_hat0
                    .iter()
                    .map(|row| row.iter().map(|v| v.as_slice().to_vec()).collect())
                    .collect(),
            ),
        },
        integrator: s.integrator.clone(),
        outputs: OutputsSpec::default(),
        baseline: None,
    }
}
