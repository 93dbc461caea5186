//! Per-node estimator/controller dynamics.
//!
//! Node `i` keeps an estimate `y_hat[j]` of every node's measurement `y_j`,
//! a state estimate `x_hat`, and an adaptive coupling gain. Its derivative
//! reads only its own state, the estimate stacks of its in-neighbors, and the
//! measurements `y_j` of anchors `j` with `a_ij = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::linalg::{Mat, RowMatrix, Vector};
use crate::plant::PlantModel;
use crate::synthesis::GainSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeMode {
    /// `gamma' = sum_j psi_ij`.
    Nominal,
    /// `gamma' = -eps (gamma - 1)^2 + sum_j psi_ij`.
    Robust {
        eps: f64,
    },
    /// Estimation only: `B K` replaced by zero and `u = 0`.
    PureObserver,
    PureObserverRobust {
        eps: f64,
    },
}

impl NodeMode {
    pub fn is_observer(self) -> bool {
        matches!(
            self,
            NodeMode::PureObserver | NodeMode::PureObserverRobust { .. }
        )
    }

    pub fn eps(self) -> Option<f64> {
        match self {
            NodeMode::Robust { eps } | NodeMode::PureObserverRobust { eps } => Some(eps),
            _ => None,
        }
    }

    /// Lower bound the adaptive gain never crosses.
    pub fn gain_floor(self) -> f64 {
        if self.eps().is_some() {
            1.0
        } else {
            0.0
        }
    }

    pub fn default_gain0(self) -> f64 {
        match self {
            NodeMode::Nominal => 0.0,
            _ => 1.01,
        }
    }

    #[inline]
    fn gain_rate(self, gain: f64, psi_sum: f64) -> f64 {
        match self.eps() {
            None => psi_sum,
            Some(eps) => -eps * (gain - 1.0) * (gain - 1.0) + psi_sum,
        }
    }
}

/// Constants shared by all nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    n: usize,
    out_dims: Vec<usize>,
    out_offsets: Vec<usize>,
    /// `A + BK`, or `A` for observers.
    a_bar: RowMatrix,
    /// `C (A + BK)` stacked over all targets.
    c_a_bar: RowMatrix,
    c: RowMatrix,
    f: RowMatrix,
    k: Vec<RowMatrix>,
    in_dims: Vec<usize>,
    mu: f64,
    observer: bool,
    anchor_sign: f64,
}

impl NodeModel {
    /// Estimator/controller with `A_bar = A + B K`.
    pub fn controller(plant: &PlantModel, gains: &GainSet, mu: f64) -> Result<Self> {
        gains.check_against(plant)?;
        let a_bar = plant.a() + gains.bk(plant);
        Self::build(
            plant,
            &a_bar,
            gains.estimator_gains(),
            gains.controller_gains(),
            mu,
            false,
        )
    }

    /// Pure observer with `A_bar = A`.
    pub fn observer(plant: &PlantModel, estimator_gains: &[Mat], mu: f64) -> Result<Self> {
        let n = plant.n();
        let zero_k: Vec<Mat> = plant
            .input_dims()
            .iter()
            .map(|&p| Mat::zeros(p, n))
            .collect();
        GainSet::new(n, zero_k.clone(), estimator_gains.to_vec())?.check_against(plant)?;
        Self::build(plant, plant.a(), estimator_gains, &zero_k, mu, true)
    }

    fn build(
        plant: &PlantModel,
        a_bar: &Mat,
        f: &[Mat],
        k: &[Mat],
        mu: f64,
        observer: bool,
    ) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::config("nodes.mu", "must be positive and finite"));
        }
        let n = plant.n();
        let c = plant.stacked_c();
        let out_dims = plant.output_dims();
        let mut out_offsets = Vec::with_capacity(out_dims.len() + 1);
        let mut acc = 0;
        for &m in &out_dims {
            out_offsets.push(acc);
            acc += m;
        }
        out_offsets.push(acc);
        let f = crate::linalg::hstack(f, n)?;
        Ok(Self {
            n,
            out_dims,
            out_offsets,
            a_bar: RowMatrix::from_dense(a_bar),
            c_a_bar: RowMatrix::from_dense(&(&c * a_bar)),
            c: RowMatrix::from_dense(&c),
            f: RowMatrix::from_dense(&f),
            k: k.iter().map(RowMatrix::from_dense).collect(),
            in_dims: plant.input_dims(),
            mu,
            observer,
            anchor_sign: 1.0,
        })
    }

    /// Deliberate fault: flips the sign of the anchor term in every innovation.
    #[doc(hidden)]
    pub fn with_flipped_anchor(mut self) -> Self {
        self.anchor_sign = -self.anchor_sign;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_nodes(&self) -> usize {
        self.out_dims.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn is_observer(&self) -> bool {
        self.observer
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.out_dims
    }

    /// Length of one node's estimate stack, `sum_j m_j`.
    pub fn stack_len(&self) -> usize {
        self.out_offsets[self.out_dims.len()]
    }

    pub(crate) fn block(&self, j: usize) -> std::ops::Range<usize> {
        self.out_offsets[j]..self.out_offsets[j + 1]
    }

    /// `u_i = K_i x_hat_i`; empty for observers.
    pub fn control(&self, i: usize, x_hat: &[f64], out: &mut [f64]) {
        if self.observer {
            out.fill(0.0);
        } else {
            self.k[i].mul_into(x_hat, out);
        }
    }

    pub fn input_dim(&self, i: usize) -> usize {
        self.in_dims[i]
    }
}

/// Reusable buffers for [`kernel`].
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    zeta: Vec<f64>,
    innov: Vec<f64>,
    psi: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(model: &NodeModel) -> Self {
        Self {
            zeta: vec![0.0; model.stack_len()],
            innov: vec![0.0; model.stack_len()],
            psi: vec![0.0; model.n_nodes()],
        }
    }
}

/// Shared arithmetic of every estimator form. Returns the adaptive-gain rate;
/// `zeta` and `psi` are left in `sc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn kernel<'a, Y, M>(
    model: &NodeModel,
    graph: &DirectedGraph,
    neighbors: &[usize],
    i: usize,
    mode: NodeMode,
    own_y: &[f64],
    x_hat: &[f64],
    gain: f64,
    mut neighbor_y: Y,
    mut measurement: M,
    sc: &mut Scratch,
    d_y: &mut [f64],
    d_x: &mut [f64],
) -> Result<f64>
where
    Y: FnMut(usize) -> Result<&'a [f64]>,
    M: FnMut(usize) -> Result<&'a [f64]>,
{
    let zeta = &mut sc.zeta;
    zeta.fill(0.0);
    for &m in neighbors {
        let nb = neighbor_y(m)?;
        for k in 0..zeta.len() {
            zeta[k] += own_y[k] - nb[k];
        }
    }
    for j in 0..model.n_nodes() {
        if graph.a(i, j) {
            let yj = measurement(j)?;
            let r = model.block(j);
            for (k, &y) in r.zip(yj) {
                zeta[k] += model.anchor_sign * (own_y[k] - y);
            }
        }
    }

    let mut psi_sum = 0.0;
    for j in 0..model.n_nodes() {
        let r = model.block(j);
        let mut ss = 0.0;
        for &z in &zeta[r.clone()] {
            ss += z * z;
        }
        let psi = model.mu * ss;
        sc.psi[j] = psi;
        psi_sum += psi;
        for k in r {
            d_y[k] = -(gain + psi) * zeta[k] + model.c_a_bar.row_dot(k, x_hat);
        }
    }

    for (r, v) in sc.innov.iter_mut().enumerate() {
        *v = model.c.row_dot(r, x_hat) - own_y[r];
    }
    for (r, d) in d_x.iter_mut().enumerate() {
        *d = model.a_bar.row_dot(r, x_hat) + model.f.row_dot(r, &sc.innov);
    }
    Ok(mode.gain_rate(gain, psi_sum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    /// `y_hat[j]` estimates `y_j` and has length `m_j`.
    pub y_hat: Vec<Vector>,
    pub x_hat: Vector,
    /// `gamma_i`, or `theta_i` for observers.
    pub gain: f64,
    pub mode: NodeMode,
}

impl NodeState {
    pub fn zeros(model: &NodeModel, mode: NodeMode) -> Self {
        Self {
            y_hat: model
                .output_dims()
                .iter()
                .map(|&m| Vector::zeros(m))
                .collect(),
            x_hat: Vector::zeros(model.n()),
            gain: mode.default_gain0(),
            mode,
        }
    }

    fn flat_y_hat(&self, model: &NodeModel) -> Result<Vec<f64>> {
        if self.y_hat.len() != model.n_nodes()
            || self
                .y_hat
                .iter()
                .zip(model.output_dims())
                .any(|(v, &m)| v.len() != m)
        {
            return Err(Error::Dimension(
                "y_hat stack does not match output dimensions".into(),
            ));
        }
        if self.x_hat.len() != model.n() {
            return Err(Error::Dimension(format!(
                "x_hat has {} entries, plant order is {}",
                self.x_hat.len(),
                model.n()
            )));
        }
        Ok(self.y_hat.iter().flat_map(|v| v.iter().copied()).collect())
    }
}

/// What node `i` may read: its in-neighbors' estimate stacks and the
/// measurements of anchors `j` with `a_ij = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborView {
    node: usize,
    row: Vec<bool>,
    neighbors: Vec<usize>,
    estimates: Vec<(usize, Vec<f64>)>,
    measurements: Vec<(usize, Vec<f64>)>,
    own_measurement: Vec<f64>,
}

impl NeighborView {
    /// Builds the view of node `i` out of global data, keeping only what the
    /// graph lets node `i` receive.
    pub fn gather(
        graph: &DirectedGraph,
        i: usize,
        all_y_hat: &[Vec<Vector>],
        all_y: &[Vector],
    ) -> Result<Self> {
        let n = graph.n_nodes();
        if i >= n {
            return Err(Error::IndexOutOfRange {
                what: "node",
                index: i,
                len: n,
            });
        }
        if all_y_hat.len() != n || all_y.len() != n {
            return Err(Error::Dimension(format!(
                "global data for {} / {} nodes, graph has {n}",
                all_y_hat.len(),
                all_y.len()
            )));
        }
        let neighbors: Vec<usize> = graph.neighbors(i).collect();
        let estimates = neighbors
            .iter()
            .map(|&m| {
                (
                    m,
                    all_y_hat[m]
                        .iter()
                        .flat_map(|v| v.iter().copied())
                        .collect(),
                )
            })
            .collect();
        let measurements = neighbors
            .iter()
            .map(|&j| (j, all_y[j].as_slice().to_vec()))
            .collect();
        Ok(Self {
            node: i,
            row: (0..n).map(|j| graph.a(i, j)).collect(),
            neighbors,
            estimates,
            measurements,
            own_measurement: all_y[i].as_slice().to_vec(),
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    /// Drops neighbor `m`'s estimates; later reads report a locality violation.
    pub fn without_estimates_of(mut self, m: usize) -> Self {
        self.estimates.retain(|(k, _)| *k != m);
        self
    }

    pub fn own_measurement(&self) -> &[f64] {
        &self.own_measurement
    }

    fn estimate(&self, m: usize) -> Result<&[f64]> {
        self.estimates
            .iter()
            .find(|(k, _)| *k == m)
            .map(|(_, v)| v.as_slice())
            .ok_or(Error::LocalityViolation {
                node: self.node,
                missing: m,
            })
    }

    fn measurement(&self, j: usize) -> Result<&[f64]> {
        self.measurements
            .iter()
            .find(|(k, _)| *k == j)
            .map(|(_, v)| v.as_slice())
            .ok_or(Error::LocalityViolation {
                node: self.node,
                missing: j,
            })
    }

    fn graph_row(&self) -> DirectedGraph {
        let n = self.row.len();
        let edges: Vec<(usize, usize)> = (0..n)
            .filter(|&j| self.row[j])
            .map(|j| (j, self.node))
            .collect();
        DirectedGraph::from_edges(n, &edges).expect("row of a valid graph")
    }
}

/// `zeta_ij = sum_m a_im (y_hat_ij - y_hat_mj) + a_ij (y_hat_ij - y_j)`.
pub fn consensus_innovation(
    model: &NodeModel,
    view: &NeighborView,
    j: usize,
    own_y_hat_j: &Vector,
) -> Result<Vector> {
    let r = model.block(j);
    if own_y_hat_j.len() != r.len() {
        return Err(Error::Dimension(format!(
            "y_hat_{}{} has {} entries, expected {}",
            view.node + 1,
            j + 1,
            own_y_hat_j.len(),
            r.len()
        )));
    }
    let mut zeta = Vector::zeros(r.len());
    for &m in &view.neighbors {
        let nb = &view.estimate(m)?[r.clone()];
        for k in 0..zeta.len() {
            zeta[k] += own_y_hat_j[k] - nb[k];
        }
    }
    if view.row[j] {
        let yj = view.measurement(j)?;
        for k in 0..zeta.len() {
            zeta[k] += model.anchor_sign * (own_y_hat_j[k] - yj[k]);
        }
    }
    Ok(zeta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDerivative {
    pub d_y_hat: Vec<Vector>,
    pub d_x_hat: Vector,
    pub d_gain: f64,
    pub zeta: Vec<Vector>,
    /// `psi[j] = mu * zeta[j]^T zeta[j]`.
    pub psi: Vec<f64>,
    pub u: Vector,
}

fn derivative_common(
    model: &NodeModel,
    state: &NodeState,
    view: &NeighborView,
) -> Result<NodeDerivative> {
    let own = state.flat_y_hat(model)?;
    let i = view.node;
    let graph = view.graph_row();
    let mut sc = Scratch::new(model);
    let mut d_y = vec![0.0; model.stack_len()];
    let mut d_x = vec![0.0; model.n()];
    let d_gain = kernel(
        model,
        &graph,
        &view.neighbors,
        i,
        state.mode,
        &own,
        state.x_hat.as_slice(),
        state.gain,
        |m| view.estimate(m),
        |j| view.measurement(j),
        &mut sc,
        &mut d_y,
        &mut d_x,
    )?;
    let split = |v: &[f64]| -> Vec<Vector> {
        (0..model.n_nodes())
            .map(|j| Vector::from_column_slice(&v[model.block(j)]))
            .collect()
    };
    let mut u = vec![0.0; model.input_dim(i)];
    model.control(i, state.x_hat.as_slice(), &mut u);
    Ok(NodeDerivative {
        d_y_hat: split(&d_y),
        d_x_hat: Vector::from_vec(d_x),
        d_gain,
        zeta: split(&sc.zeta),
        psi: sc.psi.clone(),
        u: Vector::from_vec(u),
    })
}

/// Estimator/controller derivative for nominal or robust nodes.
pub fn node_derivative(
    model: &NodeModel,
    state: &NodeState,
    view: &NeighborView,
) -> Result<NodeDerivative> {
    if state.mode.is_observer() || model.is_observer() {
        return Err(Error::ModeMismatch(
            "node_derivative needs a controller model and a nominal or robust node".into(),
        ));
    }
    derivative_common(model, state, view)
}

/// Observer derivative: same structure with `B K` replaced by zero and `u = 0`.
pub fn pure_observer_derivative(
    model: &NodeModel,
    state: &NodeState,
    view: &NeighborView,
) -> Result<NodeDerivative> {
    if !state.mode.is_observer() || !model.is_observer() {
        return Err(Error::ModeMismatch(
            "pure_observer_derivative needs an observer model and an observer node".into(),
        ));
    }
    derivative_common(model, state, view)
}

/// Stacked form
/// `y_hat_i' = -(gamma_i I + Psi_i)[sum_m a_im (y_hat_i - y_hat_m) + A_i (y_hat_i - y)] + C A_bar x_hat_i`.
pub fn stacked_output_estimator(
    model: &NodeModel,
    state: &NodeState,
    view: &NeighborView,
) -> Result<Vector> {
    let own = state.flat_y_hat(model)?;
    let len = model.stack_len();
    let mut disagreement = vec![0.0; len];
    for &m in &view.neighbors {
        let nb = view.estimate(m)?;
        for k in 0..len {
            disagreement[k] += own[k] - nb[k];
        }
    }
    // A_i (y_hat_i - y): rows of unheard anchors stay absent.
    let mut zeta = disagreement;
    for j in 0..model.n_nodes() {
        if view.row[j] {
            let yj = view.measurement(j)?;
            for (k, &y) in model.block(j).zip(yj) {
                zeta[k] += model.anchor_sign * (own[k] - y);
            }
        }
    }
    let mut diag = vec![0.0; len];
    for j in 0..model.n_nodes() {
        let r = model.block(j);
        let mut ss = 0.0;
        for &z in &zeta[r.clone()] {
            ss += z * z;
        }
        let psi = model.mu * ss;
        for k in r {
            diag[k] = state.gain + psi;
        }
    }
    let x = state.x_hat.as_slice();
    Ok(Vector::from_fn(len, |k, _| {
        -diag[k] * zeta[k] + model.c_a_bar.row_dot(k, x)
    }))
}

/// Fixed-gain estimator
/// `x_hat_i' = A x_hat_i + F_i (y_i - C_i x_hat_i) + gamma P_i sum_j a_ij (x_hat_j - x_hat_i) + B u`
/// with the global `gamma` and `B u` supplied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub a: Mat,
    pub outputs: Vec<Mat>,
    /// Observer-sign gains: error matrix of node `i` alone is `A - F_i C_i`.
    pub gains: Vec<Mat>,
    pub coupling: Vec<Mat>,
    pub gamma: f64,
}

impl BaselineModel {
    /// Uses `F_i = -F_i(designed)` so that `A - F C = A + F(designed) C`.
    pub fn from_design(
        plant: &PlantModel,
        gains: &GainSet,
        coupling: Vec<Mat>,
        gamma: f64,
    ) -> Result<Self> {
        gains.check_against(plant)?;
        let n = plant.n();
        if coupling.len() != plant.n_nodes() || coupling.iter().any(|p| p.shape() != (n, n)) {
            return Err(Error::config(
                "baseline.p",
                format!("need {} matrices of size {n}x{n}", plant.n_nodes()),
            ));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(
                "baseline.gamma",
                "must be non-negative and finite",
            ));
        }
        Ok(Self {
            a: plant.a().clone(),
            outputs: plant.outputs().to_vec(),
            gains: gains.estimator_gains().iter().map(|f| -f).collect(),
            coupling,
            gamma,
        })
    }
}

pub fn baseline_fixed_gain_derivative(
    model: &BaselineModel,
    graph: &DirectedGraph,
    i: usize,
    x_hats: &[Vector],
    y_i: &Vector,
    bu: &Vector,
) -> Result<Vector> {
    let n = model.a.nrows();
    if i >= graph.n_nodes() {
        return Err(Error::IndexOutOfRange {
            what: "node",
            index: i,
            len: graph.n_nodes(),
        });
    }
    if x_hats.len() != graph.n_nodes() || x_hats.iter().any(|v| v.len() != n) || bu.len() != n {
        return Err(Error::Dimension(
            "baseline estimate stack does not match".into(),
        ));
    }
    let mut coupling = Vector::zeros(n);
    for j in graph.neighbors(i) {
        coupling += &x_hats[j] - &x_hats[i];
    }
    let xi = &x_hats[i];
    Ok(&model.a * xi
        + &model.gains[i] * (y_i - &model.outputs[i] * xi)
        + &model.coupling[i] * coupling * model.gamma
        + bu)
}

/// `I (x) A - F_diag C_diag - gamma P_diag (L (x) I)`, the stacked error matrix.
pub fn baseline_error_matrix(model: &BaselineModel, graph: &DirectedGraph) -> Mat {
    let n = model.a.nrows();
    let nn = graph.n_nodes();
    let eye_n = Mat::identity(n, n);
    let fc: Vec<Mat> = model
        .gains
        .iter()
        .zip(&model.outputs)
        .map(|(f, c)| f * c)
        .collect();
    let p_diag = crate::linalg::block_diag(&model.coupling);
    Mat::identity(nn, nn).kronecker(&model.a)
        - crate::linalg::block_diag(&fc)
        - p_diag * graph.laplacian().kronecker(&eye_n) * model.gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    fn regression() -> (DirectedGraph, PlantModel, GainSet) {
        let s = scenarios::regression_scenario().unwrap();
        (s.graph, s.plant, s.gains)
    }

    fn views(graph: &DirectedGraph, states: &[NodeState], y: &[Vector]) -> Vec<NeighborView> {
        let all: Vec<Vec<Vector>> = states.iter().map(|s| s.y_hat.clone()).collect();
        (0..graph.n_nodes())
            .map(|i| NeighborView::gather(graph, i, &all, y).unwrap())
            .collect()
    }

    #[test]
    fn innovation_cases() {
        let (graph, plant, gains) = regression();
        let model = NodeModel::controller(&plant, &gains, 0.1).unwrap();
        let dims = plant.output_dims();
        // node 1 hears node 0 only; a_10 = 1
        let own = Vector::from_vec(vec![1.0; dims[2]]);
        let mut yh: Vec<Vec<Vector>> =
            vec![dims.iter().map(|&m| Vector::from_element(m, 1.0)).collect(); 3];
        let y: Vec<Vector> = dims.iter().map(|&m| Vector::from_element(m, 1.0)).collect();
        let v = NeighborView::gather(&graph, 1, &yh, &y).unwrap();
        assert_eq!(
            consensus_innovation(&model, &v, 2, &own).unwrap(),
            Vector::zeros(dims[2])
        );

        yh[0][2] = Vector::from_element(dims[2], 0.0);
        let v = NeighborView::gather(&graph, 1, &yh, &y).unwrap();
        assert_eq!(
            consensus_innovation(&model, &v, 2, &own).unwrap(),
            Vector::from_element(dims[2], 1.0)
        );

        let yh: Vec<Vec<Vector>> = vec![dims.iter().map(|&m| Vector::zeros(m)).collect(); 3];
        let mut y: Vec<Vector> = dims.iter().map(|&m| Vector::zeros(m)).collect();
        y[0] = Vector::from_element(dims[0], -2.0);
        let v = NeighborView::gather(&graph, 1, &yh, &y).unwrap();
        let z = consensus_innovation(&model, &v, 0, &Vector::zeros(dims[0])).unwrap();
        assert_eq!(z, Vector::from_element(dims[0], 2.0));
    }

    #[test]
    fn missing_neighbor_is_a_locality_violation() {
        let (graph, plant, gains) = regression();
        let model = NodeModel::controller(&plant, &gains, 0.1).unwrap();
        let states = vec![NodeState::zeros(&model, NodeMode::Nominal); 3];
        let y: Vec<Vector> = plant
            .output_dims()
            .iter()
            .map(|&m| Vector::zeros(m))
            .collect();
        let v = views(&graph, &states, &y).remove(1).without_estimates_of(0);
        let err = node_derivative(&model, &states[1], &v).unwrap_err();
        assert!(matches!(
            err,
            Error::LocalityViolation {
                node: 1,
                missing: 0
            }
        ));
    }

    #[test]
    fn psi_and_gain_rates() {
        let (graph, plant, gains) = regression();
        let model = NodeModel::controller(&plant, &gains, 0.003).unwrap();
        let dims = plant.output_dims();
        let mut states = vec![NodeState::zeros(&model, NodeMode::Nominal); 3];
        // zeta_10 = [1] from neighbor disagreement only; a_10 = 1 but y_0 = own
        states[1].y_hat[0] = Vector::from_element(dims[0], 1.0);
        let mut y: Vec<Vector> = dims.iter().map(|&m| Vector::zeros(m)).collect();
        y[0] = Vector::from_element(dims[0], 1.0);
        let v = views(&graph, &states, &y);
        let d = node_derivative(&model, &states[1], &v[1]).unwrap();
        assert_eq!(d.zeta[0], Vector::from_element(dims[0], 1.0));
        assert!((d.psi[0] - 0.003 * dims[0] as f64).abs() < 1e-18);
        for (j, z) in d.zeta.iter().enumerate() {
            assert_eq!(d.psi[j], 0.003 * z.dot(z));
        }

        let mut robust = NodeState::zeros(&model, NodeMode::Robust { eps: 0.01 });
        robust.gain = 2.0;
        let v = views(&graph, &vec![robust.clone(); 3], &vec![Vector::zeros(1); 3]);
        let d = node_derivative(&model, &robust, &v[0]).unwrap();
        assert!((d.d_gain + 0.01).abs() < 1e-18);
    }

    #[test]
    fn observer_psi_example() {
        let plant = scenarios::example2_plant(4, false).unwrap();
        let graph = DirectedGraph::ring(4).unwrap();
        let f: Vec<Mat> = (0..4).map(|_| Mat::zeros(4, 1)).collect();
        let model = NodeModel::observer(&plant, &f, 0.01).unwrap();
        let mut states = vec![NodeState::zeros(&model, NodeMode::PureObserver); 4];
        states[1].y_hat[2] = Vector::from_element(1, 3.0);
        let y = vec![Vector::zeros(1); 4];
        let v = views(&graph, &states, &y);
        let d = pure_observer_derivative(&model, &states[1], &v[1]).unwrap();
        assert!((d.psi[2] - 0.09).abs() < 1e-15);
    }

    #[test]
    fn observer_locked_on() {
        let plant = scenarios::example2_plant(3, false).unwrap();
        let graph = DirectedGraph::ring(3).unwrap();
        let f: Vec<Mat> = (0..3)
            .map(|k| Mat::from_fn(3, 1, |r, _| -((r + k) as f64)))
            .collect();
        let model = NodeModel::observer(&plant, &f, 0.01).unwrap();
        let x = Vector::from_vec(vec![1.0, -2.0, 0.5]);
        let y: Vec<Vector> = (0..3).map(|j| plant.measure(&x, j, 0.0).unwrap()).collect();
        let s = NodeState {
            y_hat: y.clone(),
            x_hat: x.clone(),
            gain: 1.5,
            mode: NodeMode::PureObserver,
        };
        let v = views(&graph, &vec![s.clone(); 3], &y);
        let d = pure_observer_derivative(&model, &s, &v[0]).unwrap();
        assert_eq!(d.d_x_hat, plant.a() * &x);
        assert!(d.u.is_empty());
    }

    #[test]
    fn mode_mismatch() {
        let (graph, plant, gains) = regression();
        let model = NodeModel::controller(&plant, &gains, 0.1).unwrap();
        let s = NodeState::zeros(&model, NodeMode::PureObserver);
        let v = views(&graph, &vec![s.clone(); 3], &vec![Vector::zeros(1); 3]);
        assert!(matches!(
            node_derivative(&model, &s, &v[0]),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn baseline_cases() {
        let (graph, plant, gains) = regression();
        let p = vec![Mat::identity(2, 2); 3];
        let bl = BaselineModel::from_design(&plant, &gains, p.clone(), 0.7).unwrap();
        let x = Vector::from_vec(vec![0.3, -1.0]);
        let bu = Vector::from_vec(vec![0.1, 0.2]);
        let xs = vec![x.clone(); 3];
        let y = plant.measure(&x, 0, 0.0).unwrap();
        let d = baseline_fixed_gain_derivative(&bl, &graph, 0, &xs, &y, &bu).unwrap();
        assert!((d - (plant.a() * &x + &bu)).amax() < 1e-15);

        let bl0 = BaselineModel::from_design(&plant, &gains, p, 0.0).unwrap();
        let m = baseline_error_matrix(&bl0, &graph);
        for i in 0..3 {
            let blk = m.view((2 * i, 2 * i), (2, 2)).into_owned();
            assert_eq!(blk, plant.a() - &bl0.gains[i] * &plant.outputs()[i]);
        }
    }
}
