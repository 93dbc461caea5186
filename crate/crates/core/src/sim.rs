//! Closed-loop integration, the independent error-dynamics oracle, and metrics.
//!
//! The monolithic state is `[x | node 1 | ... | node N]` with each node block
//! laid out as `[y_hat_i (sum m_j) | x_hat_i (n) | gain_i]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::linalg::{self, Mat, RowMatrix, Vector};
use crate::node::{self, BaselineModel, NeighborView, NodeMode, NodeModel, NodeState, Scratch};
use crate::ode::{self, Method, Stepper};
use crate::plant::PlantModel;
use crate::synthesis::GainSet;

/// Any state component beyond this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default)]
    pub method: Method,
    /// Sample stride in steps.
    #[serde(default = "default_stride")]
    pub record_every: usize,
}

fn default_stride() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(dt: f64, t_final: f64, record_every: usize) -> Self {
        Self {
            dt,
            t_final,
            method: Method::Rk4,
            record_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeParams {
    pub mode: NodeMode,
    pub mu: f64,
    pub gain0: Vec<f64>,
    pub x_hat0: Vec<Vector>,
    /// `y_hat0[i][j]`, length `m_j`.
    pub y_hat0: Vec<Vec<Vector>>,
}

impl NodeParams {
    /// Zero estimates and the mode's default initial gain at every node.
    pub fn defaults(plant: &PlantModel, mode: NodeMode, mu: f64) -> Self {
        let nn = plant.n_nodes();
        Self {
            mode,
            mu,
            gain0: vec![mode.default_gain0(); nn],
            x_hat0: vec![Vector::zeros(plant.n()); nn],
            y_hat0: vec![
                plant
                    .output_dims()
                    .iter()
                    .map(|&m| Vector::zeros(m))
                    .collect();
                nn
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub graph: DirectedGraph,
    pub plant: PlantModel,
    pub gains: GainSet,
    pub nodes: NodeParams,
    pub x0: Vector,
    pub integrator: IntegratorConfig,
    /// Deliberate fault for mutation testing.
    #[doc(hidden)]
    pub flip_anchor_sign: bool,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let nn = self.graph.n_nodes();
        let n = self.plant.n();
        if self.plant.n_nodes() != nn {
            return Err(Error::config(
                "graph.nodes",
                format!("graph has {nn} nodes, plant has {}", self.plant.n_nodes()),
            ));
        }
        if !self.graph.is_strongly_connected() {
            return Err(Error::InvalidGraph(
                "graph is not strongly connected".into(),
            ));
        }
        self.gains.check_against(&self.plant)?;
        if self.x0.len() != n {
            return Err(Error::config(
                "plant.x0",
                format!("{} entries, plant order is {n}", self.x0.len()),
            ));
        }
        let ic = &self.integrator;
        if !(ic.dt > 0.0 && ic.dt.is_finite()) {
            return Err(Error::config("integrator.dt", "must be positive"));
        }
        if !(ic.t_final >= ic.dt && ic.t_final.is_finite()) {
            return Err(Error::config(
                "integrator.t_final",
                "must be finite and at least dt",
            ));
        }
        if ic.record_every == 0 {
            return Err(Error::config(
                "integrator.record_every",
                "must be at least 1",
            ));
        }
        let np = &self.nodes;
        if !(np.mu > 0.0 && np.mu.is_finite()) {
            return Err(Error::config("nodes.mu", "must be positive and finite"));
        }
        if let Some(eps) = np.mode.eps() {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(Error::config(
                    "nodes.mode.eps",
                    "must be positive and finite",
                ));
            }
        }
        if np.gain0.len() != nn || np.x_hat0.len() != nn || np.y_hat0.len() != nn {
            return Err(Error::config(
                "nodes",
                format!("initial conditions must cover {nn} nodes"),
            ));
        }
        for (i, &g) in np.gain0.iter().enumerate() {
            if np.mode.eps().is_some() && !(g > 1.0) {
                return Err(Error::config(
                    format!("nodes.gamma0[{}]", i + 1),
                    format!("robust mode requires gamma(0) > 1, got {g}"),
                ));
            }
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::config(
                    format!("nodes.gamma0[{}]", i + 1),
                    format!("must be non-negative, got {g}"),
                ));
            }
        }
        let dims = self.plant.output_dims();
        for i in 0..nn {
            if np.x_hat0[i].len() != n {
                return Err(Error::config(
                    format!("nodes.x_hat0[{}]", i + 1),
                    format!("{} entries, plant order is {n}", np.x_hat0[i].len()),
                ));
            }
            if np.y_hat0[i].len() != nn
                || np.y_hat0[i].iter().zip(&dims).any(|(v, &m)| v.len() != m)
            {
                return Err(Error::config(
                    format!("nodes.y_hat0[{}]", i + 1),
                    "must hold one estimate of length m_j per node j",
                ));
            }
        }
        Ok(())
    }

    pub fn node_model(&self) -> Result<NodeModel> {
        let m = if self.nodes.mode.is_observer() {
            NodeModel::observer(&self.plant, self.gains.estimator_gains(), self.nodes.mu)?
        } else {
            NodeModel::controller(&self.plant, &self.gains, self.nodes.mu)?
        };
        Ok(if self.flip_anchor_sign {
            m.with_flipped_anchor()
        } else {
            m
        })
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::new(&self.plant, self.plant.output_dims().iter().sum())
    }
}

/// Offsets into the monolithic state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n: usize,
    pub n_nodes: usize,
    /// Length of each node's estimate stack; 0 for the baseline estimator.
    pub stack: usize,
    pub output_dims: Vec<usize>,
    pub input_dims: Vec<usize>,
}

impl StateLayout {
    fn new(plant: &PlantModel, stack: usize) -> Self {
        Self {
            n: plant.n(),
            n_nodes: plant.n_nodes(),
            stack,
            output_dims: plant.output_dims(),
            input_dims: plant.input_dims(),
        }
    }

    pub fn node_block(&self) -> usize {
        self.stack + self.n + 1
    }

    pub fn len(&self) -> usize {
        self.n + self.n_nodes * self.node_block()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offset(&self, i: usize) -> usize {
        self.n + i * self.node_block()
    }

    pub fn y_hat(&self, i: usize) -> std::ops::Range<usize> {
        let o = self.offset(i);
        o..o + self.stack
    }

    pub fn x_hat(&self, i: usize) -> std::ops::Range<usize> {
        let o = self.offset(i) + self.stack;
        o..o + self.n
    }

    pub fn gain(&self, i: usize) -> usize {
        self.offset(i) + self.stack + self.n
    }

    fn input_offsets(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.n_nodes + 1);
        let mut acc = 0;
        for &p in &self.input_dims {
            v.push(acc);
            acc += p;
        }
        v.push(acc);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub layout: StateLayout,
    pub times: Vec<f64>,
    /// Full monolithic state at each sample.
    pub states: Vec<Vec<f64>>,
    /// `[u_1 | ... | u_N]` at each sample.
    pub inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.states[k][..self.layout.n]
    }

    pub fn x_hat(&self, k: usize, i: usize) -> &[f64] {
        &self.states[k][self.layout.x_hat(i)]
    }

    pub fn y_hat(&self, k: usize, i: usize) -> &[f64] {
        &self.states[k][self.layout.y_hat(i)]
    }

    pub fn gain(&self, k: usize, i: usize) -> f64 {
        self.states[k][self.layout.gain(i)]
    }

    pub fn u(&self, k: usize, i: usize) -> &[f64] {
        let off = self.layout.input_offsets();
        &self.inputs[k][off[i]..off[i + 1]]
    }

    pub fn gain_series(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.gain(k, i)).collect()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has samples")
    }
}

fn check_divergence(y: &[f64], t: f64) -> Result<()> {
    for (c, &v) in y.iter().enumerate() {
        if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                time: t,
                component: c,
                value: v,
            });
        }
    }
    Ok(())
}

struct PlantRows {
    a: RowMatrix,
    b: Vec<RowMatrix>,
    c: Vec<RowMatrix>,
}

impl PlantRows {
    fn new(plant: &PlantModel) -> Self {
        Self {
            a: RowMatrix::from_dense(plant.a()),
            b: plant.inputs().iter().map(RowMatrix::from_dense).collect(),
            c: plant.outputs().iter().map(RowMatrix::from_dense).collect(),
        }
    }

    /// Writes `[y_1 | ... | y_N]` into `meas`.
    fn measure_all(
        &self,
        plant: &PlantModel,
        x: &[f64],
        t: f64,
        offsets: &[usize],
        meas: &mut [f64],
    ) {
        for (j, c) in self.c.iter().enumerate() {
            let out = &mut meas[offsets[j]..offsets[j + 1]];
            c.mul_into(x, out);
            plant.measurement_noise()[j].add_into(t, out);
        }
    }

    /// `dx = A x + sum_i B_i u_i + w(t)`.
    fn plant_rate(
        &self,
        plant: &PlantModel,
        x: &[f64],
        u: &[f64],
        u_off: &[usize],
        t: f64,
        dx: &mut [f64],
    ) {
        self.a.mul_into(x, dx);
        for (i, b) in self.b.iter().enumerate() {
            b.mul_add_into(&u[u_off[i]..u_off[i + 1]], dx);
        }
        plant.process_noise().add_into(t, dx);
    }
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(dims.len() + 1);
    let mut acc = 0;
    for &d in dims {
        v.push(acc);
        acc += d;
    }
    v.push(acc);
    v
}

fn run_loop<F, U>(
    layout: StateLayout,
    integrator: &IntegratorConfig,
    floor: f64,
    mut y: Vec<f64>,
    mut rhs: F,
    mut inputs_of: U,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    U: FnMut(&[f64]) -> Vec<f64>,
{
    let dt = integrator.dt;
    let steps = ode::step_count(dt, integrator.t_final);
    let gain_idx: Vec<usize> = (0..layout.n_nodes).map(|i| layout.gain(i)).collect();
    let mut stepper = Stepper::new(integrator.method, y.len());
    check_divergence(&y, 0.0)?;
    let mut times = vec![0.0];
    let mut inputs = vec![inputs_of(&y)];
    let mut states = vec![y.clone()];
    for k in 0..steps {
        let t = k as f64 * dt;
        stepper.step(&mut rhs, t, dt, &mut y)?;
        for &g in &gain_idx {
            if y[g] < floor {
                y[g] = floor;
            }
        }
        let t_next = (k + 1) as f64 * dt;
        check_divergence(&y, t_next)?;
        if (k + 1) % integrator.record_every == 0 || k + 1 == steps {
            times.push(t_next);
            inputs.push(inputs_of(&y));
            states.push(y.clone());
        }
    }
    Ok(Trajectory {
        layout,
        times,
        states,
        inputs,
    })
}

/// Fixed-step integration of the plant coupled with every node's estimator.
/// Equal scenarios give bit-identical trajectories.
pub fn integrate(s: &Scenario) -> Result<Trajectory> {
    s.validate()?;
    let model = s.node_model()?;
    let layout = s.layout();
    let plant = &s.plant;
    let graph = &s.graph;
    let mode = s.nodes.mode;
    let (n, nn) = (layout.n, layout.n_nodes);
    let neighbors: Vec<Vec<usize>> = (0..nn).map(|i| graph.neighbors(i).collect()).collect();
    let rows = PlantRows::new(plant);
    let y_off = offsets(&layout.output_dims);
    let u_off = layout.input_offsets();

    let mut y0 = vec![0.0; layout.len()];
    y0[..n].copy_from_slice(s.x0.as_slice());
    for i in 0..nn {
        let yh: Vec<f64> = s.nodes.y_hat0[i]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        y0[layout.y_hat(i)].copy_from_slice(&yh);
        y0[layout.x_hat(i)].copy_from_slice(s.nodes.x_hat0[i].as_slice());
        y0[layout.gain(i)] = s.nodes.gain0[i];
    }

    let mut meas = vec![0.0; layout.stack];
    let mut u = vec![0.0; u_off[nn]];
    let mut sc = Scratch::new(&model);
    let lay = layout.clone();
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = &y[..n];
        rows.measure_all(plant, x, t, &y_off, &mut meas);
        let (dx, dnodes) = dy.split_at_mut(n);
        let block = lay.node_block();
        for i in 0..nn {
            let own = &y[lay.y_hat(i)];
            let xh = &y[lay.x_hat(i)];
            let g = y[lay.gain(i)];
            let blk = &mut dnodes[i * block..(i + 1) * block];
            let (d_y, rest) = blk.split_at_mut(lay.stack);
            let (d_x, d_g) = rest.split_at_mut(n);
            let meas = &meas;
            d_g[0] = node::kernel(
                &model,
                graph,
                &neighbors[i],
                i,
                mode,
                own,
                xh,
                g,
                |m| Ok(&y[lay.y_hat(m)]),
                |j| Ok(&meas[y_off[j]..y_off[j + 1]]),
                &mut sc,
                d_y,
                d_x,
            )?;
            model.control(i, xh, &mut u[u_off[i]..u_off[i + 1]]);
        }
        rows.plant_rate(plant, x, &u, &u_off, t, dx);
        Ok(())
    };
    let inputs_of = |y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; u_off[nn]];
        for i in 0..nn {
            model.control(i, &y[layout.x_hat(i)], &mut out[u_off[i]..u_off[i + 1]]);
        }
        out
    };
    run_loop(
        layout.clone(),
        &s.integrator,
        mode.gain_floor(),
        y0,
        rhs,
        inputs_of,
    )
}

/// Runs the fixed-gain baseline estimator in place of the adaptive one. Controllers
/// use `u_i = K_i x_hat_i` unless the scenario is an observer; the gain slot of
/// every node holds the constant `gamma`.
pub fn integrate_baseline(s: &Scenario, bl: &BaselineModel) -> Result<Trajectory> {
    s.validate()?;
    let plant = &s.plant;
    let layout = StateLayout::new(plant, 0);
    let (n, nn) = (layout.n, layout.n_nodes);
    let neighbors: Vec<Vec<usize>> = (0..nn).map(|i| s.graph.neighbors(i).collect()).collect();
    let rows = PlantRows::new(plant);
    let y_off = offsets(&layout.output_dims);
    let u_off = layout.input_offsets();
    let a = RowMatrix::from_dense(&bl.a);
    let f: Vec<RowMatrix> = bl.gains.iter().map(RowMatrix::from_dense).collect();
    let p: Vec<RowMatrix> = bl.coupling.iter().map(RowMatrix::from_dense).collect();
    let k: Vec<RowMatrix> = s
        .gains
        .controller_gains()
        .iter()
        .map(|k| {
            if s.nodes.mode.is_observer() {
                RowMatrix::from_dense(&(k * 0.0))
            } else {
                RowMatrix::from_dense(k)
            }
        })
        .collect();

    let mut y0 = vec![0.0; layout.len()];
    y0[..n].copy_from_slice(s.x0.as_slice());
    for i in 0..nn {
        y0[layout.x_hat(i)].copy_from_slice(s.nodes.x_hat0[i].as_slice());
        y0[layout.gain(i)] = bl.gamma;
    }

    let mut meas = vec![0.0; y_off[nn]];
    let mut u = vec![0.0; u_off[nn]];
    let mut bu = vec![0.0; n];
    let mut innov = vec![0.0; y_off[nn]];
    let mut coup = vec![0.0; n];
    let lay = layout.clone();
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        let x = &y[..n];
        rows.measure_all(plant, x, t, &y_off, &mut meas);
        for i in 0..nn {
            k[i].mul_into(&y[lay.x_hat(i)], &mut u[u_off[i]..u_off[i + 1]]);
        }
        bu.fill(0.0);
        for i in 0..nn {
            rows.b[i].mul_add_into(&u[u_off[i]..u_off[i + 1]], &mut bu);
        }
        for i in 0..nn {
            let xi = &y[lay.x_hat(i)];
            let r = y_off[i]..y_off[i + 1];
            let inn = &mut innov[r.clone()];
            rows.c[i].mul_into(xi, inn);
            for (v, &ym) in inn.iter_mut().zip(&meas[r]) {
                *v = ym - *v;
            }
            coup.fill(0.0);
            for &j in &neighbors[i] {
                let xj = &y[lay.x_hat(j)];
                for h in 0..n {
                    coup[h] += xj[h] - xi[h];
                }
            }
            let d = &mut dy[lay.x_hat(i)];
            for h in 0..n {
                d[h] = a.row_dot(h, xi)
                    + f[i].row_dot(h, &innov[y_off[i]..y_off[i + 1]])
                    + bl.gamma * p[i].row_dot(h, &coup)
                    + bu[h];
            }
            dy[lay.gain(i)] = 0.0;
        }
        let (dx, _) = dy.split_at_mut(n);
        rows.plant_rate(plant, x, &u, &u_off, t, dx);
        Ok(())
    };
    let inputs_of = |y: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; u_off[nn]];
        for i in 0..nn {
            k[i].mul_into(&y[layout.x_hat(i)], &mut out[u_off[i]..u_off[i + 1]]);
        }
        out
    };
    run_loop(
        layout.clone(),
        &s.integrator,
        f64::NEG_INFINITY,
        y0,
        rhs,
        inputs_of,
    )
}

/// Node states at sample `k`, in API form.
pub fn node_states_at(s: &Scenario, traj: &Trajectory, k: usize) -> Vec<NodeState> {
    let dims = s.plant.output_dims();
    let y_off = offsets(&dims);
    (0..s.graph.n_nodes())
        .map(|i| {
            let yh = traj.y_hat(k, i);
            NodeState {
                y_hat: (0..dims.len())
                    .map(|j| Vector::from_column_slice(&yh[y_off[j]..y_off[j + 1]]))
                    .collect(),
                x_hat: Vector::from_column_slice(traj.x_hat(k, i)),
                gain: traj.gain(k, i),
                mode: s.nodes.mode,
            }
        })
        .collect()
}

/// Noisy-free-or-not measurements `y_j(t_k)` at sample `k`.
pub fn measurements_at(s: &Scenario, traj: &Trajectory, k: usize) -> Result<Vec<Vector>> {
    let x = Vector::from_column_slice(traj.x(k));
    (0..s.plant.n_nodes())
        .map(|j| s.plant.measure(&x, j, traj.times[k]))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub samples: usize,
    /// Sup-norm deviation over all compared components and samples.
    pub max_deviation: f64,
    pub x_tilde_deviation: f64,
    pub zeta_deviation: f64,
    pub gain_deviation: f64,
    /// Spectral abscissa of `A_cl`.
    pub a_cl_abscissa: f64,
}

/// `A_cl = I (x) (A + F C + B K) - 1 (x) B_bar`.
pub fn closed_loop_error_matrix(plant: &PlantModel, gains: &GainSet) -> Mat {
    let nn = plant.n_nodes();
    let [_, _, abkfc] = gains.closed_loop_matrices(plant);
    Mat::identity(nn, nn).kronecker(&abkfc)
        - Mat::from_element(nn, 1, 1.0).kronecker(&gains.bar_b(plant))
}

/// Integrates the error dynamics in `(x_tilde, zeta^j, gamma)` coordinates from the
/// same initial conditions and compares against the errors rebuilt from `traj`.
pub fn error_oracle(s: &Scenario, traj: &Trajectory) -> Result<OracleReport> {
    if s.nodes.mode != NodeMode::Nominal || !s.plant.is_noise_free() {
        return Err(Error::ModeMismatch(
            "the error oracle covers the nominal, noise-free closed loop only".into(),
        ));
    }
    let plant = &s.plant;
    let graph = &s.graph;
    let (n, nn) = (plant.n(), plant.n_nodes());
    let dims = plant.output_dims();
    let mu = s.nodes.mu;
    let a_cl = closed_loop_error_matrix(plant, &s.gains);
    let f = s.gains.stacked_f().clone();
    let a_bar = plant.a() + s.gains.bk(plant);
    let bar_b = s.gains.bar_b(plant);
    let lj: Vec<Mat> = (0..nn)
        .map(|j| graph.grounded_laplacian(j))
        .collect::<Result<_>>()?;
    let lj_inv: Vec<Mat> = lj
        .iter()
        .map(|l| {
            l.clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical("grounded Laplacian is singular".into()))
        })
        .collect::<Result<_>>()?;
    let c_abar: Vec<Mat> = plant.outputs().iter().map(|c| c * &a_bar).collect();
    let c_barb: Vec<Mat> = plant.outputs().iter().map(|c| c * &bar_b).collect();
    let z_off: Vec<usize> = {
        let mut v = vec![nn * n];
        for &m in &dims {
            let last = *v.last().unwrap();
            v.push(last + nn * m);
        }
        v
    };
    let g_off = z_off[nn];
    let dim = g_off + nn;

    // zeta^j block, node i, component k at z_off[j] + i*m_j + k
    let zeta_from_ytilde = |j: usize, yt: &[Vec<f64>]| -> Vec<f64> {
        let m = dims[j];
        let mut z = vec![0.0; nn * m];
        for i in 0..nn {
            for l in 0..nn {
                let w = lj[j][(i, l)];
                if w != 0.0 {
                    for k in 0..m {
                        z[i * m + k] += w * yt[l][k];
                    }
                }
            }
        }
        z
    };

    let rebuild = |k: usize| -> Vec<f64> {
        let x = Vector::from_column_slice(traj.x(k));
        let mut out = vec![0.0; dim];
        for i in 0..nn {
            let xh = traj.x_hat(k, i);
            for h in 0..n {
                out[i * n + h] = xh[h] - x[h];
            }
            out[g_off + i] = traj.gain(k, i);
        }
        let mut y_off = 0;
        for j in 0..nn {
            let yj = &plant.outputs()[j] * &x;
            let yt: Vec<Vec<f64>> = (0..nn)
                .map(|i| {
                    let yh = traj.y_hat(k, i);
                    (0..dims[j]).map(|c| yh[y_off + c] - yj[c]).collect()
                })
                .collect();
            out[z_off[j]..z_off[j + 1]].copy_from_slice(&zeta_from_ytilde(j, &yt));
            y_off += dims[j];
        }
        out
    };

    let mut z = rebuild(0);
    let rhs = |_t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        let xt = Vector::from_column_slice(&z[..nn * n]);
        // y_tilde^j = (L^j)^{-1} zeta^j; node i's stack over all targets
        let mut ystack = vec![Vector::zeros(dims.iter().sum()); nn];
        let mut y_off = 0;
        for j in 0..nn {
            let m = dims[j];
            let zj = &z[z_off[j]..z_off[j + 1]];
            for i in 0..nn {
                for l in 0..nn {
                    let w = lj_inv[j][(i, l)];
                    for k in 0..m {
                        ystack[i][y_off + k] += w * zj[l * m + k];
                    }
                }
            }
            y_off += m;
        }
        let mut dxt = &a_cl * &xt;
        for i in 0..nn {
            let fy = &f * &ystack[i];
            for h in 0..n {
                dxt[h + i * n] -= fy[h];
            }
        }
        dz[..nn * n].copy_from_slice(dxt.as_slice());
        let gains = &z[g_off..];
        let mut gdot = vec![0.0; nn];
        for j in 0..nn {
            let m = dims[j];
            let zj = &z[z_off[j]..z_off[j + 1]];
            let barb_x = &c_barb[j] * &xt;
            // w_i = (gamma_i + psi_ij) zeta_ij - C_j A_bar x_tilde_i
            let mut w = vec![0.0; nn * m];
            for i in 0..nn {
                let zi = &zj[i * m..(i + 1) * m];
                let ss: f64 = zi.iter().map(|v| v * v).sum();
                gdot[i] += mu * ss;
                let coef = gains[i] + mu * ss;
                let s_i = &c_abar[j] * xt.rows(i * n, n);
                for k in 0..m {
                    w[i * m + k] = coef * zi[k] - s_i[k];
                }
            }
            let dzj = &mut dz[z_off[j]..z_off[j + 1]];
            for i in 0..nn {
                let a_ij = if graph.a(i, j) { 1.0 } else { 0.0 };
                for k in 0..m {
                    let mut acc = 0.0;
                    for l in 0..nn {
                        acc -= lj[j][(i, l)] * w[l * m + k];
                    }
                    dzj[i * m + k] = acc - a_ij * barb_x[k];
                }
            }
        }
        dz[g_off..].copy_from_slice(&gdot);
        Ok(())
    };
    let mut rhs = rhs;

    let ic = &s.integrator;
    let steps = ode::step_count(ic.dt, ic.t_final);
    let mut stepper = Stepper::new(ic.method, dim);
    let mut dev = [0.0f64; 3];
    let mut compare = |k: usize, z: &[f64]| {
        let r = rebuild(k);
        for (c, (a, b)) in z.iter().zip(&r).enumerate() {
            let d = (a - b).abs();
            let g = if c < nn * n {
                0
            } else if c < g_off {
                1
            } else {
                2
            };
            dev[g] = dev[g].max(d);
        }
    };
    compare(0, &z);
    let mut sample = 1;
    for k in 0..steps {
        stepper.step(&mut rhs, k as f64 * ic.dt, ic.dt, &mut z)?;
        for g in &mut z[g_off..] {
            if *g < 0.0 {
                *g = 0.0;
            }
        }
        if (k + 1) % ic.record_every == 0 || k + 1 == steps {
            if sample >= traj.len() {
                return Err(Error::Dimension(
                    "trajectory has fewer samples than the oracle".into(),
                ));
            }
            compare(sample, &z);
            sample += 1;
        }
    }
    Ok(OracleReport {
        samples: sample,
        max_deviation: dev.iter().copied().fold(0.0, f64::max),
        x_tilde_deviation: dev[0],
        zeta_deviation: dev[1],
        gain_deviation: dev[2],
        a_cl_abscissa: linalg::spectral_abscissa(&a_cl)?,
    })
}

/// Identities checked at every sample of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub samples: usize,
    /// Stacked and per-pair output-estimator derivatives agree bit for bit.
    pub stacked_equal: bool,
    /// `max |sum_i psi_ij - mu (zeta^j)^T zeta^j|`.
    pub psi_identity_error: f64,
    /// `max |zeta^j - (L^j (x) I) y_tilde^j|`.
    pub zeta_identity_error: f64,
}

pub fn structural_report(s: &Scenario, traj: &Trajectory) -> Result<StructuralReport> {
    let model = s.node_model()?;
    let graph = &s.graph;
    let nn = graph.n_nodes();
    let dims = s.plant.output_dims();
    let lj: Vec<Mat> = (0..nn)
        .map(|j| graph.grounded_laplacian(j))
        .collect::<Result<_>>()?;
    let mut stacked_equal = true;
    let (mut psi_err, mut zeta_err) = (0.0f64, 0.0f64);
    for k in 0..traj.len() {
        let states = node_states_at(s, traj, k);
        let y = measurements_at(s, traj, k)?;
        let all: Vec<Vec<Vector>> = states.iter().map(|st| st.y_hat.clone()).collect();
        let mut derivs = Vec::with_capacity(nn);
        for i in 0..nn {
            let view = NeighborView::gather(graph, i, &all, &y)?;
            let d = if s.nodes.mode.is_observer() {
                node::pure_observer_derivative(&model, &states[i], &view)?
            } else {
                node::node_derivative(&model, &states[i], &view)?
            };
            let stacked = node::stacked_output_estimator(&model, &states[i], &view)?;
            let per_pair: Vec<f64> = d.d_y_hat.iter().flat_map(|v| v.iter().copied()).collect();
            if per_pair.as_slice() != stacked.as_slice() {
                stacked_equal = false;
            }
            derivs.push(d);
        }
        for j in 0..nn {
            let m = dims[j];
            let mut zeta_j = Vec::with_capacity(nn * m);
            let mut psi_sum = 0.0;
            for d in &derivs {
                zeta_j.extend(d.zeta[j].iter().copied());
                psi_sum += d.psi[j];
            }
            let zz: f64 = zeta_j.iter().map(|v| v * v).sum();
            psi_err = psi_err.max((psi_sum - s.nodes.mu * zz).abs());
            for i in 0..nn {
                for c in 0..m {
                    let mut acc = 0.0;
                    for l in 0..nn {
                        acc += lj[j][(i, l)] * (states[l].y_hat[j][c] - y[j][c]);
                    }
                    zeta_err = zeta_err.max((acc - zeta_j[i * m + c]).abs());
                }
            }
        }
    }
    Ok(StructuralReport {
        samples: traj.len(),
        stacked_equal,
        psi_identity_error: psi_err,
        zeta_identity_error: zeta_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub times: Vec<f64>,
    /// `||x(t)||_2`.
    pub state_norm: Vec<f64>,
    /// `est_error[i][k] = ||x_hat_i - x||_2`.
    pub est_error: Vec<Vec<f64>>,
    /// `e_a(t) = (1/(N n)) sum_i sum_h |x_hat_ih - x_h|`.
    pub avg_est_error: Vec<f64>,
    /// `output_err[i][j][k] = ||y_hat_ij - y_j||_2`; empty for the baseline.
    pub output_err: Vec<Vec<Vec<f64>>>,
    pub gain_final: Vec<f64>,
    /// `sup ||x||_2^2` over the trailing 10% of the run.
    pub residual_bound: f64,
}

pub fn extract_metrics(traj: &Trajectory, s: &Scenario) -> Result<Metrics> {
    let lay = &traj.layout;
    let (n, nn) = (lay.n, lay.n_nodes);
    let len = traj.len();
    let mut state_norm = Vec::with_capacity(len);
    let mut est_error = vec![Vec::with_capacity(len); nn];
    let mut avg = Vec::with_capacity(len);
    let with_outputs = lay.stack > 0;
    let mut output_err = if with_outputs {
        vec![vec![Vec::with_capacity(len); nn]; nn]
    } else {
        Vec::new()
    };
    let y_off = offsets(&lay.output_dims);
    for k in 0..len {
        let x = traj.x(k);
        state_norm.push(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        let mut abs_sum = 0.0;
        for (i, series) in est_error.iter_mut().enumerate() {
            let xh = traj.x_hat(k, i);
            let mut sq = 0.0;
            for h in 0..n {
                let d = xh[h] - x[h];
                sq += d * d;
                abs_sum += d.abs();
            }
            series.push(sq.sqrt());
        }
        avg.push(abs_sum / (nn * n) as f64);
        if with_outputs {
            let y = measurements_at(s, traj, k)?;
            for (i, per_i) in output_err.iter_mut().enumerate() {
                let yh = traj.y_hat(k, i);
                for (j, series) in per_i.iter_mut().enumerate() {
                    let e: f64 = (0..lay.output_dims[j])
                        .map(|c| (yh[y_off[j] + c] - y[j][c]).powi(2))
                        .sum();
                    series.push(e.sqrt());
                }
            }
        }
    }
    let t_end = traj.final_time();
    let start = 0.9 * t_end;
    let residual_bound = traj
        .times
        .iter()
        .zip(&state_norm)
        .filter(|(t, _)| **t >= start)
        .map(|(_, v)| v * v)
        .fold(0.0, f64::max);
    Ok(Metrics {
        times: traj.times.clone(),
        state_norm,
        est_error,
        avg_est_error: avg,
        output_err,
        gain_final: (0..nn).map(|i| traj.gain(len - 1, i)).collect(),
        residual_bound,
    })
}

/// Sup of `values` over consecutive windows covering `[from, t_end]`, with the
/// least-squares slope of those sups against window midpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowTrend {
    pub sups: Vec<f64>,
    pub slope: f64,
    /// `slope * span / mean(sups)`: fitted rise across the span, relative to the level.
    pub relative_rise: f64,
}

pub fn window_trend(times: &[f64], values: &[f64], from: f64, windows: usize) -> WindowTrend {
    let t_end = times.last().copied().unwrap_or(0.0);
    let span = t_end - from;
    let width = span / windows as f64;
    let mut sups = vec![f64::NEG_INFINITY; windows];
    for (&t, &v) in times.iter().zip(values) {
        if t < from {
            continue;
        }
        let w = (((t - from) / width) as usize).min(windows - 1);
        sups[w] = sups[w].max(v);
    }
    let mids: Vec<f64> = (0..windows)
        .map(|w| from + (w as f64 + 0.5) * width)
        .collect();
    let mt = mids.iter().sum::<f64>() / windows as f64;
    let mv = sups.iter().sum::<f64>() / windows as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in mids.iter().zip(&sups) {
        num += (t - mt) * (v - mv);
        den += (t - mt) * (t - mt);
    }
    let slope = num / den;
    let relative_rise = if mv > 0.0 { slope * span / mv } else { 0.0 };
    WindowTrend {
        sups,
        slope,
        relative_rise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    #[test]
    fn zero_everything_stays_zero() {
        let mut s = scenarios::regression_scenario().unwrap();
        s.x0 = Vector::zeros(2);
        s.integrator = IntegratorConfig::new(1e-2, 1.0, 10);
        let traj = integrate(&s).unwrap();
        for st in &traj.states {
            for (c, v) in st.iter().enumerate() {
                if !(0..3).any(|i| traj.layout.gain(i) == c) {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn metrics_arithmetic() {
        let s = scenarios::regression_scenario().unwrap();
        let lay = s.layout();
        let mut st = vec![0.0; lay.len()];
        for i in 0..3 {
            for h in lay.x_hat(i) {
                st[h] = 3.0;
            }
        }
        let traj = Trajectory {
            layout: lay,
            times: vec![0.0, 1.0],
            states: vec![st.clone(), st],
            inputs: vec![vec![0.0; 3]; 2],
        };
        let m = extract_metrics(&traj, &s).unwrap();
        assert_eq!(m.avg_est_error, vec![3.0, 3.0]);
        assert_eq!(m.residual_bound, 0.0);
    }

    #[test]
    fn robust_gain_below_one_is_rejected() {
        let mut s = scenarios::regression_scenario().unwrap();
        s.nodes.mode = NodeMode::Robust { eps: 0.01 };
        s.nodes.gain0 = vec![0.5; 3];
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("gamma(0) > 1"), "{err}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut s = scenarios::regression_scenario().unwrap();
        s.plant = PlantModel::new(
            Mat::identity(2, 2) * 50.0,
            s.plant.inputs().to_vec(),
            s.plant.outputs().to_vec(),
        )
        .unwrap();
        s.gains = s.gains.without_controller();
        s.integrator = IntegratorConfig::new(1e-2, 5.0, 1);
        assert!(matches!(integrate(&s), Err(Error::Divergence { .. })));
    }

    #[test]
    fn trend_of_flat_and_rising() {
        let t: Vec<f64> = (0..=100).map(|k| k as f64).collect();
        let flat = window_trend(&t, &vec![1.0; 101], 50.0, 5);
        assert!(flat.slope.abs() < 1e-12);
        let rising: Vec<f64> = t.iter().map(|v| 1.0 + v).collect();
        assert!(window_trend(&t, &rising, 50.0, 5).relative_rise > 0.3);
    }
}
