//! Consensus flows on matrices and the distributed design procedure.

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::linalg::{self, Mat};
use crate::ode::{self, Method, Stepper};
use crate::plant::PlantModel;

use super::{design_gains, GainDesign, GainSet, SynthesisWeights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub dt: f64,
    /// Integration horizon; also the cap when `stop_tol` is set.
    pub t_final: f64,
    /// Stop once `max |step change| <= stop_tol * max(1, max |X|)`.
    pub stop_tol: Option<f64>,
    /// Sample stride in steps; 0 records only the endpoints.
    pub record_every: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_final: 1e4,
            stop_tol: Some(1e-15),
            record_every: 0,
        }
    }
}

impl FlowOptions {
    /// Fixed horizon, no early stop.
    pub fn fixed(dt: f64, t_final: f64) -> Self {
        Self {
            dt,
            t_final,
            stop_tol: None,
            record_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub times: Vec<f64>,
    /// `samples[k][i]` is node `i`'s matrix at `times[k]`.
    pub samples: Vec<Vec<Mat>>,
    pub final_values: Vec<Mat>,
    pub final_time: f64,
    pub converged: bool,
}

/// Integrates `X_i' = -sum_m a_im (X_i - X_m) - a_ij (X_i - X_anchor)` with RK4.
/// Without an anchor the last term is dropped.
pub fn consensus_matrix_flow(
    graph: &DirectedGraph,
    anchor: Option<(usize, &Mat)>,
    initials: &[Mat],
    opts: &FlowOptions,
) -> Result<FlowResult> {
    let n = graph.n_nodes();
    if !graph.is_strongly_connected() {
        return Err(Error::Precondition(
            "consensus flow needs a strongly connected graph".into(),
        ));
    }
    if initials.len() != n {
        return Err(Error::Dimension(format!(
            "{} initial matrices for {n} nodes",
            initials.len()
        )));
    }
    let shape = initials[0].shape();
    if initials.iter().any(|m| m.shape() != shape) {
        return Err(Error::Dimension("initial matrices differ in shape".into()));
    }
    if let Some((j, v)) = anchor {
        if j >= n {
            return Err(Error::IndexOutOfRange {
                what: "anchor",
                index: j,
                len: n,
            });
        }
        if v.shape() != shape {
            return Err(Error::Dimension(format!(
                "anchor {:?} vs initial {:?}",
                v.shape(),
                shape
            )));
        }
    }
    if !(opts.dt > 0.0) || !(opts.t_final >= 0.0) {
        return Err(Error::config(
            "flow.dt",
            "dt must be positive and t_final non-negative",
        ));
    }

    let s = shape.0 * shape.1;
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| graph.neighbors(i).collect()).collect();
    let anchored: Vec<bool> = (0..n)
        .map(|i| anchor.is_some_and(|(j, _)| graph.a(i, j)))
        .collect();
    let anchor_vals: Vec<f64> = anchor.map_or_else(Vec::new, |(_, v)| v.as_slice().to_vec());

    let mut y: Vec<f64> = initials
        .iter()
        .flat_map(|m| m.as_slice().to_vec())
        .collect();
    let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
        for i in 0..n {
            let yi = &y[i * s..(i + 1) * s];
            let di = &mut dy[i * s..(i + 1) * s];
            di.fill(0.0);
            for &m in &neighbors[i] {
                let ym = &y[m * s..(m + 1) * s];
                for k in 0..s {
                    di[k] -= yi[k] - ym[k];
                }
            }
            if anchored[i] {
                for k in 0..s {
                    di[k] -= yi[k] - anchor_vals[k];
                }
            }
        }
        Ok(())
    };

    let unpack = |y: &[f64]| -> Vec<Mat> {
        (0..n)
            .map(|i| Mat::from_column_slice(shape.0, shape.1, &y[i * s..(i + 1) * s]))
            .collect()
    };

    let steps = ode::step_count(opts.dt, opts.t_final);
    let mut stepper = Stepper::new(Method::Rk4, y.len());
    let mut times = vec![0.0];
    let mut samples = vec![unpack(&y)];
    let mut prev = y.clone();
    let mut converged = false;
    let mut t = 0.0;
    for k in 0..steps {
        prev.copy_from_slice(&y);
        stepper.step(&mut rhs, t, opts.dt, &mut y)?;
        t = (k + 1) as f64 * opts.dt;
        if opts.record_every > 0 && (k + 1) % opts.record_every == 0 && k + 1 < steps {
            times.push(t);
            samples.push(unpack(&y));
        }
        if let Some(tol) = opts.stop_tol {
            let mut change = 0.0f64;
            let mut size = 1.0f64;
            for (a, b) in y.iter().zip(&prev) {
                change = change.max((a - b).abs());
                size = size.max(a.abs());
            }
            if change <= tol * size {
                converged = true;
                break;
            }
        }
    }
    let final_values = unpack(&y);
    if times.last() != Some(&t) {
        times.push(t);
        samples.push(final_values.clone());
    }
    Ok(FlowResult {
        times,
        samples,
        final_values,
        final_time: t,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedDesign {
    /// Final design at each node from its own reconstructed data.
    pub node_designs: Vec<GainDesign>,
    /// `b_hat[i][j]` is node `i`'s estimate of `B_j`.
    pub b_hat: Vec<Vec<Mat>>,
    pub c_hat: Vec<Vec<Mat>>,
    /// Locally feasible `T1,i` after each node's own shrinking.
    pub t1_selected: Vec<Mat>,
    /// Consensus value reached at each node.
    pub t1_star: Vec<Mat>,
    /// Common `T2` after escalation.
    pub t2: Mat,
    /// Longest flow horizon used.
    pub flow_time: f64,
    /// `max |B_hat - B|, |C_hat - C|` over all nodes and targets.
    pub reconstruction_error: f64,
}

impl DistributedDesign {
    pub fn gains(&self) -> &GainSet {
        &self.node_designs[0].gains
    }

    /// Largest entrywise difference of any node's gains from node 0's.
    pub fn gain_disagreement(&self) -> f64 {
        let g0 = self.gains();
        self.node_designs
            .iter()
            .map(|d| {
                linalg::max_abs(&(d.gains.stacked_k() - g0.stacked_k()))
                    .max(linalg::max_abs(&(d.gains.stacked_f() - g0.stacked_f())))
            })
            .fold(0.0, f64::max)
    }
}

/// Distributed design: anchored flows recover every `B_j`, `C_j` at every node,
/// each node selects a feasible `T1,i` from its `per_node_t1[i]`, an unanchored
/// flow fuses them, and each node designs on the fused value.
pub fn distributed_design(
    graph: &DirectedGraph,
    plant: &PlantModel,
    per_node_t1: &[Mat],
    t2: &Mat,
    opts: &FlowOptions,
) -> Result<DistributedDesign> {
    let n_nodes = graph.n_nodes();
    if plant.n_nodes() != n_nodes {
        return Err(Error::Dimension(format!(
            "plant has {} nodes, graph has {n_nodes}",
            plant.n_nodes()
        )));
    }
    if per_node_t1.len() != n_nodes {
        return Err(Error::Dimension(format!(
            "{} T1 matrices for {n_nodes} nodes",
            per_node_t1.len()
        )));
    }
    let mut flow_time: f64 = 0.0;

    let mut b_hat = vec![Vec::with_capacity(n_nodes); n_nodes];
    let mut c_hat = vec![Vec::with_capacity(n_nodes); n_nodes];
    for j in 0..n_nodes {
        let (bj, cj) = (&plant.inputs()[j], &plant.outputs()[j]);
        let (bs, cs) = if n_nodes == 1 {
            (vec![bj.clone()], vec![cj.clone()])
        } else {
            let fb = consensus_matrix_flow(graph, Some((j, bj)), &vec![bj * 0.0; n_nodes], opts)?;
            let fc = consensus_matrix_flow(graph, Some((j, cj)), &vec![cj * 0.0; n_nodes], opts)?;
            flow_time = flow_time.max(fb.final_time).max(fc.final_time);
            (fb.final_values, fc.final_values)
        };
        for i in 0..n_nodes {
            b_hat[i].push(bs[i].clone());
            c_hat[i].push(cs[i].clone());
        }
    }
    let mut reconstruction_error: f64 = 0.0;
    for i in 0..n_nodes {
        for j in 0..n_nodes {
            reconstruction_error = reconstruction_error
                .max(linalg::max_abs(&(&b_hat[i][j] - &plant.inputs()[j])))
                .max(linalg::max_abs(&(&c_hat[i][j] - &plant.outputs()[j])));
        }
    }
    let local_plants: Vec<PlantModel> = (0..n_nodes)
        .map(|i| PlantModel::new(plant.a().clone(), b_hat[i].clone(), c_hat[i].clone()))
        .collect::<Result<_>>()?;

    let mut t1_selected = Vec::with_capacity(n_nodes);
    let mut t2_common: Option<Mat> = None;
    for (i, lp) in local_plants.iter().enumerate() {
        let d = design_gains(
            lp,
            &SynthesisWeights {
                t1: per_node_t1[i].clone(),
                t2: t2.clone(),
                kappa: None,
            },
        )?;
        match &t2_common {
            None => t2_common = Some(d.t2.clone()),
            Some(t) if *t != d.t2 => {
                return Err(Error::synthesis(format!(
                    "node {} escalated T2 differently from node 1",
                    i + 1
                )))
            }
            Some(_) => {}
        }
        t1_selected.push(d.t1.expect("controller design sets T1"));
    }
    let t2 = t2_common.expect("at least one node");

    let t1_star = if n_nodes == 1 {
        t1_selected.clone()
    } else {
        let f = consensus_matrix_flow(graph, None, &t1_selected, opts)?;
        flow_time = flow_time.max(f.final_time);
        f.final_values.iter().map(linalg::symmetrize).collect()
    };

    let node_designs = local_plants
        .iter()
        .zip(&t1_star)
        .map(|(lp, t1)| {
            design_gains(
                lp,
                &SynthesisWeights {
                    t1: t1.clone(),
                    t2: t2.clone(),
                    kappa: None,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DistributedDesign {
        node_designs,
        b_hat,
        c_hat,
        t1_selected,
        t1_star,
        t2,
        flow_time,
        reconstruction_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle3() -> DirectedGraph {
        DirectedGraph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    #[test]
    fn anchored_fixed_point_is_stationary() {
        let g = cycle3();
        let b = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let r = consensus_matrix_flow(
            &g,
            Some((0, &b)),
            &vec![b.clone(); 3],
            &FlowOptions::fixed(1e-3, 1.0),
        )
        .unwrap();
        for m in &r.final_values {
            assert_eq!(m, &b);
        }
    }

    #[test]
    fn anchored_flow_matches_matrix_exponential() {
        let g = cycle3();
        let b = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let r = consensus_matrix_flow(
            &g,
            Some((0, &b)),
            &vec![Mat::zeros(2, 1); 3],
            &FlowOptions::fixed(1e-3, 50.0),
        )
        .unwrap();
        // error e(t) = exp(-L^1 t) e(0), per component of B
        let lj = g.grounded_laplacian(0).unwrap();
        let decay = (-lj * 50.0).exp();
        for row in 0..2 {
            let e0 = nalgebra::DVector::from_element(3, -b[(row, 0)]);
            let e = &decay * e0;
            for i in 0..3 {
                let got = r.final_values[i][(row, 0)] - b[(row, 0)];
                assert!((got - e[i]).abs() < 1e-12, "node {i} row {row}");
            }
        }
        // slowest mode of L^1 is 0.2451, so the gap at t = 50 is still ~6e-6
        let gap = r
            .final_values
            .iter()
            .map(|m| (m - &b).amax())
            .fold(0.0, f64::max);
        assert!((gap - 6.0269e-6).abs() < 1e-9, "{gap}");
        let r = consensus_matrix_flow(
            &g,
            Some((0, &b)),
            &vec![Mat::zeros(2, 1); 3],
            &FlowOptions::fixed(1e-3, 60.0),
        )
        .unwrap();
        for m in &r.final_values {
            assert!((m - &b).amax() < 1e-6);
        }
    }

    #[test]
    fn balanced_unanchored_flow_reaches_mean() {
        let g = cycle3();
        let init: Vec<Mat> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&v| Mat::from_element(1, 1, v))
            .collect();
        let r = consensus_matrix_flow(&g, None, &init, &FlowOptions::default()).unwrap();
        assert!(r.converged);
        for m in &r.final_values {
            assert!((m[(0, 0)] - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        let init = vec![Mat::zeros(1, 1); 2];
        assert!(matches!(
            consensus_matrix_flow(&g, None, &init, &FlowOptions::default()),
            Err(Error::Precondition(_))
        ));
    }
}
