//! Directed communication graphs and their Laplacian/M-matrix machinery.
//!
//! Convention: `a[i][j] == true` iff node `i` receives from node `j`, i.e. the
//! directed edge `(j, i)` exists. Node indices are 0-based throughout the API.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Default tolerance for M-matrix and Hurwitz spectral tests.
pub const SPECTRAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    adj: Vec<bool>,
}

impl DirectedGraph {
    /// Builds a graph from `(source, destination)` pairs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut adj = vec![false; n * n];
        for &(src, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({src}, {dst}) references a node outside 0..{n}"
                )));
            }
            if src == dst {
                return Err(Error::InvalidGraph(format!("self-loop at node {src}")));
            }
            adj[dst * n + src] = true;
        }
        Ok(Self { n, adj })
    }

    /// Builds a graph from a {0,1} adjacency matrix with `a[i][j] = 1` iff `i` receives from `j`.
    pub fn from_adjacency(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph needs at least one node".into()));
        }
        let mut adj = vec![false; n * n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidGraph(format!(
                    "adjacency row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 if i == j => {
                        return Err(Error::InvalidGraph(format!("self-loop a[{i}][{i}] = 1")))
                    }
                    1 => adj[i * n + j] = true,
                    other => {
                        return Err(Error::InvalidGraph(format!(
                            "adjacency entry a[{i}][{j}] = {other} is not 0 or 1"
                        )))
                    }
                }
            }
        }
        Ok(Self { n, adj })
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn ring(n: usize) -> Result<Self> {
        if n == 1 {
            return Self::from_edges(1, &[]);
        }
        let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let edges: Vec<_> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Self::from_edges(n, &edges)
    }

    /// Random geometric graph: `n` points uniform in `[0, side]^2`, nodes closer than
    /// `radius` are neighbors in both directions. Returns the graph and the coordinates.
    pub fn random_geometric<R: Rng + ?Sized>(
        n: usize,
        side: f64,
        radius: f64,
        rng: &mut R,
    ) -> Result<(Self, Vec<[f64; 2]>)> {
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d = (pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]);
                    if d < radius {
                        edges.push((i, j));
                    }
                }
            }
        }
        Ok((Self::from_edges(n, &edges)?, pts))
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// `a_ij`: does node `i` receive from node `j`?
    pub fn a(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    /// In-neighbors of `i` (the nodes it receives from), ascending.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.a(i, j))
    }

    /// Edges as `(source, destination)` pairs, ordered by destination then source.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| self.neighbors(i).map(move |j| (j, i)))
            .collect()
    }

    pub fn in_degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn adjacency(&self) -> Mat {
        Mat::from_fn(self.n, self.n, |i, j| if self.a(i, j) { 1.0 } else { 0.0 })
    }

    pub fn laplacian(&self) -> Mat {
        let mut l = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in self.neighbors(i) {
                l[(i, j)] = -1.0;
                l[(i, i)] += 1.0;
            }
        }
        l
    }

    /// `L + diag(a_1j, ..., a_Nj)`: the Laplacian grounded at the receivers of `anchor`.
    pub fn grounded_laplacian(&self, anchor: usize) -> Result<Mat> {
        self.check_index(anchor)?;
        let mut l = self.laplacian();
        for i in 0..self.n {
            if self.a(i, anchor) {
                l[(i, i)] += 1.0;
            }
        }
        Ok(l)
    }

    /// `L (x) I_m + diag(A_1, ..., A_N)` with `A_i = diag(a_i1 I_{m_1}, ..., a_iN I_{m_N})`,
    /// where `m = sum(output_dims)`.
    pub fn block_grounded_laplacian(&self, output_dims: &[usize]) -> Result<Mat> {
        if output_dims.len() != self.n {
            return Err(Error::Dimension(format!(
                "{} output dimensions for {} nodes",
                output_dims.len(),
                self.n
            )));
        }
        let m: usize = output_dims.iter().sum();
        let mut out = self.laplacian().kronecker(&Mat::identity(m, m));
        for i in 0..self.n {
            let mut off = 0;
            for (j, &mj) in output_dims.iter().enumerate() {
                if self.a(i, j) {
                    for k in 0..mj {
                        out[(i * m + off + k, i * m + off + k)] += 1.0;
                    }
                }
                off += mj;
            }
        }
        Ok(out)
    }

    pub fn is_strongly_connected(&self) -> bool {
        // forward along edges j -> i, backward along i -> j
        let fwd = self.reach_from(0, |g, v| (0..g.n).filter(move |&i| g.a(i, v)).collect());
        let bwd = self.reach_from(0, |g, v| g.neighbors(v).collect());
        fwd && bwd
    }

    fn reach_from(&self, start: usize, next: impl Fn(&Self, usize) -> Vec<usize>) -> bool {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for w in next(self, v) {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n {
            return Err(Error::IndexOutOfRange {
                what: "node",
                index: i,
                len: self.n,
            });
        }
        Ok(())
    }
}

/// Left null vector `w` of the Laplacian (`w^T L = 0`) normalized to sum one.
///
/// For a strongly connected graph the unanchored consensus flow converges to
/// the `w`-weighted combination of the initial values.
pub fn left_perron_vector(graph: &DirectedGraph) -> Result<Vector> {
    let n = graph.n_nodes();
    if !graph.is_strongly_connected() {
        return Err(Error::Precondition(
            "graph is not strongly connected".into(),
        ));
    }
    // replace one equation of L^T w = 0 with sum(w) = 1
    let mut m = graph.laplacian().transpose();
    let mut rhs = Vector::zeros(n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    m.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular system for left Perron vector".into()))
}

/// Non-positive off-diagonal entries and eigenvalues with positive real part.
pub fn is_nonsingular_m_matrix(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > tol {
                return false;
            }
        }
    }
    match linalg::min_real_eigenvalue(m) {
        Ok(re) => re > tol,
        Err(_) => false,
    }
}

/// Finds a positive diagonal `G` with `G M + M^T G` positive definite.
///
/// Uses `G = diag(p_i / q_i)` with `p = M^-T 1`, `q = M^-1 1`, and falls back to a
/// coordinate search over the log-diagonal if that candidate does not verify.
pub fn find_diagonal_g(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension(
            "find_diagonal_g needs a square matrix".into(),
        ));
    }
    let n = m.nrows();
    let ones = Vector::from_element(n, 1.0);
    if let (Some(p), Some(q)) = (m.transpose().lu().solve(&ones), m.clone().lu().solve(&ones)) {
        if p.iter().chain(q.iter()).all(|&v| v > 0.0 && v.is_finite()) {
            let g = Mat::from_diagonal(&p.component_div(&q));
            if lyapunov_margin(m, &g) > 0.0 {
                return Ok(g);
            }
        }
    }
    diagonal_g_search(m, 500)
}

/// `lambda_min(G M + M^T G)`.
pub fn lyapunov_margin(m: &Mat, g: &Mat) -> f64 {
    linalg::min_sym_eigenvalue(&(g * m + m.transpose() * g))
}

pub(crate) fn diagonal_g_search(m: &Mat, max_iter: usize) -> Result<Mat> {
    let n = m.nrows();
    let score = |s: &[f64]| {
        let g = Mat::from_diagonal(&Vector::from_iterator(n, s.iter().map(|v| v.exp())));
        let gmax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        lyapunov_margin(m, &g) / gmax
    };
    let mut s = vec![0.0; n];
    let mut best = score(&s);
    let mut step = 1.0;
    for _ in 0..max_iter {
        if best > 0.0 {
            break;
        }
        let mut improved = false;
        for k in 0..n {
            for dir in [step, -step] {
                s[k] += dir;
                let cand = score(&s);
                if cand > best {
                    best = cand;
                    improved = true;
                    break;
                }
                s[k] -= dir;
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    if best > 0.0 {
        Ok(Mat::from_diagonal(&Vector::from_iterator(
            n,
            s.iter().map(|v| v.exp()),
        )))
    } else {
        Err(Error::synthesis(format!(
            "no diagonal G found with G M + M^T G > 0 (best margin {best:.3e}); \
             matrix is not a non-singular M-matrix within tolerance"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle3() -> DirectedGraph {
        // 1 -> 2 -> 3 -> 1 in 1-based labels
        DirectedGraph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap()
    }

    #[test]
    fn laplacian_of_three_cycle() {
        let l = cycle3().laplacian();
        let expect = Mat::from_row_slice(3, 3, &[1., 0., -1., -1., 1., 0., 0., -1., 1.]);
        assert_eq!(l, expect);
    }

    #[test]
    fn laplacian_small_cases() {
        let g = DirectedGraph::from_edges(2, &[]).unwrap();
        assert_eq!(g.laplacian(), Mat::zeros(2, 2));
        let g = DirectedGraph::complete(2).unwrap();
        assert_eq!(
            g.laplacian(),
            Mat::from_row_slice(2, 2, &[1., -1., -1., 1.])
        );
    }

    #[test]
    fn grounded_three_cycle() {
        let g = cycle3();
        let l1 = g.grounded_laplacian(0).unwrap();
        let expect = Mat::from_row_slice(3, 3, &[1., 0., -1., -1., 2., 0., 0., -1., 1.]);
        assert_eq!(l1, expect);
        assert!(linalg::min_real_eigenvalue(&l1).unwrap() > 0.0);
        assert!(is_nonsingular_m_matrix(&l1, SPECTRAL_TOL));
        assert!(matches!(
            g.grounded_laplacian(3),
            Err(Error::IndexOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn grounded_edgeless_is_singular() {
        let g = DirectedGraph::from_edges(2, &[]).unwrap();
        let l = g.grounded_laplacian(0).unwrap();
        assert_eq!(l.determinant(), 0.0);
        assert!(!is_nonsingular_m_matrix(&l, SPECTRAL_TOL));
    }

    #[test]
    fn strong_connectivity() {
        assert!(cycle3().is_strongly_connected());
        let g = DirectedGraph::from_edges(2, &[(0, 1)]).unwrap();
        assert!(!g.is_strongly_connected());
        assert!(DirectedGraph::ring(6).unwrap().is_strongly_connected());
        assert!(DirectedGraph::ring(1).unwrap().is_strongly_connected());
    }

    #[test]
    fn rejects_self_loops_and_non_binary_entries() {
        assert!(DirectedGraph::from_edges(2, &[(1, 1)]).is_err());
        assert!(DirectedGraph::from_adjacency(&[vec![1, 0], vec![0, 0]]).is_err());
        assert!(DirectedGraph::from_adjacency(&[vec![0, 2], vec![0, 0]]).is_err());
        assert!(DirectedGraph::from_adjacency(&[vec![0, 1], vec![1, 0]]).is_ok());
    }

    #[test]
    fn m_matrix_sign_pattern() {
        assert!(is_nonsingular_m_matrix(&Mat::identity(3, 3), SPECTRAL_TOL));
        let m = Mat::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(!is_nonsingular_m_matrix(&m, SPECTRAL_TOL));
    }

    #[test]
    fn diagonal_g_candidates() {
        let g = find_diagonal_g(&Mat::identity(3, 3)).unwrap();
        assert!(lyapunov_margin(&Mat::identity(3, 3), &g) > 0.0);

        let l1 = cycle3().grounded_laplacian(0).unwrap();
        let g = find_diagonal_g(&l1).unwrap();
        assert!(g.diagonal().iter().all(|&v| v > 0.0));
        assert!(lyapunov_margin(&l1, &g) > 0.0);

        let m = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.0, 1.0]);
        // G = I fails here: I M + M^T I = [[2,-2],[-2,2]] is singular
        assert!(lyapunov_margin(&m, &Mat::identity(2, 2)) <= 1e-12);
        let g = find_diagonal_g(&m).unwrap();
        assert!(lyapunov_margin(&m, &g) > 0.0);
    }

    #[test]
    fn coordinate_search_alone_finds_g() {
        let m = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.0, 1.0]);
        let g = diagonal_g_search(&m, 500).unwrap();
        assert!(lyapunov_margin(&m, &g) > 0.0);
        let l1 = cycle3().grounded_laplacian(1).unwrap();
        let g = diagonal_g_search(&l1, 500).unwrap();
        assert!(lyapunov_margin(&l1, &g) > 0.0);
    }

    #[test]
    fn diagonal_g_rejects_non_m_matrix() {
        let m = Mat::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(find_diagonal_g(&m), Err(Error::Synthesis { .. })));
    }

    #[test]
    fn block_grounded_matches_per_channel_spectrum() {
        let g = cycle3();
        let lhat = g.block_grounded_laplacian(&[1, 2, 1]).unwrap();
        assert_eq!(lhat.nrows(), 12);
        assert!(is_nonsingular_m_matrix(&lhat, SPECTRAL_TOL));
    }

    #[test]
    fn perron_vector_of_balanced_graph_is_uniform() {
        let w = left_perron_vector(&cycle3()).unwrap();
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-14);
        }
    }
}
