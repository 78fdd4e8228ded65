//! Weighted undirected communication graphs and their Laplacians.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph must have at least one node")]
    Empty,
    #[error("adjacency matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency is asymmetric at ({i}, {j}): {a_ij} != {a_ji}")]
    Asymmetric { i: usize, j: usize, a_ij: f64, a_ji: f64 },
    #[error("negative or non-finite weight {weight} at ({i}, {j})")]
    NegativeWeight { i: usize, j: usize, weight: f64 },
    #[error("self loop at node {0}")]
    SelfLoop(usize),
    #[error("edge ({i}, {j}) references a node outside 1..={n}")]
    NodeOutOfRange { i: usize, j: usize, n: usize },
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("expected {expected} value blocks of equal dimension")]
    DimensionMismatch { expected: usize },
}

/// Symmetric, nonnegative adjacency `A = [a_ij]` with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    weights: DMatrix<f64>,
}

impl WeightedGraph {
    pub fn new(weights: DMatrix<f64>) -> Result<Self, GraphError> {
        let (rows, cols) = weights.shape();
        if rows != cols {
            return Err(GraphError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(GraphError::Empty);
        }
        for i in 0..rows {
            if weights[(i, i)] != 0.0 {
                return Err(GraphError::SelfLoop(i + 1));
            }
            for j in 0..cols {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(GraphError::NegativeWeight { i: i + 1, j: j + 1, weight: w });
                }
                if w != weights[(j, i)] {
                    return Err(GraphError::Asymmetric {
                        i: i + 1,
                        j: j + 1,
                        a_ij: w,
                        a_ji: weights[(j, i)],
                    });
                }
            }
        }
        Ok(Self { weights })
    }

    /// Build from 1-based undirected edges `(i, j, w)`. Repeated edges add up.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let mut weights = DMatrix::zeros(n_nodes, n_nodes);
        for &(i, j, w) in edges {
            if i == 0 || j == 0 || i > n_nodes || j > n_nodes {
                return Err(GraphError::NodeOutOfRange { i, j, n: n_nodes });
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(GraphError::NegativeWeight { i, j, weight: w });
            }
            weights[(i - 1, j - 1)] += w;
            weights[(j - 1, i - 1)] += w;
        }
        Self::new(weights)
    }

    pub fn n_nodes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Zero-based neighbor indices of zero-based node `i`.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes()).filter(move |&j| self.weights[(i, j)] > 0.0)
    }
}

/// Graph Laplacian `L = D - A` with its sorted spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMatrix {
    entries: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl LaplacianMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_nodes(&self) -> usize {
        self.entries.nrows()
    }

    /// Ascending eigenvalues `λ_1 ≤ ... ≤ λ_N`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Connectivity judged spectrally: `λ_2 > 1e-9 · λ_N`.
    pub fn is_connected(&self) -> bool {
        let n = self.eigenvalues.len();
        if n <= 1 {
            return true;
        }
        let lambda_max = self.eigenvalues[n - 1];
        lambda_max > 0.0 && self.eigenvalues[1] > 1e-9 * lambda_max
    }

    /// `(L ⊗ I_q) y` for a stacked vector of `N` blocks of size `q`.
    pub fn apply_stacked(&self, stacked: &[f64], q: usize) -> Vec<f64> {
        let n = self.n_nodes();
        let mut out = vec![0.0; n * q];
        for i in 0..n {
            for j in 0..n {
                let l = self.entries[(i, j)];
                if l == 0.0 {
                    continue;
                }
                for k in 0..q {
                    out[i * q + k] += l * stacked[j * q + k];
                }
            }
        }
        out
    }

    /// Row `i` of `(L ⊗ I_q)` applied to a stacked vector, written into `out`.
    pub(crate) fn row_apply_into(&self, i: usize, stacked: &[f64], q: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for j in 0..self.n_nodes() {
            let l = self.entries[(i, j)];
            if l == 0.0 {
                continue;
            }
            for k in 0..q {
                out[k] += l * stacked[j * q + k];
            }
        }
    }
}

pub fn laplacian(g: &WeightedGraph) -> LaplacianMatrix {
    let n = g.n_nodes();
    let a = g.weights();
    let mut entries = -a.clone();
    for i in 0..n {
        entries[(i, i)] = a.row(i).sum();
    }
    let mut eigenvalues: Vec<f64> = entries.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|x, y| x.partial_cmp(y).expect("finite Laplacian spectrum"));
    LaplacianMatrix { entries, eigenvalues }
}

/// Second-smallest Laplacian eigenvalue (0 for a single node).
pub fn algebraic_connectivity(l: &LaplacianMatrix) -> f64 {
    l.eigenvalues.get(1).copied().unwrap_or(0.0)
}

/// Breadth-first reachability from node 0.
pub fn is_connected(g: &WeightedGraph) -> bool {
    let n = g.n_nodes();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = queue.pop_front() {
        for j in g.neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                queue.push_back(j);
            }
        }
    }
    count == n
}

/// `Σ_j a_ij (values_i - values_j)` for zero-based node `i`.
pub fn neighbor_sum(
    l: &LaplacianMatrix,
    i: usize,
    values: &[DVector<f64>],
) -> Result<DVector<f64>, GraphError> {
    let n = l.n_nodes();
    if i >= n {
        return Err(GraphError::IndexOutOfRange { index: i, n });
    }
    if values.len() != n {
        return Err(GraphError::DimensionMismatch { expected: n });
    }
    let q = values[0].len();
    if values.iter().any(|v| v.len() != q) {
        return Err(GraphError::DimensionMismatch { expected: n });
    }
    let mut out = DVector::zeros(q);
    for (j, v) in values.iter().enumerate() {
        let lij = l.entries[(i, j)];
        if lij != 0.0 {
            out.axpy(lij, v, 1.0);
        }
    }
    Ok(out)
}

/// The four-node communication graph used by both reference scenarios:
/// edges 1-2, 2-3, 3-4, 1-3 with unit weights.
pub fn reference_graph() -> WeightedGraph {
    WeightedGraph::from_edges(4, &[(1, 2, 1.0), (2, 3, 1.0), (3, 4, 1.0), (1, 3, 1.0)])
        .expect("reference graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reference_laplacian() {
        let l = laplacian(&reference_graph());
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                2.0, -1.0, -1.0, 0.0, //
                -1.0, 2.0, -1.0, 0.0, //
                -1.0, -1.0, 3.0, -1.0, //
                0.0, 0.0, -1.0, 1.0,
            ],
        );
        assert_eq!(l.entries(), &expected);
        assert!(algebraic_connectivity(&l) > 0.0);
        assert!(is_connected(&reference_graph()));
    }

    #[test]
    fn empty_graph_has_zero_laplacian() {
        let g = WeightedGraph::from_edges(3, &[]).unwrap();
        assert_eq!(laplacian(&g).entries(), &DMatrix::zeros(3, 3));
        assert!(!is_connected(&WeightedGraph::from_edges(4, &[]).unwrap()));
    }

    #[test]
    fn k2_spectrum() {
        let g = WeightedGraph::from_edges(2, &[(1, 2, 1.0)]).unwrap();
        let l = laplacian(&g);
        assert_eq!(l.entries(), &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_abs_diff_eq!(algebraic_connectivity(&l), 2.0, epsilon = 1e-12);

        let isolated = laplacian(&WeightedGraph::from_edges(2, &[]).unwrap());
        assert_eq!(algebraic_connectivity(&isolated), 0.0);
        assert!(!isolated.is_connected());
    }

    #[test]
    fn single_node_is_connected() {
        let g = WeightedGraph::from_edges(1, &[]).unwrap();
        assert!(is_connected(&g));
        assert!(laplacian(&g).is_connected());
    }

    #[test]
    fn rejects_bad_adjacency() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert!(matches!(WeightedGraph::new(asym), Err(GraphError::Asymmetric { .. })));
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(matches!(WeightedGraph::new(neg), Err(GraphError::NegativeWeight { .. })));
        assert!(matches!(
            WeightedGraph::from_edges(3, &[(1, 4, 1.0)]),
            Err(GraphError::NodeOutOfRange { .. })
        ));
    }

    #[test]
    fn neighbor_sum_examples() {
        let l = laplacian(&reference_graph());
        let c = 2.5;
        let vals: Vec<_> = [0.0, 0.0, 0.0, c].iter().map(|&x| DVector::from_element(1, x)).collect();
        assert_abs_diff_eq!(neighbor_sum(&l, 3, &vals).unwrap()[0], c);

        let vals: Vec<_> = [1.0, 0.0, 0.0, 0.0].iter().map(|&x| DVector::from_element(1, x)).collect();
        assert_abs_diff_eq!(neighbor_sum(&l, 0, &vals).unwrap()[0], 2.0);

        let same = vec![DVector::from_vec(vec![1.5, -2.0]); 4];
        for i in 0..4 {
            assert_eq!(neighbor_sum(&l, i, &same).unwrap(), DVector::zeros(2));
        }

        assert!(neighbor_sum(&l, 4, &same).is_err());
        assert!(neighbor_sum(&l, 0, &same[..3]).is_err());
    }
}
