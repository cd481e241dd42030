//! Undirected weighted communication topology.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// Static undirected graph over `n` agents with nonnegative symmetric weights.
///
/// Construction rejects asymmetric weights, nonzero self loops, negative
/// weights and disconnected topologies.
#[derive(Debug, Clone)]
pub struct CommGraph {
    weights: DMatrix<f64>,
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl CommGraph {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if n == 0 || weights.ncols() != n {
            return Err(Error::config(format!(
                "weight matrix must be square and nonempty, got {}x{}",
                n,
                weights.ncols()
            )));
        }
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::config(format!("self loop on agent {}", i + 1)));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::config(format!(
                        "weight a[{},{}] = {w} must be finite and nonnegative",
                        i + 1,
                        j + 1
                    )));
                }
                if w != weights[(j, i)] {
                    return Err(Error::config(format!(
                        "weights not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let graph = Self::from_weights_unchecked(weights);
        if !graph.is_connected() {
            return Err(Error::config("communication graph is not connected"));
        }
        Ok(graph)
    }

    /// Builds from a 0-based undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = DMatrix::zeros(n, n);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::config(format!(
                    "edge ({}, {}) out of range for {n} agents",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::config(format!("self loop on agent {}", i + 1)));
            }
            w[(i, j)] = weight;
            w[(j, i)] = weight;
        }
        Self::new(w)
    }

    /// Same as [`CommGraph::from_edges`] but tolerates disconnected graphs.
    /// Used to query connectivity of arbitrary topologies.
    pub fn from_edges_unchecked(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut w = DMatrix::zeros(n, n);
        for &(i, j, weight) in edges {
            w[(i, j)] = weight;
            w[(j, i)] = weight;
        }
        Self::from_weights_unchecked(w)
    }

    fn from_weights_unchecked(weights: DMatrix<f64>) -> Self {
        let n = weights.nrows();
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| weights[(i, j)] != 0.0)
                    .map(|j| (j, weights[(i, j)]))
                    .collect()
            })
            .collect();
        Self { weights, neighbors }
    }

    pub fn n_agents(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Nonzero-weight neighbors of agent `i`.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    /// Returns a copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.weights * factor)
    }

    /// `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_agents();
        let mut l = -self.weights.clone();
        for i in 0..n {
            l[(i, i)] = self.weights.row(i).sum();
        }
        l
    }

    /// Ascending Laplacian eigenvalues.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        linalg::sym_eigenvalues(&self.laplacian())
    }

    /// `(λ₂, λ_N)`; for a single agent both are 0.
    pub fn algebraic_connectivity(&self) -> Result<(f64, f64)> {
        let spec = self.spectrum()?;
        let l2 = spec.get(1).copied().unwrap_or(0.0);
        Ok((l2, spec[spec.len() - 1]))
    }

    /// Breadth-first reachability over nonzero weights.
    pub fn is_connected(&self) -> bool {
        let n = self.n_agents();
        if n <= 1 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &(j, _) in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == n
    }
}
