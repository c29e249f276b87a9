//! Undirected weighted communication graphs.
//!
//! Nodes are indexed from zero. Every undirected edge is stored once with
//! `i < j`, and the edge order fixes the column order of the incidence matrix.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Undirected edge `{i, j}` with `i < j` and positive weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// A neighbor of some node as seen from that node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: usize,
    pub weight: f64,
    /// Index of the shared edge in [`Network::edges`].
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    node_count: usize,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<Neighbor>>,
}

impl Network {
    /// Build a network from zero-based `(i, j, weight)` triples.
    ///
    /// Edges are normalized to `i < j` and sorted. Self loops, duplicates,
    /// out-of-range endpoints and non-positive weights are rejected.
    pub fn new<I>(node_count: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if node_count == 0 {
            return Err(Error::InvalidInput("network needs at least one node".into()));
        }
        let mut list = Vec::new();
        for (a, b, w) in edges {
            if a >= node_count || b >= node_count {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) out of range for {node_count} nodes"
                )));
            }
            if a == b {
                return Err(Error::InvalidInput(format!("self loop at node {a}")));
            }
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) has non-positive weight {w}"
                )));
            }
            let (i, j) = if a < b { (a, b) } else { (b, a) };
            list.push(Edge { i, j, weight: w });
        }
        list.sort_by_key(|e| (e.i, e.j));
        for pair in list.windows(2) {
            if pair[0].i == pair[1].i && pair[0].j == pair[1].j {
                return Err(Error::InvalidInput(format!(
                    "duplicate edge ({}, {})",
                    pair[0].i, pair[0].j
                )));
            }
        }
        let mut neighbors = vec![Vec::new(); node_count];
        for (k, e) in list.iter().enumerate() {
            neighbors[e.i].push(Neighbor { node: e.j, weight: e.weight, edge: k });
            neighbors[e.j].push(Neighbor { node: e.i, weight: e.weight, edge: k });
        }
        for nb in &mut neighbors {
            nb.sort_by_key(|n| n.node);
        }
        Ok(Network { node_count, edges: list, neighbors })
    }

    /// Unit-weight cycle `0 - 1 - ... - (n-1) - 0`.
    pub fn circle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidInput("a cycle needs at least three nodes".into()));
        }
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n, 1.0)))
    }

    /// Unit-weight path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i, 1.0)))
    }

    /// Unit-weight complete graph.
    pub fn complete(n: usize) -> Result<Self> {
        let mut e = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                e.push((i, j, 1.0));
            }
        }
        Self::new(n, e)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of node `i`, sorted by node index.
    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.neighbors[i]
    }

    pub fn is_neighbor(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].iter().any(|n| n.node == j)
    }

    /// Weighted adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.node_count, self.node_count);
        for e in &self.edges {
            a[(e.i, e.j)] = e.weight;
            a[(e.j, e.i)] = e.weight;
        }
        a
    }

    /// Weighted Laplacian `D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency();
        for i in 0..self.node_count {
            let d: f64 = self.neighbors[i].iter().map(|n| n.weight).sum();
            l[(i, i)] = d;
        }
        l
    }

    /// Oriented incidence matrix `N × m`: column `k` carries `+√w` at the
    /// lower endpoint and `-√w` at the upper one, so that `B Bᵀ = L`.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.node_count, self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            let s = e.weight.sqrt();
            b[(e.i, k)] = s;
            b[(e.j, k)] = -s;
        }
        b
    }

    /// Number of connected components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.node_count];
        let mut count = 0;
        for start in 0..self.node_count {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                for n in &self.neighbors[v] {
                    if !seen[n.node] {
                        seen[n.node] = true;
                        stack.push(n.node);
                    }
                }
            }
        }
        count
    }

    pub fn is_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// Dimension of the cycle space, `m - N + components`.
    pub fn cycle_rank(&self) -> usize {
        self.edges.len() + self.component_count() - self.node_count
    }
}
