//! Directed, hop-weighted global item graph.
//!
//! Within one session every ordered position pair `(i, j)` with
//! `1 ≤ j − i ≤ ε` contributes an edge `items[i] → items[j]` of weight
//! `1 / (1 + (j − i))`. Contributions are summed across sessions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Session;
use crate::error::{Error, Result};
use crate::tensor::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub epsilon: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { epsilon: 3 }
    }
}

impl GraphConfig {
    pub fn new(epsilon: usize) -> Result<Self> {
        if epsilon == 0 {
            return Err(Error::Config("epsilon must be at least 1".into()));
        }
        Ok(Self { epsilon })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Per-session contributions, in position order. Repeated item pairs are
/// emitted once per occurrence.
pub fn session_edges(items: &[usize], epsilon: usize) -> Vec<Edge> {
    let mut out = Vec::new();
    for i in 0..items.len() {
        for hop in 1..=epsilon {
            let j = i + hop;
            if j >= items.len() {
                break;
            }
            out.push(Edge {
                src: items[i],
                dst: items[j],
                weight: 1.0 / (1.0 + hop as f64),
            });
        }
    }
    out
}

/// Sparse weighted adjacency over `n` items. Edges are sorted by
/// `(src, dst)` and every weight is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl GlobalGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst)))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    /// Tab-separated `src dst weight` lines sorted by `(src, dst)`.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            let _ = writeln!(s, "{}\t{}\t{}", e.src, e.dst, e.weight);
        }
        s
    }
}

/// Sums per-session contributions over all sessions in input order.
pub fn build_global_graph(n: usize, sessions: &[Session], config: GraphConfig) -> GlobalGraph {
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for s in sessions {
        for e in session_edges(&s.items, config.epsilon) {
            debug_assert!(e.src < n && e.dst < n);
            *acc.entry((e.src, e.dst)).or_insert(0.0) += e.weight;
        }
    }
    GlobalGraph {
        n,
        edges: acc
            .into_iter()
            .map(|((src, dst), weight)| Edge { src, dst, weight })
            .collect(),
    }
}

/// `D⁻¹A`: rows with outgoing weight sum to one, isolated rows stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Arc<CsrMatrix>,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Arc<CsrMatrix> {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn from_matrix(matrix: CsrMatrix) -> Self {
        Self {
            matrix: Arc::new(matrix),
        }
    }
}

pub fn row_normalize(graph: &GlobalGraph) -> NormalizedAdjacency {
    let mut row_sums = vec![0.0f64; graph.n];
    for e in &graph.edges {
        row_sums[e.src] += e.weight;
    }
    let triplets = graph
        .edges
        .iter()
        .map(|e| (e.src, e.dst, e.weight / row_sums[e.src]));
    NormalizedAdjacency::from_matrix(CsrMatrix::from_sorted_triplets(graph.n, graph.n, triplets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub items: usize,
    pub edges: usize,
    pub self_loops: usize,
    pub density: f64,
    pub total_weight: f64,
    /// out-degree → number of items with that out-degree
    pub out_degree_histogram: BTreeMap<usize, usize>,
}

pub fn graph_stats(graph: &GlobalGraph) -> GraphStats {
    let mut degree = vec![0usize; graph.n];
    for e in &graph.edges {
        degree[e.src] += 1;
    }
    let mut hist = BTreeMap::new();
    for d in degree {
        *hist.entry(d).or_insert(0) += 1;
    }
    GraphStats {
        items: graph.n,
        edges: graph.edges.len(),
        self_loops: graph.edges.iter().filter(|e| e.src == e.dst).count(),
        density: if graph.n == 0 {
            0.0
        } else {
            graph.edges.len() as f64 / (graph.n * graph.n) as f64
        },
        total_weight: graph.edges.iter().map(|e| e.weight).sum(),
        out_degree_histogram: hist,
    }
}
