//! Graphs, algorithm execution traces, and trace datasets.
//!
//! A [`Trace`] records, step by step, the predecessor labeling produced by a
//! classical graph algorithm. Row 0 is always the identity labeling (every
//! node points at itself); each subsequent row is the labeling after one
//! algorithm step. What counts as a step is fixed per algorithm:
//!
//! * BFS / DFS: one node visit (a node receives its predecessor).
//! * Bellman-Ford: one synchronous relaxation round over all edges.
//! * Dijkstra / Prim: one extraction from the priority queue.
//! * Topological sort / DAG shortest paths: one node finalized in
//!   topological order.
//!
//! All tie-breaks are by ascending node id, so traces are fully determined
//! by `(algorithm, graph, source)`.

mod dataset;
mod execute;
mod format;
mod generate;

pub use dataset::{make_dataset, DatasetConfig, Split, TaskDataset};
pub use execute::execute;
pub use generate::{gen_er_graph, orient_acyclic};

use std::fmt;

use thiserror::Error;

/// The supervised algorithm tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algo {
    Bfs,
    Dfs,
    BellmanFord,
    Dijkstra,
    Prim,
    TopoSort,
    DagShortestPaths,
}

impl Algo {
    pub const ALL: [Algo; 7] = [
        Algo::Bfs,
        Algo::Dfs,
        Algo::BellmanFord,
        Algo::Dijkstra,
        Algo::Prim,
        Algo::TopoSort,
        Algo::DagShortestPaths,
    ];

    /// Stable name used in files and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bfs => "bfs",
            Algo::Dfs => "dfs",
            Algo::BellmanFord => "bellman_ford",
            Algo::Dijkstra => "dijkstra",
            Algo::Prim => "prim",
            Algo::TopoSort => "topo_sort",
            Algo::DagShortestPaths => "dag_shortest_paths",
        }
    }

    pub fn from_name(name: &str) -> Option<Algo> {
        Algo::ALL.iter().copied().find(|a| a.name() == name)
    }

    /// Whether inputs carry meaningful edge weights.
    pub fn weighted(self) -> bool {
        matches!(
            self,
            Algo::BellmanFord | Algo::Dijkstra | Algo::Prim | Algo::DagShortestPaths
        )
    }

    /// Whether the task runs on a directed acyclic graph.
    pub fn needs_dag(self) -> bool {
        matches!(self, Algo::TopoSort | Algo::DagShortestPaths)
    }

    /// Whether execution starts from a source node.
    pub fn needs_source(self) -> bool {
        !matches!(self, Algo::TopoSort)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    /// The algorithm needs a source node and none (or an out-of-range one) was given.
    #[error("missing or invalid source node")]
    MissingSource,
    /// Topological-order tasks need a directed acyclic input.
    #[error("input graph is not a directed acyclic graph")]
    NotADag,
    /// The two traces are not over the same graph.
    #[error("traces are over different graphs")]
    GraphMismatch,
    /// The edge list violates a graph invariant.
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    /// A dataset file failed to parse or verify.
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An edge- and node-indexed graph. Undirected edges are stored once with
/// `u < v`; `directed` graphs keep the stored orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize, f64)>,
    pub directed: bool,
    pub seed: u64,
}

impl Graph {
    /// Validates the edge list: endpoints in range, no self-loops, no
    /// duplicates, and `u < v` for undirected edges.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize, f64)>,
        directed: bool,
        seed: u64,
    ) -> Result<Graph, TraceError> {
        let mut seen = std::collections::HashSet::new();
        for &(u, v, w) in &edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(TraceError::InvalidGraph(format!(
                    "edge ({u},{v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(TraceError::InvalidGraph(format!("self-loop at node {u}")));
            }
            if !directed && u > v {
                return Err(TraceError::InvalidGraph(format!(
                    "undirected edge ({u},{v}) not stored with u < v"
                )));
            }
            if !w.is_finite() || w <= 0.0 {
                return Err(TraceError::InvalidGraph(format!(
                    "edge ({u},{v}) has non-positive weight {w}"
                )));
            }
            if !seen.insert((u, v)) {
                return Err(TraceError::InvalidGraph(format!("duplicate edge ({u},{v})")));
            }
        }
        Ok(Graph { num_nodes, edges, directed, seed })
    }

    /// Out-neighbor lists (both directions for undirected graphs), each
    /// sorted by ascending neighbor id.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v, w) in &self.edges {
            adj[u].push((v, w));
            if !self.directed {
                adj[v].push((u, w));
            }
        }
        for list in &mut adj {
            list.sort_by_key(|&(v, _)| v);
        }
        adj
    }

    /// In-neighbor lists, sorted by ascending neighbor id. Equal to
    /// [`Graph::adjacency`] for undirected graphs.
    pub fn in_adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        if !self.directed {
            return self.adjacency();
        }
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v, w) in &self.edges {
            adj[v].push((u, w));
        }
        for list in &mut adj {
            list.sort_by_key(|&(v, _)| v);
        }
        adj
    }
}

/// A per-step predecessor labeling. `steps[0]` is the identity labeling;
/// `steps[j]` is the labeling after step `j`. Unvisited nodes keep their own
/// id in every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub task: Algo,
    pub source: Option<usize>,
    pub num_nodes: usize,
    pub steps: Vec<Vec<u32>>,
}

impl Trace {
    /// Number of algorithm steps (rows beyond the identity row).
    pub fn num_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn final_labels(&self) -> &[u32] {
        self.steps.last().expect("trace has at least the identity row")
    }
}

/// Mean, over step-aligned rows, of the fraction of equal label entries.
/// The shorter trace is padded with its final row; the identity row counts.
pub fn trace_overlap(a: &Trace, b: &Trace) -> Result<f64, TraceError> {
    if a.num_nodes != b.num_nodes {
        return Err(TraceError::GraphMismatch);
    }
    let n = a.num_nodes;
    let rows = a.num_steps().max(b.num_steps());
    let mut total = 0.0;
    for j in 0..=rows {
        let ra = &a.steps[j.min(a.num_steps())];
        let rb = &b.steps[j.min(b.num_steps())];
        let equal = ra.iter().zip(rb).filter(|(x, y)| x == y).count();
        total += equal as f64 / n as f64;
    }
    Ok(total / (rows + 1) as f64)
}

/// Fixed 5-node undirected example graph used in tests and docs.
pub fn toy_graph() -> Graph {
    let edges = [(0, 1), (0, 2), (1, 2), (1, 3), (1, 4), (2, 3), (3, 4)];
    Graph::new(
        5,
        edges.iter().map(|&(u, v)| (u, v, 1.0)).collect(),
        false,
        0,
    )
    .expect("toy graph is valid")
}

pub(crate) fn identity_labels(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_rejects_self_loops_and_duplicates() {
        assert!(Graph::new(3, vec![(1, 1, 1.0)], false, 0).is_err());
        assert!(Graph::new(3, vec![(0, 1, 1.0), (0, 1, 2.0)], false, 0).is_err());
        assert!(Graph::new(3, vec![(2, 1, 1.0)], false, 0).is_err());
        assert!(Graph::new(3, vec![(0, 3, 1.0)], false, 0).is_err());
        assert!(Graph::new(3, vec![(2, 1, 1.0)], true, 0).is_ok());
    }

    #[test]
    fn adjacency_is_sorted_and_symmetric_when_undirected() {
        let g = toy_graph();
        let adj = g.adjacency();
        assert_eq!(adj[1].iter().map(|&(v, _)| v).collect::<Vec<_>>(), vec![0, 2, 3, 4]);
        let in_adj = g.in_adjacency();
        assert_eq!(adj, in_adj);
    }

    #[test]
    fn overlap_of_identical_traces_is_one() {
        let g = toy_graph();
        let t = execute(Algo::Bfs, &g, Some(0)).unwrap();
        assert_eq!(trace_overlap(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn overlap_rejects_different_sizes() {
        let g5 = toy_graph();
        let g3 = Graph::new(3, vec![(0, 1, 1.0), (1, 2, 1.0)], false, 0).unwrap();
        let a = execute(Algo::Bfs, &g5, Some(0)).unwrap();
        let b = execute(Algo::Bfs, &g3, Some(0)).unwrap();
        assert!(matches!(trace_overlap(&a, &b), Err(TraceError::GraphMismatch)));
    }

    #[test]
    fn overlap_counts_identity_row_and_padding() {
        // Two hand-built traces over 2 nodes: one stays identity, the other
        // flips node 1's label at its only step. Aligned rows: identity row
        // (fully equal) and one padded row where exactly node 0 agrees.
        let a = Trace {
            task: Algo::Bfs,
            source: Some(0),
            num_nodes: 2,
            steps: vec![vec![0, 1]],
        };
        let b = Trace {
            task: Algo::Dfs,
            source: Some(0),
            num_nodes: 2,
            steps: vec![vec![0, 1], vec![0, 0]],
        };
        let got = trace_overlap(&a, &b).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }
}
