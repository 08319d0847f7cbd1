//! Seeded random graph generation.

use rand::Rng;

use crate::rng;
use crate::tracegen::{Graph, TraceError};

/// Erdős–Rényi graph on `num_nodes` nodes: each unordered pair becomes an
/// edge independently with probability `edge_prob`. Weights are drawn from
/// U[0.2, 1.0] when `weighted`, else fixed at 1.0; the topology at a given
/// seed is the same either way. If the sampled graph is disconnected, edges
/// along a random chain over the components are added, so traversal tasks
/// are always well-posed.
pub fn gen_er_graph(num_nodes: usize, edge_prob: f64, weighted: bool, seed: u64) -> Graph {
    assert!(num_nodes > 0, "graph needs at least one node");
    assert!((0.0..=1.0).contains(&edge_prob), "edge probability in [0,1]");
    let mut rng = rng::from_seed(seed);
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for u in 0..num_nodes {
        for v in (u + 1)..num_nodes {
            let hit = rng.gen::<f64>() < edge_prob;
            let w = rng.gen_range(0.2..1.0);
            if hit {
                edges.push((u, v, if weighted { w } else { 1.0 }));
            }
        }
    }

    // Connectivity repair: chain the components in shuffled order.
    let mut uf = UnionFind::new(num_nodes);
    for &(u, v, _) in &edges {
        uf.union(u, v);
    }
    let mut components: Vec<Vec<usize>> = Vec::new();
    {
        let mut root_to_comp = vec![usize::MAX; num_nodes];
        for node in 0..num_nodes {
            let root = uf.find(node);
            if root_to_comp[root] == usize::MAX {
                root_to_comp[root] = components.len();
                components.push(Vec::new());
            }
            components[root_to_comp[root]].push(node);
        }
    }
    if components.len() > 1 {
        use rand::seq::SliceRandom;
        components.shuffle(&mut rng);
        for pair in components.windows(2) {
            let a = pair[0][rng.gen_range(0..pair[0].len())];
            let b = pair[1][rng.gen_range(0..pair[1].len())];
            let w = rng.gen_range(0.2..1.0);
            let (u, v) = (a.min(b), a.max(b));
            edges.push((u, v, if weighted { w } else { 1.0 }));
        }
        edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    }

    Graph::new(num_nodes, edges, false, seed).expect("generated edges satisfy graph invariants")
}

/// Directed acyclic copy of an undirected graph: nodes get a seeded random
/// priority and every edge is oriented from lower to higher priority.
pub fn orient_acyclic(graph: &Graph, seed: u64) -> Result<Graph, TraceError> {
    if graph.directed {
        return Err(TraceError::InvalidGraph(
            "acyclic orientation expects an undirected input".into(),
        ));
    }
    use rand::seq::SliceRandom;
    let mut rng = rng::from_seed(seed);
    let mut rank: Vec<usize> = (0..graph.num_nodes).collect();
    rank.shuffle(&mut rng);
    let mut edges = Vec::with_capacity(graph.edges.len());
    for &(u, v, w) in &graph.edges {
        if rank[u] < rank[v] {
            edges.push((u, v, w));
        } else {
            edges.push((v, u, w));
        }
    }
    Graph::new(graph.num_nodes, edges, true, graph.seed)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

#[cfg(test)]
pub(crate) fn is_connected(graph: &Graph) -> bool {
    let mut uf = UnionFind::new(graph.num_nodes);
    for &(u, v, _) in &graph.edges {
        uf.union(u, v);
    }
    let root = uf.find(0);
    (1..graph.num_nodes).all(|v| uf.find(v) == root)
}
