//! Step-by-step execution of the supervised algorithms.

use std::collections::VecDeque;

use crate::tracegen::{identity_labels, Algo, Graph, Trace, TraceError};

/// Runs `algo` on `graph` from `source` and records the predecessor labeling
/// after every step. Neighbor scans are in ascending node-id order and
/// priority ties pop the smaller node id, so the trace is deterministic.
pub fn execute(algo: Algo, graph: &Graph, source: Option<usize>) -> Result<Trace, TraceError> {
    let n = graph.num_nodes;
    let src = if algo.needs_source() {
        match source {
            Some(s) if s < n => Some(s),
            _ => return Err(TraceError::MissingSource),
        }
    } else {
        None
    };
    if algo.needs_dag() && !graph.directed {
        return Err(TraceError::NotADag);
    }

    let steps = match algo {
        Algo::Bfs => bfs(graph, src.unwrap()),
        Algo::Dfs => dfs(graph, src.unwrap()),
        Algo::BellmanFord => bellman_ford(graph, src.unwrap()),
        Algo::Dijkstra => dijkstra(graph, src.unwrap()),
        Algo::Prim => prim(graph, src.unwrap()),
        Algo::TopoSort => topo_sort(graph)?,
        Algo::DagShortestPaths => dag_shortest_paths(graph, src.unwrap())?,
    };
    Ok(Trace { task: algo, source: src, num_nodes: n, steps })
}

/// One step per node visit: a node is labeled with its predecessor the
/// moment it is discovered.
fn bfs(graph: &Graph, src: usize) -> Vec<Vec<u32>> {
    let adj = graph.adjacency();
    let mut labels = identity_labels(graph.num_nodes);
    let mut rows = vec![labels.clone()];
    let mut visited = vec![false; graph.num_nodes];
    visited[src] = true;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &(v, _) in &adj[u] {
            if !visited[v] {
                visited[v] = true;
                labels[v] = u as u32;
                rows.push(labels.clone());
                queue.push_back(v);
            }
        }
    }
    rows
}

/// Preorder depth-first traversal; one step per first visit.
fn dfs(graph: &Graph, src: usize) -> Vec<Vec<u32>> {
    let adj = graph.adjacency();
    let mut labels = identity_labels(graph.num_nodes);
    let mut rows = vec![labels.clone()];
    let mut visited = vec![false; graph.num_nodes];
    visited[src] = true;
    // Explicit recursion stack: (node, index into its neighbor list).
    let mut stack = vec![(src, 0usize)];
    while let Some(&mut (u, ref mut next)) = stack.last_mut() {
        if *next >= adj[u].len() {
            stack.pop();
            continue;
        }
        let (v, _) = adj[u][*next];
        *next += 1;
        if !visited[v] {
            visited[v] = true;
            labels[v] = u as u32;
            rows.push(labels.clone());
            stack.push((v, 0));
        }
    }
    rows
}

/// One step per synchronous relaxation round: every edge is scanned in
/// ascending (u, v) order against the previous round's distances, strict
/// improvements win, and execution stops on the first round with no change.
fn bellman_ford(graph: &Graph, src: usize) -> Vec<Vec<u32>> {
    let n = graph.num_nodes;
    let mut labels = identity_labels(n);
    let mut rows = vec![labels.clone()];
    let mut dist = vec![f64::INFINITY; n];
    dist[src] = 0.0;
    let mut edges = graph.edges.clone();
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    // Positive weights: converges within n-1 rounds; the cap is a guard.
    for _ in 0..n {
        let prev = dist.clone();
        let mut changed = false;
        for &(u, v, w) in &edges {
            let mut relax = |a: usize, b: usize| {
                let cand = prev[a] + w;
                if cand < dist[b] {
                    dist[b] = cand;
                    labels[b] = a as u32;
                    changed = true;
                }
            };
            relax(u, v);
            if !graph.directed {
                relax(v, u);
            }
        }
        if !changed {
            break;
        }
        rows.push(labels.clone());
    }
    rows
}

/// One step per extraction of the closest unfinalized node (ties to the
/// smaller id). Rows show tentative predecessors as relaxations happen.
fn dijkstra(graph: &Graph, src: usize) -> Vec<Vec<u32>> {
    let n = graph.num_nodes;
    let adj = graph.adjacency();
    let mut labels = identity_labels(n);
    let mut rows = vec![labels.clone()];
    let mut dist = vec![f64::INFINITY; n];
    dist[src] = 0.0;
    let mut done = vec![false; n];
    loop {
        let mut best: Option<usize> = None;
        for v in 0..n {
            if !done[v] && dist[v].is_finite() && best.map_or(true, |b| dist[v] < dist[b]) {
                best = Some(v);
            }
        }
        let Some(u) = best else { break };
        done[u] = true;
        for &(v, w) in &adj[u] {
            if !done[v] && dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                labels[v] = u as u32;
            }
        }
        rows.push(labels.clone());
    }
    rows
}

/// Minimum spanning tree grown from the source; one step per attachment.
/// Labels point at the tree endpoint of each node's lightest crossing edge.
fn prim(graph: &Graph, src: usize) -> Vec<Vec<u32>> {
    let n = graph.num_nodes;
    let adj = graph.adjacency();
    let mut labels = identity_labels(n);
    let mut rows = vec![labels.clone()];
    let mut key = vec![f64::INFINITY; n];
    key[src] = 0.0;
    let mut done = vec![false; n];
    loop {
        let mut best: Option<usize> = None;
        for v in 0..n {
            if !done[v] && key[v].is_finite() && best.map_or(true, |b| key[v] < key[b]) {
                best = Some(v);
            }
        }
        let Some(u) = best else { break };
        done[u] = true;
        for &(v, w) in &adj[u] {
            if !done[v] && w < key[v] {
                key[v] = w;
                labels[v] = u as u32;
            }
        }
        rows.push(labels.clone());
    }
    rows
}

/// Kahn's algorithm with the smallest ready id first. Labels chain each
/// finalized node to the previously finalized one, encoding the order.
fn topo_sort(graph: &Graph) -> Result<Vec<Vec<u32>>, TraceError> {
    let n = graph.num_nodes;
    let adj = graph.adjacency();
    let mut indeg = vec![0usize; n];
    for &(_, v, _) in &graph.edges {
        indeg[v] += 1;
    }
    let mut labels = identity_labels(n);
    let mut rows = vec![labels.clone()];
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut last: Option<usize> = None;
    let mut processed = 0;
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        if let Some(prev) = last {
            labels[v] = prev as u32;
        }
        rows.push(labels.clone());
        last = Some(v);
        processed += 1;
        for &(w, _) in &adj[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.insert(w);
            }
        }
    }
    if processed < n {
        return Err(TraceError::NotADag);
    }
    Ok(rows)
}

/// Vertices processed in topological order (smallest ready id first), each
/// relaxing its out-edges; one step per processed vertex.
fn dag_shortest_paths(graph: &Graph, src: usize) -> Result<Vec<Vec<u32>>, TraceError> {
    let n = graph.num_nodes;
    let adj = graph.adjacency();
    let mut indeg = vec![0usize; n];
    for &(_, v, _) in &graph.edges {
        indeg[v] += 1;
    }
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for &(w, _) in &adj[v] {
            indeg[w] -= 1;
            if indeg[w] == 0 {
                ready.insert(w);
            }
        }
    }
    if order.len() < n {
        return Err(TraceError::NotADag);
    }
    let mut labels = identity_labels(n);
    let mut rows = vec![labels.clone()];
    let mut dist = vec![f64::INFINITY; n];
    dist[src] = 0.0;
    for &u in &order {
        if dist[u].is_finite() {
            for &(v, w) in &adj[u] {
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                    labels[v] = u as u32;
                }
            }
        }
        rows.push(labels.clone());
    }
    Ok(rows)
}
