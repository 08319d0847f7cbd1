//! Seeded train/val/test datasets of (graph, trace) pairs.

use rand::Rng;

use crate::rng;
use crate::tracegen::{execute, gen_er_graph, orient_acyclic, Algo, Graph, Trace};

const TAG_ORIENT: u64 = 0x5eed_0001;
const TAG_SOURCE: u64 = 0x5eed_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x11,
            Split::Val => 0x22,
            Split::Test => 0x33,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub task: Algo,
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Node count for the train and validation splits.
    pub nodes_train: usize,
    /// Node count for the test split (larger, to probe size generalization).
    pub nodes_test: usize,
    pub edge_prob: f64,
}

impl DatasetConfig {
    /// Desk-scale defaults: 200 train and 32 validation graphs at 8 nodes,
    /// 32 test graphs at 16 nodes.
    pub fn desk(task: Algo, seed: u64) -> Self {
        DatasetConfig {
            task,
            seed,
            num_train: 200,
            num_val: 32,
            num_test: 32,
            nodes_train: 8,
            nodes_test: 16,
            edge_prob: 0.35,
        }
    }

    /// Full-scale split sizes: 1000 train and 32 validation graphs at 16
    /// nodes, 32 test graphs at 64 nodes.
    pub fn full(task: Algo, seed: u64) -> Self {
        DatasetConfig {
            task,
            seed,
            num_train: 1000,
            num_val: 32,
            num_test: 32,
            nodes_train: 16,
            nodes_test: 64,
            edge_prob: 0.3,
        }
    }
}

/// All splits for one task. Fully determined by its [`DatasetConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub config: DatasetConfig,
    pub train: Vec<(Graph, Trace)>,
    pub val: Vec<(Graph, Trace)>,
    pub test: Vec<(Graph, Trace)>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[(Graph, Trace)] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Largest node count across splits (the model's id-embedding table must
    /// cover it).
    pub fn max_nodes(&self) -> usize {
        self.config.nodes_train.max(self.config.nodes_test)
    }
}

/// One record of a dataset: seeded graph (oriented acyclically for
/// topological tasks), seeded source choice, and the executed trace.
pub fn make_record(task: Algo, nodes: usize, edge_prob: f64, record_seed: u64) -> (Graph, Trace) {
    let base = gen_er_graph(nodes, edge_prob, task.weighted(), record_seed);
    let graph = if task.needs_dag() {
        orient_acyclic(&base, rng::mix(record_seed, TAG_ORIENT)).expect("generator output is undirected")
    } else {
        base
    };
    let source = task
        .needs_source()
        .then(|| rng::stream(record_seed, TAG_SOURCE).gen_range(0..nodes));
    let trace = execute(task, &graph, source).expect("generated inputs satisfy preconditions");
    (graph, trace)
}

/// Generates every split from disjoint derived seed streams.
pub fn make_dataset(config: &DatasetConfig) -> TaskDataset {
    let gen_split = |split: Split, count: usize, nodes: usize| {
        (0..count)
            .map(|i| {
                let record_seed = rng::mix(rng::mix(config.seed, split.tag()), i as u64);
                make_record(config.task, nodes, config.edge_prob, record_seed)
            })
            .collect::<Vec<_>>()
    };
    TaskDataset {
        train: gen_split(Split::Train, config.num_train, config.nodes_train),
        val: gen_split(Split::Val, config.num_val, config.nodes_train),
        test: gen_split(Split::Test, config.num_test, config.nodes_test),
        config: config.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Algo, seed: u64) -> DatasetConfig {
        DatasetConfig {
            num_train: 6,
            num_val: 3,
            num_test: 3,
            ..DatasetConfig::desk(task, seed)
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_dataset(&small(Algo::Bfs, 5));
        let b = make_dataset(&small(Algo::Bfs, 5));
        assert_eq!(a, b);
        let c = make_dataset(&small(Algo::Bfs, 6));
        assert_ne!(a, c);
    }

    #[test]
    fn splits_use_disjoint_graphs() {
        let d = make_dataset(&small(Algo::Bfs, 5));
        for (g, _) in &d.train {
            assert!(d.val.iter().all(|(v, _)| v.seed != g.seed));
            assert!(d.test.iter().all(|(t, _)| t.seed != g.seed));
        }
    }

    #[test]
    fn split_sizes_and_node_counts() {
        let d = make_dataset(&small(Algo::Dijkstra, 1));
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (6, 3, 3));
        assert!(d.train.iter().all(|(g, _)| g.num_nodes == 8));
        assert!(d.val.iter().all(|(g, _)| g.num_nodes == 8));
        assert!(d.test.iter().all(|(g, _)| g.num_nodes == 16));
        assert_eq!(d.max_nodes(), 16);
    }

    #[test]
    fn dag_tasks_get_dags_and_sources_only_where_needed() {
        let d = make_dataset(&small(Algo::TopoSort, 2));
        assert!(d.train.iter().all(|(g, t)| g.directed && t.source.is_none()));
        let d = make_dataset(&small(Algo::DagShortestPaths, 2));
        assert!(d.train.iter().all(|(g, t)| g.directed && t.source.is_some()));
        let d = make_dataset(&small(Algo::Prim, 2));
        assert!(d.train.iter().all(|(g, t)| !g.directed && t.source.is_some()));
    }

    #[test]
    fn weights_follow_the_task() {
        let d = make_dataset(&small(Algo::Bfs, 3));
        assert!(d.train.iter().all(|(g, _)| g.edges.iter().all(|&(_, _, w)| w == 1.0)));
        let d = make_dataset(&small(Algo::Prim, 3));
        assert!(d.train.iter().any(|(g, _)| g.edges.iter().any(|&(_, _, w)| w != 1.0)));
    }
}
