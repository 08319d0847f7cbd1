//! The branching graph network: a shared encoder, a tree of processor
//! modules spanning layers `1..=L`, and one bilinear decoder per task. Every
//! task is routed along one root-to-leaf path; tasks that share a tree node
//! share that layer's weights. Splitting a node replaces its descendant
//! chain with one deep copy per task group, so a split never changes model
//! outputs until subsequent training specializes the copies.

mod forward;

pub use forward::GraphCache;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::diffcore::{DiffError, ParamStore, ParamStoreBuilder};
use crate::rng;

#[derive(Debug, Error)]
pub enum BranchError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    /// Groups overlap, miss tasks, or include tasks foreign to the node.
    #[error("bad partition: {0}")]
    BadPartition(String),
    /// Layer-L nodes have no descendants to specialize.
    #[error("cannot split a leaf node (layer {layer})")]
    LeafSplit { layer: usize },
    #[error("bad tree description: {0}")]
    Tree(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// One processor module in the tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: usize,
    /// 1-based layer.
    pub layer: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Task indices routed through this node, ascending.
    pub tasks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BranchingModel {
    pub hidden: usize,
    pub num_layers: usize,
    /// Embedding-table height; node ids and pointer targets must stay below
    /// this in every graph the model sees.
    pub max_nodes: usize,
    task_names: Vec<String>,
    nodes: BTreeMap<usize, TreeNode>,
    root: usize,
    next_id: usize,
    store: ParamStore,
}

/// Raw node-feature width: source flag, self-pointer flag, normalized
/// degree, then two embedding vectors (pointer target and own id).
fn input_cols(hidden: usize) -> usize {
    3 + 2 * hidden
}

fn fill_block(store: &mut ParamStore, name: &str, scale: f64) {
    use rand::Rng;
    let id = store.find(name).expect("block exists");
    let mut r = rng::stream(store.seed, name_tag(name));
    for v in store.slice_mut(id) {
        *v = r.gen_range(-scale..scale);
    }
}

/// Stable per-block seed tag derived from the block name.
fn name_tag(name: &str) -> u64 {
    let digest = crate::fsio::sha256_hex(name.as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

fn proc_block_names(id: usize) -> [String; 4] {
    assert!(id <= 9999, "node id exceeds name padding");
    [
        format!("proc.n{id:04}.msg_w"),
        format!("proc.n{id:04}.msg_b"),
        format!("proc.n{id:04}.upd_w"),
        format!("proc.n{id:04}.upd_b"),
    ]
}

impl BranchingModel {
    /// Single-path model: `L` processor nodes each holding every task.
    pub fn new_chain(
        task_names: &[&str],
        num_layers: usize,
        hidden: usize,
        max_nodes: usize,
        seed: u64,
    ) -> BranchingModel {
        assert!(num_layers >= 1 && hidden >= 1 && max_nodes >= 1);
        assert!(!task_names.is_empty(), "need at least one task");
        for (i, name) in task_names.iter().enumerate() {
            assert!(
                !name.is_empty() && name.chars().all(|c| !c.is_whitespace() && c != ','),
                "task name {name:?} has separators"
            );
            assert!(!task_names[..i].contains(name), "duplicate task name {name:?}");
        }

        let all: Vec<usize> = (0..task_names.len()).collect();
        let mut nodes = BTreeMap::new();
        for l in 1..=num_layers {
            nodes.insert(
                l,
                TreeNode {
                    id: l,
                    layer: l,
                    parent: (l > 1).then(|| l - 1),
                    children: if l < num_layers { vec![l + 1] } else { vec![] },
                    tasks: all.clone(),
                },
            );
        }
        let mut model = BranchingModel {
            hidden,
            num_layers,
            max_nodes,
            task_names: task_names.iter().map(|s| s.to_string()).collect(),
            nodes,
            root: 1,
            next_id: num_layers + 1,
            store: ParamStoreBuilder::new().build(seed),
        };
        model.store = model.build_store(seed, None);
        model
    }

    /// Lays out a fresh store for the current tree and fills every block,
    /// either by copying from `source` (same name, or the name mapped
    /// through the split's copy table) or from the seeded initializer.
    fn build_store(
        &self,
        seed: u64,
        source: Option<(&ParamStore, &BTreeMap<String, String>)>,
    ) -> ParamStore {
        let h = self.hidden;
        let mut b = ParamStoreBuilder::new();
        b.block(1, "emb", self.max_nodes, h);
        b.block(1, "enc.w", h, input_cols(h));
        b.block(1, "enc.b", 1, h);
        for node in self.nodes.values() {
            let [mw, mb, uw, ub] = proc_block_names(node.id);
            b.block(node.layer, &mw, h, 2 * h + 1);
            b.block(node.layer, &mb, 1, h);
            b.block(node.layer, &uw, h, 2 * h);
            b.block(node.layer, &ub, 1, h);
        }
        for name in &self.task_names {
            b.block(self.num_layers, &format!("dec.{name}"), h, h);
        }
        let mut store = b.build(seed);

        let block_names: Vec<(String, usize, usize)> = store
            .blocks()
            .iter()
            .map(|s| (s.name.clone(), s.rows, s.cols))
            .collect();
        for (name, rows, cols) in block_names {
            let copied = source.and_then(|(old, renames)| {
                let src_name = renames.get(&name).map(String::as_str).unwrap_or(&name);
                old.find(src_name).map(|src_id| old.slice(src_id).to_vec())
            });
            match copied {
                Some(data) => {
                    let id = store.find(&name).unwrap();
                    store.slice_mut(id).copy_from_slice(&data);
                }
                None => {
                    let scale = match name.as_str() {
                        "emb" => 1.0,
                        n if n.ends_with(".msg_b") || n.ends_with(".upd_b") || n == "enc.b" => {
                            continue; // biases stay zero
                        }
                        _ => (1.0 / cols as f64).sqrt(),
                    };
                    let _ = rows;
                    fill_block(&mut store, &name, scale);
                }
            }
        }
        store
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn task_index(&self, name: &str) -> Result<usize, BranchError> {
        self.task_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| BranchError::UnknownTask(name.to_string()))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces parameters with a store of the exact same layout.
    pub fn set_store(&mut self, store: ParamStore) {
        assert_eq!(store.blocks(), self.store.blocks(), "store layout mismatch");
        self.store = store;
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.nodes.get(&id)
    }

    pub fn module_count(&self) -> usize {
        self.nodes.len()
    }

    /// Tree size relative to a single chain (1.0 = chain, n = per-task).
    pub fn memory_ratio(&self) -> f64 {
        self.module_count() as f64 / self.num_layers as f64
    }

    /// The node ids visited by `task`, one per layer, root first.
    pub fn routing(&self, task: usize) -> Vec<usize> {
        assert!(task < self.task_names.len(), "task index out of range");
        let mut path = Vec::with_capacity(self.num_layers);
        let mut cur = self.root;
        loop {
            let node = &self.nodes[&cur];
            debug_assert!(node.tasks.contains(&task));
            path.push(cur);
            match node.children.iter().copied().find(|c| self.nodes[c].tasks.contains(&task)) {
                Some(next) => cur = next,
                None => break,
            }
        }
        assert_eq!(path.len(), self.num_layers, "routing must reach layer L");
        path
    }

    /// The node holding task set `tasks` at `layer`, if any.
    pub fn node_at(&self, layer: usize, tasks: &[usize]) -> Option<usize> {
        self.nodes
            .values()
            .find(|n| n.layer == layer && n.tasks == tasks)
            .map(|n| n.id)
    }

    /// Number of layers (tree nodes) two tasks route through together.
    pub fn shared_layers(&self, a: usize, b: usize) -> usize {
        let (pa, pb) = (self.routing(a), self.routing(b));
        pa.iter().zip(&pb).take_while(|(x, y)| x == y).count()
    }

    /// Splits the descendant chain of `node_id` into one copy per group.
    /// Group `g`'s tasks are routed through a fresh chain at layers
    /// `l+1..=L` whose weights are copied from the old chain, so forward
    /// outputs are unchanged immediately after the split.
    pub fn split_node(
        &mut self,
        node_id: usize,
        partition: &[Vec<usize>],
    ) -> Result<(), BranchError> {
        let node = self
            .nodes
            .get(&node_id)
            .ok_or_else(|| BranchError::Tree(format!("no node {node_id}")))?
            .clone();
        if node.layer == self.num_layers {
            return Err(BranchError::LeafSplit { layer: node.layer });
        }

        let mut seen = vec![false; self.task_names.len()];
        for group in partition {
            if group.is_empty() {
                return Err(BranchError::BadPartition("empty group".into()));
            }
            for &t in group {
                if !node.tasks.contains(&t) {
                    return Err(BranchError::BadPartition(format!(
                        "task {t} is not routed through node {node_id}"
                    )));
                }
                if seen[t] {
                    return Err(BranchError::BadPartition(format!("task {t} in two groups")));
                }
                seen[t] = true;
            }
        }
        let covered = seen.iter().filter(|&&s| s).count();
        if covered != node.tasks.len() {
            return Err(BranchError::BadPartition(format!(
                "groups cover {covered} of {} tasks",
                node.tasks.len()
            )));
        }

        // The old descendants must form a chain: nodes are split once, when
        // their queue entry is dequeued, and copies are created as chains.
        let mut old_path = Vec::new();
        let mut cur = &node;
        while let Some(&child) = cur.children.first() {
            assert!(cur.children.len() == 1, "split target's descendants must form a chain");
            old_path.push(child);
            cur = &self.nodes[&child];
        }
        assert_eq!(old_path.len(), self.num_layers - node.layer, "chain reaches layer L");

        // Deterministic group order: by smallest task id.
        let mut groups: Vec<Vec<usize>> = partition.to_vec();
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort_by_key(|g| g[0]);

        let mut renames: BTreeMap<String, String> = BTreeMap::new();
        let mut new_children = Vec::with_capacity(groups.len());
        for group in &groups {
            let mut parent = node_id;
            for (depth, &old_id) in old_path.iter().enumerate() {
                let id = self.next_id;
                self.next_id += 1;
                let layer = node.layer + 1 + depth;
                self.nodes.insert(
                    id,
                    TreeNode { id, layer, parent: Some(parent), children: vec![], tasks: group.clone() },
                );
                if depth == 0 {
                    new_children.push(id);
                } else {
                    self.nodes.get_mut(&parent).unwrap().children.push(id);
                }
                let old_names = proc_block_names(old_id);
                for (new_name, old_name) in proc_block_names(id).into_iter().zip(old_names) {
                    renames.insert(new_name, old_name);
                }
                parent = id;
            }
        }
        for old_id in &old_path {
            self.nodes.remove(old_id);
        }
        self.nodes.get_mut(&node_id).unwrap().children = new_children;

        let old_store = std::mem::replace(&mut self.store, ParamStoreBuilder::new().build(0));
        self.store = self.build_store(old_store.seed, Some((&old_store, &renames)));
        self.check_tree();
        Ok(())
    }

    /// Structural invariants: per-layer task sets partition the full task
    /// set, children partition their parent's tasks, leaves sit at layer L.
    fn check_tree(&self) {
        let n = self.task_names.len();
        for layer in 1..=self.num_layers {
            let mut seen = vec![false; n];
            for node in self.nodes.values().filter(|m| m.layer == layer) {
                for &t in &node.tasks {
                    assert!(!seen[t], "task {t} on two layer-{layer} nodes");
                    seen[t] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "layer {layer} does not cover all tasks");
        }
        for node in self.nodes.values() {
            if node.layer == self.num_layers {
                assert!(node.children.is_empty(), "leaf with children");
            } else {
                let mut child_tasks: Vec<usize> =
                    node.children.iter().flat_map(|c| self.nodes[c].tasks.clone()).collect();
                child_tasks.sort_unstable();
                assert_eq!(child_tasks, node.tasks, "children must partition node {}", node.id);
            }
        }
    }

    // ---- serialization ----

    /// Writes the tree description and the parameter checkpoint.
    pub fn save(&self, tree_path: &Path, ckpt_path: &Path) -> Result<(), BranchError> {
        let mut out = String::new();
        out.push_str("branetree v1\n");
        let _ = writeln!(out, "tasks={}", self.task_names.join(","));
        let _ = writeln!(
            out,
            "hidden={} layers={} max_nodes={} next_id={}",
            self.hidden, self.num_layers, self.max_nodes, self.next_id
        );
        for node in self.nodes.values() {
            let parent = node.parent.map_or("-".to_string(), |p| p.to_string());
            let tasks: Vec<String> = node.tasks.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "node {} {} {} {}", node.id, node.layer, parent, tasks.join(","));
        }
        crate::fsio::atomic_write(tree_path, out.as_bytes()).map_err(DiffError::Io)?;
        self.store.save(ckpt_path)?;
        Ok(())
    }

    pub fn load(tree_path: &Path, ckpt_path: &Path) -> Result<BranchingModel, BranchError> {
        let text = std::fs::read_to_string(tree_path).map_err(DiffError::Io)?;
        let mut lines = text.lines();
        if lines.next() != Some("branetree v1") {
            return Err(BranchError::Tree("unrecognized magic line".into()));
        }
        let tasks_line = lines.next().ok_or_else(|| BranchError::Tree("missing tasks".into()))?;
        let task_names: Vec<String> = tasks_line
            .strip_prefix("tasks=")
            .ok_or_else(|| BranchError::Tree("bad tasks line".into()))?
            .split(',')
            .map(|s| s.to_string())
            .collect();
        let dims = lines.next().ok_or_else(|| BranchError::Tree("missing dims".into()))?;
        let mut hidden = 0;
        let mut num_layers = 0;
        let mut max_nodes = 0;
        let mut next_id = 0;
        for tok in dims.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| BranchError::Tree(format!("bad token {tok:?}")))?;
            let v: usize =
                v.parse().map_err(|_| BranchError::Tree(format!("bad value in {tok:?}")))?;
            match k {
                "hidden" => hidden = v,
                "layers" => num_layers = v,
                "max_nodes" => max_nodes = v,
                "next_id" => next_id = v,
                _ => return Err(BranchError::Tree(format!("unknown key {k:?}"))),
            }
        }
        if hidden == 0 || num_layers == 0 || max_nodes == 0 || next_id == 0 {
            return Err(BranchError::Tree("incomplete dims line".into()));
        }

        let mut nodes = BTreeMap::new();
        for line in lines {
            let mut it = line.split_whitespace();
            if it.next() != Some("node") {
                return Err(BranchError::Tree(format!("bad line {line:?}")));
            }
            let id: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| BranchError::Tree("bad node id".into()))?;
            let layer: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| BranchError::Tree("bad node layer".into()))?;
            let parent = match it.next() {
                Some("-") => None,
                Some(p) => Some(
                    p.parse::<usize>().map_err(|_| BranchError::Tree("bad parent".into()))?,
                ),
                None => return Err(BranchError::Tree("missing parent".into())),
            };
            let tasks: Vec<usize> = it
                .next()
                .ok_or_else(|| BranchError::Tree("missing tasks".into()))?
                .split(',')
                .map(|s| s.parse().map_err(|_| BranchError::Tree("bad task index".into())))
                .collect::<Result<_, _>>()?;
            if it.next().is_some() {
                return Err(BranchError::Tree(format!("trailing tokens on {line:?}")));
            }
            if nodes.insert(id, TreeNode { id, layer, parent, children: vec![], tasks }).is_some() {
                return Err(BranchError::Tree(format!("duplicate node {id}")));
            }
        }

        let child_links: Vec<(usize, usize)> = nodes
            .values()
            .filter_map(|n| n.parent.map(|p| (p, n.id)))
            .collect();
        for (p, c) in child_links {
            nodes
                .get_mut(&p)
                .ok_or_else(|| BranchError::Tree(format!("node {c} has unknown parent {p}")))?
                .children
                .push(c);
        }
        let root = nodes
            .values()
            .find(|n| n.parent.is_none())
            .ok_or_else(|| BranchError::Tree("no root".into()))?
            .id;

        let store = ParamStore::load(ckpt_path)?;
        let model = BranchingModel {
            hidden,
            num_layers,
            max_nodes,
            task_names,
            nodes,
            root,
            next_id,
            store,
        };
        let expected = model.build_store(model.store.seed, None);
        if expected.blocks() != model.store.blocks() {
            return Err(BranchError::Tree("checkpoint layout does not match tree".into()));
        }
        model.check_tree();
        Ok(model)
    }

    /// Dot-format rendering of the module tree for figures.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph tree {\n  rankdir=TB;\n  node [shape=box];\n");
        for node in self.nodes.values() {
            let names: Vec<&str> =
                node.tasks.iter().map(|&t| self.task_names[t].as_str()).collect();
            let _ = writeln!(
                out,
                "  n{} [label=\"layer {}\\n{}\"];",
                node.id,
                node.layer,
                names.join(", ")
            );
        }
        for node in self.nodes.values() {
            for c in &node.children {
                let _ = writeln!(out, "  n{} -> n{c};", node.id);
            }
        }
        out.push_str("}\n");
        out
    }
}
