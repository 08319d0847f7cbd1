//! Top-down construction of the branching network.
//!
//! A work queue starts with all tasks at layer 1. Each dequeued (task set,
//! layer) entry is partitioned by the affinity pipeline: train a
//! meta-initialization for the set with the preceding layers frozen, extract
//! sketched gradient features around it, estimate subset losses through the
//! linear surrogate, average them into an affinity matrix, and hand the
//! symmetrized scores to the partition solver. Groups that split get their
//! own module chains (seeded with the meta-initialization weights) and are
//! re-enqueued one layer deeper; single-group results keep the existing
//! chain untouched. When the queue drains, the assembled tree is fine-tuned
//! end to end, every task routed along its path and shared modules receiving
//! gradient contributions from all of their tasks.
//!
//! Every run keeps an append-only audit log (keyed by layer and smallest
//! task id, so concurrent replays order identically) and a training-call
//! counter that is asserted against the tree-size budget before returning.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::branchnet::{BranchError, BranchingModel};
use crate::clusterer::{self, Candidate, ClusterError, DEFAULT_LAMBDA_GRID};
use crate::diffcore::ParamStore;
use crate::linearizer::{
    affinity_matrix, estimate_subset_losses, extract_features, make_plan, AffinityMatrix,
    InstanceSet, LinError, Projection,
};
use crate::rng;
use crate::tracegen::{Split, TaskDataset};
use crate::trainer::{self, TrainConfig, TrainError};

const TAG_META: u64 = 0x5ea2_0001;
const TAG_PROJ: u64 = 0x5ea2_0002;
const TAG_SUBSETS: u64 = 0x5ea2_0003;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Lin(#[from] LinError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the tree search needs beyond the datasets themselves.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Depth of the module tree.
    pub num_layers: usize,
    /// Hidden width of every module.
    pub hidden: usize,
    /// Model initialization seed; per-node training, projection, and subset
    /// seeds are derived from the training seed instead.
    pub seed: u64,
    /// Subsets sampled per partitioning call.
    pub m: usize,
    /// Tasks per subset (clamped to the set size).
    pub alpha: usize,
    /// Sketch dimension; suffixes at or below this size use the exact
    /// identity projection instead.
    pub d: usize,
    /// Ridge strength for the surrogate fits.
    pub lambda2: f64,
    /// Cluster-count penalty grid for the partition solver.
    pub lambda_grid: Vec<f64>,
    /// Cap on groups per split; 1 forces a pure chain.
    pub max_growth: usize,
    /// Graphs per task fed to feature extraction (train and val each).
    pub feature_graphs: usize,
    /// Budget of the final end-to-end fine-tune; meta-initializations run
    /// half its epochs.
    pub train: TrainConfig,
    /// Where affinity CSVs land; skipped when unset.
    pub audit_dir: Option<PathBuf>,
}

impl Default for SearchConfig {
    fn default() -> SearchConfig {
        SearchConfig {
            num_layers: 3,
            hidden: 32,
            seed: 0,
            m: 40,
            alpha: 2,
            d: 400,
            lambda2: 1e-4,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            max_growth: 5,
            feature_graphs: 48,
            train: TrainConfig::default(),
            audit_dir: None,
        }
    }
}

impl SearchConfig {
    /// Meta-initialization epochs: half the fine-tune budget, at least one.
    pub fn meta_epochs(&self) -> usize {
        (self.train.epochs / 2).max(1)
    }

    /// Training config for the meta-initialization of one (set, layer)
    /// node. The seed mixes in the layer and the smallest task id so every
    /// node trains a distinct but reproducible stream.
    fn meta_cfg(&self, l: usize, smallest: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.epochs = self.meta_epochs();
        cfg.seed = rng::mix(
            self.train.seed,
            rng::mix(TAG_META, ((l as u64) << 32) | smallest as u64),
        );
        cfg
    }
}

/// Result of one partitioning call.
#[derive(Debug)]
pub struct PartitionOutcome {
    /// Groups of global task indices, each sorted, ordered by smallest
    /// member. A single group means "do not split".
    pub groups: Vec<Vec<usize>>,
    /// Parameters after the meta-initialization training run, i.e. the
    /// checkpoint the affinities were measured around; an untouched copy of
    /// the input model's store for singleton sets.
    pub checkpoint: ParamStore,
    /// Every candidate the partition solver scored; empty for singletons.
    pub candidates: Vec<Candidate>,
    /// Density of the chosen grouping under the solver's affinity input;
    /// NaN for singletons (no affinity was estimated).
    pub density: f64,
    /// Whether a training run happened.
    pub trained: bool,
    /// The estimated affinity matrix; None for singletons.
    pub affinity: Option<AffinityMatrix>,
}

/// Append-only record of one tree search: the work queue, per-node
/// checkpoints, chosen partitions, and the audit log with its training-call
/// counter.
#[derive(Debug, Default)]
pub struct SearchState {
    /// Pending (task set, layer) entries.
    pub queue: VecDeque<(Vec<usize>, usize)>,
    /// Meta-initialization checkpoints keyed by (layer, smallest task id).
    pub checkpoints: BTreeMap<(usize, usize), ParamStore>,
    /// Chosen groups per processed entry, in processing order.
    pub partitions: Vec<(usize, Vec<Vec<usize>>)>,
    /// Number of meta-initialization training runs.
    pub training_calls: usize,
    events: Vec<String>,
}

impl SearchState {
    pub fn new() -> SearchState {
        SearchState::default()
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    /// The audit log as one newline-terminated block.
    pub fn audit_text(&self) -> String {
        let mut out = String::new();
        for line in &self.events {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    fn log(&mut self, line: String) {
        self.events.push(line);
    }

    /// Same-layer queue entries must never overlap.
    fn assert_queue_disjoint(&self) {
        let entries: Vec<_> = self.queue.iter().collect();
        for (i, (a, la)) in entries.iter().enumerate() {
            for (b, lb) in entries.iter().skip(i + 1) {
                if la == lb {
                    assert!(
                        a.iter().all(|t| !b.contains(t)),
                        "queued sets {a:?} and {b:?} overlap at layer {la}"
                    );
                }
            }
        }
    }
}

/// "{0,2,5}"
fn fmt_tasks(s: &[usize]) -> String {
    let inner: Vec<String> = s.iter().map(|t| t.to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

/// "{0,1}|{2}"
fn fmt_groups(groups: &[Vec<usize>]) -> String {
    let parts: Vec<String> = groups.iter().map(|g| fmt_tasks(g)).collect();
    parts.join("|")
}

/// First eight hex digits of the store's SHA-256, for audit lines.
fn store_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for v in store.data() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Distinct module ids above the leaf layer.
fn internal_nodes(model: &BranchingModel) -> usize {
    let mut ids = BTreeSet::new();
    for t in 0..model.task_names().len() {
        let path = model.routing(t);
        for &id in &path[..path.len() - 1] {
            ids.insert(id);
        }
    }
    ids.len()
}

/// Proposes how the task set `s` should branch below layer `l`.
///
/// Trains a meta-initialization for `s` on a scratch copy of the model (the
/// prefix up to `l` stays frozen), extracts sketched gradient features at
/// the trained checkpoint, estimates every planned subset's validation loss
/// through the linear surrogate, averages the estimates into the affinity
/// matrix, and runs the partition solver on its symmetrized scores. The
/// input model is never mutated; installing the returned checkpoint is the
/// caller's decision.
///
/// A singleton set short-circuits to the one-group partition with an
/// untouched checkpoint and no training.
pub fn fast_approx_partition(
    model: &BranchingModel,
    data: &BTreeMap<String, TaskDataset>,
    s: &[usize],
    l: usize,
    cfg: &SearchConfig,
) -> Result<PartitionOutcome, SearchError> {
    assert!(!s.is_empty(), "cannot partition an empty task set");
    assert!(
        s.windows(2).all(|w| w[0] < w[1]),
        "task set must be sorted and duplicate-free"
    );
    assert!(
        *s.last().unwrap() < model.task_names().len(),
        "task index out of range"
    );
    assert!(
        l >= 1 && l < model.num_layers,
        "partitioning happens strictly above the leaf layer"
    );
    assert!(cfg.d >= 1, "sketch dimension must be positive");

    if s.len() == 1 {
        return Ok(PartitionOutcome {
            groups: vec![vec![s[0]]],
            checkpoint: model.store().clone(),
            candidates: Vec::new(),
            density: f64::NAN,
            trained: false,
            affinity: None,
        });
    }

    let names: Vec<&str> = s.iter().map(|&t| model.task_names()[t].as_str()).collect();
    let meta_cfg = cfg.meta_cfg(l, s[0]);

    let mut work = model.clone();
    trainer::train_meta_init(&mut work, data, &names, l, &meta_cfg)?;
    let w0 = work.store().clone();

    let train_set = InstanceSet::collect(data, &names, Split::Train, cfg.feature_graphs)?;
    let val_set = InstanceSet::collect(data, &names, Split::Val, cfg.feature_graphs)?;

    let suffix = w0.len() - w0.suffix_offset(l)?;
    let proj = if cfg.d >= suffix {
        Projection::identity(suffix)
    } else {
        Projection::gaussian(suffix, cfg.d, rng::mix(meta_cfg.seed, TAG_PROJ))?
    };
    let train_feats = extract_features(&work, &w0, &train_set, l, &proj)?;
    let val_feats = extract_features(&work, &w0, &val_set, l, &proj)?;

    let plan = make_plan(s.len(), cfg.m, cfg.alpha, rng::mix(meta_cfg.seed, TAG_SUBSETS))?;
    let table = estimate_subset_losses(&train_feats, &val_feats, &plan, cfg.lambda2)?;
    let owned: Vec<String> = names.iter().map(|n| n.to_string()).collect();
    let aff = affinity_matrix(&table, &plan, &owned, l)?;

    let a = aff.to_clusterer_input();
    let (part, candidates) = clusterer::select_partition_audited(
        &a,
        s.len(),
        &cfg.lambda_grid,
        model.num_layers,
        l,
        cfg.max_growth,
    )?;
    let density = clusterer::density(&a, s.len(), &part);
    let groups: Vec<Vec<usize>> = part
        .groups()
        .iter()
        .map(|g| g.iter().map(|&i| s[i]).collect())
        .collect();

    Ok(PartitionOutcome {
        groups,
        checkpoint: w0,
        candidates,
        density,
        trained: true,
        affinity: Some(aff),
    })
}

/// Builds a branching model for every task in `data` by layer-wise
/// partitioning, then fine-tunes the assembled tree end to end.
///
/// The queue starts with all tasks at layer 1 and processes entries first
/// in, first out, so a whole layer settles before the next one starts. Each
/// entry strictly above the leaf layer is partitioned; splits install the
/// meta-initialization checkpoint (the new child chains copy its weights)
/// and every group re-enqueues one layer deeper. Single-group outcomes leave
/// both the structure and the weights untouched, so a run in which nothing
/// ever splits fine-tunes exactly the chain model it started from.
pub fn autobrane(
    data: &BTreeMap<String, TaskDataset>,
    cfg: &SearchConfig,
) -> Result<(BranchingModel, SearchState), SearchError> {
    assert!(!data.is_empty(), "need at least one task dataset");
    assert!(cfg.num_layers >= 1, "need at least one layer");

    let names: Vec<&str> = data.keys().map(|n| n.as_str()).collect();
    let n = names.len();
    let max_nodes = data.values().map(|d| d.max_nodes()).max().unwrap();
    let mut model =
        BranchingModel::new_chain(&names, cfg.num_layers, cfg.hidden, max_nodes, cfg.seed);

    let mut state = SearchState::new();
    state.queue.push_back(((0..n).collect(), 1));

    while let Some((s, l)) = state.queue.pop_front() {
        assert!(l >= 1 && l <= cfg.num_layers, "queued layer out of range");
        state.assert_queue_disjoint();
        let node = model
            .node_at(l, &s)
            .expect("every queued task set is a placed module");
        state.log(format!("dequeue layer={l} tasks={}", fmt_tasks(&s)));

        if l == cfg.num_layers {
            continue;
        }

        let key = fmt_tasks(&s);
        let outcome = fast_approx_partition(&model, data, &s, l, cfg)?;
        if outcome.trained {
            state.training_calls += 1;
            state.log(format!(
                "meta_init layer={l} tasks={key} epochs={} hash={}",
                cfg.meta_epochs(),
                store_hash(&outcome.checkpoint)
            ));
            if let (Some(dir), Some(aff)) = (&cfg.audit_dir, &outcome.affinity) {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("affinity_l{l}_t{}.csv", s[0]));
                aff.write_csv(&path)?;
                state.log(format!(
                    "affinity layer={l} tasks={key} csv={}",
                    path.display()
                ));
            }
            for c in &outcome.candidates {
                let lambda = match c.lambda {
                    Some(v) => format!("{v}"),
                    None => "none".to_string(),
                };
                state.log(format!(
                    "candidate layer={l} tasks={key} lambda={lambda} partition={} density={:.6} kept={}",
                    c.partition, c.density, c.kept
                ));
            }
            state.log(format!(
                "partition layer={l} tasks={key} chosen={} density={:.6}",
                fmt_groups(&outcome.groups),
                outcome.density
            ));
        }

        state.checkpoints.insert((l, s[0]), outcome.checkpoint.clone());
        state.partitions.push((l, outcome.groups.clone()));

        if outcome.groups.len() > 1 {
            model.set_store(outcome.checkpoint);
            model.split_node(node, &outcome.groups)?;
            state.log(format!(
                "split layer={l} tasks={key} node={node} groups={}",
                fmt_groups(&outcome.groups)
            ));
        } else {
            state.log(format!("split layer={l} tasks={key} elided"));
        }

        for g in &outcome.groups {
            state.queue.push_back((g.clone(), l + 1));
        }
    }

    state.log(format!(
        "final_tune tasks={} epochs={}",
        fmt_tasks(&(0..n).collect::<Vec<_>>()),
        cfg.train.epochs
    ));
    trainer::train(&mut model, data, &names, &cfg.train)?;

    let internal = internal_nodes(&model);
    let bound = n * cfg.num_layers;
    assert!(
        state.training_calls <= internal.max(1) && model.module_count() <= bound,
        "budget violated: {} calls, {internal} internal nodes, {} modules, bound {bound}",
        state.training_calls,
        model.module_count()
    );
    state.log(format!(
        "budget training_calls={} internal_nodes={internal} modules={} bound={bound}",
        state.training_calls,
        model.module_count()
    ));

    Ok((model, state))
}
