//! Layer-conditioned task-affinity estimation without retraining. Every
//! prediction row is scalarized to its true-class margin; the margin's
//! gradient at a shared checkpoint becomes the row's feature vector after a
//! seeded Gaussian sketch; logistic-regression surrogates fitted on sampled
//! task subsets then stand in for actual co-training runs. The submodules
//! add the fidelity diagnostics (residual ratios, a real retraining oracle,
//! and an optimality-gap certificate) that measure how far the surrogate is
//! allowed to drift.
//!
//! The margin scalarization is chosen so that the binary logistic loss of a
//! row, log(1 + exp(-margin)), equals the row's softmax cross-entropy
//! exactly; surrogate losses and trainer losses are therefore directly
//! comparable numbers.

mod fidelity;
mod lbfgs;
pub mod probe;
mod surrogate;

pub use fidelity::{
    bucket_rss, flat_loss, instances_loss, measure_rss, retrain_suffix, retrain_suffix_exact,
    scale_displacement, spearman, verify_prop1, OracleMode, OracleOpt, Prop1Report, RssBucket,
    RssSample, TaskLoss, PROP1_SLACK,
};
pub use surrogate::{
    affinity_matrix, affinity_to_clusterer_input, estimate_subset_losses, fit_surrogate,
    fit_surrogate_opt, make_plan, read_affinity_csv, surrogate_loss, write_affinity_csv,
    AffinityMatrix, LossTable, SubsetPlan, Surrogate, FIT_MAX_ITER, FIT_TOL, PLAN_ATTEMPTS,
    SUBSET_FIT_MAX_ITER, SUBSET_FIT_TOL,
};
#[cfg(test)]
pub(crate) use surrogate::zscore;

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::branchnet::{BranchError, BranchingModel, GraphCache};
use crate::diffcore::{DiffError, NodeId, ParamStore, Tape};
use crate::rng;
use crate::tracegen::{Graph, Split, TaskDataset, Trace};

const TAG_PROJ: u64 = 0x6c69_0001;
pub(crate) const TAG_PLAN: u64 = 0x6c69_0002;
pub(crate) const TAG_ORACLE: u64 = 0x6c69_0003;
pub(crate) const TAG_SAMPLE: u64 = 0x6c69_0004;

#[derive(Debug, Error)]
pub enum LinError {
    #[error("sketch dimension {d} exceeds parameter count {p}")]
    Dimension { d: usize, p: usize },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("empty instance set: {0}")]
    EmptyInstances(String),
    #[error("empty row restriction")]
    EmptyRestriction,
    #[error("fit stopped at gradient norm {grad_norm:.3e} after {iterations} iterations")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("subset plan failed pair coverage after {attempts} attempts")]
    Coverage { attempts: usize },
    #[error("bad subset plan: {0}")]
    BadPlan(String),
    #[error("pair ({i}, {j}) shares no subset")]
    UncoveredPair { i: usize, j: usize },
    #[error("feature sets disagree: {0}")]
    MismatchedFeatures(String),
    #[error("feature cache corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A scorer the linearization machinery can probe. Parameters live in a
/// flat layer-ordered store passed explicitly, so diagnostics can score
/// displaced parameter vectors without mutating the model.
pub trait ScoreModel {
    /// The checkpoint the model currently holds.
    fn base_store(&self) -> &ParamStore;

    /// Maps a task name to the index `logits_on_tape` expects.
    fn resolve_task(&self, name: &str) -> Result<usize, LinError>;

    /// Records one prediction step at `store` and returns the n x n logit
    /// node: row u scores every candidate v.
    fn logits_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        cache: &GraphCache,
        task: usize,
        labels: &[u32],
        source: Option<usize>,
    ) -> Result<NodeId, LinError>;
}

impl ScoreModel for BranchingModel {
    fn base_store(&self) -> &ParamStore {
        self.store()
    }

    fn resolve_task(&self, name: &str) -> Result<usize, LinError> {
        Ok(self.task_index(name)?)
    }

    fn logits_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        cache: &GraphCache,
        task: usize,
        labels: &[u32],
        source: Option<usize>,
    ) -> Result<NodeId, LinError> {
        Ok(self.forward_with_store(store, tape, cache, task, labels, source, None)?)
    }
}

struct TaskInstances {
    name: String,
    graphs: Vec<(GraphCache, Trace)>,
}

/// A materialized view of (graph, step) prediction instances per task: the
/// unit the feature extractor, the residual diagnostics, and the retraining
/// oracle all walk. Graphs with no transitions are dropped at collection.
pub struct InstanceSet {
    tasks: Vec<TaskInstances>,
}

impl InstanceSet {
    /// Takes up to `max_graphs` usable graphs per task from `split`, in
    /// dataset order (the datasets are already seeded, so a prefix is an
    /// unbiased, reproducible cap).
    pub fn collect(
        data: &BTreeMap<String, TaskDataset>,
        tasks: &[&str],
        split: Split,
        max_graphs: usize,
    ) -> Result<InstanceSet, LinError> {
        if tasks.is_empty() {
            return Err(LinError::EmptyInstances("no tasks requested".into()));
        }
        let mut out = Vec::with_capacity(tasks.len());
        for name in tasks {
            let ds = data
                .get(*name)
                .ok_or_else(|| LinError::UnknownTask(name.to_string()))?;
            let items: Vec<(Graph, Trace)> = ds.split(split).to_vec();
            out.push(task_instances(name, items, max_graphs)?);
        }
        Ok(InstanceSet { tasks: out })
    }

    /// Builds a single-task set from explicit (graph, trace) pairs; used by
    /// the probe scorer and by callers with hand-made instances.
    pub fn from_single_task(
        name: &str,
        items: Vec<(Graph, Trace)>,
    ) -> Result<InstanceSet, LinError> {
        Ok(InstanceSet { tasks: vec![task_instances(name, items, usize::MAX)?] })
    }

    /// A deep copy holding only the tasks at the given local indices, in the
    /// given order.
    pub fn restrict(&self, keep: &[usize]) -> InstanceSet {
        InstanceSet {
            tasks: keep
                .iter()
                .map(|&i| TaskInstances {
                    name: self.tasks[i].name.clone(),
                    graphs: self.tasks[i].graphs.clone(),
                })
                .collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.name.clone()).collect()
    }

    pub fn num_graphs(&self, task: usize) -> usize {
        self.tasks[task].graphs.len()
    }

    /// Total number of (graph, step, node) prediction rows across tasks.
    pub fn num_rows(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.graphs.iter())
            .map(|(c, tr)| c.num_nodes * (tr.steps.len() - 1))
            .sum()
    }

    pub(crate) fn task(&self, i: usize) -> (&str, &[(GraphCache, Trace)]) {
        (&self.tasks[i].name, &self.tasks[i].graphs)
    }
}

fn task_instances(
    name: &str,
    items: Vec<(Graph, Trace)>,
    max_graphs: usize,
) -> Result<TaskInstances, LinError> {
    let mut graphs = Vec::new();
    for (g, tr) in items {
        if tr.steps.len() < 2 {
            continue;
        }
        graphs.push((GraphCache::new(&g), tr));
        if graphs.len() == max_graphs {
            break;
        }
    }
    if graphs.is_empty() {
        return Err(LinError::EmptyInstances(format!("task {name} has no usable graphs")));
    }
    Ok(TaskInstances { name: name.to_string(), graphs })
}

/// log(1 + exp(-z)) without overflow; equals the softmax cross-entropy of a
/// row whose true-class margin is z.
pub(crate) fn log1p_exp_neg(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Per-node margins of an n x n logit matrix: out[u] = s_true minus the
/// log-sum-exp over the other candidates in row u.
pub(crate) fn node_margins(logits: &[f64], targets: &[u32], n: usize, out: &mut Vec<f64>) {
    debug_assert!(n >= 2, "margins need at least two candidates");
    debug_assert_eq!(logits.len(), n * n);
    out.clear();
    for u in 0..n {
        let row = &logits[u * n..(u + 1) * n];
        let t = targets[u] as usize;
        out.push(row[t] - lse_others(row, t));
    }
}

fn lse_others(row: &[f64], t: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (v, &s) in row.iter().enumerate() {
        if v != t && s > m {
            m = s;
        }
    }
    let mut z = 0.0;
    for (v, &s) in row.iter().enumerate() {
        if v != t {
            z += (s - m).exp();
        }
    }
    m + z.ln()
}

/// Adjoint of margin_u with respect to the whole logit matrix: +1 at the
/// true class, minus the competitor softmax elsewhere in row u, zero in all
/// other rows. `seed` is resized to n*n.
pub(crate) fn margin_seed(
    logits: &[f64],
    u: usize,
    target: usize,
    n: usize,
    seed: &mut Vec<f64>,
) {
    seed.clear();
    seed.resize(n * n, 0.0);
    let row = &logits[u * n..(u + 1) * n];
    let mut m = f64::NEG_INFINITY;
    for (v, &s) in row.iter().enumerate() {
        if v != target && s > m {
            m = s;
        }
    }
    let mut z = 0.0;
    for (v, &s) in row.iter().enumerate() {
        if v != target {
            z += (s - m).exp();
        }
    }
    for v in 0..n {
        seed[u * n + v] =
            if v == target { 1.0 } else { -((row[v] - m).exp() / z) };
    }
}

/// A seeded sketching matrix P (p x d, entries i.i.d. Normal(0, 1/d)), or
/// the identity test hook at d = p. Sketched features are P-transpose times
/// the gradient, so inner products concentrate around their unsketched
/// values.
pub struct Projection {
    p: usize,
    d: usize,
    seed: u64,
    /// Row-major p x d; empty for the identity hook.
    data: Vec<f64>,
}

impl Projection {
    pub fn gaussian(p: usize, d: usize, seed: u64) -> Result<Projection, LinError> {
        assert!(d >= 1, "sketch dimension must be positive");
        if d > p {
            return Err(LinError::Dimension { d, p });
        }
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut r = rng::stream(seed, TAG_PROJ);
        let data = (0..p * d).map(|_| normal.sample(&mut r)).collect();
        Ok(Projection { p, d, seed, data })
    }

    /// The d = p identity hook: sketched features equal raw gradients.
    pub fn identity(p: usize) -> Projection {
        assert!(p >= 1);
        Projection { p, d: p, seed: 0, data: Vec::new() }
    }

    pub fn is_identity(&self) -> bool {
        self.data.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// out = P-transpose g. Skips exact-zero gradient entries; the result is
    /// bit-identical either way and gradient rows are often block-sparse.
    pub fn project(&self, g: &[f64], out: &mut [f64]) {
        assert_eq!(g.len(), self.p);
        assert_eq!(out.len(), self.d);
        if self.is_identity() {
            out.copy_from_slice(g);
            return;
        }
        for o in out.iter_mut() {
            *o = 0.0;
        }
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.d..(i + 1) * self.d];
            for (o, &pk) in out.iter_mut().zip(row) {
                *o = gi.mul_add(pk, *o);
            }
        }
    }

    /// Materializes P w, the full-space displacement a sketched coordinate
    /// vector encodes.
    pub fn expand(&self, w: &[f64]) -> Vec<f64> {
        assert_eq!(w.len(), self.d);
        if self.is_identity() {
            return w.to_vec();
        }
        (0..self.p)
            .map(|i| {
                let row = &self.data[i * self.d..(i + 1) * self.d];
                row.iter().zip(w).fold(0.0, |acc, (&pk, &wk)| pk.mul_add(wk, acc))
            })
            .collect()
    }
}

/// Identifies one prediction row: local task index within the feature set,
/// graph index within the task, step index, and node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    pub task: u32,
    pub graph: u32,
    pub step: u32,
    pub node: u32,
}

/// Sketched margin-gradient features plus each row's base margin at the
/// extraction checkpoint. The margin scalarization folds the label into the
/// row, so every row's binary target is +1 and no target column is stored.
pub struct ProjectedFeatureSet {
    pub tasks: Vec<String>,
    /// Gradients cover the layer-l..L parameter suffix.
    pub l: usize,
    pub d: usize,
    /// The projection seed (0 for the identity hook).
    pub seed: u64,
    /// Largest unsketched suffix-gradient norm seen during extraction.
    pub max_grad_norm: f64,
    pub meta: Vec<RowMeta>,
    feats: Vec<f64>,
    base: Vec<f64>,
}

impl ProjectedFeatureSet {
    pub fn num_rows(&self) -> usize {
        self.meta.len()
    }

    pub fn feat(&self, row: usize) -> &[f64] {
        &self.feats[row * self.d..(row + 1) * self.d]
    }

    pub fn base(&self, row: usize) -> f64 {
        self.base[row]
    }

    pub fn bases(&self) -> &[f64] {
        &self.base
    }

    /// Row indices belonging to any of the given local task indices, in row
    /// order.
    pub fn rows_of_tasks(&self, tasks: &[usize]) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| tasks.contains(&(m.task as usize)))
            .map(|(r, _)| r)
            .collect()
    }

    pub fn rows_of_task(&self, task: usize) -> Vec<usize> {
        self.rows_of_tasks(&[task])
    }

    /// Writes the cache file: a text header (seed, d, l, max gradient norm,
    /// tasks, row count, payload checksum) followed by binary rows of four
    /// 32-bit ids, d feature doubles, and the base margin, all little-endian.
    pub fn save(&self, path: &Path) -> Result<(), LinError> {
        let mut payload =
            Vec::with_capacity(self.meta.len() * (16 + 8 * (self.d + 1)));
        for (r, m) in self.meta.iter().enumerate() {
            for id in [m.task, m.graph, m.step, m.node] {
                payload.extend_from_slice(&id.to_le_bytes());
            }
            for &x in self.feat(r) {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            payload.extend_from_slice(&self.base[r].to_le_bytes());
        }
        for name in &self.tasks {
            assert!(
                !name.contains(',') && !name.contains('\n'),
                "task names must be comma- and newline-free"
            );
        }
        let mut out = String::new();
        out.push_str("branefeat v1\n");
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("d {}\n", self.d));
        out.push_str(&format!("l {}\n", self.l));
        out.push_str(&format!("gmax {}\n", self.max_grad_norm));
        out.push_str(&format!("tasks {}\n", self.tasks.join(",")));
        out.push_str(&format!("rows {}\n", self.meta.len()));
        out.push_str(&format!("sha256 {}\n", crate::fsio::sha256_hex(&payload)));
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&payload);
        crate::fsio::atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ProjectedFeatureSet, LinError> {
        let bytes = std::fs::read(path)?;
        let mut offset = 0;
        let mut line = |want: &str| -> Result<String, LinError> {
            let end = bytes[offset..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| LinError::Corrupt(format!("missing {want} line")))?;
            let text = std::str::from_utf8(&bytes[offset..offset + end])
                .map_err(|_| LinError::Corrupt(format!("{want} line is not utf-8")))?
                .to_string();
            offset += end + 1;
            Ok(text)
        };
        if line("magic")? != "branefeat v1" {
            return Err(LinError::Corrupt("bad magic".into()));
        }
        let mut field = |key: &str| -> Result<String, LinError> {
            let text = line(key)?;
            text.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| LinError::Corrupt(format!("expected {key} line, got {text:?}")))
        };
        let parse = |what: &str, s: &str| -> Result<u64, LinError> {
            s.parse::<u64>().map_err(|_| LinError::Corrupt(format!("bad {what} {s:?}")))
        };
        let seed = parse("seed", &field("seed")?)?;
        let d = parse("d", &field("d")?)? as usize;
        let l = parse("l", &field("l")?)? as usize;
        let gmax_text = field("gmax")?;
        let max_grad_norm = gmax_text
            .parse::<f64>()
            .map_err(|_| LinError::Corrupt(format!("bad gmax {gmax_text:?}")))?;
        let tasks: Vec<String> =
            field("tasks")?.split(',').map(str::to_string).collect();
        let rows = parse("rows", &field("rows")?)? as usize;
        let sum = field("sha256")?;
        let payload = &bytes[offset..];
        if crate::fsio::sha256_hex(payload) != sum {
            return Err(LinError::Corrupt("payload checksum mismatch".into()));
        }
        let row_bytes = 16 + 8 * (d + 1);
        if payload.len() != rows * row_bytes {
            return Err(LinError::Corrupt(format!(
                "payload length {} does not match {rows} rows of {row_bytes} bytes",
                payload.len()
            )));
        }
        let mut meta = Vec::with_capacity(rows);
        let mut feats = Vec::with_capacity(rows * d);
        let mut base = Vec::with_capacity(rows);
        let mut at = 0;
        let take_u32 = |at: &mut usize| {
            let v = u32::from_le_bytes(payload[*at..*at + 4].try_into().unwrap());
            *at += 4;
            v
        };
        let take_f64 = |at: &mut usize| {
            let v = f64::from_le_bytes(payload[*at..*at + 8].try_into().unwrap());
            *at += 8;
            v
        };
        for _ in 0..rows {
            let task = take_u32(&mut at);
            let graph = take_u32(&mut at);
            let step = take_u32(&mut at);
            let node = take_u32(&mut at);
            meta.push(RowMeta { task, graph, step, node });
            for _ in 0..d {
                feats.push(take_f64(&mut at));
            }
            base.push(take_f64(&mut at));
        }
        Ok(ProjectedFeatureSet { tasks, l, d, seed, max_grad_norm, meta, feats, base })
    }
}

/// Extracts one sketched feature row per (graph, step, node) at checkpoint
/// `w0`: the row's base value is its true-class margin, the features are the
/// sketch of the margin's gradient over the layer-l..L parameter suffix.
pub fn extract_features<M: ScoreModel>(
    model: &M,
    w0: &ParamStore,
    set: &InstanceSet,
    l: usize,
    proj: &Projection,
) -> Result<ProjectedFeatureSet, LinError> {
    let off = w0.suffix_offset(l)?;
    let p = w0.len() - off;
    if proj.p() != p {
        return Err(LinError::MismatchedFeatures(format!(
            "projection expects {} parameters, layer-{l} suffix has {p}",
            proj.p()
        )));
    }
    let mut meta = Vec::new();
    let mut feats = Vec::new();
    let mut base = Vec::new();
    let mut tape = Tape::new();
    let mut grad = vec![0.0; w0.len()];
    let mut seed = Vec::new();
    let mut margins = Vec::new();
    let mut gmax = 0.0f64;

    for ti in 0..set.num_tasks() {
        let (name, graphs) = set.task(ti);
        let task = model.resolve_task(name)?;
        for (gi, (cache, trace)) in graphs.iter().enumerate() {
            let n = cache.num_nodes;
            for j in 0..trace.steps.len() - 1 {
                tape.reset();
                let out =
                    model.logits_on_tape(w0, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                debug_assert_eq!(tape.shape(out), (n, n), "logit shape");
                let logits = tape.value(out).to_vec();
                let targets = &trace.steps[j + 1];
                node_margins(&logits, targets, n, &mut margins);
                for u in 0..n {
                    margin_seed(&logits, u, targets[u] as usize, n, &mut seed);
                    for g in &mut grad {
                        *g = 0.0;
                    }
                    tape.backward_seeded(out, &seed, &mut grad)?;
                    let gsuf = &grad[off..];
                    let norm =
                        gsuf.iter().fold(0.0, |acc, &g| g.mul_add(g, acc)).sqrt();
                    gmax = gmax.max(norm);
                    let start = feats.len();
                    feats.resize(start + proj.d(), 0.0);
                    proj.project(gsuf, &mut feats[start..]);
                    assert!(
                        feats[start..].iter().all(|x| x.is_finite()),
                        "non-finite sketched feature"
                    );
                    base.push(margins[u]);
                    meta.push(RowMeta {
                        task: ti as u32,
                        graph: gi as u32,
                        step: j as u32,
                        node: u as u32,
                    });
                }
            }
        }
    }
    if meta.is_empty() {
        return Err(LinError::EmptyInstances("no feature rows".into()));
    }
    Ok(ProjectedFeatureSet {
        tasks: set.task_names(),
        l,
        d: proj.d(),
        seed: proj.seed(),
        max_grad_norm: gmax,
        meta,
        feats,
        base,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (&x, &y)| x.mul_add(y, acc))
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, &x| x.mul_add(x, acc)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchnet::BranchingModel;
    use crate::tracegen::{make_dataset, Algo, DatasetConfig};

    fn tiny_config(task: Algo) -> DatasetConfig {
        DatasetConfig {
            task,
            seed: 11,
            num_train: 6,
            num_val: 3,
            num_test: 3,
            nodes_train: 6,
            nodes_test: 8,
            edge_prob: 0.5,
        }
    }

    fn tiny_world() -> (BranchingModel, BTreeMap<String, TaskDataset>) {
        let mut data = BTreeMap::new();
        for algo in [Algo::Bfs, Algo::Dfs] {
            data.insert(algo.name().to_string(), make_dataset(&tiny_config(algo)));
        }
        let model = BranchingModel::new_chain(&["bfs", "dfs"], 2, 8, 8, 3);
        (model, data)
    }

    #[test]
    fn margins_match_cross_entropy_identity() {
        // log(1 + exp(-margin)) must equal the row's softmax cross-entropy.
        let logits = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4, -2.2, 1.1, 0.0];
        let targets = vec![2u32, 0, 1];
        let mut margins = Vec::new();
        node_margins(&logits, &targets, 3, &mut margins);
        for u in 0..3 {
            let row = &logits[u * 3..(u + 1) * 3];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|s| (s - max).exp()).sum();
            let ce = z.ln() + max - row[targets[u] as usize];
            assert!((log1p_exp_neg(margins[u]) - ce).abs() <= 1e-12);
        }
    }

    #[test]
    fn margin_seed_matches_finite_differences() {
        let logits = vec![0.5, -0.3, 1.2, 0.0, 2.0, -1.0, 0.4, 0.9, -0.6];
        let (n, u, target) = (3usize, 1usize, 2usize);
        let mut seed = Vec::new();
        margin_seed(&logits, u, target, n, &mut seed);
        let margin = |ls: &[f64]| {
            let mut buf = Vec::new();
            node_margins(ls, &[0, target as u32, 0], n, &mut buf);
            buf[u]
        };
        let h = 1e-6;
        for k in 0..n * n {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (margin(&up) - margin(&dn)) / (2.0 * h);
            assert!(
                (fd - seed[k]).abs() <= 1e-6,
                "coord {k}: fd {fd} vs seed {}",
                seed[k]
            );
        }
    }

    #[test]
    fn identity_projection_passes_gradients_through() {
        let proj = Projection::identity(4);
        let g = vec![1.0, -2.0, 0.0, 0.5];
        let mut out = vec![0.0; 4];
        proj.project(&g, &mut out);
        assert_eq!(out, g);
        assert_eq!(proj.expand(&g), g);
    }

    #[test]
    fn gaussian_projection_rejects_wide_sketch() {
        assert!(matches!(
            Projection::gaussian(4, 5, 0),
            Err(LinError::Dimension { d: 5, p: 4 })
        ));
    }

    #[test]
    fn projection_round_trip_is_adjoint_consistent() {
        // <P^T g, w> must equal <g, P w>: project and expand are transposes.
        let proj = Projection::gaussian(20, 6, 9).unwrap();
        let g: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..6).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut sk = vec![0.0; 6];
        proj.project(&g, &mut sk);
        let lhs = dot(&sk, &w);
        let rhs = dot(&g, &proj.expand(&w));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn extraction_is_deterministic_and_metadata_complete() {
        let (model, data) = tiny_world();
        let set =
            InstanceSet::collect(&data, &["bfs", "dfs"], Split::Train, 3).unwrap();
        let p = model.store().len() - model.store().suffix_offset(1).unwrap();
        let proj = Projection::gaussian(p, 16, 5).unwrap();
        let a = extract_features(&model, model.store(), &set, 1, &proj).unwrap();
        let b = extract_features(&model, model.store(), &set, 1, &proj).unwrap();
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.feats, b.feats);
        assert_eq!(a.base, b.base);
        assert_eq!(a.num_rows(), set.num_rows());
        assert!(a.max_grad_norm > 0.0);
        // Every row of task 0 precedes every row of task 1.
        let first_of_1 = a.meta.iter().position(|m| m.task == 1).unwrap();
        assert!(a.meta[..first_of_1].iter().all(|m| m.task == 0));
    }

    #[test]
    fn suffix_extraction_zeroes_nothing_it_should_keep() {
        // Features at l=2 must be narrower than at l=1 and reproducible
        // through rows_of_task bookkeeping.
        let (model, data) = tiny_world();
        let set = InstanceSet::collect(&data, &["bfs"], Split::Train, 2).unwrap();
        let store = model.store();
        let p1 = store.len() - store.suffix_offset(1).unwrap();
        let p2 = store.len() - store.suffix_offset(2).unwrap();
        assert!(p2 < p1);
        let f2 = extract_features(&model, store, &set, 2, &Projection::identity(p2)).unwrap();
        assert_eq!(f2.feat(0).len(), p2);
        assert_eq!(f2.rows_of_task(0).len(), f2.num_rows());
        assert!(f2.rows_of_task(1).is_empty());
    }

    #[test]
    fn base_margins_agree_with_direct_forward() {
        let (model, data) = tiny_world();
        let set = InstanceSet::collect(&data, &["bfs"], Split::Train, 2).unwrap();
        let p = model.store().len();
        let fs =
            extract_features(&model, model.store(), &set, 1, &Projection::identity(p)).unwrap();
        let (_, graphs) = set.task(0);
        let (cache, trace) = &graphs[0];
        let mut tape = Tape::new();
        let out = model
            .logits_on_tape(model.store(), &mut tape, cache, 0, &trace.steps[0], trace.source)
            .unwrap();
        let mut margins = Vec::new();
        node_margins(tape.value(out), &trace.steps[1], cache.num_nodes, &mut margins);
        for u in 0..cache.num_nodes {
            assert_eq!(fs.base(u), margins[u]);
        }
    }

    #[test]
    fn feature_cache_round_trips_and_rejects_corruption() {
        let (model, data) = tiny_world();
        let set = InstanceSet::collect(&data, &["bfs", "dfs"], Split::Train, 2).unwrap();
        let p = model.store().len();
        let proj = Projection::gaussian(p, 8, 21).unwrap();
        let fs = extract_features(&model, model.store(), &set, 1, &proj).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        fs.save(&path).unwrap();
        let back = ProjectedFeatureSet::load(&path).unwrap();
        assert_eq!(back.tasks, fs.tasks);
        assert_eq!(back.l, fs.l);
        assert_eq!(back.d, fs.d);
        assert_eq!(back.seed, fs.seed);
        assert_eq!(back.max_grad_norm, fs.max_grad_norm);
        assert_eq!(back.meta, fs.meta);
        assert_eq!(back.feats, fs.feats);
        assert_eq!(back.base, fs.base);

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            ProjectedFeatureSet::load(&path),
            Err(LinError::Corrupt(_))
        ));
    }

    #[test]
    fn collect_caps_and_validates() {
        let (_, data) = tiny_world();
        let set = InstanceSet::collect(&data, &["bfs"], Split::Val, 2).unwrap();
        assert_eq!(set.num_graphs(0), 2);
        assert!(matches!(
            InstanceSet::collect(&data, &["nope"], Split::Val, 2),
            Err(LinError::UnknownTask(_))
        ));
        let sub = set.restrict(&[0]);
        assert_eq!(sub.num_rows(), set.num_rows());
    }
}
