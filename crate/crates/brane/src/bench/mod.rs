//! Experiment harness: typed configs, the two bracketing baselines, the
//! sample-complexity sweep, and CSV report aggregation.
//!
//! An experiment is described by one [`ExperimentConfig`], stored as flat
//! `key = value` text. Every run writes the full config into its output
//! directory, so a directory is self-describing: re-running with the embedded
//! config reproduces the CSVs byte for byte. All derived randomness (dataset
//! seeds, model init, shuffling) comes from the config's seeds through fixed
//! tag mixing, and all files are written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::branchnet::{BranchError, BranchingModel};
use crate::clusterer::DEFAULT_LAMBDA_GRID;
use crate::fsio;
use crate::rng;
use crate::search::{autobrane, SearchConfig, SearchError, SearchState};
use crate::tracegen::{make_dataset, Algo, DatasetConfig, Split, TaskDataset, TraceError};
use crate::trainer::{self, TaskScore, TrainConfig, TrainError};

const TAG_DATA: u64 = 0xbe4c_0001;
const TAG_MODEL: u64 = 0xbe4c_0002;
const TAG_TRAIN: u64 = 0xbe4c_0003;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),
    #[error(
        "target {target} unreached: best validation error {best_err:.4} at size {best_size}"
    )]
    TargetUnreached {
        target: f64,
        best_err: f64,
        best_size: usize,
        /// Everything measured before giving up, for curve emission.
        sweep: Sweep,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Branch(#[from] BranchError),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Lin(#[from] crate::linearizer::LinError),
    #[error(transparent)]
    Cluster(#[from] crate::clusterer::ClusterError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One experiment, fully specified: tasks, data, model, search, training,
/// seeds, and where outputs go.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub tasks: Vec<Algo>,
    /// Base seed for dataset generation; task `i` uses `mix(data_seed, i)`.
    pub data_seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub nodes_train: usize,
    pub nodes_test: usize,
    pub edge_prob: f64,
    pub num_layers: usize,
    pub hidden: usize,
    pub m: usize,
    pub alpha: usize,
    pub d: usize,
    pub lambda2: f64,
    pub lambda_grid: Vec<f64>,
    pub max_growth: usize,
    pub feature_graphs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let desk = DatasetConfig::desk(Algo::Bfs, 0);
        let train = TrainConfig::default();
        ExperimentConfig {
            tasks: vec![Algo::Bfs, Algo::BellmanFord, Algo::Dfs],
            data_seed: 0,
            num_train: desk.num_train,
            num_val: desk.num_val,
            num_test: desk.num_test,
            nodes_train: desk.nodes_train,
            nodes_test: desk.nodes_test,
            edge_prob: desk.edge_prob,
            num_layers: 5,
            hidden: 32,
            m: 200,
            alpha: 3,
            d: 400,
            lambda2: 1e-2,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            max_growth: 5,
            feature_graphs: 48,
            epochs: 8,
            lr: 2e-4,
            batch_size: train.batch_size,
            patience: train.patience,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    /// Parses flat `key = value` lines. Unset keys keep their defaults;
    /// unknown keys and malformed values are errors. `#` starts a comment.
    pub fn parse(text: &str) -> Result<ExperimentConfig, BenchError> {
        let mut cfg = ExperimentConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| BenchError::Config(format!("line {}: missing '='", ln + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| BenchError::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig, BenchError> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value for {key}: {value:?}"))
        }
        match key {
            "tasks" => {
                self.tasks = value
                    .split(',')
                    .map(str::trim)
                    .map(|name| {
                        Algo::from_name(name).ok_or_else(|| format!("unknown task {name:?}"))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "data_seed" => self.data_seed = num(key, value)?,
            "num_train" => self.num_train = num(key, value)?,
            "num_val" => self.num_val = num(key, value)?,
            "num_test" => self.num_test = num(key, value)?,
            "nodes_train" => self.nodes_train = num(key, value)?,
            "nodes_test" => self.nodes_test = num(key, value)?,
            "edge_prob" => self.edge_prob = num(key, value)?,
            "num_layers" => self.num_layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda_grid" => {
                self.lambda_grid = value
                    .split(',')
                    .map(|v| num("lambda_grid", v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "max_growth" => self.max_growth = num(key, value)?,
            "feature_graphs" => self.feature_graphs = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|v| num("seeds", v.trim()))
                    .collect::<Result<_, _>>()?;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Serializes every field, in a fixed order, parseable by [`Self::parse`].
    pub fn to_text(&self) -> String {
        let join_f64 = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let tasks = self.tasks.iter().map(|t| t.name()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "tasks = {tasks}");
        let _ = writeln!(out, "data_seed = {}", self.data_seed);
        let _ = writeln!(out, "num_train = {}", self.num_train);
        let _ = writeln!(out, "num_val = {}", self.num_val);
        let _ = writeln!(out, "num_test = {}", self.num_test);
        let _ = writeln!(out, "nodes_train = {}", self.nodes_train);
        let _ = writeln!(out, "nodes_test = {}", self.nodes_test);
        let _ = writeln!(out, "edge_prob = {}", self.edge_prob);
        let _ = writeln!(out, "num_layers = {}", self.num_layers);
        let _ = writeln!(out, "hidden = {}", self.hidden);
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "d = {}", self.d);
        let _ = writeln!(out, "lambda2 = {}", self.lambda2);
        let _ = writeln!(out, "lambda_grid = {}", join_f64(&self.lambda_grid));
        let _ = writeln!(out, "max_growth = {}", self.max_growth);
        let _ = writeln!(out, "feature_graphs = {}", self.feature_graphs);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "patience = {}", self.patience);
        let seeds = self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "seeds = {seeds}");
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        out
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |msg: String| Err(BenchError::Config(msg));
        if self.tasks.is_empty() {
            return fail("tasks must be nonempty".into());
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(a) {
                return fail(format!("task {} listed twice", a.name()));
            }
        }
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return fail("every split needs at least one graph".into());
        }
        if self.nodes_train < 2 || self.nodes_test < 2 {
            return fail("graphs need at least two nodes".into());
        }
        if !(self.edge_prob > 0.0 && self.edge_prob <= 1.0) {
            return fail(format!("edge_prob {} outside (0, 1]", self.edge_prob));
        }
        if self.num_layers == 0 || self.hidden == 0 {
            return fail("model needs at least one layer and one unit".into());
        }
        if self.m == 0 || self.alpha < 2 || self.d == 0 {
            return fail("search needs m >= 1, alpha >= 2, d >= 1".into());
        }
        if self.lambda_grid.is_empty() {
            return fail("lambda_grid must be nonempty".into());
        }
        if self.max_growth == 0 || self.feature_graphs == 0 {
            return fail("search needs max_growth >= 1 and feature_graphs >= 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("training needs epochs >= 1 and batch_size >= 1".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr {} must be positive", self.lr));
        }
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        Ok(())
    }

    /// Writes the full config into `dir` for provenance.
    pub fn write_into(&self, dir: &Path) -> Result<(), BenchError> {
        fsio::atomic_write(&dir.join("cfg.txt"), self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn dataset_config(&self, task: Algo, index: usize) -> DatasetConfig {
        DatasetConfig {
            task,
            seed: rng::mix(rng::mix(self.data_seed, TAG_DATA), index as u64),
            num_train: self.num_train,
            num_val: self.num_val,
            num_test: self.num_test,
            nodes_train: self.nodes_train,
            nodes_test: self.nodes_test,
            edge_prob: self.edge_prob,
        }
    }

    /// Generates every task's dataset, keyed by task name.
    pub fn datasets(&self) -> BTreeMap<String, TaskDataset> {
        self.tasks
            .iter()
            .enumerate()
            .map(|(i, &task)| (task.name().to_string(), make_dataset(&self.dataset_config(task, i))))
            .collect()
    }

    /// The shared fine-tune budget. All arms train with this exact config, so
    /// baseline comparisons differ only in architecture.
    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            patience: self.patience,
            seed: rng::mix(run_seed, TAG_TRAIN),
            ..TrainConfig::default()
        }
    }

    pub fn search_config(&self, run_seed: u64) -> SearchConfig {
        SearchConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            seed: rng::mix(run_seed, TAG_MODEL),
            m: self.m,
            alpha: self.alpha,
            d: self.d,
            lambda2: self.lambda2,
            lambda_grid: self.lambda_grid.clone(),
            max_growth: self.max_growth,
            feature_graphs: self.feature_graphs,
            train: self.train_config(run_seed),
            audit_dir: None,
        }
    }
}

/// Test-split scores and cost accounting for one arm at one seed.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    pub scores: BTreeMap<String, TaskScore>,
    /// Module count of the trained model(s), straight from the tree.
    pub modules: usize,
    /// Full training invocations plus meta-initializations.
    pub training_calls: usize,
}

impl ArmResult {
    pub fn mean_accuracy(&self) -> f64 {
        let n = self.scores.len() as f64;
        self.scores.values().map(|s| s.accuracy).sum::<f64>() / n
    }
}

fn chain_seed(cfg: &ExperimentConfig, run_seed: u64) -> u64 {
    cfg.search_config(run_seed).seed
}

fn max_nodes(data: &BTreeMap<String, TaskDataset>) -> usize {
    data.values().map(|d| d.max_nodes()).max().unwrap_or(2)
}

/// One independent chain per task. Every chain draws the same init stream
/// and trains under the shared budget, so with a single task this is
/// bit-identical to [`run_mtn`].
pub fn run_stn(
    cfg: &ExperimentConfig,
    data: &BTreeMap<String, TaskDataset>,
    run_seed: u64,
) -> Result<(Vec<BranchingModel>, ArmResult), BenchError> {
    let mn = max_nodes(data);
    let mut models = Vec::new();
    let mut scores = BTreeMap::new();
    let mut modules = 0;
    for name in data.keys() {
        let names = [name.as_str()];
        let mut model = BranchingModel::new_chain(
            &names,
            cfg.num_layers,
            cfg.hidden,
            mn,
            chain_seed(cfg, run_seed),
        );
        trainer::train(&mut model, data, &names, &cfg.train_config(run_seed))?;
        scores.extend(trainer::evaluate(&model, data, &names, Split::Test)?);
        modules += model.module_count();
        models.push(model);
    }
    let result = ArmResult {
        arm: "stn".into(),
        seed: run_seed,
        scores,
        modules,
        training_calls: data.len(),
    };
    Ok((models, result))
}

/// One shared chain over all tasks, under the same budget as the other arms.
pub fn run_mtn(
    cfg: &ExperimentConfig,
    data: &BTreeMap<String, TaskDataset>,
    run_seed: u64,
) -> Result<(BranchingModel, ArmResult), BenchError> {
    let names: Vec<&str> = data.keys().map(|n| n.as_str()).collect();
    let mut model = BranchingModel::new_chain(
        &names,
        cfg.num_layers,
        cfg.hidden,
        max_nodes(data),
        chain_seed(cfg, run_seed),
    );
    trainer::train(&mut model, data, &names, &cfg.train_config(run_seed))?;
    let scores = trainer::evaluate(&model, data, &names, Split::Test)?;
    let result = ArmResult {
        arm: "mtn".into(),
        seed: run_seed,
        scores,
        modules: model.module_count(),
        training_calls: 1,
    };
    Ok((model, result))
}

/// The searched branching model. Counts the meta-initializations plus the
/// final fine-tune as training calls.
pub fn run_brane(
    cfg: &ExperimentConfig,
    data: &BTreeMap<String, TaskDataset>,
    run_seed: u64,
) -> Result<(BranchingModel, SearchState, ArmResult), BenchError> {
    let names: Vec<&str> = data.keys().map(|n| n.as_str()).collect();
    let (model, state) = autobrane(data, &cfg.search_config(run_seed))?;
    let scores = trainer::evaluate(&model, data, &names, Split::Test)?;
    let result = ArmResult {
        arm: "brane".into(),
        seed: run_seed,
        scores,
        modules: model.module_count(),
        training_calls: state.training_calls + 1,
    };
    Ok((model, state, result))
}

/// Runs STN and MTN for every configured seed and writes `stn.csv` and
/// `mtn.csv` (plus the config) into the output directory.
pub fn run_baselines(cfg: &ExperimentConfig) -> Result<Vec<ArmResult>, BenchError> {
    cfg.validate()?;
    let data = cfg.datasets();
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        results.push(run_stn(cfg, &data, seed)?.1);
        results.push(run_mtn(cfg, &data, seed)?.1);
    }
    cfg.write_into(&cfg.out_dir)?;
    for arm in ["stn", "mtn"] {
        let rows: Vec<&ArmResult> = results.iter().filter(|r| r.arm == arm).collect();
        write_results_csv(&cfg.out_dir.join(format!("{arm}.csv")), &rows)?;
    }
    Ok(results)
}

/// One `results` table: a row per (seed, task) with run-level cost columns.
pub fn write_results_csv(path: &Path, results: &[&ArmResult]) -> Result<(), BenchError> {
    let mut out = String::from("arm,seed,task,loss,accuracy,modules,training_calls\n");
    for r in results {
        for (task, score) in &r.scores {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.arm, r.seed, task, score.loss, score.accuracy, r.modules, r.training_calls
            );
        }
    }
    fsio::atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// One point of the sample-complexity curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub size: usize,
    pub val_err: f64,
}

/// A sweep's trajectory: the sizes actually trained, in order, and the first
/// size (if any) whose validation error dropped below the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub task: Algo,
    pub target: f64,
    pub points: Vec<SweepPoint>,
    pub reached: Option<usize>,
}

impl Sweep {
    pub fn write_csv(&self, path: &Path) -> Result<(), BenchError> {
        let mut out = String::from("size,val_err\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{}", p.size, p.val_err);
        }
        fsio::atomic_write(path, out.as_bytes())?;
        Ok(())
    }
}

/// Single-task validation error (one minus pointer accuracy) for a chain
/// trained on `size` graphs of `task`.
pub fn single_val_error(
    cfg: &ExperimentConfig,
    task: Algo,
    size: usize,
    run_seed: u64,
) -> Result<f64, BenchError> {
    let index = cfg.tasks.iter().position(|&t| t == task).unwrap_or(0);
    let mut dcfg = cfg.dataset_config(task, index);
    dcfg.num_train = size;
    let data: BTreeMap<String, TaskDataset> =
        [(task.name().to_string(), make_dataset(&dcfg))].into_iter().collect();
    let names = [task.name()];
    let mut model = BranchingModel::new_chain(
        &names,
        cfg.num_layers,
        cfg.hidden,
        max_nodes(&data),
        chain_seed(cfg, run_seed),
    );
    trainer::train(&mut model, &data, &names, &cfg.train_config(run_seed))?;
    let scores = trainer::evaluate(&model, &data, &names, Split::Val)?;
    Ok(1.0 - scores[task.name()].accuracy)
}

/// Per-task validation errors of one joint chain over all configured tasks,
/// each task's training split truncated to `size` graphs. The multitask
/// counterpart of [`single_val_error`] for sample-complexity comparisons.
pub fn joint_val_errors(
    cfg: &ExperimentConfig,
    size: usize,
    run_seed: u64,
) -> Result<BTreeMap<String, f64>, BenchError> {
    let mut sized = cfg.clone();
    sized.num_train = size;
    let data = sized.datasets();
    let names: Vec<&str> = data.keys().map(|n| n.as_str()).collect();
    let mut model = BranchingModel::new_chain(
        &names,
        cfg.num_layers,
        cfg.hidden,
        max_nodes(&data),
        chain_seed(cfg, run_seed),
    );
    trainer::train(&mut model, &data, &names, &cfg.train_config(run_seed))?;
    let scores = trainer::evaluate(&model, &data, &names, Split::Val)?;
    Ok(scores.into_iter().map(|(name, s)| (name, 1.0 - s.accuracy)).collect())
}

/// Trains a single-task chain at each size, in ascending order, and returns
/// the first size whose validation error drops below `target_err`, together
/// with the curve measured along the way. Stops at the first success.
pub fn sample_complexity_sweep(
    cfg: &ExperimentConfig,
    task: Algo,
    target_err: f64,
    sizes: &[usize],
    run_seed: u64,
) -> Result<(usize, Sweep), BenchError> {
    if sizes.is_empty() {
        return Err(BenchError::Config("sizes must be nonempty".into()));
    }
    if !sizes.windows(2).all(|w| w[0] < w[1]) {
        return Err(BenchError::Config("sizes must be strictly ascending".into()));
    }
    if !(target_err > 0.0) {
        return Err(BenchError::Config(format!("target {target_err} must be positive")));
    }
    let mut sweep = Sweep { task, target: target_err, points: Vec::new(), reached: None };
    for &size in sizes {
        let val_err = single_val_error(cfg, task, size, run_seed)?;
        sweep.points.push(SweepPoint { size, val_err });
        if val_err < target_err {
            sweep.reached = Some(size);
            return Ok((size, sweep));
        }
    }
    let best = sweep
        .points
        .iter()
        .min_by(|a, b| a.val_err.total_cmp(&b.val_err))
        .expect("sizes is nonempty");
    Err(BenchError::TargetUnreached {
        target: target_err,
        best_err: best.val_err,
        best_size: best.size,
        sweep: sweep.clone(),
    })
}

/// One aggregated line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub arm: String,
    pub mean_loss: f64,
    pub mean_accuracy: f64,
    pub mean_training_calls: f64,
    pub mean_modules: f64,
    /// Modules relative to the single-task bracket `n * L`.
    pub memory_ratio: f64,
}

/// Aggregates `stn.csv` / `mtn.csv` / `brane.csv` found in `dir` into one
/// table (absent arms are skipped) and writes `report.csv` next to them.
/// Needs the directory's `cfg.txt` for the `n * L` memory bracket.
pub fn report(dir: &Path) -> Result<Vec<ReportRow>, BenchError> {
    let cfg = ExperimentConfig::from_file(&dir.join("cfg.txt"))?;
    let bracket = (cfg.tasks.len() * cfg.num_layers) as f64;
    let mut rows = Vec::new();
    for arm in ["stn", "mtn", "brane"] {
        let path = dir.join(format!("{arm}.csv"));
        if !path.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        let mut losses = Vec::new();
        let mut accs = Vec::new();
        // Run-level columns repeat once per task row; key by seed.
        let mut calls: BTreeMap<String, f64> = BTreeMap::new();
        let mut modules: BTreeMap<String, f64> = BTreeMap::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(BenchError::Config(format!(
                    "{}: expected 7 columns, got {}",
                    path.display(),
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64, BenchError> {
                s.parse().map_err(|_| {
                    BenchError::Config(format!("{}: bad number {s:?}", path.display()))
                })
            };
            losses.push(parse(fields[3])?);
            accs.push(parse(fields[4])?);
            modules.insert(fields[1].to_string(), parse(fields[5])?);
            calls.insert(fields[1].to_string(), parse(fields[6])?);
        }
        if losses.is_empty() {
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mean_map = |m: &BTreeMap<String, f64>| {
            m.values().sum::<f64>() / m.len() as f64
        };
        let mean_modules = mean_map(&modules);
        rows.push(ReportRow {
            arm: arm.to_string(),
            mean_loss: mean(&losses),
            mean_accuracy: mean(&accs),
            mean_training_calls: mean_map(&calls),
            mean_modules,
            memory_ratio: mean_modules / bracket,
        });
    }
    let mut out = String::from("arm,mean_loss,mean_accuracy,mean_training_calls,mean_modules,memory_ratio\n");
    for r in &rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.arm, r.mean_loss, r.mean_accuracy, r.mean_training_calls, r.mean_modules, r.memory_ratio
        );
    }
    fsio::atomic_write(&dir.join("report.csv"), out.as_bytes())?;
    Ok(rows)
}
