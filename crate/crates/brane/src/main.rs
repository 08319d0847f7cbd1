//! Command-line driver: dataset generation, baseline and searched training,
//! affinity estimation, clustering, fidelity diagnostics, sweeps, reports.
//!
//! Every subcommand reads one experiment config (`--config`, otherwise
//! defaults) and writes into one output directory, resolved as `--out`, then
//! `$BRANE_OUT`, then the config's `out_dir`. Runtime failures print a single
//! `error: ...` line on stderr and exit 1; usage errors exit 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brane::bench::{self, ArmResult, BenchError, ExperimentConfig};
use brane::branchnet::BranchingModel;
use brane::clusterer;
use brane::linearizer::{
    affinity_to_clusterer_input, bucket_rss, measure_rss, read_affinity_csv, scale_displacement,
    verify_prop1, InstanceSet, OracleMode, Projection,
};
use brane::rng;
use brane::search::{autobrane, fast_approx_partition};
use brane::tracegen::{make_dataset, Algo, Split, TaskDataset};
use brane::trainer;

#[derive(Parser)]
#[command(name = "brane", version, about = "Branching multitask networks over algorithm traces")]
struct Cli {
    /// Experiment config file (flat key = value); defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; falls back to $BRANE_OUT, then the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate seeded dataset files, one per task.
    Gen {
        /// Tasks to generate (repeatable); default: the config's task list.
        #[arg(long = "task")]
        tasks: Vec<String>,
        /// Overrides the config's data_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a baseline arm for every configured seed, or fine-tune a tree.
    Train {
        /// stn (one chain per task), mtn (one shared chain), or tree.
        #[arg(long, value_parser = ["stn", "mtn", "tree"])]
        arm: String,
        /// Tree topology file (arm = tree).
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Checkpoint file (arm = tree).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Run seed for arm = tree; default: the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the layer-conditioned task-affinity matrix and write it.
    Affinity {
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Select a partition from an affinity CSV.
    Cluster {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
    /// Run the full branch-structure search for every configured seed.
    Brane,
    /// Score a saved model on one split.
    Eval {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Measure linearization fidelity, bucketed by relative distance.
    Rss {
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify the sketched-linearization gap certificate.
    Prop1 {
        /// Layer the suffix starts at; default: the last layer.
        #[arg(long)]
        layer: Option<usize>,
        /// Reference optimum: adam fine-tuning (desk scale) or exact
        /// full-batch minimization (small suffixes).
        #[arg(long, default_value = "adam", value_parser = ["adam", "exact"])]
        oracle: String,
        /// Exact-mode gradient tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Exact-mode iteration cap; also the adam oracle's epoch count.
        #[arg(long, default_value_t = 2000)]
        max_iter: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Find the minimal training-set size reaching a target validation error.
    Sweep {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0.05)]
        target: f64,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
        sizes: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate arm CSVs in the output directory into a comparison table.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.out_dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("BRANE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone());
    cfg.validate()?;

    match cli.cmd {
        Cmd::Gen { tasks, seed } => gen(&cfg, &tasks, seed),
        Cmd::Train { arm, tree, ckpt, seed } => train(&cfg, &arm, tree, ckpt, seed),
        Cmd::Affinity { layer, seed } => affinity(&cfg, layer, seed),
        Cmd::Cluster { csv, layer } => cluster(&cfg, &csv, layer),
        Cmd::Brane => brane_search(&cfg),
        Cmd::Eval { tree, ckpt, split } => eval(&cfg, &tree, &ckpt, parse_split(&split)),
        Cmd::Rss { layer, seed } => rss(&cfg, layer, seed),
        Cmd::Prop1 { layer, tol, max_iter, seed } => prop1(&cfg, layer, tol, max_iter, seed),
        Cmd::Sweep { task, target, sizes, seed } => sweep(&cfg, &task, target, &sizes, seed),
        Cmd::Report => report(&cfg),
    }
}

fn parse_split(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn parse_algo(name: &str) -> Result<Algo, BenchError> {
    Algo::from_name(name).ok_or_else(|| BenchError::Config(format!("unknown task {name:?}")))
}

fn first_seed(cfg: &ExperimentConfig, flag: Option<u64>) -> u64 {
    flag.unwrap_or(cfg.seeds[0])
}

fn names_of(data: &BTreeMap<String, TaskDataset>) -> Vec<&str> {
    data.keys().map(|n| n.as_str()).collect()
}

fn gen(cfg: &ExperimentConfig, tasks: &[String], seed: Option<u64>) -> Result<(), BenchError> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.data_seed = s;
    }
    let tasks: Vec<Algo> = if tasks.is_empty() {
        cfg.tasks.clone()
    } else {
        tasks.iter().map(|n| parse_algo(n)).collect::<Result<_, _>>()?
    };
    for (i, &task) in tasks.iter().enumerate() {
        let index = cfg.tasks.iter().position(|&t| t == task).unwrap_or(i);
        let dataset = make_dataset(&cfg.dataset_config(task, index));
        let path = cfg.out_dir.join(format!("{}.trace", task.name()));
        dataset.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn train(
    cfg: &ExperimentConfig,
    arm: &str,
    tree: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), BenchError> {
    let data = cfg.datasets();
    if arm == "tree" {
        let (tree, ckpt) = match (tree, ckpt) {
            (Some(t), Some(c)) => (t, c),
            _ => {
                return Err(BenchError::Config(
                    "arm tree needs --tree and --ckpt".into(),
                ))
            }
        };
        let mut model = BranchingModel::load(&tree, &ckpt)?;
        let owned = model.task_names().to_vec();
        let names: Vec<&str> = owned.iter().map(|n| n.as_str()).collect();
        for name in &names {
            if !data.contains_key(*name) {
                return Err(BenchError::Config(format!(
                    "model task {name:?} is not in the config's task list"
                )));
            }
        }
        let run_seed = first_seed(cfg, seed);
        trainer::train(&mut model, &data, &names, &cfg.train_config(run_seed))?;
        model.save(&tree, &ckpt)?;
        let scores = trainer::evaluate(&model, &data, &names, Split::Test)?;
        let result = ArmResult {
            arm: "tree".into(),
            seed: run_seed,
            scores,
            modules: model.module_count(),
            training_calls: 1,
        };
        bench::write_results_csv(&cfg.out_dir.join("tree.csv"), &[&result])?;
        println!("trained tree: mean accuracy {:.4}", result.mean_accuracy());
        return Ok(());
    }

    let mut results = Vec::new();
    for &run_seed in &cfg.seeds {
        let run_dir = cfg.out_dir.join(format!("{arm}_s{run_seed}"));
        std::fs::create_dir_all(&run_dir)?;
        if arm == "stn" {
            let (models, result) = bench::run_stn(cfg, &data, run_seed)?;
            for (model, name) in models.iter().zip(data.keys()) {
                model.save(&run_dir.join(format!("{name}.tree")), &run_dir.join(format!("{name}.ckpt")))?;
            }
            results.push(result);
        } else {
            let (model, result) = bench::run_mtn(cfg, &data, run_seed)?;
            model.save(&run_dir.join("model.tree"), &run_dir.join("model.ckpt"))?;
            results.push(result);
        }
        let last = results.last().unwrap();
        println!("{arm} seed {run_seed}: mean accuracy {:.4}", last.mean_accuracy());
    }
    cfg.write_into(&cfg.out_dir)?;
    let refs: Vec<&ArmResult> = results.iter().collect();
    bench::write_results_csv(&cfg.out_dir.join(format!("{arm}.csv")), &refs)?;
    Ok(())
}

fn affinity(cfg: &ExperimentConfig, layer: usize, seed: Option<u64>) -> Result<(), BenchError> {
    if cfg.tasks.len() < 2 {
        return Err(BenchError::Config("affinity needs at least two tasks".into()));
    }
    let data = cfg.datasets();
    let scfg = cfg.search_config(first_seed(cfg, seed));
    let names = names_of(&data);
    let max_nodes = data.values().map(|d| d.max_nodes()).max().unwrap();
    let model =
        BranchingModel::new_chain(&names, scfg.num_layers, scfg.hidden, max_nodes, scfg.seed);
    let all: Vec<usize> = (0..names.len()).collect();
    let outcome = fast_approx_partition(&model, &data, &all, layer, &scfg)?;
    let aff = outcome.affinity.expect("two or more tasks always yield a matrix");
    let path = cfg.out_dir.join(format!("affinity_l{layer}.csv"));
    aff.write_csv(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cluster(cfg: &ExperimentConfig, csv: &Path, layer: usize) -> Result<(), BenchError> {
    let (tasks, t) = read_affinity_csv(csv)?;
    let n = tasks.len();
    let a = affinity_to_clusterer_input(&t, n);
    let (partition, candidates) = clusterer::select_partition_audited(
        &a,
        n,
        &cfg.lambda_grid,
        cfg.num_layers,
        layer,
        cfg.max_growth,
    )?;
    let audit_path = cfg.out_dir.join("cluster_audit.txt");
    brane::fsio::atomic_write(&audit_path, clusterer::audit_text(&candidates).as_bytes())?;
    for (g, group) in partition.groups().iter().enumerate() {
        let members: Vec<&str> = group.iter().map(|&i| tasks[i].as_str()).collect();
        println!("group {g}: {}", members.join(","));
    }
    println!("partition {partition}");
    println!("wrote {}", audit_path.display());
    Ok(())
}

fn brane_search(cfg: &ExperimentConfig) -> Result<(), BenchError> {
    let data = cfg.datasets();
    let names = names_of(&data);
    let mut results = Vec::new();
    for &run_seed in &cfg.seeds {
        let run_dir = cfg.out_dir.join(format!("brane_s{run_seed}"));
        std::fs::create_dir_all(&run_dir)?;
        let mut scfg = cfg.search_config(run_seed);
        scfg.audit_dir = Some(run_dir.clone());
        let (model, state) = autobrane(&data, &scfg)?;
        brane::fsio::atomic_write(&run_dir.join("audit.txt"), state.audit_text().as_bytes())?;
        brane::fsio::atomic_write(&run_dir.join("tree.dot"), model.to_dot().as_bytes())?;
        model.save(&run_dir.join("model.tree"), &run_dir.join("model.ckpt"))?;
        let scores = trainer::evaluate(&model, &data, &names, Split::Test)?;
        let result = ArmResult {
            arm: "brane".into(),
            seed: run_seed,
            scores,
            modules: model.module_count(),
            training_calls: state.training_calls + 1,
        };
        println!(
            "brane seed {run_seed}: modules {} training_calls {} mean accuracy {:.4}",
            result.modules,
            result.training_calls,
            result.mean_accuracy()
        );
        results.push(result);
    }
    cfg.write_into(&cfg.out_dir)?;
    let refs: Vec<&ArmResult> = results.iter().collect();
    bench::write_results_csv(&cfg.out_dir.join("brane.csv"), &refs)?;
    Ok(())
}

fn eval(cfg: &ExperimentConfig, tree: &Path, ckpt: &Path, split: Split) -> Result<(), BenchError> {
    let model = BranchingModel::load(tree, ckpt)?;
    let data = cfg.datasets();
    let names = model.task_names();
    let names: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
    for name in &names {
        if !data.contains_key(*name) {
            return Err(BenchError::Config(format!(
                "model task {name:?} is not in the config's task list"
            )));
        }
    }
    let scores = trainer::evaluate(&model, &data, &names, split)?;
    let mut out = String::from("task,loss,accuracy,rows\n");
    for (task, s) in &scores {
        out.push_str(&format!("{},{},{},{}\n", task, s.loss, s.accuracy, s.rows));
        println!("{task}: loss {:.4} accuracy {:.4} ({} rows)", s.loss, s.accuracy, s.rows);
    }
    let path = cfg.out_dir.join("eval.csv");
    brane::fsio::atomic_write(&path, out.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Relative suffix distances probed by `rss`, chosen to land in every bucket
/// of the report.
const RSS_TARGETS: [f64; 8] = [0.01, 0.02, 0.05, 0.08, 0.12, 0.2, 0.3, 0.45];
const RSS_EDGES: [f64; 4] = [0.025, 0.075, 0.15, 0.35];

fn rss(cfg: &ExperimentConfig, layer: usize, seed: Option<u64>) -> Result<(), BenchError> {
    let data = cfg.datasets();
    let names = names_of(&data);
    let run_seed = first_seed(cfg, seed);
    let max_nodes = data.values().map(|d| d.max_nodes()).max().unwrap();
    let mut model = BranchingModel::new_chain(
        &names,
        cfg.num_layers,
        cfg.hidden,
        max_nodes,
        cfg.search_config(run_seed).seed,
    );
    trainer::train(&mut model, &data, &names, &cfg.train_config(run_seed))?;
    let w0 = model.store().clone();
    let mut further = cfg.train_config(rng::mix(run_seed, 1));
    further.lr = cfg.lr * 3.0;
    trainer::train(&mut model, &data, &names, &further)?;
    let w1 = model.store().clone();

    let set = InstanceSet::collect(&data, &names, Split::Val, cfg.feature_graphs)?;
    let mut samples = Vec::new();
    for &target in &RSS_TARGETS {
        let wr = scale_displacement(&w0, &w1, layer, target)?;
        samples.push(measure_rss(&model, &wr, &w0, &set, layer)?);
    }
    let buckets = bucket_rss(&samples, &RSS_EDGES);
    let mut out = String::from("lo,hi,mean_rss,samples\n");
    for b in &buckets {
        out.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.mean_rss, b.samples));
        println!("[{:.3}, {:>5.3}] mean rss {:.3e} over {}", b.lo, b.hi, b.mean_rss, b.samples);
    }
    let path = cfg.out_dir.join("rss.csv");
    brane::fsio::atomic_write(&path, out.as_bytes())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn prop1(
    cfg: &ExperimentConfig,
    layer: Option<usize>,
    tol: f64,
    max_iter: usize,
    seed: Option<u64>,
) -> Result<(), BenchError> {
    let data = cfg.datasets();
    let names = names_of(&data);
    let run_seed = first_seed(cfg, seed);
    let layer = layer.unwrap_or(cfg.num_layers);
    let max_nodes = data.values().map(|d| d.max_nodes()).max().unwrap();
    let mut model = BranchingModel::new_chain(
        &names,
        cfg.num_layers,
        cfg.hidden,
        max_nodes,
        cfg.search_config(run_seed).seed,
    );
    trainer::train(&mut model, &data, &names, &cfg.train_config(run_seed))?;
    let w0 = model.store().clone();
    let set = InstanceSet::collect(&data, &names, Split::Val, cfg.feature_graphs)?;

    let suffix = w0.len() - w0.suffix_offset(layer)?;
    let proj = if cfg.d >= suffix {
        Projection::identity(suffix)
    } else {
        Projection::gaussian(suffix, cfg.d, rng::mix(run_seed, 2))?
    };
    let mode = OracleMode::Exact { tol, max_iter };
    let report = verify_prop1(&model, &w0, &set, layer, &proj, cfg.lambda2, &mode)?;

    let mut out = String::new();
    out.push_str(&format!("sketched_loss = {}\n", report.sketched_loss));
    out.push_str(&format!("oracle_loss = {}\n", report.oracle_loss));
    out.push_str(&format!("gap = {}\n", report.gap));
    out.push_str(&format!("g_max = {}\n", report.g_max));
    out.push_str(&format!("radius = {}\n", report.radius));
    out.push_str(&format!("delta_hat = {}\n", report.delta_hat));
    out.push_str(&format!("eps_hat = {}\n", report.eps_hat));
    out.push_str(&format!("bound = {}\n", report.bound));
    out.push_str(&format!("holds = {}\n", report.holds));
    out.push_str(&format!("rows = {}\n", report.rows));
    out.push_str(&format!("d = {}\n", report.d));
    out.push_str(&format!("p = {}\n", report.p));
    let path = cfg.out_dir.join("prop1.txt");
    brane::fsio::atomic_write(&path, out.as_bytes())?;
    println!(
        "gap {:.3e} <= bound {:.3e} + slack: {}",
        report.gap,
        report.bound,
        if report.holds { "holds" } else { "VIOLATED" }
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep(
    cfg: &ExperimentConfig,
    task: &str,
    target: f64,
    sizes: &[usize],
    seed: Option<u64>,
) -> Result<(), BenchError> {
    let algo = parse_algo(task)?;
    let run_seed = first_seed(cfg, seed);
    let path = cfg.out_dir.join(format!("sweep_{}.csv", algo.name()));
    match bench::sample_complexity_sweep(cfg, algo, target, sizes, run_seed) {
        Ok((size, sweep)) => {
            sweep.write_csv(&path)?;
            println!("minimal size {size} (validation error {:.4})", sweep.points.last().unwrap().val_err);
            println!("wrote {}", path.display());
            Ok(())
        }
        Err(e) => {
            if let BenchError::TargetUnreached { sweep, .. } = &e {
                sweep.write_csv(&path)?;
            }
            Err(e)
        }
    }
}

fn report(cfg: &ExperimentConfig) -> Result<(), BenchError> {
    let rows = bench::report(&cfg.out_dir)?;
    if rows.is_empty() {
        return Err(BenchError::Config(format!(
            "no arm CSVs under {}",
            cfg.out_dir.display()
        )));
    }
    println!("arm,mean_loss,mean_accuracy,mean_training_calls,mean_modules,memory_ratio");
    for r in &rows {
        println!(
            "{},{:.4},{:.4},{:.1},{:.1},{:.3}",
            r.arm, r.mean_loss, r.mean_accuracy, r.mean_training_calls, r.mean_modules, r.memory_ratio
        );
    }
    println!("wrote {}", cfg.out_dir.join("report.csv").display());
    Ok(())
}
