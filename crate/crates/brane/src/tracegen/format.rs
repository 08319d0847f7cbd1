//! Dataset file format.
//!
//! Line-delimited text. The first line is a header carrying the generation
//! config and a SHA-256 checksum of the record lines; every following line is
//! one (graph, trace) record with fields in fixed order:
//!
//! ```text
//! branetrace v1 task=bfs seed=7 num_train=200 ... sha256=<hex>
//! 1 bfs <graph_seed> <num_nodes> <directed:0|1> <num_edges> u,v,w ... <source|-> <num_rows> <row-major labels>
//! ```
//!
//! Weights print as shortest round-trip decimals. Records appear train, then
//! val, then test. Loading re-verifies the checksum and re-executes every
//! trace, so a loaded dataset is bit-identical to a regenerated one.

use std::fmt::Write as _;
use std::path::Path;

use crate::fsio;
use crate::tracegen::{execute, Algo, DatasetConfig, Graph, Trace, TraceError};

use super::dataset::TaskDataset;

const MAGIC: &str = "branetrace";
const VERSION: &str = "v1";

impl TaskDataset {
    /// Serializes all splits to one file, atomically.
    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        let mut body = String::new();
        for (graph, trace) in self.train.iter().chain(&self.val).chain(&self.test) {
            write_record(&mut body, graph, trace);
        }
        let c = &self.config;
        let header = format!(
            "{MAGIC} {VERSION} task={} seed={} num_train={} num_val={} num_test={} \
             nodes_train={} nodes_test={} edge_prob={} sha256={}\n",
            c.task,
            c.seed,
            c.num_train,
            c.num_val,
            c.num_test,
            c.nodes_train,
            c.nodes_test,
            c.edge_prob,
            fsio::sha256_hex(body.as_bytes()),
        );
        let mut out = header;
        out.push_str(&body);
        fsio::atomic_write(path, out.as_bytes())?;
        Ok(())
    }

    /// Loads and fully verifies a dataset file: checksum, record counts, graph
    /// invariants, and re-execution of every trace against its graph.
    pub fn load(path: &Path) -> Result<TaskDataset, TraceError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| TraceError::Format("empty file".into()))?;
        let (config, checksum) = parse_header(header)?;

        let body_start = text.find('\n').map(|i| i + 1).unwrap_or(text.len());
        let body = &text[body_start..];
        if fsio::sha256_hex(body.as_bytes()) != checksum {
            return Err(TraceError::Format("checksum mismatch".into()));
        }

        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            records.push(
                parse_record(line, config.task)
                    .map_err(|e| TraceError::Format(format!("record {idx}: {e}")))?,
            );
        }
        let want = config.num_train + config.num_val + config.num_test;
        if records.len() != want {
            return Err(TraceError::Format(format!(
                "expected {want} records, found {}",
                records.len()
            )));
        }
        for (graph, trace) in &records {
            let fresh = execute(config.task, graph, trace.source)?;
            if &fresh != trace {
                return Err(TraceError::Format(format!(
                    "stored trace disagrees with re-execution on graph seed {}",
                    graph.seed
                )));
            }
        }
        let mut it = records.into_iter();
        let train: Vec<_> = it.by_ref().take(config.num_train).collect();
        let val: Vec<_> = it.by_ref().take(config.num_val).collect();
        let test: Vec<_> = it.collect();
        Ok(TaskDataset { config, train, val, test })
    }
}

fn write_record(out: &mut String, graph: &Graph, trace: &Trace) {
    write!(
        out,
        "1 {} {} {} {} {}",
        trace.task,
        graph.seed,
        graph.num_nodes,
        graph.directed as u8,
        graph.edges.len()
    )
    .unwrap();
    for &(u, v, w) in &graph.edges {
        write!(out, " {u},{v},{w}").unwrap();
    }
    match trace.source {
        Some(s) => write!(out, " {s}").unwrap(),
        None => out.push_str(" -"),
    }
    write!(out, " {}", trace.steps.len()).unwrap();
    for row in &trace.steps {
        for &label in row {
            write!(out, " {label}").unwrap();
        }
    }
    out.push('\n');
}

fn parse_header(line: &str) -> Result<(DatasetConfig, String), TraceError> {
    let bad = |m: &str| TraceError::Format(format!("header: {m}"));
    let mut fields = line.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err(bad("wrong magic"));
    }
    if fields.next() != Some(VERSION) {
        return Err(bad("unsupported version"));
    }
    let mut task = None;
    let mut nums = std::collections::HashMap::new();
    let mut edge_prob = None;
    let mut checksum = None;
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| bad(&format!("field `{field}` is not key=value")))?;
        match key {
            "task" => {
                task = Some(
                    Algo::from_name(value).ok_or_else(|| bad(&format!("unknown task `{value}`")))?,
                )
            }
            "edge_prob" => {
                edge_prob =
                    Some(value.parse::<f64>().map_err(|_| bad("edge_prob is not a number"))?)
            }
            "sha256" => checksum = Some(value.to_string()),
            _ => {
                let n = value
                    .parse::<u64>()
                    .map_err(|_| bad(&format!("field `{key}` is not an integer")))?;
                nums.insert(key.to_string(), n);
            }
        }
    }
    let num = |k: &str| nums.get(k).copied().ok_or_else(|| bad(&format!("missing `{k}`")));
    let config = DatasetConfig {
        task: task.ok_or_else(|| bad("missing `task`"))?,
        seed: num("seed")?,
        num_train: num("num_train")? as usize,
        num_val: num("num_val")? as usize,
        num_test: num("num_test")? as usize,
        nodes_train: num("nodes_train")? as usize,
        nodes_test: num("nodes_test")? as usize,
        edge_prob: edge_prob.ok_or_else(|| bad("missing `edge_prob`"))?,
    };
    Ok((config, checksum.ok_or_else(|| bad("missing `sha256`"))?))
}

fn parse_record(line: &str, expect_task: Algo) -> Result<(Graph, Trace), String> {
    let mut f = line.split_whitespace();
    let mut next = |what: &str| f.next().ok_or_else(|| format!("missing {what}"));
    if next("version")? != "1" {
        return Err("unsupported record version".into());
    }
    let task = Algo::from_name(next("task")?).ok_or("unknown task")?;
    if task != expect_task {
        return Err("record task differs from header task".into());
    }
    let seed: u64 = next("seed")?.parse().map_err(|_| "bad seed")?;
    let num_nodes: usize = next("num_nodes")?.parse().map_err(|_| "bad num_nodes")?;
    let directed = match next("directed")? {
        "0" => false,
        "1" => true,
        _ => return Err("directed flag must be 0 or 1".into()),
    };
    let num_edges: usize = next("num_edges")?.parse().map_err(|_| "bad num_edges")?;
    let mut edges = Vec::with_capacity(num_edges);
    for _ in 0..num_edges {
        let triple = next("edge")?;
        let mut parts = triple.split(',');
        let u: usize = parts.next().ok_or("edge u")?.parse().map_err(|_| "bad edge u")?;
        let v: usize = parts.next().ok_or("edge v")?.parse().map_err(|_| "bad edge v")?;
        let w: f64 = parts.next().ok_or("edge w")?.parse().map_err(|_| "bad edge w")?;
        if parts.next().is_some() {
            return Err("edge has extra components".into());
        }
        edges.push((u, v, w));
    }
    let graph = Graph::new(num_nodes, edges, directed, seed).map_err(|e| e.to_string())?;
    let source = match next("source")? {
        "-" => None,
        s => Some(s.parse::<usize>().map_err(|_| "bad source")?),
    };
    let num_rows: usize = next("num_rows")?.parse().map_err(|_| "bad num_rows")?;
    if num_rows == 0 {
        return Err("trace needs at least the identity row".into());
    }
    let mut steps = Vec::with_capacity(num_rows);
    for _ in 0..num_rows {
        let mut row = Vec::with_capacity(num_nodes);
        for _ in 0..num_nodes {
            row.push(next("label")?.parse::<u32>().map_err(|_| "bad label")?);
        }
        steps.push(row);
    }
    if f.next().is_some() {
        return Err("trailing fields".into());
    }
    Ok((graph, Trace { task, source, num_nodes, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracegen::make_dataset;

    fn tiny(task: Algo) -> TaskDataset {
        make_dataset(&DatasetConfig {
            num_train: 4,
            num_val: 2,
            num_test: 2,
            ..DatasetConfig::desk(task, 9)
        })
    }

    #[test]
    fn round_trip_all_tasks() {
        let dir = tempfile::tempdir().unwrap();
        for task in Algo::ALL {
            let d = tiny(task);
            let path = dir.path().join(format!("{task}.traces"));
            d.save(&path).unwrap();
            let loaded = TaskDataset::load(&path).unwrap();
            assert_eq!(d, loaded, "{task}");
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny(Algo::Dijkstra);
        let (p1, p2) = (dir.path().join("a"), dir.path().join("b"));
        d.save(&p1).unwrap();
        d.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny(Algo::Bfs);
        let path = dir.path().join("d.traces");
        d.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // Flip the last label of the first record: checksum catches it.
        let lines: Vec<&str> = text.lines().collect();
        let mut records: Vec<String> = lines[1..].iter().map(|s| s.to_string()).collect();
        let cut = records[0].rfind(' ').unwrap();
        let flipped = if &records[0][cut + 1..] == "0" { "1" } else { "0" };
        records[0].replace_range(cut + 1.., flipped);
        let tampered_body = records.join("\n") + "\n";
        let tampered = format!("{}\n{}", lines[0], tampered_body);
        std::fs::write(&path, &tampered).unwrap();
        assert!(matches!(TaskDataset::load(&path), Err(TraceError::Format(_))));

        // Consistent checksum but a label that disagrees with re-execution:
        // the oracle check catches it.
        let header = lines[0];
        let prefix = header.split("sha256=").next().unwrap();
        let fixed_header =
            format!("{prefix}sha256={}", crate::fsio::sha256_hex(tampered_body.as_bytes()));
        std::fs::write(&path, format!("{fixed_header}\n{tampered_body}")).unwrap();
        let err = TaskDataset::load(&path);
        assert!(matches!(err, Err(TraceError::Format(_))), "{err:?}");
    }

    #[test]
    fn full_scale_config_round_trips() {
        let d = make_dataset(&DatasetConfig {
            num_train: 3,
            ..DatasetConfig::full(Algo::Bfs, 4)
        });
        assert!(d.test.iter().all(|(g, _)| g.num_nodes == 64));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("full.traces");
        d.save(&path).unwrap();
        assert_eq!(TaskDataset::load(&path).unwrap(), d);
    }
}
