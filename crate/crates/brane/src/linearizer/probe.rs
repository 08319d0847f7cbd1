//! A deliberately parameter-linear scorer for exercising the linearization
//! diagnostics in the regime where the approximation is exact. Logits are
//! s(u, v) = <x_u, w_v> with fixed pseudo-random inputs x_u, so on two-node
//! graphs each node's margin (true score minus the single competitor) is a
//! linear function of the weights: residuals vanish, the surrogate equals
//! the true objective, and the gap certificate must close to solver
//! precision.

use rand_distr::{Distribution, Normal};

use super::{InstanceSet, LinError, ScoreModel};
use crate::branchnet::GraphCache;
use crate::diffcore::{NodeId, ParamStore, ParamStoreBuilder, Tape};
use crate::rng;
use crate::tracegen::{Algo, Graph, Trace};

const TAG_INIT: u64 = 0x7072_0001;
const TAG_TRACE: u64 = 0x7072_0002;

/// Linear logit model over graphs of one fixed size: one weight row per
/// node slot, `k` features per row.
pub struct LinearScorer {
    name: String,
    num_nodes: usize,
    k: usize,
    store: ParamStore,
}

impl LinearScorer {
    pub fn new(name: &str, num_nodes: usize, k: usize, seed: u64) -> LinearScorer {
        assert!(num_nodes >= 2 && k >= 1);
        let mut builder = ParamStoreBuilder::new();
        builder.block(1, "w", num_nodes, k);
        let mut store = builder.build(seed);
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("valid std");
        let mut r = rng::stream(seed, TAG_INIT);
        for v in store.data_mut() {
            *v = normal.sample(&mut r);
        }
        LinearScorer { name: name.to_string(), num_nodes, k, store }
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Fixed input row for node u given the current label row: hashed to a
    /// deterministic value in [-1, 1) per coordinate.
    fn features(&self, labels: &[u32], u: usize, out: &mut Vec<f64>) {
        let mut key = rng::mix(labels.len() as u64, u as u64);
        for &l in labels {
            key = rng::mix(key, l as u64 + 1);
        }
        for t in 0..self.k {
            let h = rng::mix(key, t as u64);
            out.push(((h >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0);
        }
    }
}

impl ScoreModel for LinearScorer {
    fn base_store(&self) -> &ParamStore {
        &self.store
    }

    fn resolve_task(&self, name: &str) -> Result<usize, LinError> {
        if name == self.name {
            Ok(0)
        } else {
            Err(LinError::UnknownTask(name.to_string()))
        }
    }

    fn logits_on_tape(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        cache: &GraphCache,
        task: usize,
        labels: &[u32],
        _source: Option<usize>,
    ) -> Result<NodeId, LinError> {
        if task != 0 {
            return Err(LinError::UnknownTask(format!("index {task}")));
        }
        let n = cache.num_nodes;
        assert_eq!(n, self.num_nodes, "probe graphs have one fixed size");
        assert_eq!(labels.len(), n);
        let mut xdata = Vec::with_capacity(n * self.k);
        for u in 0..n {
            self.features(labels, u, &mut xdata);
        }
        let x = tape.input(&xdata, n, self.k)?;
        let w = tape.param(store, store.find("w").expect("weight block"));
        Ok(tape.linear(x, w, None)?)
    }
}

/// `count` seeded probe instances on a path graph of `num_nodes` nodes, two
/// transitions each with uniformly random label rows. Task name must match
/// the scorer the set will be used with.
pub fn probe_instances(
    name: &str,
    num_nodes: usize,
    count: usize,
    seed: u64,
) -> InstanceSet {
    assert!(num_nodes >= 2 && count >= 1);
    let edges: Vec<(usize, usize, f64)> =
        (0..num_nodes - 1).map(|u| (u, u + 1, 1.0)).collect();
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let graph = Graph::new(num_nodes, edges.clone(), false, seed)
            .expect("path graph is valid");
        let mut r = rng::stream(seed, rng::mix(TAG_TRACE, i as u64));
        let mut steps = vec![(0..num_nodes as u32).collect::<Vec<u32>>()];
        for _ in 0..2 {
            steps.push(
                (0..num_nodes)
                    .map(|_| rand::Rng::gen_range(&mut r, 0..num_nodes as u32))
                    .collect(),
            );
        }
        let trace = Trace { task: Algo::Bfs, source: None, num_nodes, steps };
        items.push((graph, trace));
    }
    InstanceSet::from_single_task(name, items).expect("probe instances are non-empty")
}

#[cfg(test)]
mod tests {
    use super::super::{extract_features, node_margins, Projection};
    use super::*;

    #[test]
    fn probe_logits_are_linear_in_parameters() {
        let scorer = LinearScorer::new("probe", 2, 4, 9);
        let set = probe_instances("probe", 2, 1, 5);
        let (_, graphs) = set.task(0);
        let (cache, trace) = &graphs[0];

        let eval = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let out = scorer
                .logits_on_tape(store, &mut tape, cache, 0, &trace.steps[0], None)
                .unwrap();
            tape.value(out).to_vec()
        };
        let w0 = scorer.base_store().clone();
        let mut w1 = w0.clone();
        let mut w2 = w0.clone();
        for (i, v) in w1.data_mut().iter_mut().enumerate() {
            *v += 0.01 * (i as f64 + 1.0);
        }
        // Midpoint of parameters gives the midpoint of logits: linearity.
        for (a, b) in w2.data_mut().iter_mut().zip(w1.data()) {
            *a = (*a + b) / 2.0;
        }
        let (l0, l1, lm) = (eval(&w0), eval(&w1), eval(&w2));
        for i in 0..l0.len() {
            assert!((lm[i] - (l0[i] + l1[i]) / 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_node_margins_are_exactly_linear() {
        // margin = s_true - s_other on two-node graphs, so margins displaced
        // by delta must equal base + <g, delta> to rounding.
        let scorer = LinearScorer::new("probe", 2, 6, 3);
        let set = probe_instances("probe", 2, 3, 11);
        let p = scorer.num_params();
        let fs = extract_features(
            &scorer,
            scorer.base_store(),
            &set,
            1,
            &Projection::identity(p),
        )
        .unwrap();

        let mut displaced = scorer.base_store().clone();
        let mut r = crate::rng::from_seed(41);
        for v in displaced.data_mut() {
            *v += rand::Rng::gen_range(&mut r, -0.5..0.5);
        }
        let delta: Vec<f64> = displaced
            .data()
            .iter()
            .zip(scorer.base_store().data())
            .map(|(a, b)| a - b)
            .collect();

        let mut row = 0;
        for (cache, trace) in set.task(0).1 {
            let n = cache.num_nodes;
            for j in 0..trace.steps.len() - 1 {
                let mut tape = Tape::new();
                let out = scorer
                    .logits_on_tape(&displaced, &mut tape, cache, 0, &trace.steps[j], None)
                    .unwrap();
                let mut margins = Vec::new();
                node_margins(tape.value(out), &trace.steps[j + 1], n, &mut margins);
                for u in 0..n {
                    let lin = fs.base(row) + super::super::dot(fs.feat(row), &delta);
                    assert!(
                        (margins[u] - lin).abs() <= 1e-12,
                        "row {row}: {} vs {lin}",
                        margins[u]
                    );
                    row += 1;
                }
            }
        }
    }

    #[test]
    fn probe_rejects_foreign_task_names() {
        let scorer = LinearScorer::new("probe", 2, 4, 9);
        assert!(matches!(
            scorer.resolve_task("bfs"),
            Err(LinError::UnknownTask(_))
        ));
        assert_eq!(scorer.resolve_task("probe").unwrap(), 0);
    }
}
