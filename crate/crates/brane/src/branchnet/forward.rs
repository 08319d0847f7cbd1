//! One prediction step: node features -> encoder -> routed processor layers
//! -> per-task bilinear decoder. The output is an n x n logit matrix; row u
//! scores every node v as u's next predecessor pointer.

use crate::branchnet::{BranchError, BranchingModel};
use crate::diffcore::{NodeId, ParamStore, Tape};
use crate::tracegen::Graph;

/// Message-passing layout for one graph, reusable across steps and layers:
/// messages are sorted by destination, so per-node aggregation segments are
/// contiguous.
#[derive(Debug, Clone)]
pub struct GraphCache {
    pub num_nodes: usize,
    /// Source node of each directed message.
    msg_src: Vec<u32>,
    /// Destination node of each directed message.
    msg_dst: Vec<u32>,
    /// Edge weight per message.
    msg_w: Vec<f64>,
    /// CSR over destinations: messages for node v are seg_ptr[v]..seg_ptr[v+1].
    seg_ptr: Vec<u32>,
    seg_idx: Vec<u32>,
    /// In-degree / n per node.
    norm_deg: Vec<f64>,
}

impl GraphCache {
    pub fn new(graph: &Graph) -> GraphCache {
        let n = graph.num_nodes;
        let adj = graph.in_adjacency();
        let mut msg_src = Vec::new();
        let mut msg_dst = Vec::new();
        let mut msg_w = Vec::new();
        let mut seg_ptr = Vec::with_capacity(n + 1);
        seg_ptr.push(0);
        for (v, list) in adj.iter().enumerate() {
            for &(u, w) in list {
                msg_src.push(u as u32);
                msg_dst.push(v as u32);
                msg_w.push(w);
            }
            seg_ptr.push(msg_src.len() as u32);
        }
        let seg_idx: Vec<u32> = (0..msg_src.len() as u32).collect();
        let norm_deg: Vec<f64> = adj.iter().map(|l| l.len() as f64 / n as f64).collect();
        GraphCache { num_nodes: n, msg_src, msg_dst, msg_w, seg_ptr, seg_idx, norm_deg }
    }
}

impl BranchingModel {
    /// Records the full prediction step for `task` on `tape` and returns the
    /// logits node (shape n x n). `labels` is the current predecessor row;
    /// `source` marks the algorithm's start node when it has one. `id_map`,
    /// when given, relabels node ids into the embedding table (used for
    /// augmentation); it must be injective into `0..max_nodes`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        cache: &GraphCache,
        task: usize,
        labels: &[u32],
        source: Option<usize>,
        id_map: Option<&[u32]>,
    ) -> Result<NodeId, BranchError> {
        self.forward_with_store(self.store(), tape, cache, task, labels, source, id_map)
    }

    /// Same as [`forward_on_tape`](Self::forward_on_tape) but reads weights
    /// from `store` instead of the model's own checkpoint. `store` must share
    /// this model's block layout (a clone of its store, possibly with edited
    /// values); linearization diagnostics use this to score displaced
    /// parameter vectors without mutating the model.
    pub fn forward_with_store(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        cache: &GraphCache,
        task: usize,
        labels: &[u32],
        source: Option<usize>,
        id_map: Option<&[u32]>,
    ) -> Result<NodeId, BranchError> {
        if task >= self.task_names().len() {
            return Err(BranchError::UnknownTask(format!("index {task}")));
        }
        let n = cache.num_nodes;
        assert_eq!(labels.len(), n, "label row width");
        debug_assert_eq!(store.len(), self.store().len(), "store layout mismatch");

        let embed = |u: u32| -> u32 {
            match id_map {
                Some(map) => map[u as usize],
                None => u,
            }
        };

        // Raw features: [is_source, is_self_pointer, normalized degree].
        let mut raw = Vec::with_capacity(n * 3);
        let mut ptr_ids = Vec::with_capacity(n);
        let mut own_ids = Vec::with_capacity(n);
        for u in 0..n {
            raw.push(if source == Some(u) { 1.0 } else { 0.0 });
            raw.push(if labels[u] as usize == u { 1.0 } else { 0.0 });
            raw.push(cache.norm_deg[u]);
            ptr_ids.push(embed(labels[u]));
            own_ids.push(embed(u as u32));
        }

        let emb = tape.param(store, store.find("emb").expect("emb block"));
        let enc_w = tape.param(store, store.find("enc.w").expect("enc.w block"));
        let enc_b = tape.param(store, store.find("enc.b").expect("enc.b block"));

        let raw_in = tape.input(&raw, n, 3)?;
        let ptr_emb = tape.gather_rows(emb, &ptr_ids)?;
        let own_emb = tape.gather_rows(emb, &own_ids)?;
        let feats = tape.concat_cols(&[raw_in, ptr_emb, own_emb])?;
        let enc = tape.linear(feats, enc_w, Some(enc_b))?;
        let mut hcur = tape.relu(enc);

        for node_id in self.routing(task) {
            let find = |suffix: &str| {
                let name = format!("proc.n{node_id:04}.{suffix}");
                store.find(&name).expect("processor block")
            };
            let msg_w = tape.param(store, find("msg_w"));
            let msg_b = tape.param(store, find("msg_b"));
            let upd_w = tape.param(store, find("upd_w"));
            let upd_b = tape.param(store, find("upd_b"));

            let h_src = tape.gather_rows(hcur, &cache.msg_src)?;
            let h_dst = tape.gather_rows(hcur, &cache.msg_dst)?;
            let w_col = tape.input(&cache.msg_w, cache.msg_w.len(), 1)?;
            let msg_in = tape.concat_cols(&[h_src, h_dst, w_col])?;
            let msg_lin = tape.linear(msg_in, msg_w, Some(msg_b))?;
            let msg = tape.relu(msg_lin);
            let agg = tape.segment_max(msg, &cache.seg_ptr, &cache.seg_idx)?;

            let upd_in = tape.concat_cols(&[hcur, agg])?;
            let upd_lin = tape.linear(upd_in, upd_w, Some(upd_b))?;
            let upd = tape.relu(upd_lin);
            hcur = tape.add(upd, hcur)?;
        }

        let dec_name = format!("dec.{}", self.task_names()[task]);
        let dec = tape.param(store, store.find(&dec_name).expect("decoder block"));
        let mixed = tape.linear(hcur, dec, None)?;
        let logits = tape.matmul_nt(mixed, hcur)?;
        Ok(logits)
    }

    /// Convenience wrapper that returns the logit values (row-major n x n).
    pub fn forward_step(
        &self,
        graph: &Graph,
        task_name: &str,
        labels: &[u32],
        source: Option<usize>,
    ) -> Result<Vec<f64>, BranchError> {
        let task = self.task_index(task_name)?;
        let cache = GraphCache::new(graph);
        let mut tape = Tape::new();
        let logits = self.forward_on_tape(&mut tape, &cache, task, labels, source, None)?;
        Ok(tape.value(logits).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracegen::toy_graph;
    use rand::Rng;

    fn model() -> BranchingModel {
        BranchingModel::new_chain(&["bfs", "dfs"], 3, 8, 12, 5)
    }

    #[test]
    fn logits_have_full_pair_shape() {
        let m = model();
        let g = toy_graph();
        let labels = [0u32, 0, 0, 3, 4];
        let logits = m.forward_step(&g, "bfs", &labels, Some(0)).unwrap();
        assert_eq!(logits.len(), 25);
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_node_graph_softmax_is_one() {
        let m = model();
        let g = Graph::new(1, vec![], false, 0).unwrap();
        let logits = m.forward_step(&g, "bfs", &[0], Some(0)).unwrap();
        assert_eq!(logits.len(), 1);
        // One candidate: softmax over the single logit is exactly 1.
        let p = (logits[0] - logits[0]).exp();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn tasks_routed_through_identical_modules_agree() {
        // Freshly built chain: both tasks share every processor node, and
        // the decoders are seeded per name, so force them equal first.
        let mut m = model();
        let bfs_dec = m.store().slice(m.store().find("dec.bfs").unwrap()).to_vec();
        let dfs_id = m.store().find("dec.dfs").unwrap();
        m.store_mut().slice_mut(dfs_id).copy_from_slice(&bfs_dec);
        let g = toy_graph();
        let labels = [0u32, 1, 0, 3, 4];
        let a = m.forward_step(&g, "bfs", &labels, Some(0)).unwrap();
        let b = m.forward_step(&g, "dfs", &labels, Some(0)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unknown_task_is_rejected() {
        let m = model();
        let g = toy_graph();
        assert!(matches!(
            m.forward_step(&g, "prim", &[0, 1, 2, 3, 4], Some(0)),
            Err(BranchError::UnknownTask(_))
        ));
    }

    #[test]
    fn split_is_forward_neutral() {
        let mut m = BranchingModel::new_chain(&["bfs", "dfs", "prim"], 3, 8, 12, 9);
        let mut rng = crate::rng::from_seed(3);
        for v in m.store_mut().data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let g = toy_graph();
        let labels = [0u32, 0, 2, 1, 4];
        let before: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                let name = m.task_names()[t].clone();
                m.forward_step(&g, &name, &labels, Some(0)).unwrap()
            })
            .collect();
        m.split_node(1, &[vec![0, 2], vec![1]]).unwrap();
        for t in 0..3 {
            let name = m.task_names()[t].clone();
            let after = m.forward_step(&g, &name, &labels, Some(0)).unwrap();
            assert!(
                before[t].iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()),
                "task {t} changed after split"
            );
        }
    }

    #[test]
    fn permuting_ids_permutes_logits() {
        // Relabel nodes by a permutation sigma and permute the embedding
        // table rows to match; logits must permute accordingly. This checks
        // that everything else in the pipeline is equivariant.
        let m = model();
        let g = toy_graph();
        let labels = [0u32, 0, 0, 1, 1];
        let base = m.forward_step(&g, "bfs", &labels, Some(0)).unwrap();

        let sigma: [usize; 5] = [3, 0, 4, 2, 1];
        let n = 5;
        // Relabeled graph: edge (u, v) -> (sigma u, sigma v).
        let mut edges = Vec::new();
        for &(u, v, w) in &g.edges {
            let (a, b) = (sigma[u], sigma[v]);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            edges.push((a, b, w));
        }
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let gp = Graph::new(n, edges, false, g.seed).unwrap();
        let mut labels_p = vec![0u32; n];
        for u in 0..n {
            labels_p[sigma[u]] = sigma[labels[u] as usize] as u32;
        }

        // Permute embedding rows: new table row sigma(u) = old row u.
        let mut mp = model();
        let emb_id = mp.store().find("emb").unwrap();
        let h = mp.hidden;
        let old = mp.store().slice(emb_id).to_vec();
        {
            let table = mp.store_mut().slice_mut(emb_id);
            for u in 0..n {
                table[sigma[u] * h..(sigma[u] + 1) * h].copy_from_slice(&old[u * h..(u + 1) * h]);
            }
        }
        let permuted = mp.forward_step(&gp, "bfs", &labels_p, Some(sigma[0])).unwrap();
        for u in 0..n {
            for v in 0..n {
                let got = permuted[sigma[u] * n + sigma[v]];
                let want = base[u * n + v];
                assert!(
                    (got - want).abs() <= 1e-9,
                    "logit ({u},{v}): {want} vs permuted {got}"
                );
            }
        }
    }

    #[test]
    fn id_map_changes_only_embedding_lookups() {
        let m = model();
        let g = toy_graph();
        let labels = [0u32, 0, 2, 3, 4];
        let cache = GraphCache::new(&g);
        let mut tape = Tape::new();
        let identity: Vec<u32> = (0..5).collect();
        let out1 = m
            .forward_on_tape(&mut tape, &cache, 0, &labels, Some(0), Some(&identity))
            .unwrap();
        let v1 = tape.value(out1).to_vec();
        let mut tape2 = Tape::new();
        let out2 = m.forward_on_tape(&mut tape2, &cache, 0, &labels, Some(0), None).unwrap();
        assert_eq!(v1, tape2.value(out2).to_vec());

        let shifted: Vec<u32> = (0..5).map(|u| u + 7).collect();
        let mut tape3 = Tape::new();
        let out3 = m
            .forward_on_tape(&mut tape3, &cache, 0, &labels, Some(0), Some(&shifted))
            .unwrap();
        assert_ne!(v1, tape3.value(out3).to_vec());
    }
}
