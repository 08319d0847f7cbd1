//! Diagnostics that measure how far the linearization drifts from the true
//! model, plus the retraining oracle the estimates are audited against:
//! per-step residual ratios bucketed by displacement size, flat row losses
//! at arbitrary checkpoints, suffix fine-tuning (minibatch or exact
//! full-batch), and the optimality-gap certificate for the sketched
//! surrogate.

use rand::seq::SliceRandom;

use super::lbfgs;
use super::{
    dot, extract_features, fit_surrogate, l2, log1p_exp_neg, margin_seed, node_margins,
    InstanceSet, LinError, Projection, ScoreModel, TAG_ORACLE, TAG_SAMPLE,
};
use crate::diffcore::{Adam, ParamStore, Tape};
use crate::rng;

/// Additive slack on the gap certificate, absorbing solver tolerances.
pub const PROP1_SLACK: f64 = 1e-6;

/// Rows sampled when measuring the sketch's gradient-capture error.
const EPS_SAMPLE_CAP: usize = 256;

/// Flat-mean loss of one task over its (graph, step, node) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    pub name: String,
    pub loss: f64,
    pub rows: usize,
}

/// Per-task flat-mean cross-entropy at `store`, computed through the margin
/// identity: each row contributes log(1 + exp(-margin)).
pub fn instances_loss<M: ScoreModel>(
    model: &M,
    store: &ParamStore,
    set: &InstanceSet,
) -> Result<Vec<TaskLoss>, LinError> {
    let mut out = Vec::with_capacity(set.num_tasks());
    let mut tape = Tape::new();
    let mut margins = Vec::new();
    for ti in 0..set.num_tasks() {
        let (name, graphs) = set.task(ti);
        let task = model.resolve_task(name)?;
        let mut sum = 0.0;
        let mut rows = 0usize;
        for (cache, trace) in graphs {
            let n = cache.num_nodes;
            for j in 0..trace.steps.len() - 1 {
                tape.reset();
                let out_node =
                    model.logits_on_tape(store, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                node_margins(tape.value(out_node), &trace.steps[j + 1], n, &mut margins);
                for &m in &margins {
                    sum += log1p_exp_neg(m);
                }
                rows += n;
            }
        }
        out.push(TaskLoss { name: name.to_string(), loss: sum / rows as f64, rows });
    }
    Ok(out)
}

/// Flat-mean cross-entropy over every row of the whole set at `store`.
pub fn flat_loss<M: ScoreModel>(
    model: &M,
    store: &ParamStore,
    set: &InstanceSet,
) -> Result<(f64, usize), LinError> {
    let per_task = instances_loss(model, store, set)?;
    let rows: usize = per_task.iter().map(|t| t.rows).sum();
    let sum: f64 = per_task.iter().map(|t| t.loss * t.rows as f64).sum();
    Ok((sum / rows as f64, rows))
}

struct LinResiduals {
    /// Sum over steps of |f_w - f_w0 - G delta|^2 / |f_w|^2.
    rss_sum: f64,
    /// Steps with a nonzero denominator.
    steps: usize,
    /// Sum over rows of the absolute residual.
    abs_sum: f64,
    rows: usize,
}

/// Walks every instance once, comparing true margins at `w` against the
/// first-order prediction from `w0`: margins(w0) plus gradient times the
/// suffix displacement.
fn linearization_residuals<M: ScoreModel>(
    model: &M,
    w: &ParamStore,
    w0: &ParamStore,
    set: &InstanceSet,
    l: usize,
) -> Result<LinResiduals, LinError> {
    let off = w0.suffix_offset(l)?;
    let delta: Vec<f64> =
        w.data()[off..].iter().zip(&w0.data()[off..]).map(|(a, b)| a - b).collect();
    let mut tape = Tape::new();
    let mut grad = vec![0.0; w0.len()];
    let mut seed = Vec::new();
    let mut m_w = Vec::new();
    let mut m_0 = Vec::new();
    let mut res = LinResiduals { rss_sum: 0.0, steps: 0, abs_sum: 0.0, rows: 0 };

    for ti in 0..set.num_tasks() {
        let (name, graphs) = set.task(ti);
        let task = model.resolve_task(name)?;
        for (cache, trace) in graphs {
            let n = cache.num_nodes;
            for j in 0..trace.steps.len() - 1 {
                let targets = &trace.steps[j + 1];
                tape.reset();
                let out =
                    model.logits_on_tape(w, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                node_margins(tape.value(out), targets, n, &mut m_w);

                tape.reset();
                let out =
                    model.logits_on_tape(w0, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                let logits = tape.value(out).to_vec();
                node_margins(&logits, targets, n, &mut m_0);

                let mut num = 0.0;
                let mut den = 0.0;
                for u in 0..n {
                    margin_seed(&logits, u, targets[u] as usize, n, &mut seed);
                    for g in &mut grad {
                        *g = 0.0;
                    }
                    tape.backward_seeded(out, &seed, &mut grad)?;
                    let lin = dot(&grad[off..], &delta);
                    let r = m_w[u] - m_0[u] - lin;
                    num += r * r;
                    den += m_w[u] * m_w[u];
                    res.abs_sum += r.abs();
                }
                res.rows += n;
                if den > 0.0 {
                    res.rss_sum += num / den;
                    res.steps += 1;
                }
            }
        }
    }
    Ok(res)
}

/// One measured fidelity point: how far `w` sits from `w0` (relative to the
/// suffix norm) and the mean per-step residual ratio there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssSample {
    pub rel_dist: f64,
    pub rss: f64,
    pub steps: usize,
}

/// Mean over steps of |f_w - f_w0 - G (w - w0)|^2 / |f_w|^2, with f the
/// per-node margin vector of a step and G its gradient at `w0` over the
/// layer-l..L suffix. Both checkpoints must agree on the frozen prefix;
/// norms (including the relative distance) are over the suffix, the
/// coordinates the linearization actually varies.
pub fn measure_rss<M: ScoreModel>(
    model: &M,
    w: &ParamStore,
    w0: &ParamStore,
    set: &InstanceSet,
    l: usize,
) -> Result<RssSample, LinError> {
    let off = w0.suffix_offset(l)?;
    assert_eq!(w.len(), w0.len(), "checkpoint sizes differ");
    assert!(
        w.data()[..off] == w0.data()[..off],
        "checkpoints disagree below layer {l}; the linearization only covers the suffix"
    );
    let res = linearization_residuals(model, w, w0, set, l)?;
    if res.steps == 0 {
        return Err(LinError::EmptyInstances("every step had zero score norm".into()));
    }
    let dnorm = l2(&w
        .data()[off..]
        .iter()
        .zip(&w0.data()[off..])
        .map(|(a, b)| a - b)
        .collect::<Vec<f64>>());
    let wnorm = l2(&w.data()[off..]);
    let rel_dist = if wnorm > 0.0 {
        dnorm / wnorm
    } else if dnorm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(RssSample { rel_dist, rss: res.rss_sum / res.steps as f64, steps: res.steps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RssBucket {
    pub lo: f64,
    pub hi: f64,
    /// NaN when the bucket is empty.
    pub mean_rss: f64,
    pub samples: usize,
}

/// Groups fidelity samples by relative distance: bucket i covers
/// (edges[i-1], edges[i]] from zero, plus a final overflow bucket so no
/// sample is dropped.
pub fn bucket_rss(samples: &[RssSample], edges: &[f64]) -> Vec<RssBucket> {
    assert!(!edges.is_empty(), "need at least one bucket edge");
    assert!(
        edges.windows(2).all(|w| w[0] < w[1]) && edges.iter().all(|&e| e > 0.0 && e.is_finite()),
        "edges must be ascending, positive, finite"
    );
    let mut bounds: Vec<(f64, f64)> = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0.0;
    for &e in edges {
        bounds.push((lo, e));
        lo = e;
    }
    bounds.push((lo, f64::INFINITY));
    let mut sums = vec![0.0; bounds.len()];
    let mut counts = vec![0usize; bounds.len()];
    for s in samples {
        let idx = bounds
            .iter()
            .position(|&(_, hi)| s.rel_dist <= hi)
            .expect("infinite overflow bucket catches everything");
        sums[idx] += s.rss;
        counts[idx] += 1;
    }
    bounds
        .iter()
        .zip(sums.iter().zip(&counts))
        .map(|(&(lo, hi), (&sum, &c))| RssBucket {
            lo,
            hi,
            mean_rss: if c > 0 { sum / c as f64 } else { f64::NAN },
            samples: c,
        })
        .collect()
}

/// Rescales `w`'s suffix displacement from `w0` so that the returned
/// checkpoint sits at `target_rel` relative distance (displacement norm over
/// displaced-suffix norm, the measure [`measure_rss`] reports). A zero
/// displacement is returned unchanged.
pub fn scale_displacement(
    w0: &ParamStore,
    w: &ParamStore,
    l: usize,
    target_rel: f64,
) -> Result<ParamStore, LinError> {
    assert!(target_rel.is_finite() && target_rel >= 0.0);
    let off = w0.suffix_offset(l)?;
    assert_eq!(w.len(), w0.len(), "checkpoint sizes differ");
    assert!(w.data()[..off] == w0.data()[..off], "checkpoints disagree below layer {l}");
    let base = &w0.data()[off..];
    let delta: Vec<f64> =
        w.data()[off..].iter().zip(base).map(|(a, b)| a - b).collect();
    let dnorm = l2(&delta);
    let mut out = w0.clone();
    if dnorm == 0.0 || target_rel == 0.0 {
        return Ok(out);
    }
    let mut c = target_rel * l2(base) / dnorm;
    for _ in 0..8 {
        let mut norm2 = 0.0;
        for (b, d) in base.iter().zip(&delta) {
            let v = c.mul_add(*d, *b);
            norm2 = v.mul_add(v, norm2);
        }
        if norm2 == 0.0 {
            break;
        }
        c = target_rel * norm2.sqrt() / dnorm;
    }
    for (slot, d) in out.data_mut()[off..].iter_mut().zip(&delta) {
        *slot = c.mul_add(*d, *slot);
    }
    Ok(out)
}

/// Minibatch fine-tuning settings for the retraining oracle.
#[derive(Debug, Clone)]
pub struct OracleOpt {
    pub epochs: usize,
    pub lr: f64,
    /// (graph, step) instances per optimizer step.
    pub batch: usize,
    /// Ridge on the displacement from the starting checkpoint; 0 disables.
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for OracleOpt {
    fn default() -> OracleOpt {
        OracleOpt { epochs: 40, lr: 5e-3, batch: 8, lambda2: 0.0, seed: 0 }
    }
}

/// Sum of per-row cross-entropies of an n x n logit matrix; writes the
/// row_w-scaled adjoint (softmax minus one-hot) for every row into `seed`.
fn flat_ce_rows(logits: &[f64], targets: &[u32], row_w: f64, seed: &mut Vec<f64>) -> f64 {
    let n = targets.len();
    seed.clear();
    seed.resize(n * n, 0.0);
    let mut sum = 0.0;
    for u in 0..n {
        let row = &logits[u * n..(u + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &s in row {
            z += (s - max).exp();
        }
        let target = targets[u] as usize;
        sum += z.ln() + max - row[target];
        for v in 0..n {
            let p = (row[v] - max).exp() / z;
            seed[u * n + v] = row_w * (p - if v == target { 1.0 } else { 0.0 });
        }
    }
    sum
}

/// The retraining oracle: actually fine-tunes the layer-l..L suffix on the
/// set's rows (flat row weighting, matching the surrogate objective) with
/// Adam, leaving everything below layer l bit-identical. Returns the tuned
/// checkpoint; `base` itself is untouched.
pub fn retrain_suffix<M: ScoreModel>(
    model: &M,
    base: &ParamStore,
    set: &InstanceSet,
    l: usize,
    opt: &OracleOpt,
) -> Result<ParamStore, LinError> {
    assert!(opt.epochs >= 1 && opt.batch >= 1);
    let off = base.suffix_offset(l)?;
    let mut store = base.clone();
    let mut adam = Adam::new(opt.lr, store.len());
    let mut grad = vec![0.0; store.len()];
    let mut seed = Vec::new();
    let mut tape = Tape::new();

    let mut instances = Vec::new();
    for ti in 0..set.num_tasks() {
        let (name, graphs) = set.task(ti);
        let task = model.resolve_task(name)?;
        for (gi, (_, trace)) in graphs.iter().enumerate() {
            for j in 0..trace.steps.len() - 1 {
                instances.push((task, ti, gi, j));
            }
        }
    }

    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut r = rng::stream(opt.seed, rng::mix(TAG_ORACLE, epoch as u64));
        order.shuffle(&mut r);
        for chunk in order.chunks(opt.batch) {
            for g in &mut grad {
                *g = 0.0;
            }
            let rows: usize = chunk
                .iter()
                .map(|&i| set.task(instances[i].1).1[instances[i].2].0.num_nodes)
                .sum();
            let row_w = 1.0 / rows as f64;
            for &i in chunk {
                let (task, ti, gi, j) = instances[i];
                let (cache, trace) = &set.task(ti).1[gi];
                tape.reset();
                let out =
                    model.logits_on_tape(&store, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                flat_ce_rows(tape.value(out), &trace.steps[j + 1], row_w, &mut seed);
                tape.backward_seeded(out, &seed, &mut grad)?;
            }
            if opt.lambda2 > 0.0 {
                for t in off..store.len() {
                    grad[t] += 2.0 * opt.lambda2 * (store.data()[t] - base.data()[t]);
                }
            }
            for g in &mut grad[..off] {
                *g = 0.0;
            }
            adam.step(&mut store, &grad);
        }
    }
    Ok(store)
}

/// Full-batch exact retraining of the suffix to gradient tolerance: the
/// flat-mean cross-entropy plus a ridge on the displacement, minimized with
/// the same quasi-second-order solver the surrogate uses. Intended for
/// small models where the certificate needs solver-precision optima.
pub fn retrain_suffix_exact<M: ScoreModel>(
    model: &M,
    base: &ParamStore,
    set: &InstanceSet,
    l: usize,
    lambda2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<ParamStore, LinError> {
    let off = base.suffix_offset(l)?;
    let x0 = base.data()[off..].to_vec();
    let base_suffix = x0.clone();
    let mut resolved = Vec::with_capacity(set.num_tasks());
    for ti in 0..set.num_tasks() {
        resolved.push(model.resolve_task(set.task(ti).0)?);
    }
    let total_rows = set.num_rows();
    assert!(total_rows > 0);
    let inv = 1.0 / total_rows as f64;

    let mut scratch = base.clone();
    let mut tape = Tape::new();
    let mut grad_full = vec![0.0; base.len()];
    let mut seed = Vec::new();
    let mut failure: Option<LinError> = None;

    let res = lbfgs::minimize(x0, tol, max_iter, |x, grad| {
        scratch.data_mut()[off..].copy_from_slice(x);
        for g in &mut grad_full {
            *g = 0.0;
        }
        let mut loss_sum = 0.0;
        'outer: for ti in 0..set.num_tasks() {
            let (_, graphs) = set.task(ti);
            for (cache, trace) in graphs {
                for j in 0..trace.steps.len() - 1 {
                    tape.reset();
                    let out = match model.logits_on_tape(
                        &scratch,
                        &mut tape,
                        cache,
                        resolved[ti],
                        &trace.steps[j],
                        trace.source,
                    ) {
                        Ok(o) => o,
                        Err(e) => {
                            failure = Some(e);
                            break 'outer;
                        }
                    };
                    loss_sum += flat_ce_rows(tape.value(out), &trace.steps[j + 1], inv, &mut seed);
                    if let Err(e) = tape.backward_seeded(out, &seed, &mut grad_full) {
                        failure = Some(e.into());
                        break 'outer;
                    }
                }
            }
        }
        if failure.is_some() {
            return f64::INFINITY;
        }
        let mut obj = loss_sum * inv;
        for (k, slot) in grad.iter_mut().enumerate() {
            let dx = x[k] - base_suffix[k];
            obj += lambda2 * dx * dx;
            *slot = grad_full[off + k] + 2.0 * lambda2 * dx;
        }
        obj
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !res.converged {
        return Err(LinError::NonConvergence {
            iterations: res.iterations,
            grad_norm: res.grad_norm,
        });
    }
    scratch.data_mut()[off..].copy_from_slice(&res.x);
    Ok(scratch)
}

/// How the gap certificate finds its reference optimum.
#[derive(Debug, Clone)]
pub enum OracleMode {
    /// Minibatch fine-tuning of the real parameters (desk scale). The
    /// certificate overrides the opt's ridge with its own, so both sides
    /// minimize the same objective.
    Adam(OracleOpt),
    /// Full-batch minimization to `tol` (small models).
    Exact { tol: f64, max_iter: usize },
}

/// Everything the gap certificate measured. The claim it checks:
/// true loss at the materialized sketched optimum exceeds the retrained
/// optimum's loss by at most 2 delta + 2 G R eps (plus solver slack), with
/// every quantity measured, not assumed.
#[derive(Debug, Clone)]
pub struct Prop1Report {
    /// Flat cross-entropy at w0 + P w_d, the materialized sketched optimum.
    pub sketched_loss: f64,
    /// Flat cross-entropy at the retrained checkpoint.
    pub oracle_loss: f64,
    pub gap: f64,
    /// Largest unsketched row-gradient norm.
    pub g_max: f64,
    /// Largest displacement radius actually used by either side.
    pub radius: f64,
    /// Mean absolute per-row linearization residual, the larger of the two
    /// evaluated checkpoints.
    pub delta_hat: f64,
    /// Largest sampled relative gradient loss under the sketch,
    /// |g - P P^T g| / |g|; exactly 0 for the identity hook.
    pub eps_hat: f64,
    /// 2 delta_hat + 2 g_max radius eps_hat.
    pub bound: f64,
    /// gap <= bound + PROP1_SLACK.
    pub holds: bool,
    pub rows: usize,
    pub d: usize,
    pub p: usize,
}

/// Largest relative gradient residual under the sketch over sampled rows.
fn projection_epsilon<M: ScoreModel>(
    model: &M,
    w0: &ParamStore,
    set: &InstanceSet,
    l: usize,
    proj: &Projection,
    cap: usize,
) -> Result<f64, LinError> {
    if proj.is_identity() {
        return Ok(0.0);
    }
    let off = w0.suffix_offset(l)?;
    let total = set.num_rows();
    let take = cap.min(total);
    let mut mask = vec![false; total];
    let mut r = rng::stream(proj.seed(), TAG_SAMPLE);
    for i in rand::seq::index::sample(&mut r, total, take) {
        mask[i] = true;
    }

    let mut tape = Tape::new();
    let mut grad = vec![0.0; w0.len()];
    let mut seed = Vec::new();
    let mut sketched = vec![0.0; proj.d()];
    let mut eps = 0.0f64;
    let mut row = 0usize;
    for ti in 0..set.num_tasks() {
        let (name, graphs) = set.task(ti);
        let task = model.resolve_task(name)?;
        for (cache, trace) in graphs {
            let n = cache.num_nodes;
            for j in 0..trace.steps.len() - 1 {
                if !mask[row..row + n].iter().any(|&m| m) {
                    row += n;
                    continue;
                }
                tape.reset();
                let out =
                    model.logits_on_tape(w0, &mut tape, cache, task, &trace.steps[j], trace.source)?;
                let logits = tape.value(out).to_vec();
                let targets = &trace.steps[j + 1];
                for u in 0..n {
                    if !mask[row] {
                        row += 1;
                        continue;
                    }
                    margin_seed(&logits, u, targets[u] as usize, n, &mut seed);
                    for g in &mut grad {
                        *g = 0.0;
                    }
                    tape.backward_seeded(out, &seed, &mut grad)?;
                    let g = &grad[off..];
                    let gnorm = l2(g);
                    if gnorm > 0.0 {
                        proj.project(g, &mut sketched);
                        let back = proj.expand(&sketched);
                        let mut res2 = 0.0;
                        for (gv, bv) in g.iter().zip(&back) {
                            let rdiff = gv - bv;
                            res2 = rdiff.mul_add(rdiff, res2);
                        }
                        eps = eps.max(res2.sqrt() / gnorm);
                    }
                    row += 1;
                }
            }
        }
    }
    Ok(eps)
}

/// Runs the full certificate: extract features at `w0`, fit the sketched
/// surrogate on every row, materialize its optimum, retrain for the
/// reference optimum, and check the measured gap against the measured
/// bound. The same ridge weight applies to both fits so their objectives
/// coincide.
pub fn verify_prop1<M: ScoreModel>(
    model: &M,
    w0: &ParamStore,
    set: &InstanceSet,
    l: usize,
    proj: &Projection,
    lambda2: f64,
    mode: &OracleMode,
) -> Result<Prop1Report, LinError> {
    let off = w0.suffix_offset(l)?;
    let feats = extract_features(model, w0, set, l, proj)?;
    let all: Vec<usize> = (0..feats.num_rows()).collect();
    let fit = fit_surrogate(&feats, &all, lambda2)?;

    let disp_hat = proj.expand(&fit.w);
    let mut w_hat = w0.clone();
    for (slot, d) in w_hat.data_mut()[off..].iter_mut().zip(&disp_hat) {
        *slot += d;
    }
    let (sketched_loss, rows) = flat_loss(model, &w_hat, set)?;

    let w_or = match mode {
        OracleMode::Adam(opt) => {
            let mut o = opt.clone();
            o.lambda2 = lambda2;
            retrain_suffix(model, w0, set, l, &o)?
        }
        OracleMode::Exact { tol, max_iter } => {
            retrain_suffix_exact(model, w0, set, l, lambda2, *tol, *max_iter)?
        }
    };
    let (oracle_loss, _) = flat_loss(model, &w_or, set)?;

    let disp_or: Vec<f64> =
        w_or.data()[off..].iter().zip(&w0.data()[off..]).map(|(a, b)| a - b).collect();
    let radius = l2(&disp_hat).max(l2(&disp_or));

    let res_hat = linearization_residuals(model, &w_hat, w0, set, l)?;
    let res_or = linearization_residuals(model, &w_or, w0, set, l)?;
    let delta_hat = (res_hat.abs_sum / res_hat.rows as f64)
        .max(res_or.abs_sum / res_or.rows as f64);

    let eps_hat = projection_epsilon(model, w0, set, l, proj, EPS_SAMPLE_CAP)?;
    let g_max = feats.max_grad_norm;
    let bound = 2.0 * delta_hat + 2.0 * g_max * radius * eps_hat;
    let gap = sketched_loss - oracle_loss;
    Ok(Prop1Report {
        sketched_loss,
        oracle_loss,
        gap,
        g_max,
        radius,
        delta_hat,
        eps_hat,
        bound,
        holds: gap <= bound + PROP1_SLACK,
        rows,
        d: proj.d(),
        p: proj.p(),
    })
}

/// Spearman rank correlation with average ranks on ties. Inputs must be
/// finite; returns NaN for fewer than two points or zero rank variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.iter().chain(b).all(|v| v.is_finite()), "ranks need finite values");
    if a.len() < 2 {
        return f64::NAN;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = avg;
        }
        i = j + 1;
    }
    out
}
