//! Task-partition selection via a relaxed assignment program.
//!
//! Given a symmetric affinity matrix over tasks (higher = better to train
//! together), the solver maximizes `<A, X> - lambda * (L - l) * tr(X)` over
//! matrices X that are doubly stochastic-like (rows sum to one, entries
//! nonnegative, positive semidefinite). The trace term is a cluster-count
//! regularizer: feasible X have tr(X) between 1 (one blended cluster) and n
//! (all singletons), so larger penalties favor coarser partitions. The
//! relaxation is solved by projected gradient ascent with Dykstra-style
//! alternating projections onto the three constraint sets, then rounded to
//! a hard partition by thresholding entries at 1/n and taking connected
//! components. A grid of penalties produces candidate partitions; the one
//! with the highest average within-group affinity wins, subject to a cap on
//! how many groups a single split may create.

use std::fmt;

use thiserror::Error;

mod jacobi;

/// Penalty grid used when the caller has no preference. Affinities are
/// z-scored, so these spans cover "ignore the penalty" through "collapse
/// everything".
pub const DEFAULT_LAMBDA_GRID: [f64; 6] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0];

const MAX_ITER: usize = 5000;
const OBJ_TOL: f64 = 1e-7;
const OBJ_STREAK: usize = 20;
const STEP_DECAY: f64 = 0.97;
const PROJ_CYCLES: usize = 200;
/// Feasibility tolerances baked into the assignment-matrix contract.
const ROW_TOL: f64 = 1e-6;
const ENTRY_TOL: f64 = 1e-9;
const EIG_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("penalty grid is empty")]
    EmptyGrid,
}

/// Solution of the relaxed assignment program, with the diagnostics needed
/// to audit feasibility: row sums within 1e-6 of one, entries above -1e-9,
/// minimum eigenvalue above -1e-6.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix {
    x: Vec<f64>,
    n: usize,
    pub iterations: usize,
    pub objective: f64,
    pub row_residual: f64,
    pub min_entry: f64,
    pub min_eig: f64,
    pub converged: bool,
    /// Best objective after each iteration; non-decreasing by construction.
    pub best_curve: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// A disjoint cover of tasks 0..n by nonempty groups, canonicalized so that
/// members ascend within groups and groups ascend by first member. The
/// derived ordering is the lexicographic tie-break used during selection.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Partition {
    groups: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    pub fn new(mut groups: Vec<Vec<usize>>, n: usize) -> Partition {
        for g in &mut groups {
            assert!(!g.is_empty(), "empty group");
            g.sort_unstable();
        }
        groups.sort();
        let mut seen = vec![false; n];
        for g in &groups {
            for &t in g {
                assert!(t < n, "task {t} out of range");
                assert!(!seen[t], "task {t} appears twice");
                seen[t] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "partition must cover every task");
        Partition { groups, n }
    }

    pub fn singletons(n: usize) -> Partition {
        Partition::new((0..n).map(|t| vec![t]).collect(), n)
    }

    pub fn whole(n: usize) -> Partition {
        Partition::new(vec![(0..n).collect()], n)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn g(&self) -> usize {
        self.groups.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (gi, g) in self.groups.iter().enumerate() {
            if gi > 0 {
                write!(f, "|")?;
            }
            write!(f, "{{")?;
            for (i, t) in g.iter().enumerate() {
                if i > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{t}")?;
            }
            write!(f, "}}")?;
        }
        Ok(())
    }
}

struct Residuals {
    row: f64,
    entry: f64,
    eig: f64,
}

impl Residuals {
    fn feasible(&self) -> bool {
        self.row <= ROW_TOL && self.entry >= -ENTRY_TOL && self.eig >= -EIG_TOL
    }
}

/// Projects x onto the intersection {rows sum to 1} ∩ {entries >= 0} ∩ {PSD}
/// by cyclic projections with Dykstra corrections on the two cone sets.
/// Returns the measured residuals of the point it settled on.
fn project_feasible(x: &mut [f64], n: usize) -> Residuals {
    symmetrize(x, n);
    let mut p_psd = vec![0.0; n * n];
    let mut p_nneg = vec![0.0; n * n];
    let mut y = vec![0.0; n * n];
    let mut res = measure(x, n);
    for _ in 0..PROJ_CYCLES {
        if res.feasible() {
            break;
        }
        // Positive semidefinite cone, with correction.
        for ((yv, xv), pv) in y.iter_mut().zip(x.iter()).zip(&p_psd) {
            *yv = xv + pv;
        }
        let (w, v) = jacobi::eigh(&y, n);
        clip_reconstruct(&w, &v, n, x);
        for ((pv, yv), xv) in p_psd.iter_mut().zip(&y).zip(x.iter()) {
            *pv = yv - xv;
        }
        // Nonnegative orthant, with correction.
        for ((yv, xv), pv) in y.iter_mut().zip(x.iter()).zip(&p_nneg) {
            *yv = xv + pv;
        }
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv = yv.max(0.0);
        }
        for ((pv, yv), xv) in p_nneg.iter_mut().zip(&y).zip(x.iter()) {
            *pv = yv - xv;
        }
        // Row/column sums (affine, plain projection keeps symmetry).
        project_row_sums(x, n);
        res = measure(x, n);
    }
    res
}

fn symmetrize(x: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (x[i * n + j] + x[j * n + i]);
            x[i * n + j] = avg;
            x[j * n + i] = avg;
        }
    }
}

/// Euclidean projection onto {X : Xe = e, X^T e = e}; for symmetric input
/// the result stays symmetric.
fn project_row_sums(x: &mut [f64], n: usize) {
    let nf = n as f64;
    let mut r = vec![0.0; n];
    let mut c = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            r[i] += x[i * n + j];
            c[j] += x[i * n + j];
        }
    }
    for v in &mut r {
        *v = 1.0 - *v;
    }
    for v in &mut c {
        *v = 1.0 - *v;
    }
    let a = r.iter().sum::<f64>() / (2.0 * nf);
    for i in 0..n {
        for j in 0..n {
            x[i * n + j] += (r[i] - a) / nf + (c[j] - a) / nf;
        }
    }
}

fn clip_reconstruct(w: &[f64], v: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in i..n {
            let mut sum = 0.0;
            for k in 0..n {
                if w[k] > 0.0 {
                    sum += v[i * n + k] * w[k] * v[j * n + k];
                }
            }
            out[i * n + j] = sum;
            out[j * n + i] = sum;
        }
    }
}

fn measure(x: &[f64], n: usize) -> Residuals {
    let mut row = 0.0f64;
    let mut entry = f64::INFINITY;
    for i in 0..n {
        let sum: f64 = x[i * n..(i + 1) * n].iter().sum();
        row = row.max((sum - 1.0).abs());
        for &v in &x[i * n..(i + 1) * n] {
            entry = entry.min(v);
        }
    }
    let (w, _) = jacobi::eigh(x, n);
    let eig = w.iter().cloned().fold(f64::INFINITY, f64::min);
    Residuals { row, entry, eig }
}

/// Maximizes `<A, X> - lambda * (num_layers - layer) * tr(X)` over the
/// feasible set by projected gradient ascent with a geometrically decaying
/// step. Returns the best feasible iterate; `converged` records whether the
/// objective settled (change below 1e-7 for 20 straight iterations) before
/// the 5000-iteration cap.
pub fn solve_sdp(
    a: &[f64],
    n: usize,
    lambda: f64,
    num_layers: usize,
    layer: usize,
) -> AssignmentMatrix {
    assert!(n >= 1 && a.len() == n * n, "affinity must be n x n");
    assert!(a.iter().all(|v| v.is_finite()), "affinity must be finite");
    assert!(lambda >= 0.0 && lambda.is_finite());
    assert!(1 <= layer && layer <= num_layers, "need 1 <= layer <= num_layers");
    for i in 0..n {
        for j in i + 1..n {
            assert!(
                (a[i * n + j] - a[j * n + i]).abs() <= 1e-9,
                "affinity must be symmetric"
            );
        }
    }

    let penalty = lambda * (num_layers - layer) as f64;
    let mut grad = a.to_vec();
    for i in 0..n {
        grad[i * n + i] -= penalty;
    }
    let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let objective = |x: &[f64]| -> f64 { grad.iter().zip(x).map(|(g, v)| g * v).sum() };

    let mut x = vec![1.0 / n as f64; n * n];
    let res0 = measure(&x, n);
    let mut best = x.clone();
    let mut best_obj = objective(&x);
    let mut best_res = res0;
    let mut best_curve = vec![best_obj];

    let mut eta = 1.0 / (1.0 + gnorm);
    let mut prev_obj = best_obj;
    let mut streak = 0usize;
    let mut converged = false;
    let mut iterations = MAX_ITER;
    for k in 0..MAX_ITER {
        for (xv, gv) in x.iter_mut().zip(&grad) {
            *xv += eta * gv;
        }
        let res = project_feasible(&mut x, n);
        let obj = objective(&x);
        if res.feasible() && obj > best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
            best_res = res;
        }
        best_curve.push(best_obj);
        if (obj - prev_obj).abs() < OBJ_TOL {
            streak += 1;
            if streak >= OBJ_STREAK {
                converged = true;
                iterations = k + 1;
                break;
            }
        } else {
            streak = 0;
        }
        prev_obj = obj;
        eta *= STEP_DECAY;
    }

    AssignmentMatrix {
        x: best,
        n,
        iterations,
        objective: best_obj,
        row_residual: best_res.row,
        min_entry: best_res.entry,
        min_eig: best_res.eig,
        converged,
        best_curve,
    }
}

/// Rounds a feasible relaxation to a hard partition: connect tasks whose
/// entry reaches the 1/n threshold (minus the entry tolerance, so solver
/// noise cannot split an exactly-uniform solution) and take connected
/// components. Components always form a valid partition, however
/// inconsistent the input.
pub fn round_partition(x: &[f64], n: usize) -> Partition {
    assert!(n >= 1 && x.len() == n * n);
    let threshold = 1.0 / n as f64 - ENTRY_TOL;
    let mut group_of: Vec<usize> = (0..n).collect();
    fn find(group_of: &mut Vec<usize>, i: usize) -> usize {
        let mut root = i;
        while group_of[root] != root {
            root = group_of[root];
        }
        let mut cur = i;
        while group_of[cur] != root {
            let next = group_of[cur];
            group_of[cur] = root;
            cur = next;
        }
        root
    }
    for i in 0..n {
        for j in i + 1..n {
            if x[i * n + j] >= threshold {
                let (ri, rj) = (find(&mut group_of, i), find(&mut group_of, j));
                if ri != rj {
                    group_of[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut group_of, i);
        members[root].push(i);
    }
    Partition::new(members.into_iter().filter(|g| !g.is_empty()).collect(), n)
}

/// Average within-group affinity: sum over groups of the group's affinity
/// block total divided by its size.
pub fn density(a: &[f64], n: usize, partition: &Partition) -> f64 {
    assert_eq!(a.len(), n * n);
    assert_eq!(partition.n(), n);
    let mut total = 0.0;
    for g in partition.groups() {
        let mut block = 0.0;
        for &i in g {
            for &j in g {
                block += a[i * n + j];
            }
        }
        total += block / g.len() as f64;
    }
    total
}

/// One scored candidate from the penalty sweep. `lambda` is None for the
/// implicit no-split candidate that keeps all tasks together.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub lambda: Option<f64>,
    pub partition: Partition,
    pub density: f64,
    pub kept: bool,
}

/// Structured text for audit logs: one line per candidate.
pub fn audit_text(candidates: &[Candidate]) -> String {
    let mut out = String::new();
    for c in candidates {
        let lambda = match c.lambda {
            Some(l) => format!("{l}"),
            None => "none".to_string(),
        };
        out.push_str(&format!(
            "candidate lambda={lambda} partition={} density={} kept={}\n",
            c.partition, c.density, c.kept
        ));
    }
    out
}

/// Sweeps the penalty grid, rounds each solution, scores every candidate by
/// density, and returns the winner among candidates whose group count stays
/// within `max_growth` times the single incoming group. The unsplit
/// partition is always a candidate, so a survivor always exists. Ties go to
/// fewer groups, then to the lexicographically smallest grouping.
pub fn select_partition(
    a: &[f64],
    n: usize,
    grid: &[f64],
    num_layers: usize,
    layer: usize,
    max_growth: usize,
) -> Result<Partition, ClusterError> {
    select_partition_audited(a, n, grid, num_layers, layer, max_growth).map(|(p, _)| p)
}

/// [`select_partition`], also returning every scored candidate for audit.
pub fn select_partition_audited(
    a: &[f64],
    n: usize,
    grid: &[f64],
    num_layers: usize,
    layer: usize,
    max_growth: usize,
) -> Result<(Partition, Vec<Candidate>), ClusterError> {
    if grid.is_empty() {
        return Err(ClusterError::EmptyGrid);
    }
    assert!(max_growth >= 1, "max_growth must allow at least one group");
    let cap = max_growth;

    let mut candidates = Vec::with_capacity(grid.len() + 1);
    for &lambda in grid {
        let am = solve_sdp(a, n, lambda, num_layers, layer);
        let partition = round_partition(am.x(), n);
        let d = density(a, n, &partition);
        let kept = partition.g() <= cap;
        candidates.push(Candidate { lambda: Some(lambda), partition, density: d, kept });
    }
    let whole = Partition::whole(n);
    let d = density(a, n, &whole);
    candidates.push(Candidate { lambda: None, partition: whole, density: d, kept: true });

    let best = candidates
        .iter()
        .filter(|c| c.kept)
        .min_by(|x, y| {
            y.density
                .partial_cmp(&x.density)
                .expect("densities are finite")
                .then(x.partition.g().cmp(&y.partition.g()))
                .then(x.partition.cmp(&y.partition))
        })
        .expect("the unsplit candidate always survives")
        .partition
        .clone();
    Ok((best, candidates))
}

/// Every partition of {0..n}, for exhaustive validation at small n.
pub fn enumerate_partitions(n: usize) -> Vec<Partition> {
    assert!(n >= 1 && n <= 12, "exhaustive enumeration is for small n");
    let mut out = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    fn place(t: usize, n: usize, groups: &mut Vec<Vec<usize>>, out: &mut Vec<Partition>) {
        if t == n {
            out.push(Partition::new(groups.clone(), n));
            return;
        }
        for gi in 0..groups.len() {
            groups[gi].push(t);
            place(t + 1, n, groups, out);
            groups[gi].pop();
        }
        groups.push(vec![t]);
        place(t + 1, n, groups, out);
        groups.pop();
    }
    place(0, n, &mut groups, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    /// Exhaustive max-density partition under the same tie-break rules.
    fn brute_force(a: &[f64], n: usize, cap: usize) -> Partition {
        enumerate_partitions(n)
            .into_iter()
            .filter(|p| p.g() <= cap)
            .min_by(|x, y| {
                density(a, n, y)
                    .partial_cmp(&density(a, n, x))
                    .unwrap()
                    .then(x.g().cmp(&y.g()))
                    .then(x.cmp(y))
            })
            .unwrap()
    }

    /// Two- or three-block planted affinity, z-scored: within-block pairs
    /// near +1, across-block near 0, and self-affinity at +0.5, below the
    /// partner level. Keeping the diagonal under the within value makes the
    /// planted blocks the strict density maximizer; a diagonal at the
    /// within level would tie every refinement of the blocks and let noise
    /// decide.
    fn planted(n: usize, blocks: usize, seed: u64) -> (Vec<f64>, Partition) {
        let mut r = rng::from_seed(seed);
        let mut assign: Vec<usize> = (0..n).map(|t| t % blocks).collect();
        assign.shuffle(&mut r);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let base = if i == j {
                    0.5
                } else if assign[i] == assign[j] {
                    1.0
                } else {
                    0.0
                };
                let v = base + r.gen_range(-0.1..0.1);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        crate::linearizer::zscore(&mut a);
        let mut groups = vec![Vec::new(); blocks];
        for (t, &b) in assign.iter().enumerate() {
            groups[b].push(t);
        }
        (a, Partition::new(groups.into_iter().filter(|g| !g.is_empty()).collect(), n))
    }

    #[test]
    fn single_task_is_the_only_feasible_point() {
        let am = solve_sdp(&[0.7], 1, 0.3, 3, 1);
        assert_eq!(am.x(), &[1.0]);
        assert_eq!(round_partition(am.x(), 1), Partition::whole(1));
    }

    #[test]
    fn solver_output_is_feasible_and_monotone() {
        let (a, _) = planted(6, 2, 99);
        for &lambda in &[0.0, 0.1, 1.0] {
            let am = solve_sdp(&a, 6, lambda, 2, 1);
            assert!(am.row_residual <= 1e-6, "row {}", am.row_residual);
            assert!(am.min_entry >= -1e-9, "entry {}", am.min_entry);
            assert!(am.min_eig >= -1e-6, "eig {}", am.min_eig);
            assert!(
                am.best_curve.windows(2).all(|w| w[1] >= w[0]),
                "best objective must never decrease"
            );
            assert!(am.converged, "iterations {}", am.iterations);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let (a, _) = planted(5, 2, 7);
        let am1 = solve_sdp(&a, 5, 0.03, 2, 1);
        let am2 = solve_sdp(&a, 5, 0.03, 2, 1);
        assert_eq!(am1.x(), am2.x());
        assert_eq!(am1.objective, am2.objective);
    }

    #[test]
    fn two_block_structure_is_recovered_at_zero_penalty() {
        let (a, truth) = planted(6, 2, 11);
        let am = solve_sdp(&a, 6, 0.0, 2, 1);
        let rounded = round_partition(am.x(), 6);
        assert_eq!(rounded, truth);
        assert_eq!(rounded, brute_force(&a, 6, 6));
    }

    #[test]
    fn huge_penalty_collapses_to_one_cluster() {
        let (a, _) = planted(5, 2, 23);
        let amax = a.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        let lambda = 10.0 * amax * 5.0;
        let am = solve_sdp(&a, 5, lambda, 2, 1);
        let rounded = round_partition(am.x(), 5);
        assert_eq!(rounded.g(), 1);
        for &v in am.x() {
            assert!((v - 0.2).abs() <= 1e-4, "expected near-uniform, got {v}");
        }
    }

    #[test]
    fn rounding_matches_the_stated_examples() {
        let n = 4;
        let mut identity = vec![0.0; n * n];
        for i in 0..n {
            identity[i * n + i] = 1.0;
        }
        assert_eq!(round_partition(&identity, n), Partition::singletons(n));

        let uniform = vec![1.0 / n as f64; n * n];
        assert_eq!(round_partition(&uniform, n), Partition::whole(n));

        // Planted three-block X with within entries 1/blocksize.
        let n = 6;
        let blocks = [vec![0, 3], vec![1, 4], vec![2, 5]];
        let mut x = vec![0.0; n * n];
        for b in &blocks {
            for &i in b {
                for &j in b {
                    x[i * n + j] = 1.0 / b.len() as f64;
                }
            }
        }
        let p = round_partition(&x, n);
        assert_eq!(p, Partition::new(blocks.to_vec(), n));
    }

    #[test]
    fn rounding_always_yields_a_valid_partition() {
        // Adversarially inconsistent input: entries above threshold in a
        // chain, so components must merge transitively.
        let n = 4;
        let mut x = vec![0.0; n * n];
        x[1] = 0.9;
        x[4] = 0.9;
        x[1 * n + 2] = 0.9;
        x[2 * n + 1] = 0.9;
        let p = round_partition(&x, n);
        assert_eq!(p.groups(), &[vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn growth_cap_of_one_keeps_everything_together() {
        let (a, _) = planted(6, 3, 31);
        let p = select_partition(&a, 6, &DEFAULT_LAMBDA_GRID, 2, 1, 1).unwrap();
        assert_eq!(p, Partition::whole(6));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let (a, _) = planted(4, 2, 5);
        assert!(matches!(
            select_partition(&a, 4, &[], 2, 1, 5),
            Err(ClusterError::EmptyGrid)
        ));
    }

    #[test]
    fn two_block_density_beats_the_alternatives() {
        let (a, truth) = planted(6, 2, 47);
        let d_true = density(&a, 6, &truth);
        assert!(d_true > density(&a, 6, &Partition::whole(6)));
        for p in enumerate_partitions(6) {
            if p != truth {
                assert!(density(&a, 6, &p) <= d_true, "beaten by {p}");
            }
        }
        let selected = select_partition(&a, 6, &DEFAULT_LAMBDA_GRID, 2, 1, 5).unwrap();
        assert_eq!(selected, truth);
    }

    #[test]
    fn partition_enumeration_counts_are_bell_numbers() {
        assert_eq!(enumerate_partitions(1).len(), 1);
        assert_eq!(enumerate_partitions(3).len(), 5);
        assert_eq!(enumerate_partitions(5).len(), 52);
        assert_eq!(enumerate_partitions(8).len(), 4140);
    }

    #[test]
    fn audit_lines_carry_lambda_partition_and_density() {
        let (a, _) = planted(4, 2, 3);
        let (_, cands) = select_partition_audited(&a, 4, &[0.0, 1.0], 2, 1, 5).unwrap();
        let text = audit_text(&cands);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("candidate lambda=0 "));
        assert!(text.contains("lambda=none"));
        assert!(text.lines().all(|l| l.contains("density=") && l.contains("kept=")));
    }

    #[test]
    fn planted_blocks_are_recovered_against_exhaustive_search() {
        let mut select_hits = 0;
        let mut planted_hits = 0;
        let total = 100;
        for inst in 0..total {
            let mut r = rng::stream(2024, inst);
            let n = r.gen_range(4..=8);
            let blocks = r.gen_range(2..=3usize).min(n / 2);
            let (a, truth) = planted(n, blocks, 5000 + inst);
            let selected = select_partition(&a, n, &DEFAULT_LAMBDA_GRID, 2, 1, 5).unwrap();
            let oracle = brute_force(&a, n, 5);
            if selected == oracle {
                select_hits += 1;
            }
            if oracle == truth {
                planted_hits += 1;
            }
        }
        assert!(select_hits >= 95, "matched exhaustive search on {select_hits}/{total}");
        assert!(planted_hits >= 95, "planted partition optimal on {planted_hits}/{total}");
    }
}
