//! Logistic surrogates over sketched gradient features, the subset sampling
//! plan, and the subset-loss averages that become the task-affinity matrix.

use std::path::Path;

use super::lbfgs;
use super::{dot, log1p_exp_neg, LinError, ProjectedFeatureSet, TAG_PLAN};
use crate::rng;

/// Gradient-norm tolerance for a converged surrogate fit.
pub const FIT_TOL: f64 = 1e-8;
/// Iteration cap before a fit reports non-convergence.
pub const FIT_MAX_ITER: usize = 500;
/// Tolerances for the many per-subset fits behind the affinity estimates:
/// looser than the default so weakly regularized fits terminate, while the
/// leftover suboptimality (at most grad^2 / (4 lambda2) under the ridge's
/// strong convexity) stays orders of magnitude below the loss differences
/// the affinities compare.
pub const SUBSET_FIT_TOL: f64 = 1e-5;
pub const SUBSET_FIT_MAX_ITER: usize = 2000;
/// Whole-plan resampling attempts before coverage is declared unreachable.
pub const PLAN_ATTEMPTS: usize = 1000;

/// A fitted sketched-space predictor: margin(row) is approximated by
/// base(row) + <feat(row), w>.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub w: Vec<f64>,
    /// Mean logistic loss over the fitted rows at the optimum, ridge
    /// excluded.
    pub train_loss: f64,
    /// The minimized value: mean loss plus the ridge term.
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Fits min over w of mean log(1 + exp(-(<g, w> + b))) + lambda2 |w|^2 on
/// the given rows, to gradient norm 1e-8 (a cap of 500 iterations).
pub fn fit_surrogate(
    fs: &ProjectedFeatureSet,
    rows: &[usize],
    lambda2: f64,
) -> Result<Surrogate, LinError> {
    fit_surrogate_opt(fs, rows, lambda2, FIT_TOL, FIT_MAX_ITER)
}

/// [`fit_surrogate`] with explicit tolerance and iteration cap.
pub fn fit_surrogate_opt(
    fs: &ProjectedFeatureSet,
    rows: &[usize],
    lambda2: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Surrogate, LinError> {
    if rows.is_empty() {
        return Err(LinError::EmptyRestriction);
    }
    assert!(lambda2 >= 0.0, "ridge weight must be nonnegative");
    let d = fs.d;
    let inv = 1.0 / rows.len() as f64;
    let res = lbfgs::minimize(vec![0.0; d], tol, max_iter, |w, grad| {
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        let mut loss = 0.0;
        for &r in rows {
            let feat = fs.feat(r);
            let z = dot(feat, w) + fs.base(r);
            loss += log1p_exp_neg(z);
            // d/dz log(1 + e^-z) = -1 / (1 + e^z); e^z overflowing to
            // infinity gives the correct limit 0.
            let c = -inv / (1.0 + z.exp());
            if c != 0.0 {
                for (g, &x) in grad.iter_mut().zip(feat) {
                    *g = c.mul_add(x, *g);
                }
            }
        }
        let mut obj = loss * inv;
        for k in 0..d {
            obj += lambda2 * w[k] * w[k];
            grad[k] += 2.0 * lambda2 * w[k];
        }
        obj
    });
    if !res.converged {
        return Err(LinError::NonConvergence {
            iterations: res.iterations,
            grad_norm: res.grad_norm,
        });
    }
    let train_loss = surrogate_loss(fs, rows, &res.x);
    Ok(Surrogate {
        w: res.x,
        train_loss,
        objective: res.value,
        grad_norm: res.grad_norm,
        iterations: res.iterations,
    })
}

/// Mean logistic loss of the sketched predictor `w` over `rows`.
pub fn surrogate_loss(fs: &ProjectedFeatureSet, rows: &[usize], w: &[f64]) -> f64 {
    assert!(!rows.is_empty(), "loss over an empty restriction");
    let sum: f64 = rows
        .iter()
        .map(|&r| log1p_exp_neg(dot(fs.feat(r), w) + fs.base(r)))
        .sum();
    sum / rows.len() as f64
}

/// m seeded subsets of {0..n}, each of size alpha, resampled as a whole
/// until every pair of tasks shares at least one subset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPlan {
    /// Each subset is sorted ascending.
    pub subsets: Vec<Vec<usize>>,
    pub n: usize,
    pub alpha: usize,
    pub seed: u64,
}

impl SubsetPlan {
    /// n x n co-occurrence counts; the diagonal counts plain membership.
    pub fn pair_counts(&self) -> Vec<u32> {
        let n = self.n;
        let mut counts = vec![0u32; n * n];
        for subset in &self.subsets {
            for &i in subset {
                for &j in subset {
                    counts[i * n + j] += 1;
                }
            }
        }
        counts
    }
}

/// Draws the subset plan. `alpha` is clamped to `n`; coverage of all task
/// pairs is required, with up to [`PLAN_ATTEMPTS`] whole-plan redraws.
pub fn make_plan(n: usize, m: usize, alpha: usize, seed: u64) -> Result<SubsetPlan, LinError> {
    if n == 0 || m == 0 || alpha == 0 {
        return Err(LinError::BadPlan(format!(
            "need positive task count, subset count, and size (got n={n}, m={m}, alpha={alpha})"
        )));
    }
    let a = alpha.min(n);
    if n >= 2 && a < 2 {
        return Err(LinError::BadPlan(
            "subsets of size 1 can never cover task pairs".into(),
        ));
    }
    for attempt in 0..PLAN_ATTEMPTS {
        let mut r = rng::stream(seed, rng::mix(TAG_PLAN, attempt as u64));
        let subsets: Vec<Vec<usize>> = (0..m)
            .map(|_| {
                let mut v = rand::seq::index::sample(&mut r, n, a).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let plan = SubsetPlan { subsets, n, alpha: a, seed };
        let counts = plan.pair_counts();
        if (0..n).all(|i| (i..n).all(|j| counts[i * n + j] > 0)) {
            return Ok(plan);
        }
    }
    Err(LinError::Coverage { attempts: PLAN_ATTEMPTS })
}

/// Estimated validation losses, one row per subset: per_subset[k][idx] is
/// the loss of task plan.subsets[k][idx] under the subset-k surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub per_subset: Vec<Vec<f64>>,
}

/// For every planned subset: fit a surrogate on the subset's training rows,
/// then score each member task's validation rows under it. Train and
/// validation features must come from the same checkpoint, layer, and
/// projection.
pub fn estimate_subset_losses(
    train: &ProjectedFeatureSet,
    val: &ProjectedFeatureSet,
    plan: &SubsetPlan,
    lambda2: f64,
) -> Result<LossTable, LinError> {
    if train.tasks != val.tasks {
        return Err(LinError::MismatchedFeatures("task lists differ".into()));
    }
    if train.d != val.d || train.seed != val.seed || train.l != val.l {
        return Err(LinError::MismatchedFeatures(format!(
            "train (d={}, seed={}, l={}) vs val (d={}, seed={}, l={})",
            train.d, train.seed, train.l, val.d, val.seed, val.l
        )));
    }
    if plan.n != train.tasks.len() {
        return Err(LinError::BadPlan(format!(
            "plan covers {} tasks, features have {}",
            plan.n,
            train.tasks.len()
        )));
    }
    let mut per_subset = Vec::with_capacity(plan.subsets.len());
    for subset in &plan.subsets {
        let rows = train.rows_of_tasks(subset);
        let fit = fit_surrogate_opt(train, &rows, lambda2, SUBSET_FIT_TOL, SUBSET_FIT_MAX_ITER)?;
        let mut losses = Vec::with_capacity(subset.len());
        for &i in subset {
            let vrows = val.rows_of_task(i);
            if vrows.is_empty() {
                return Err(LinError::EmptyInstances(format!(
                    "task {} has no validation rows",
                    train.tasks[i]
                )));
            }
            losses.push(surrogate_loss(val, &vrows, &fit.w));
        }
        per_subset.push(losses);
    }
    Ok(LossTable { per_subset })
}

/// Pairwise affinity scores: entry (i, j) averages task i's estimated
/// validation loss over the subsets containing both i and j, so lower means
/// better transfer. Generally asymmetric; [`AffinityMatrix::to_clusterer_input`]
/// symmetrizes and flips the sign for the partition solver.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub tasks: Vec<String>,
    /// The layer the features were conditioned on.
    pub l: usize,
    /// Row-major n x n scores.
    pub t: Vec<f64>,
    /// Co-occurrence counts behind each average (diagonal: membership).
    pub counts: Vec<u32>,
    /// The subsets the averages ran over.
    pub plan: SubsetPlan,
}

/// Averages the loss table into the affinity matrix. Every task pair must
/// share at least one subset.
pub fn affinity_matrix(
    table: &LossTable,
    plan: &SubsetPlan,
    tasks: &[String],
    l: usize,
) -> Result<AffinityMatrix, LinError> {
    let n = plan.n;
    if tasks.len() != n {
        return Err(LinError::BadPlan(format!(
            "{} task names for a plan over {n} tasks",
            tasks.len()
        )));
    }
    if table.per_subset.len() != plan.subsets.len() {
        return Err(LinError::BadPlan(format!(
            "loss table has {} rows for {} subsets",
            table.per_subset.len(),
            plan.subsets.len()
        )));
    }
    let mut sums = vec![0.0; n * n];
    let mut counts = vec![0u32; n * n];
    for (k, subset) in plan.subsets.iter().enumerate() {
        if table.per_subset[k].len() != subset.len() {
            return Err(LinError::BadPlan(format!(
                "loss row {k} has {} entries for a subset of {}",
                table.per_subset[k].len(),
                subset.len()
            )));
        }
        for (idx, &i) in subset.iter().enumerate() {
            let li = table.per_subset[k][idx];
            for &j in subset {
                sums[i * n + j] += li;
                counts[i * n + j] += 1;
            }
        }
    }
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if counts[i * n + j] == 0 {
                return Err(LinError::UncoveredPair { i, j });
            }
            t[i * n + j] = sums[i * n + j] / counts[i * n + j] as f64;
        }
    }
    Ok(AffinityMatrix { tasks: tasks.to_vec(), l, t, counts, plan: plan.clone() })
}

impl AffinityMatrix {
    pub fn n(&self) -> usize {
        self.tasks.len()
    }

    /// The partition solver's input: scores symmetrized and sign-flipped
    /// (higher = stronger transfer), then z-scored over all entries. A
    /// constant matrix z-scores to all zeros.
    pub fn to_clusterer_input(&self) -> Vec<f64> {
        affinity_to_clusterer_input(&self.t, self.n())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LinError> {
        write_affinity_csv(path, &self.tasks, &self.t)
    }
}

/// [`AffinityMatrix::to_clusterer_input`] on a bare row-major score table,
/// for matrices loaded back from CSV.
pub fn affinity_to_clusterer_input(t: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(t.len(), n * n, "table must be n x n");
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = -(t[i * n + j] + t[j * n + i]) / 2.0;
        }
    }
    zscore(&mut a);
    a
}

/// In-place z-scoring over all entries (population standard deviation); a
/// near-zero spread yields all zeros instead of dividing by noise.
pub(crate) fn zscore(a: &mut [f64]) {
    let n = a.len() as f64;
    let mean = a.iter().sum::<f64>() / n;
    let var = a.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        for x in a.iter_mut() {
            *x = 0.0;
        }
    } else {
        for x in a.iter_mut() {
            *x = (*x - mean) / sd;
        }
    }
}

/// CSV with a task-name header row and one named row per task; values use
/// the shortest round-trip float form.
pub fn write_affinity_csv(path: &Path, tasks: &[String], t: &[f64]) -> Result<(), LinError> {
    let n = tasks.len();
    assert_eq!(t.len(), n * n, "matrix size");
    let mut out = String::from("task");
    for name in tasks {
        assert!(!name.contains(',') && !name.contains('\n'), "task name {name:?} breaks csv");
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, name) in tasks.iter().enumerate() {
        out.push_str(name);
        for j in 0..n {
            out.push(',');
            out.push_str(&t[i * n + j].to_string());
        }
        out.push('\n');
    }
    crate::fsio::atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Reads a matrix written by [`write_affinity_csv`]: returns the task names
/// and the row-major values.
pub fn read_affinity_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>), LinError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LinError::Corrupt("empty csv".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("task") {
        return Err(LinError::Corrupt("header must start with 'task'".into()));
    }
    let tasks: Vec<String> = cols.map(str::to_string).collect();
    let n = tasks.len();
    if n == 0 {
        return Err(LinError::Corrupt("no task columns".into()));
    }
    let mut t = Vec::with_capacity(n * n);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let name = parts
            .next()
            .ok_or_else(|| LinError::Corrupt(format!("row {i} empty")))?;
        if i >= n || name != tasks[i] {
            return Err(LinError::Corrupt(format!(
                "row {i} named {name:?} does not match header order"
            )));
        }
        for part in parts {
            let v: f64 = part
                .parse()
                .map_err(|_| LinError::Corrupt(format!("bad value {part:?} in row {i}")))?;
            t.push(v);
        }
        if t.len() != (i + 1) * n {
            return Err(LinError::Corrupt(format!("row {i} has the wrong width")));
        }
    }
    if t.len() != n * n {
        return Err(LinError::Corrupt(format!(
            "expected {n} rows, got {}",
            t.len() / n
        )));
    }
    Ok((tasks, t))
}

#[cfg(test)]
mod tests {
    use super::super::{ProjectedFeatureSet, RowMeta};
    use super::*;

    /// Hand-built feature set: `rows[i] = (task, feats, base)`.
    fn manual_features(d: usize, rows: &[(u32, Vec<f64>, f64)]) -> ProjectedFeatureSet {
        let tasks = {
            let max = rows.iter().map(|r| r.0).max().unwrap() + 1;
            (0..max).map(|i| format!("t{i}")).collect()
        };
        super::super::ProjectedFeatureSet {
            tasks,
            l: 1,
            d,
            seed: 0,
            max_grad_norm: rows
                .iter()
                .map(|r| super::super::l2(&r.1))
                .fold(0.0, f64::max),
            meta: rows
                .iter()
                .enumerate()
                .map(|(i, r)| RowMeta { task: r.0, graph: i as u32, step: 0, node: 0 })
                .collect(),
            feats: rows.iter().flat_map(|r| r.1.clone()).collect(),
            base: rows.iter().map(|r| r.2).collect(),
        }
    }

    #[test]
    fn zero_displacement_loss_is_base_margin_loss() {
        let fs = manual_features(
            2,
            &[(0, vec![1.0, 2.0], 0.4), (0, vec![-1.0, 0.5], -1.3), (0, vec![0.0, 3.0], 2.0)],
        );
        let rows = [0, 1, 2];
        let want: f64 =
            [0.4, -1.3, 2.0].iter().map(|&b| log1p_exp_neg(b)).sum::<f64>() / 3.0;
        assert_eq!(surrogate_loss(&fs, &rows, &[0.0, 0.0]), want);
    }

    #[test]
    fn all_zero_features_fit_to_zero_weights() {
        let fs = manual_features(3, &[(0, vec![0.0; 3], 0.5), (0, vec![0.0; 3], -0.2)]);
        let fit = fit_surrogate(&fs, &[0, 1], 1e-4).unwrap();
        assert_eq!(fit.w, vec![0.0; 3]);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn single_separable_row_behaves_with_and_without_ridge() {
        let fs = manual_features(2, &[(0, vec![1.0, 0.0], 0.0)]);
        let strong = fit_surrogate(&fs, &[0], 1e-3).unwrap();
        assert!(strong.train_loss < std::f64::consts::LN_2);
        let weak = fit_surrogate(&fs, &[0], 1e-7).unwrap();
        assert!(weak.train_loss < 1e-3, "loss {}", weak.train_loss);
        assert!(
            super::super::l2(&weak.w) > super::super::l2(&strong.w),
            "weaker ridge must let the weight grow"
        );
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let fs = manual_features(
            2,
            &[(0, vec![1.0, 0.0], 0.0), (0, vec![-0.5, 0.7], -0.2)],
        );
        match fit_surrogate_opt(&fs, &[0, 1], 1e-4, 1e-10, 1) {
            Err(LinError::NonConvergence { iterations, .. }) => assert_eq!(iterations, 1),
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn empty_restriction_is_rejected() {
        let fs = manual_features(2, &[(0, vec![1.0, 0.0], 0.0)]);
        assert!(matches!(fit_surrogate(&fs, &[], 1e-4), Err(LinError::EmptyRestriction)));
    }

    #[test]
    fn plan_covers_every_pair() {
        // The construction guarantee: every unordered pair, diagonal
        // included, co-occurs in at least one subset. At n=12, m=10n,
        // alpha=3 the mean co-occurrence is ~5.5, so also sanity-check it.
        for seed in 0..5 {
            let plan = make_plan(12, 120, 3, seed).unwrap();
            assert_eq!(plan.subsets.len(), 120);
            assert!(plan.subsets.iter().all(|s| s.len() == 3));
            let counts = plan.pair_counts();
            let counts = counts.as_slice();
            let pairs: Vec<u32> = (0..12)
                .flat_map(|i| (i..12).map(move |j| counts[i * 12 + j]))
                .collect();
            let min = *pairs.iter().min().unwrap();
            assert!(min >= 1, "seed {seed}: min pair count {min}");
            let mean = pairs.iter().sum::<u32>() as f64 / pairs.len() as f64;
            assert!(mean >= 3.0, "seed {seed}: mean co-occurrence {mean}");
        }
    }

    #[test]
    fn plan_is_deterministic_and_clamps_alpha() {
        let a = make_plan(4, 6, 3, 7).unwrap();
        let b = make_plan(4, 6, 3, 7).unwrap();
        assert_eq!(a, b);
        let whole = make_plan(3, 2, 9, 1).unwrap();
        assert!(whole.subsets.iter().all(|s| *s == vec![0, 1, 2]));
        assert!(matches!(make_plan(0, 5, 3, 0), Err(LinError::BadPlan(_))));
        assert!(matches!(make_plan(3, 5, 1, 0), Err(LinError::BadPlan(_))));
    }

    #[test]
    fn impossible_coverage_reports_after_attempts() {
        // One subset of size 2 can never cover three tasks' pairs.
        assert!(matches!(
            make_plan(3, 1, 2, 0),
            Err(LinError::Coverage { attempts: PLAN_ATTEMPTS })
        ));
    }

    fn two_task_features() -> (ProjectedFeatureSet, ProjectedFeatureSet) {
        let train = manual_features(
            2,
            &[
                (0, vec![1.0, 0.2], 0.1),
                (0, vec![0.8, -0.1], -0.4),
                (1, vec![-0.9, 0.4], 0.3),
                (1, vec![-1.1, 0.1], 0.2),
            ],
        );
        let val = manual_features(
            2,
            &[(0, vec![0.9, 0.1], 0.0), (1, vec![-1.0, 0.3], 0.1)],
        );
        (train, val)
    }

    #[test]
    fn single_whole_subset_equals_direct_joint_fit() {
        let (train, val) = two_task_features();
        let plan = SubsetPlan { subsets: vec![vec![0, 1]], n: 2, alpha: 2, seed: 0 };
        let table = estimate_subset_losses(&train, &val, &plan, 1e-4).unwrap();
        let fit = fit_surrogate_opt(&train, &[0, 1, 2, 3], 1e-4, SUBSET_FIT_TOL, SUBSET_FIT_MAX_ITER)
            .unwrap();
        assert_eq!(table.per_subset[0][0], surrogate_loss(&val, &[0], &fit.w));
        assert_eq!(table.per_subset[0][1], surrogate_loss(&val, &[1], &fit.w));
    }

    #[test]
    fn duplicated_subsets_give_identical_rows() {
        let (train, val) = two_task_features();
        let plan =
            SubsetPlan { subsets: vec![vec![0, 1], vec![0, 1]], n: 2, alpha: 2, seed: 0 };
        let table = estimate_subset_losses(&train, &val, &plan, 1e-4).unwrap();
        assert_eq!(table.per_subset[0], table.per_subset[1]);
    }

    #[test]
    fn mismatched_feature_sets_are_rejected() {
        let (train, mut val) = two_task_features();
        val.l = 2;
        let plan = SubsetPlan { subsets: vec![vec![0, 1]], n: 2, alpha: 2, seed: 0 };
        assert!(matches!(
            estimate_subset_losses(&train, &val, &plan, 1e-4),
            Err(LinError::MismatchedFeatures(_))
        ));
    }

    #[test]
    fn whole_s_subsets_make_every_column_constant() {
        let plan =
            SubsetPlan { subsets: vec![vec![0, 1, 2]; 3], n: 3, alpha: 3, seed: 0 };
        let table = LossTable {
            per_subset: vec![
                vec![0.1, 0.5, 0.9],
                vec![0.3, 0.7, 1.1],
                vec![0.2, 0.6, 1.0],
            ],
        };
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let aff = affinity_matrix(&table, &plan, &names, 1).unwrap();
        for i in 0..3 {
            let want = (table.per_subset[0][i]
                + table.per_subset[1][i]
                + table.per_subset[2][i])
                / 3.0;
            for j in 0..3 {
                assert!((aff.t[i * 3 + j] - want).abs() <= 1e-15);
            }
            // The diagonal is the mean over all subsets containing i.
            assert!((aff.t[i * 3 + i] - want).abs() <= 1e-15);
        }
        assert!(aff.counts.iter().all(|&c| c == 3));
    }

    #[test]
    fn planted_two_groups_show_block_structure() {
        // Tasks {0,1} and {2,3}; co-training across groups inflates the
        // estimated loss by +0.5. Within-group entries must sit below
        // cross-group entries in every block.
        let subsets = vec![
            vec![0, 1],
            vec![2, 3],
            vec![0, 2],
            vec![1, 3],
            vec![0, 3],
            vec![1, 2],
        ];
        let base = 0.4;
        let table = LossTable {
            per_subset: subsets
                .iter()
                .map(|s| {
                    let cross = (s[0] < 2) != (s[1] < 2);
                    let bump = if cross { 0.5 } else { 0.0 };
                    vec![base + bump; 2]
                })
                .collect(),
        };
        let plan = SubsetPlan { subsets, n: 4, alpha: 2, seed: 0 };
        let names: Vec<String> =
            ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let aff = affinity_matrix(&table, &plan, &names, 1).unwrap();
        let within = [(0, 1), (1, 0), (2, 3), (3, 2)];
        let cross = [(0, 2), (0, 3), (1, 2), (1, 3), (2, 0), (3, 0), (2, 1), (3, 1)];
        for &(i, j) in &within {
            for &(x, y) in &cross {
                assert!(
                    aff.t[i * 4 + j] < aff.t[x * 4 + y],
                    "within ({i},{j}) not below cross ({x},{y})"
                );
            }
        }
        // The clusterer input must flip orientation: within-group higher.
        let a = aff.to_clusterer_input();
        assert!(a[1] > a[2]);
        assert!((a[1] - a[4]).abs() <= 1e-12, "symmetrized");
    }

    #[test]
    fn uncovered_pair_is_detected() {
        let plan = SubsetPlan {
            subsets: vec![vec![0, 1], vec![1, 2]],
            n: 3,
            alpha: 2,
            seed: 0,
        };
        let table =
            LossTable { per_subset: vec![vec![0.1, 0.2], vec![0.2, 0.3]] };
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            affinity_matrix(&table, &plan, &names, 1),
            Err(LinError::UncoveredPair { i: 0, j: 2 })
        ));
    }

    #[test]
    fn constant_matrix_zscores_to_zero() {
        let mut a = vec![3.5; 9];
        zscore(&mut a);
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn csv_round_trips() {
        let names: Vec<String> = ["bfs", "dfs"].iter().map(|s| s.to_string()).collect();
        let t = vec![0.125, -3.75e-2, 1.0 / 3.0, 2.0];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("affinity.csv");
        write_affinity_csv(&path, &names, &t).unwrap();
        let (back_names, back_t) = read_affinity_csv(&path).unwrap();
        assert_eq!(back_names, names);
        assert_eq!(back_t, t);
        std::fs::write(&path, "task,bfs\nwrong,1.0\n").unwrap();
        assert!(matches!(read_affinity_csv(&path), Err(LinError::Corrupt(_))));
    }
}
