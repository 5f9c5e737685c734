//! Clustering-accuracy evaluation with optimal permutation matching.
//!
//! Predicted cluster ids and ground-truth class ids are matched by a single
//! global bijection that maximizes the matched count (assignment problem on
//! the confusion matrix), then the same bijection is applied to the old-class
//! and new-class subsets. Ties between equally good bijections resolve to the
//! lexicographically smallest permutation vector.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square matrix of `counts[predicted cluster][true class]`.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub size: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Build from parallel prediction/truth id slices, zero-padding to a
    /// square of side `min_size` (or the largest id + 1 if bigger).
    pub fn from_pairs(preds: &[usize], truths: &[usize], min_size: usize) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(Error::Config(format!(
                "prediction count {} does not match truth count {}",
                preds.len(),
                truths.len()
            )));
        }
        let mut size = min_size;
        for (&p, &t) in preds.iter().zip(truths) {
            size = size.max(p + 1).max(t + 1);
        }
        let mut counts = vec![vec![0u64; size]; size];
        for (&p, &t) in preds.iter().zip(truths) {
            counts[p][t] += 1;
        }
        Ok(ConfusionMatrix { size, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Serialize as CSV: header row of true-class ids, one row per cluster.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster");
        for j in 0..self.size {
            out.push_str(&format!(",true_{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// A bijection from predicted cluster ids to class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationAssignment {
    /// `mapping[cluster] = class`.
    pub mapping: Vec<usize>,
    /// Total count matched under this mapping.
    pub matched: u64,
}

/// Minimum-cost perfect matching on a square integer cost matrix via the
/// potentials + shortest augmenting path method. Returns `row -> col`.
fn assignment_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row (1-based) assigned to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

/// Maximum matched count over perfect matchings of `counts`, restricted to
/// `rows` x `cols` (used by the lexicographic refinement on subproblems).
fn best_match_sum(counts: &[Vec<u64>], rows: &[usize], cols: &[usize]) -> u64 {
    debug_assert_eq!(rows.len(), cols.len());
    if rows.is_empty() {
        return 0;
    }
    let cost: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| -(counts[r][c] as i64)).collect())
        .collect();
    let assign = assignment_min(&cost);
    rows.iter()
        .zip(assign)
        .map(|(&r, j)| counts[r][cols[j]])
        .sum()
}

/// Optimal cluster-to-class permutation: maximizes the matched count; among
/// optima, returns the lexicographically smallest mapping vector.
pub fn optimal_permutation(cm: &ConfusionMatrix) -> PermutationAssignment {
    let n = cm.size;
    if n == 0 {
        return PermutationAssignment {
            mapping: Vec::new(),
            matched: 0,
        };
    }
    let all: Vec<usize> = (0..n).collect();
    let opt = best_match_sum(&cm.counts, &all, &all);

    // Fix clusters one at a time to the smallest class that still admits an
    // optimal completion. Each probe solves the remaining subproblem.
    let mut mapping = vec![0usize; n];
    let mut free: BTreeSet<usize> = (0..n).collect();
    let mut fixed_sum = 0u64;
    for r in 0..n {
        let remaining_rows: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for &c in free.iter() {
            let rest_cols: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
            let rest = best_match_sum(&cm.counts, &remaining_rows, &rest_cols);
            if fixed_sum + cm.counts[r][c] + rest == opt {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.expect("an optimal completion always exists");
        fixed_sum += cm.counts[r][c];
        mapping[r] = c;
        free.remove(&c);
    }
    debug_assert_eq!(fixed_sum, opt);
    PermutationAssignment {
        mapping,
        matched: opt,
    }
}

/// Accuracy under the shared optimal permutation, decomposed into the
/// old-class and new-class subsets of the evaluated samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub acc_all: f64,
    /// Absent when no evaluated sample belongs to an old class.
    pub acc_old: Option<f64>,
    /// Absent when no evaluated sample belongs to a new class.
    pub acc_new: Option<f64>,
    pub n_all: usize,
    pub n_old: usize,
    pub n_new: usize,
}

/// Clustering accuracy for generalized category discovery: one permutation
/// computed on all samples, then applied to the subsets whose TRUE class is
/// old (in `old_classes`) or new.
pub fn gcd_accuracy(
    preds: &[usize],
    truths: &[usize],
    old_classes: &BTreeSet<usize>,
    total_classes: usize,
) -> Result<(AccuracyReport, ConfusionMatrix, PermutationAssignment)> {
    if preds.is_empty() {
        return Err(Error::Config("cannot evaluate an empty sample set".into()));
    }
    let cm = ConfusionMatrix::from_pairs(preds, truths, total_classes)?;
    let perm = optimal_permutation(&cm);
    let mut hit_all = 0usize;
    let mut hit_old = 0usize;
    let mut hit_new = 0usize;
    let mut n_old = 0usize;
    let mut n_new = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        let correct = perm.mapping[p] == t;
        if correct {
            hit_all += 1;
        }
        if old_classes.contains(&t) {
            n_old += 1;
            if correct {
                hit_old += 1;
            }
        } else {
            n_new += 1;
            if correct {
                hit_new += 1;
            }
        }
    }
    let n = preds.len();
    let report = AccuracyReport {
        acc_all: hit_all as f64 / n as f64,
        acc_old: (n_old > 0).then(|| hit_old as f64 / n_old as f64),
        acc_new: (n_new > 0).then(|| hit_new as f64 / n_new as f64),
        n_all: n,
        n_old,
        n_new,
    };
    Ok((report, cm, perm))
}

/// One row of the per-epoch route-stats report.
#[derive(Debug, Clone)]
pub struct RouteStatsRow {
    pub block: usize,
    /// "old", "new", or "all".
    pub group: &'static str,
    pub expert: usize,
    pub mean_weight: f64,
}

/// Render route statistics rows as CSV (`block,group,expert_id,mean_weight`).
pub fn route_stats_csv(rows: &[RouteStatsRow]) -> String {
    let mut out = String::from("block,group,expert_id,mean_weight\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.17e}\n",
            r.block, r.group, r.expert, r.mean_weight
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive-permutation oracle: generates permutations in lexicographic
    /// order and keeps the first strictly-better maximum, so the returned
    /// mapping is the lexicographically smallest optimum.
    fn brute_force(cm: &ConfusionMatrix) -> PermutationAssignment {
        fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if rest.is_empty() {
                out.push(prefix.clone());
                return;
            }
            for i in 0..rest.len() {
                let v = rest.remove(i);
                prefix.push(v);
                rec(prefix, rest, out);
                prefix.pop();
                rest.insert(i, v);
            }
        }
        let n = cm.size;
        let mut perms = Vec::new();
        rec(&mut Vec::new(), &mut (0..n).collect(), &mut perms);

        let mut best: Option<PermutationAssignment> = None;
        for perm in perms {
            let total: u64 = (0..n).map(|r| cm.counts[r][perm[r]]).sum();
            let better = match &best {
                None => true,
                Some(b) => total > b.matched,
            };
            if better {
                best = Some(PermutationAssignment {
                    mapping: perm,
                    matched: total,
                });
            }
        }
        best.unwrap()
    }

    fn square(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        let size = counts.len();
        ConfusionMatrix { size, counts }
    }

    #[test]
    fn diagonal_matrix_gives_identity_permutation() {
        let cm = square(vec![vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]]);
        let p = optimal_permutation(&cm);
        assert_eq!(p.mapping, vec![0, 1, 2]);
        assert_eq!(p.matched, 15);
    }

    #[test]
    fn anti_diagonal_forces_reversal() {
        let cm = square(vec![vec![0, 0, 4], vec![0, 6, 0], vec![9, 0, 0]]);
        let p = optimal_permutation(&cm);
        assert_eq!(p.mapping, vec![2, 1, 0]);
        assert_eq!(p.matched, 19);
    }

    #[test]
    fn ties_resolve_to_lexicographically_smallest() {
        // All-equal counts: every permutation is optimal; identity is the
        // lexicographically smallest.
        let cm = square(vec![vec![1, 1], vec![1, 1]]);
        let p = optimal_permutation(&cm);
        assert_eq!(p.mapping, vec![0, 1]);
        assert_eq!(p, brute_force(&cm));
    }

    #[test]
    fn random_5x5_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let counts: Vec<Vec<u64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.gen_range(0..20)).collect())
                .collect();
            let cm = square(counts);
            let fast = optimal_permutation(&cm);
            let slow = brute_force(&cm);
            assert_eq!(fast, slow, "counts: {:?}", cm.counts);
        }
    }

    #[test]
    fn randomized_sizes_up_to_7_match_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let n = rng.gen_range(1..=7);
            let counts: Vec<Vec<u64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0..8)).collect())
                .collect();
            let cm = square(counts);
            assert_eq!(optimal_permutation(&cm), brute_force(&cm));
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let truths = vec![0, 0, 1, 1, 2, 2];
        let old: BTreeSet<usize> = [0, 1].into_iter().collect();
        let (rep, _, _) = gcd_accuracy(&truths, &truths, &old, 3).unwrap();
        assert_eq!(rep.acc_all, 1.0);
        assert_eq!(rep.acc_old, Some(1.0));
        assert_eq!(rep.acc_new, Some(1.0));
    }

    #[test]
    fn relabeling_bijection_keeps_perfect_score() {
        let truths = vec![0, 0, 1, 1, 2, 2, 3, 3];
        // predictions = truths pushed through the bijection k -> (k+1) mod 4
        let preds: Vec<usize> = truths.iter().map(|t| (t + 1) % 4).collect();
        let old: BTreeSet<usize> = [0, 1].into_iter().collect();
        let (rep, _, _) = gcd_accuracy(&preds, &truths, &old, 4).unwrap();
        assert_eq!(rep.acc_all, 1.0);
        assert_eq!(rep.acc_old, Some(1.0));
        assert_eq!(rep.acc_new, Some(1.0));
    }

    #[test]
    fn constructed_six_sample_case_matches_brute_force() {
        // 4 classes: old {0,1} (one sample each), new {2,3} (two samples
        // each); one error in a new class (a class-2 sample lands in the
        // cluster matched to class 3).
        let truths = vec![0, 1, 2, 2, 3, 3];
        let preds = vec![0, 1, 2, 3, 3, 3];
        let old: BTreeSet<usize> = [0, 1].into_iter().collect();
        let (rep, cm, perm) = gcd_accuracy(&preds, &truths, &old, 4).unwrap();
        assert_eq!(perm, brute_force(&cm));
        assert!((rep.acc_all - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(rep.acc_old, Some(1.0));
        assert_eq!(rep.acc_new, Some(0.75));
        assert_eq!((rep.n_old, rep.n_new), (2, 4));
    }

    #[test]
    fn acc_all_is_the_count_weighted_mean_of_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(4..40);
            let k = rng.gen_range(2..6);
            let truths: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let old: BTreeSet<usize> = (0..k / 2).collect();
            let (rep, _, _) = gcd_accuracy(&preds, &truths, &old, k).unwrap();
            let weighted = (rep.n_old as f64 * rep.acc_old.unwrap_or(0.0)
                + rep.n_new as f64 * rep.acc_new.unwrap_or(0.0))
                / rep.n_all as f64;
            assert!((rep.acc_all - weighted).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_subset_reports_absent_accuracy() {
        let truths = vec![2, 2, 3];
        let preds = vec![2, 2, 3];
        let old: BTreeSet<usize> = [0, 1].into_iter().collect();
        let (rep, _, _) = gcd_accuracy(&preds, &truths, &old, 4).unwrap();
        assert_eq!(rep.acc_old, None);
        assert_eq!(rep.n_old, 0);
        assert_eq!(rep.acc_new, Some(1.0));
    }

    #[test]
    fn rectangular_inputs_are_padded_square() {
        // 2 clusters over 4 true classes: matrix padded to 4x4.
        let preds = vec![0, 0, 1, 1];
        let truths = vec![0, 1, 2, 3];
        let cm = ConfusionMatrix::from_pairs(&preds, &truths, 0).unwrap();
        assert_eq!(cm.size, 4);
        assert_eq!(cm.total(), 4);
        let p = optimal_permutation(&cm);
        assert_eq!(p.matched, 2);
    }
}
