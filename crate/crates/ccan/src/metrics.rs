//! Clustering evaluation: accuracy under optimal cluster-to-class matching
//! and normalized mutual information.

use crate::error::{Error, Result};

/// Predicted cluster ids paired with ground-truth class ids.
#[derive(Debug, Clone)]
pub struct LabelPair {
    predicted: Vec<usize>,
    truth: Vec<usize>,
}

impl LabelPair {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.is_empty() {
            return Err(Error::Metric("label sequences are empty".into()));
        }
        if predicted.len() != truth.len() {
            return Err(Error::Metric(format!(
                "length mismatch: {} predicted vs {} truth",
                predicted.len(),
                truth.len()
            )));
        }
        Ok(LabelPair { predicted, truth })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn truth(&self) -> &[usize] {
        &self.truth
    }
}

/// Exact minimum-cost assignment (Kuhn-Munkres with potentials).
///
/// Rectangular inputs are zero-padded to square. Among cost-minimal
/// assignments the lexicographically smallest row-to-column mapping is
/// returned; the mapping covers the padded square, so rows or columns
/// past the original extent land on zero-cost padding.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    if cost.is_empty() {
        return Err(Error::Metric("empty cost matrix".into()));
    }
    let rows = cost.len();
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Metric("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite cost entry".into()));
    }
    let n = rows.max(cols);
    let mut padded = vec![0.0f64; n * n];
    for (i, row) in cost.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            padded[i * n + j] = v;
        }
    }

    let (_, total) = solve_square(&padded, n);
    let assignment = lexicographic_refine(&padded, n, total);
    Ok((assignment, total))
}

/// O(n^3) shortest-augmenting-path assignment on a square matrix.
/// Returns (row -> col, total cost).
fn solve_square(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    // 1-based potentials; p[j] = row matched to column j (0 = free)
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
            total += cost[(p[j] - 1) * n + (j - 1)];
        }
    }
    (assign, total)
}

/// Fixes rows from the top, picking the smallest column that still admits an
/// optimal completion. O(n^5) worst case, which is fine at clustering sizes.
fn lexicographic_refine(cost: &[f64], n: usize, total: f64) -> Vec<usize> {
    let tol = 1e-9 * (1.0 + total.abs());
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut assign = vec![0usize; n];
    let mut remaining = total;
    for i in 0..n {
        let sub_rows = n - i - 1;
        let mut chosen = None;
        for (ci, &j) in free_cols.iter().enumerate() {
            let here = cost[i * n + j];
            let sub_total = if sub_rows == 0 {
                0.0
            } else {
                let mut sub = Vec::with_capacity(sub_rows * sub_rows);
                for r in i + 1..n {
                    for &c in &free_cols {
                        if c != j {
                            sub.push(cost[r * n + c]);
                        }
                    }
                }
                solve_square(&sub, sub_rows).1
            };
            if (here + sub_total - remaining).abs() <= tol {
                chosen = Some((ci, j, here));
                break;
            }
        }
        let (ci, j, here) =
            chosen.expect("an optimal completion always exists for some free column");
        assign[i] = j;
        free_cols.remove(ci);
        remaining -= here;
    }
    assign
}

fn contingency(pair: &LabelPair) -> (Vec<Vec<usize>>, usize, usize) {
    let kp = pair.predicted.iter().max().unwrap() + 1;
    let kt = pair.truth.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pair.predicted.iter().zip(&pair.truth) {
        table[p][t] += 1;
    }
    (table, kp, kt)
}

/// Clustering accuracy: the fraction of samples correctly labeled under the
/// best one-to-one map from clusters to classes.
pub fn clustering_accuracy(pair: &LabelPair) -> Result<f64> {
    let (table, kp, kt) = contingency(pair);
    let cost: Vec<Vec<f64>> = table
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let (assign, _) = hungarian(&cost)?;
    let mut matched = 0usize;
    for (i, &j) in assign.iter().enumerate().take(kp) {
        if j < kt {
            matched += table[i][j];
        }
    }
    Ok(matched as f64 / pair.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmiNorm {
    /// 2 I(U;V) / (H(U) + H(V))
    Arithmetic,
    /// I(U;V) / sqrt(H(U) H(V))
    Sqrt,
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with natural-log entropies.
/// Two single-cluster partitions are defined to agree perfectly (1.0).
pub fn nmi_with(pair: &LabelPair, norm: NmiNorm) -> Result<f64> {
    let (table, kp, kt) = contingency(pair);
    let n = pair.len() as f64;
    let row_sums: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..kt).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let hp = entropy(&row_sums, n);
    let ht = entropy(&col_sums, n);
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for i in 0..kp {
        for j in 0..kt {
            let nij = table[i][j];
            if nij > 0 {
                let pij = nij as f64 / n;
                mi += pij * (pij * n * n / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    let mi = mi.max(0.0);
    let value = match norm {
        NmiNorm::Arithmetic => 2.0 * mi / (hp + ht),
        NmiNorm::Sqrt => {
            if hp == 0.0 || ht == 0.0 {
                0.0
            } else {
                mi / (hp * ht).sqrt()
            }
        }
    };
    Ok(value.clamp(0.0, 1.0))
}

pub fn nmi(pair: &LabelPair) -> Result<f64> {
    nmi_with(pair, NmiNorm::Arithmetic)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Enumerates permutations in lexicographic order, keeping the first
    /// strict improvement, so ties resolve to the smallest permutation.
    pub(super) fn brute_force_assignment(cost: &[Vec<f64>], n: usize) -> (Vec<usize>, f64) {
        fn recurse(
            cost: &[Vec<f64>],
            n: usize,
            row: usize,
            used: &mut Vec<bool>,
            current: &mut Vec<usize>,
            acc: f64,
            best: &mut (Vec<usize>, f64),
        ) {
            if row == n {
                if acc < best.1 {
                    *best = (current.clone(), acc);
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    current.push(j);
                    recurse(cost, n, row + 1, used, current, acc + cost[row][j], best);
                    current.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = (Vec::new(), f64::INFINITY);
        recurse(
            cost,
            n,
            0,
            &mut vec![false; n],
            &mut Vec::new(),
            0.0,
            &mut best,
        );
        best
    }

    fn splitmix(state: &mut u64) -> f64 {
        *state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = *state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn identity_favoring_cost_yields_identity() {
        let cost = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let (assign, total) = hungarian(&cost).unwrap();
        assert_eq!(assign, vec![0, 1, 2]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn two_by_two_case() {
        // brute force over both permutations: {0->1, 1->0} costs 1+2=3
        let cost = vec![vec![4.0, 1.0], vec![2.0, 3.0]];
        let (assign, total) = hungarian(&cost).unwrap();
        assert_eq!(assign, vec![1, 0]);
        assert_eq!(total, 3.0);
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut state = 12345u64;
        for case in 0..200 {
            let n = 2 + case % 5; // up to 6x6
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| splitmix(&mut state)).collect())
                .collect();
            let (assign, total) = hungarian(&cost).unwrap();
            let (bf_assign, bf_total) = brute_force_assignment(&cost, n);
            assert!(
                (total - bf_total).abs() < 1e-9,
                "case {case}: {total} vs {bf_total}"
            );
            assert_eq!(assign, bf_assign, "case {case}");
        }
    }

    #[test]
    fn tie_breaking_is_lexicographically_smallest() {
        // two zero-cost optima; identity is the smaller permutation
        let cost = vec![
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let (assign, total) = hungarian(&cost).unwrap();
        let (bf, bf_total) = brute_force_assignment(&cost, 3);
        assert_eq!(total, bf_total);
        assert_eq!(assign, bf);
        assert_eq!(assign, vec![0, 1, 2]);
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        let cost = vec![vec![0.0, f64::NAN], vec![1.0, 2.0]];
        assert!(hungarian(&cost).is_err());
    }

    #[test]
    fn rectangular_inputs_are_zero_padded() {
        let cost = vec![vec![5.0, 1.0, 2.0]];
        let (assign, total) = hungarian(&cost).unwrap();
        assert_eq!(assign.len(), 3);
        assert_eq!(assign[0], 1);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let pair = LabelPair::new(vec![0, 0, 1, 1], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(clustering_accuracy(&pair).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_two_thirds_case() {
        // brute force over maps: best assigns cluster 0 -> class 0 (2 hits)
        let pair = LabelPair::new(vec![0, 1, 0], vec![0, 0, 0]).unwrap();
        let ca = clustering_accuracy(&pair).unwrap();
        assert!((ca - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn relabeling_does_not_change_accuracy() {
        let predicted = vec![0, 1, 2, 0, 1, 2, 2, 1];
        let truth = vec![0, 1, 1, 0, 2, 1, 1, 2];
        let base = clustering_accuracy(&LabelPair::new(predicted.clone(), truth.clone()).unwrap())
            .unwrap();
        let relabeled: Vec<usize> = predicted.iter().map(|&p| [2, 0, 1][p]).collect();
        let after =
            clustering_accuracy(&LabelPair::new(relabeled, truth).unwrap()).unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn nmi_of_identical_labelings_is_one() {
        let pair = LabelPair::new(vec![0, 1, 2, 0], vec![0, 1, 2, 0]).unwrap();
        assert!((nmi(&pair).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi_with(&pair, NmiNorm::Sqrt).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_of_constant_prediction_is_zero() {
        let pair = LabelPair::new(vec![0, 0, 0, 0], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(nmi(&pair).unwrap(), 0.0);
        assert_eq!(nmi_with(&pair, NmiNorm::Sqrt).unwrap(), 0.0);
    }

    #[test]
    fn nmi_of_independent_partitions_is_zero() {
        // joint counts all equal -> zero mutual information
        let pair = LabelPair::new(vec![0, 0, 1, 1], vec![0, 1, 0, 1]).unwrap();
        assert!(nmi(&pair).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nmi_of_two_single_cluster_partitions_is_one() {
        let pair = LabelPair::new(vec![0, 0], vec![0, 0]).unwrap();
        assert_eq!(nmi(&pair).unwrap(), 1.0);
        assert_eq!(nmi_with(&pair, NmiNorm::Sqrt).unwrap(), 1.0);
    }

    #[test]
    fn empty_or_mismatched_labels_rejected() {
        assert!(LabelPair::new(vec![], vec![]).is_err());
        assert!(LabelPair::new(vec![0], vec![0, 1]).is_err());
    }

    #[test]
    fn accuracy_lower_bound_on_balanced_truth() {
        // CA >= 1/K_t for any prediction on balanced truth labels
        let mut state = 777u64;
        let kt = 4;
        let truth: Vec<usize> = (0..40).map(|i| i % kt).collect();
        for _ in 0..20 {
            let predicted: Vec<usize> = (0..40)
                .map(|_| (splitmix(&mut state) * 5.0) as usize)
                .collect();
            let ca =
                clustering_accuracy(&LabelPair::new(predicted, truth.clone()).unwrap()).unwrap();
            assert!(ca >= 1.0 / kt as f64 - 1e-12);
        }
    }
}
