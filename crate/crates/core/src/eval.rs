//! Clustering accuracy under optimal class matching.
//!
//! One matching between predicted clusters and true classes is computed over
//! all unlabeled samples; known- and unknown-class accuracies are read off
//! under that same matching.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpimError};
use crate::numerics::DenseMatrix;

/// A bijection on `[0, K)`; `mapping[row] = column`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub mapping: Vec<usize>,
    pub cost: f64,
}

fn tie_tolerance(cost: &DenseMatrix) -> f64 {
    let scale = cost.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    1e-9 * (1.0 + scale) * cost.rows().max(1) as f64
}

fn assignment_cost(cost: &DenseMatrix, mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum()
}

fn check_square(cost: &DenseMatrix) -> Result<()> {
    if cost.rows() != cost.cols() {
        return Err(RpimError::shape(
            "assignment cost",
            "square matrix",
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    if let Some(row) = cost.first_non_finite_row() {
        return Err(RpimError::NonFinite {
            context: "assignment cost".into(),
            row,
        });
    }
    Ok(())
}

/// Minimum-cost perfect assignment.
///
/// Runs the O(K³) shortest-augmenting-path Hungarian method, then walks rows
/// in order and moves each to the smallest column it can take without leaving
/// the set of optimal assignments, giving the lexicographically smallest
/// optimal mapping.
pub fn hungarian(cost: &DenseMatrix) -> Result<Assignment> {
    check_square(cost)?;
    let n = cost.rows();
    if n == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            cost: 0.0,
        });
    }

    // 1-based potentials and matching; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[owner[j] - 1] = j - 1;
    }
    // With optimal duals, an assignment is optimal iff it only uses edges of
    // zero reduced cost.
    let tol = tie_tolerance(cost);
    let tight = |r: usize, c: usize| cost[(r, c)] - u[r + 1] - v[c + 1] <= tol;
    lexicographic_refine(n, &mut mapping, tight);
    Ok(Assignment {
        cost: assignment_cost(cost, &mapping),
        mapping,
    })
}

/// Moves each row, in order, to the smallest tight column that still admits a
/// perfect tight matching of the rows after it.
fn lexicographic_refine(n: usize, mapping: &mut [usize], tight: impl Fn(usize, usize) -> bool) {
    let mut row_of = vec![0usize; n];
    for (r, &c) in mapping.iter().enumerate() {
        row_of[c] = r;
    }
    for i in 0..n {
        let freed = mapping[i];
        // Rows after i that can shift into `freed` through a chain of tight
        // edges; `next_col[r]` is the column r moves to.
        let mut next_col = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        for r in i + 1..n {
            if tight(r, freed) {
                next_col[r] = freed;
                queue.push_back(r);
            }
        }
        while let Some(r) = queue.pop_front() {
            let released = mapping[r];
            for r2 in i + 1..n {
                if next_col[r2] == usize::MAX && tight(r2, released) {
                    next_col[r2] = released;
                    queue.push_back(r2);
                }
            }
        }
        let best = (0..n)
            .filter(|&r| r > i && next_col[r] != usize::MAX)
            .map(|r| mapping[r])
            .filter(|&c| c < freed && tight(i, c))
            .min();
        if let Some(col) = best {
            let mut r = row_of[col];
            mapping[i] = col;
            row_of[col] = i;
            loop {
                let target = next_col[r];
                let displaced = row_of[target];
                mapping[r] = target;
                row_of[target] = r;
                if target == freed {
                    break;
                }
                r = displaced;
            }
        }
    }
}

/// Exhaustive minimum over all permutations, in lexicographic order. K ≤ 8.
pub fn brute_force_assignment(cost: &DenseMatrix) -> Result<Assignment> {
    check_square(cost)?;
    let n = cost.rows();
    if n > 8 {
        return Err(RpimError::InvalidInput(format!("brute force is limited to K <= 8, got {n}")));
    }
    let tol = tie_tolerance(cost);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let c = assignment_cost(cost, &perm);
        if c < best_cost - tol {
            best_cost = c;
            best.clone_from(&perm);
        }
    }
    Ok(Assignment {
        mapping: best,
        cost: best_cost,
    })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let Some(i) = (0..n - 1).rev().find(|&i| p[i] < p[i + 1]) else {
        return false;
    };
    let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).unwrap();
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_known: f64,
    pub acc_unknown: f64,
    pub matched: usize,
    pub matched_known: usize,
    pub matched_unknown: usize,
    pub count_known: usize,
    pub count_unknown: usize,
    /// `confusion[true][matched predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Predicted cluster → true class.
    pub assignment: Assignment,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.count_known + self.count_unknown
    }

    /// K lines of K comma-separated counts.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Accuracy of `y_pred` against `y_true` after the best cluster-to-class
/// matching. Subsets with no samples report accuracy 0.
pub fn gcd_accuracy(y_true: &[usize], y_pred: &[usize], known: &[usize], num_classes: usize) -> Result<EvalReport> {
    if y_true.len() != y_pred.len() {
        return Err(RpimError::shape("gcd_accuracy predictions", y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(RpimError::InvalidInput("accuracy of an empty sample".into()));
    }
    let k = num_classes;
    if let Some(&bad) = y_true.iter().chain(y_pred).chain(known).find(|&&c| c >= k) {
        return Err(RpimError::InvalidInput(format!("class id {bad} >= K = {k}")));
    }
    let mut is_known = vec![false; k];
    for &c in known {
        is_known[c] = true;
    }

    // counts[pred][true]; maximizing matches = minimizing negated counts.
    // Among equally good matchings, more known-class matches win: that rule
    // depends only on the counts, so every reported accuracy is unchanged by
    // relabeling the predictions. Both terms stay exact integers in f64.
    let mut counts = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[p][t] += 1;
    }
    let weight = (y_true.len() + 1) as f64;
    let cost = DenseMatrix::from_vec(
        k,
        k,
        counts
            .iter()
            .flat_map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(t, &c)| -(c as f64) * weight - if is_known[t] { c as f64 } else { 0.0 })
            })
            .collect(),
    )?;
    let assignment = hungarian(&cost)?;

    let mut confusion = vec![vec![0usize; k]; k];
    let (mut matched_known, mut matched_unknown, mut count_known, mut count_unknown) = (0, 0, 0, 0);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let mapped = assignment.mapping[p];
        confusion[t][mapped] += 1;
        let hit = (mapped == t) as usize;
        if is_known[t] {
            count_known += 1;
            matched_known += hit;
        } else {
            count_unknown += 1;
            matched_unknown += hit;
        }
    }
    let matched = matched_known + matched_unknown;
    Ok(EvalReport {
        acc_all: ratio(matched, y_true.len()),
        acc_known: ratio(matched_known, count_known),
        acc_unknown: ratio(matched_unknown, count_unknown),
        matched,
        matched_known,
        matched_unknown,
        count_known,
        count_unknown,
        confusion,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn m(n: usize, v: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(n, n, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_favoring_cost() {
        let mut c = DenseMatrix::filled(4, 4, 1.0);
        for i in 0..4 {
            c[(i, i)] = 0.0;
        }
        let a = hungarian(&c).unwrap();
        assert_eq!(a.mapping, vec![0, 1, 2, 3]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn three_by_three_example() {
        // brute force over the 6 permutations: (1,0,2) costs 1 + 2 + 2 = 5
        let c = m(3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = hungarian(&c).unwrap();
        assert_eq!(a.mapping, vec![1, 0, 2]);
        assert_eq!(a.cost, 5.0);
        assert_eq!(brute_force_assignment(&c).unwrap(), a);
    }

    #[test]
    fn row_constants_do_not_change_the_mapping() {
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let c = DenseMatrix::from_vec(5, 5, (0..25).map(|_| rng.index(10) as f64).collect()).unwrap();
            let mut shifted = c.clone();
            for r in 0..5 {
                let s = rng.index(50) as f64;
                for v in shifted.row_mut(r) {
                    *v += s;
                }
            }
            assert_eq!(hungarian(&c).unwrap().mapping, hungarian(&shifted).unwrap().mapping);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        assert_eq!(hungarian(&DenseMatrix::filled(5, 5, 3.0)).unwrap().mapping, vec![0, 1, 2, 3, 4]);
        assert_eq!(brute_force_assignment(&DenseMatrix::filled(5, 5, 3.0)).unwrap().mapping, vec![0, 1, 2, 3, 4]);
        assert_eq!(brute_force_assignment(&m(1, &[7.0])).unwrap().mapping, vec![0]);
        // rows 0 and 1 could swap columns 0 and 2 at equal cost
        let c = m(3, &[1.0, 5.0, 1.0, 1.0, 5.0, 1.0, 5.0, 0.0, 5.0]);
        assert_eq!(hungarian(&c).unwrap().mapping, vec![0, 2, 1]);
    }

    #[test]
    fn agrees_with_brute_force_on_random_matrices() {
        let mut rng = Rng::new(12);
        for _ in 0..100 {
            let c = DenseMatrix::from_vec(5, 5, (0..25).map(|_| rng.uniform_range(-5.0, 5.0)).collect()).unwrap();
            assert_eq!(hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap());
        }
        // small integer ranges produce many ties
        for n in 1..=7 {
            for _ in 0..30 {
                let c = DenseMatrix::from_vec(n, n, (0..n * n).map(|_| rng.index(3) as f64).collect()).unwrap();
                assert_eq!(hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap());
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(hungarian(&DenseMatrix::zeros(2, 3)).is_err());
        assert!(brute_force_assignment(&DenseMatrix::zeros(9, 9)).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let r = gcd_accuracy(&[0, 0, 1, 1], &[1, 1, 0, 0], &[0], 2).unwrap();
        assert_eq!((r.acc_all, r.acc_known, r.acc_unknown), (1.0, 1.0, 1.0));

        let r = gcd_accuracy(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2], &[0, 1], 3).unwrap();
        assert_eq!(r.matched, 5);
        assert!((r.acc_all - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(r.acc_known, 0.75);
        assert_eq!(r.acc_unknown, 1.0);
        assert_eq!(r.assignment.mapping, vec![0, 1, 2]);

        let r = gcd_accuracy(&[0, 0, 1, 1, 2, 2], &[1; 6], &[0], 3).unwrap();
        assert!((r.acc_all - 1.0 / 3.0).abs() < 1e-15);

        assert!(gcd_accuracy(&[], &[], &[0], 2).is_err());
        assert!(gcd_accuracy(&[0, 3], &[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn confusion_export() {
        let r = gcd_accuracy(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2], &[0, 1], 3).unwrap();
        assert_eq!(r.confusion_csv(), "2,0,0\n0,1,1\n0,0,2\n");
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn weighted_average_identity() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let t: Vec<usize> = (0..40).map(|_| rng.index(6)).collect();
            let p: Vec<usize> = (0..40).map(|_| rng.index(6)).collect();
            let r = gcd_accuracy(&t, &p, &[0, 2, 4], 6).unwrap();
            assert_eq!(r.matched, r.matched_known + r.matched_unknown);
            let lhs = r.acc_all * 40.0;
            let rhs = r.acc_known * r.count_known as f64 + r.acc_unknown * r.count_unknown as f64;
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::numerics::Rng;

        proptest! {
            #[test]
            fn relabeling_predictions_does_not_change_accuracy(seed in 0u64..500) {
                let mut rng = Rng::new(seed);
                let k = 2 + rng.index(6);
                let t: Vec<usize> = (0..30).map(|_| rng.index(k)).collect();
                let p: Vec<usize> = (0..30).map(|_| rng.index(k)).collect();
                let mut perm: Vec<usize> = (0..k).collect();
                rng.shuffle(&mut perm);
                let q: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
                let a = gcd_accuracy(&t, &p, &[0], k).unwrap();
                let b = gcd_accuracy(&t, &q, &[0], k).unwrap();
                prop_assert_eq!(a.acc_all, b.acc_all);
                prop_assert_eq!(a.acc_known, b.acc_known);
                prop_assert_eq!(a.acc_unknown, b.acc_unknown);
            }
        }
    }
}
