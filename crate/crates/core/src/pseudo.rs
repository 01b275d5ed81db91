//! Sinkhorn–Knopp pseudo-labels, confident-subset selection and label mixing.

use crate::error::{Result, RpimError};
use crate::numerics::{DenseMatrix, EPS_LOG};

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Balanced soft assignments. Rows sum to one; columns to `N/K` up to `residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub assignments: DenseMatrix,
    pub iterations_run: usize,
    /// Largest absolute deviation of a column sum from `N/K` at termination.
    pub residual: f64,
}

/// Rescales the positive kernel `max(Z, ε)` so every row carries mass 1 and
/// every column mass `N/K`.
///
/// Each iteration scales columns and then rows, so the returned rows are
/// exact. Stops after `max_iters` iterations or once the column residual
/// drops below `tol`.
pub fn sinkhorn_knopp(z: &DenseMatrix, max_iters: usize, tol: f64) -> Result<PseudoLabels> {
    let (n, k) = (z.rows(), z.cols());
    if k < 2 || n < k {
        return Err(RpimError::InvalidInput(format!(
            "sinkhorn needs N >= K >= 2, got N={n}, K={k}"
        )));
    }
    if max_iters == 0 {
        return Err(RpimError::InvalidInput("sinkhorn needs at least one iteration".into()));
    }
    if let Some(row) = z.first_non_finite_row() {
        return Err(RpimError::NonFinite {
            context: "sinkhorn input".into(),
            row,
        });
    }
    if let Some(i) = (0..n).find(|&i| z.row(i).iter().all(|&v| v <= EPS_LOG)) {
        return Err(RpimError::Degenerate(format!("sinkhorn input row {i} is entirely below the clamp")));
    }
    if let Some(c) = (0..k).find(|&c| (0..n).all(|i| z[(i, c)] <= EPS_LOG)) {
        return Err(RpimError::Degenerate(format!("sinkhorn input column {c} is entirely below the clamp")));
    }

    let mut q = z.clone();
    for v in q.values_mut() {
        *v = v.max(EPS_LOG);
    }
    let target = n as f64 / k as f64;
    let mut residual = f64::INFINITY;
    let mut iterations_run = 0;
    for it in 1..=max_iters {
        iterations_run = it;
        let col = q.column_sums();
        for i in 0..n {
            for (v, s) in q.row_mut(i).iter_mut().zip(&col) {
                *v *= target / s;
            }
        }
        for i in 0..n {
            let row = q.row_mut(i);
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        residual = q
            .column_sums()
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max);
        if residual < tol {
            break;
        }
    }
    Ok(PseudoLabels {
        assignments: q,
        iterations_run,
        residual,
    })
}

/// Confident flags, one per row of the unlabeled pseudo-label block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidentMask {
    pub selected: Vec<bool>,
    pub threshold: f64,
}

impl ConfidentMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    /// Maps the flags back to dataset indices, given the unlabeled indices
    /// the mask was computed over.
    pub fn indices(&self, unlabeled: &[usize]) -> Vec<usize> {
        debug_assert_eq!(unlabeled.len(), self.selected.len());
        unlabeled
            .iter()
            .zip(&self.selected)
            .filter(|(_, &s)| s)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Selects rows whose largest pseudo-label entry is strictly above `threshold`.
pub fn select_confident(yhat_u: &DenseMatrix, threshold: f64) -> ConfidentMask {
    let selected = yhat_u
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max) > threshold)
        .collect();
    ConfidentMask { selected, threshold }
}

/// `(1 - β)·Y + β·Ŷ`.
pub fn mix_labels(y_l: &DenseMatrix, yhat_l: &DenseMatrix, beta: f64) -> Result<DenseMatrix> {
    if y_l.rows() != yhat_l.rows() || y_l.cols() != yhat_l.cols() {
        return Err(RpimError::shape(
            "mix_labels",
            format!("{}x{}", y_l.rows(), y_l.cols()),
            format!("{}x{}", yhat_l.rows(), yhat_l.cols()),
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(RpimError::InvalidInput(format!("beta must lie in [0, 1], got {beta}")));
    }
    let values = y_l
        .values()
        .iter()
        .zip(yhat_l.values())
        .map(|(y, p)| (1.0 - beta) * y + beta * p)
        .collect();
    DenseMatrix::from_vec(y_l.rows(), y_l.cols(), values)
}
