//! Loss terms of the regularized InfoMax objective.
//!
//! All quantities are losses to minimize:
//!
//! ```text
//! total = ce_sup + Σ_k π_k ln π_k + λ·H̄(Z^U) + [L_R]·γ·H̄(Z^U_T) + [L_S]·CE(mix, Z^L)
//! ```
//!
//! where `H̄` is the mean row entropy, `π` the soft marginal and `γ = λ·η`.
//! Cross-entropies take the target on the left and the prediction inside the
//! logarithm. Pseudo-labels and the confident set are constants here.

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpimError};
use crate::numerics::{clamped_ln, cross_entropy, shannon_entropy, DenseMatrix, EPS_LOG};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the unlabeled conditional entropy, in (0, 1].
    pub lambda: f64,
    /// Relative weight of L_R; the absolute weight is `gamma() = lambda * eta`.
    pub eta: f64,
    /// Pseudo-label share in the label mixture used by L_S.
    pub beta: f64,
    /// Confidence threshold on pseudo-label maxima.
    pub threshold: f64,
    pub include_l_r: bool,
    pub include_l_s: bool,
}

impl LossWeights {
    pub const DEFAULT_ETA: f64 = 0.03;
    pub const DEFAULT_BETA: f64 = 0.05;
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    /// Full objective with the default η, β and threshold.
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            eta: Self::DEFAULT_ETA,
            beta: Self::DEFAULT_BETA,
            threshold: Self::DEFAULT_THRESHOLD,
            include_l_r: true,
            include_l_s: true,
        }
    }

    /// Plain PIM: both regularizers off.
    pub fn pim(lambda: f64) -> Self {
        Self {
            include_l_r: false,
            include_l_s: false,
            ..Self::new(lambda)
        }
    }

    pub fn gamma(&self) -> f64 {
        self.lambda * self.eta
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(RpimError::InvalidInput(what));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_sup: f64,
    pub marginal_entropy_term: f64,
    pub cond_entropy_unlabeled: f64,
    /// γ-weighted, reported even when L_R is disabled.
    pub l_r: f64,
    pub l_s: f64,
    pub total: f64,
    pub confident_count: usize,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "epoch,ce_sup,marginal_entropy_term,cond_entropy_unlabeled,l_r,l_s,total,confident_count";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{},{},{}",
            self.ce_sup,
            self.marginal_entropy_term,
            self.cond_entropy_unlabeled,
            self.l_r,
            self.l_s,
            self.total,
            self.confident_count
        )
    }

    /// Recombines the stored components with the stored weights.
    pub fn recombined_total(&self) -> f64 {
        compose_total(
            self.ce_sup,
            self.marginal_entropy_term,
            self.cond_entropy_unlabeled,
            self.l_r,
            self.l_s,
            &self.weights,
        )
    }

    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("ce_sup", self.ce_sup),
            ("marginal_entropy_term", self.marginal_entropy_term),
            ("cond_entropy_unlabeled", self.cond_entropy_unlabeled),
            ("l_r", self.l_r),
            ("l_s", self.l_s),
            ("total", self.total),
        ]
    }
}

fn compose_total(ce: f64, marginal: f64, cond: f64, l_r: f64, l_s: f64, w: &LossWeights) -> f64 {
    let mut total = ce + marginal + w.lambda * cond;
    if w.include_l_r {
        total += l_r;
    }
    if w.include_l_s {
        total += l_s;
    }
    total
}

fn same_shape(context: &str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(RpimError::shape(
            context,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(())
}

fn check_one_hot(y: &DenseMatrix) -> Result<()> {
    for (i, r) in y.row_iter().enumerate() {
        let ones = r.iter().filter(|&&v| v == 1.0).count();
        let zeros = r.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != r.len() {
            return Err(RpimError::InvalidInput(format!("label row {i} is not one-hot")));
        }
    }
    Ok(())
}

fn mean_cross_entropy(targets: &DenseMatrix, z: &DenseMatrix) -> f64 {
    if z.rows() == 0 {
        return 0.0;
    }
    let sum: f64 = targets
        .row_iter()
        .zip(z.row_iter())
        .map(|(t, p)| cross_entropy(t, p))
        .sum();
    sum / z.rows() as f64
}

fn mean_entropy(z: &DenseMatrix) -> f64 {
    if z.rows() == 0 {
        return 0.0;
    }
    z.row_iter().map(shannon_entropy).sum::<f64>() / z.rows() as f64
}

/// `-(1/|L|) Σ_i Σ_k y_ik ln z_ik`.
pub fn supervised_ce(z_l: &DenseMatrix, y_l: &DenseMatrix) -> Result<f64> {
    same_shape("supervised_ce", z_l, y_l)?;
    check_one_hot(y_l)?;
    Ok(mean_cross_entropy(y_l, z_l))
}

/// Soft class marginal `π_k = (1/N) Σ_i z_ik`.
pub fn soft_marginal(z: &DenseMatrix) -> Vec<f64> {
    let n = z.rows() as f64;
    z.column_sums().into_iter().map(|s| s / n).collect()
}

/// `Σ_k π_k ln π_k`; lies in `[-ln K, 0]`.
pub fn marginal_entropy_term(z: &DenseMatrix) -> Result<f64> {
    if z.rows() == 0 {
        return Err(RpimError::InvalidInput("marginal entropy of an empty batch".into()));
    }
    Ok(-shannon_entropy(&soft_marginal(z)))
}

/// Unweighted mean row entropy of the unlabeled predictions.
pub fn conditional_entropy_term(z_u: &DenseMatrix) -> Result<f64> {
    if z_u.rows() == 0 {
        return Err(RpimError::InvalidInput("conditional entropy needs at least one unlabeled row".into()));
    }
    Ok(mean_entropy(z_u))
}

/// `γ` times the mean entropy of the confident rows; zero for an empty set.
pub fn l_r_term(z_confident: &DenseMatrix, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(RpimError::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    Ok(gamma * mean_entropy(z_confident))
}

/// Cross-entropy of the labeled predictions against `(1-β)·Y + β·Ŷ`.
pub fn l_s_term(z_l: &DenseMatrix, y_l: &DenseMatrix, yhat_l: &DenseMatrix, beta: f64) -> Result<f64> {
    same_shape("l_s_term labels", z_l, y_l)?;
    let mix = crate::pseudo::mix_labels(y_l, yhat_l, beta)?;
    Ok(mean_cross_entropy(&mix, z_l))
}

/// Which rows of a batch are labeled and which are not.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

impl Partition {
    fn validate(&self, rows: usize) -> Result<()> {
        let mut seen = vec![false; rows];
        for &i in self.labeled.iter().chain(&self.unlabeled) {
            if i >= rows {
                return Err(RpimError::InvalidInput(format!("partition index {i} out of range for {rows} rows")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(RpimError::InvalidInput(format!("row {i} appears twice in the partition")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(RpimError::InvalidInput(format!("row {i} is neither labeled nor unlabeled")));
        }
        Ok(())
    }
}

/// Everything the objective needs besides the predictions.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub partition: &'a Partition,
    /// One-hot labels, one row per entry of `partition.labeled`.
    pub y_labeled: &'a DenseMatrix,
    /// Pseudo-labels for every row of the batch.
    pub pseudo: &'a DenseMatrix,
    /// Row indices of the confident unlabeled samples.
    pub confident: &'a [usize],
}

impl LossInputs<'_> {
    fn validate(&self, z: &DenseMatrix) -> Result<Vec<bool>> {
        self.partition.validate(z.rows())?;
        if self.y_labeled.rows() != self.partition.labeled.len() || self.y_labeled.cols() != z.cols() {
            return Err(RpimError::shape(
                "labeled targets",
                format!("{}x{}", self.partition.labeled.len(), z.cols()),
                format!("{}x{}", self.y_labeled.rows(), self.y_labeled.cols()),
            ));
        }
        check_one_hot(self.y_labeled)?;
        same_shape("pseudo-labels", z, self.pseudo)?;
        let mut is_unlabeled = vec![false; z.rows()];
        for &i in &self.partition.unlabeled {
            is_unlabeled[i] = true;
        }
        let mut confident = vec![false; z.rows()];
        for &i in self.confident {
            if i >= z.rows() || !is_unlabeled[i] {
                return Err(RpimError::InvalidInput(format!(
                    "confident index {i} is not an unlabeled row"
                )));
            }
            confident[i] = true;
        }
        Ok(confident)
    }
}

/// Evaluates every term on the batch `z`. Empty labeled or unlabeled subsets
/// contribute zero to their terms.
pub fn total_rpim_loss(z: &DenseMatrix, inputs: &LossInputs, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    inputs.validate(z)?;
    if z.rows() == 0 {
        return Err(RpimError::InvalidInput("loss of an empty batch".into()));
    }
    let p = inputs.partition;
    let z_l = z.select_rows(&p.labeled);
    let z_u = z.select_rows(&p.unlabeled);
    let z_t = z.select_rows(inputs.confident);
    let yhat_l = inputs.pseudo.select_rows(&p.labeled);

    let ce_sup = mean_cross_entropy(inputs.y_labeled, &z_l);
    let marginal = marginal_entropy_term(z)?;
    let cond = mean_entropy(&z_u);
    let l_r = w.gamma() * mean_entropy(&z_t);
    let mix = crate::pseudo::mix_labels(inputs.y_labeled, &yhat_l, w.beta)?;
    let l_s = mean_cross_entropy(&mix, &z_l);
    Ok(LossBreakdown {
        ce_sup,
        marginal_entropy_term: marginal,
        cond_entropy_unlabeled: cond,
        l_r,
        l_s,
        total: compose_total(ce_sup, marginal, cond, l_r, l_s, w),
        confident_count: inputs.confident.len(),
        weights: *w,
    })
}

/// Loss breakdown plus ∂total/∂z.
pub fn total_rpim_loss_with_grad(
    z: &DenseMatrix,
    inputs: &LossInputs,
    w: &LossWeights,
) -> Result<(LossBreakdown, DenseMatrix)> {
    let breakdown = total_rpim_loss(z, inputs, w)?;
    let p = inputs.partition;
    let k = z.cols();
    let mut grad = DenseMatrix::zeros(z.rows(), k);

    // d/dz of ln max(z, ε) is 1/z above the floor and 0 below it
    let dlog = |v: f64| if v > EPS_LOG { 1.0 / v } else { 0.0 };
    // d/dz of -z ln max(z, ε)
    let dneg_xlogx = |v: f64| -(clamped_ln(v) + if v > EPS_LOG { 1.0 } else { 0.0 });

    if !p.labeled.is_empty() {
        let inv_l = 1.0 / p.labeled.len() as f64;
        let mix = if w.include_l_s {
            let yhat_l = inputs.pseudo.select_rows(&p.labeled);
            Some(crate::pseudo::mix_labels(inputs.y_labeled, &yhat_l, w.beta)?)
        } else {
            None
        };
        for (r, &i) in p.labeled.iter().enumerate() {
            for c in 0..k {
                let zv = z[(i, c)];
                let mut target = inputs.y_labeled[(r, c)];
                if let Some(m) = &mix {
                    target += m[(r, c)];
                }
                grad[(i, c)] -= target * dlog(zv) * inv_l;
            }
        }
    }

    let n = z.rows() as f64;
    for (c, pi) in soft_marginal(z).into_iter().enumerate() {
        let d = (clamped_ln(pi) + if pi > EPS_LOG { 1.0 } else { 0.0 }) / n;
        for i in 0..z.rows() {
            grad[(i, c)] += d;
        }
    }

    if !p.unlabeled.is_empty() {
        let scale = w.lambda / p.unlabeled.len() as f64;
        for &i in &p.unlabeled {
            for c in 0..k {
                grad[(i, c)] += scale * dneg_xlogx(z[(i, c)]);
            }
        }
    }

    if w.include_l_r && !inputs.confident.is_empty() {
        let scale = w.gamma() / inputs.confident.len() as f64;
        for &i in inputs.confident {
            for c in 0..k {
                grad[(i, c)] += scale * dneg_xlogx(z[(i, c)]);
            }
        }
    }
    Ok((breakdown, grad))
}

/// Sums of row entropies over the confident rows and over all unlabeled rows,
/// accumulated in the same order so the first never exceeds the second.
pub fn entropy_sums(z: &DenseMatrix, unlabeled: &[usize], confident: &[usize]) -> (f64, f64) {
    let mut is_confident = vec![false; z.rows()];
    for &i in confident {
        is_confident[i] = true;
    }
    let mut conf_sum = 0.0;
    let mut all_sum = 0.0;
    for &i in unlabeled {
        let h = shannon_entropy(z.row(i));
        all_sum += h;
        if is_confident[i] {
            conf_sum += h;
        }
    }
    (conf_sum, all_sum)
}
