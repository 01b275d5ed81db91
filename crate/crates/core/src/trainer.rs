//! The optimization loop.
//!
//! Each epoch: forward the whole dataset, balance the predictions with
//! Sinkhorn, freeze the pseudo-labels and the confident subset, then take
//! gradient steps on the composed loss. Full-batch mode takes one step per
//! epoch; minibatch mode steps once per shuffled batch.

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, GcdSplit};
use crate::error::{Result, RpimError};
use crate::eval::{gcd_accuracy, EvalReport};
use crate::model::{forward_batch, parameter_gradients, ModelParams, ParamGrads, TransformKind};
use crate::numerics::{DenseMatrix, Rng};
use crate::objective::{entropy_sums, total_rpim_loss, total_rpim_loss_with_grad, LossBreakdown, LossInputs, LossWeights, Partition};
use crate::pseudo::{select_confident, sinkhorn_knopp, PseudoLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Full,
    MiniBatch(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub transform: TransformKind,
    pub temperature: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub batch_mode: BatchMode,
    pub seed: u64,
    /// Score the unlabeled set after every epoch (transductive; never used for control).
    pub evaluate_each_epoch: bool,
}

impl TrainConfig {
    /// Defaults for everything except λ, which has no sensible default.
    pub fn new(lambda: f64) -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::new(lambda),
            transform: TransformKind::ConditionedBiasOnly,
            temperature: 1.0,
            sinkhorn_max_iters: crate::pseudo::DEFAULT_MAX_ITERS,
            sinkhorn_tol: crate::pseudo::DEFAULT_TOL,
            batch_mode: BatchMode::Full,
            seed: 0,
            evaluate_each_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(RpimError::InvalidInput(what));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.sinkhorn_max_iters == 0 || !(self.sinkhorn_tol > 0.0) {
            return bad("sinkhorn needs max_iters >= 1 and tol > 0".into());
        }
        if self.batch_mode == BatchMode::MiniBatch(0) {
            return bad("minibatch size must be at least 1".into());
        }
        self.weights.validate()
    }
}

/// First and second moment estimates, aligned with the active parameter fields.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .active_fields()
            .into_iter()
            .map(|f| vec![0.0; params.field(f).len()])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One bias-corrected adaptive-moment step followed by decoupled weight
/// decay `p ← p − lr·wd·p`.
pub fn optimizer_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    let fields = params.active_fields();
    if grads.entries.len() != fields.len() || state.first.len() != fields.len() {
        return Err(RpimError::shape("optimizer fields", fields.len(), grads.entries.len()));
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - cfg.beta1.powi(t);
    let correction2 = 1.0 - cfg.beta2.powi(t);
    let decay = cfg.learning_rate * cfg.weight_decay;
    for (slot, (field, g)) in grads.entries.iter().enumerate() {
        if *field != fields[slot] {
            return Err(RpimError::InvalidInput(format!(
                "gradient field `{}` does not match parameter `{}`",
                field.name(),
                fields[slot].name()
            )));
        }
        let p = params.field_mut(*field);
        if p.len() != g.len() {
            return Err(RpimError::shape(field.name(), p.len(), g.len()));
        }
        let m = &mut state.first[slot];
        let v = &mut state.second[slot];
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            p[j] -= decay * p[j];
            if !p[j].is_finite() {
                return Err(RpimError::NonFiniteGradient {
                    parameter: field.name().into(),
                    index: j,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-dataset loss at the start of the epoch.
    pub loss: LossBreakdown,
    pub eval: Option<EvalReport>,
    pub confident_count: usize,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Per-epoch loss breakdown as CSV.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&r.loss.csv_row(r.epoch));
            out.push('\n');
        }
        out
    }
}

/// What the loop exposes to observers at every epoch, before the update.
pub struct EpochSnapshot<'a> {
    pub epoch: usize,
    pub params: &'a ModelParams,
    pub probs: &'a DenseMatrix,
    pub pseudo: &'a PseudoLabels,
    /// Dataset indices of the confident unlabeled samples.
    pub confident: &'a [usize],
    pub loss: &'a LossBreakdown,
}

/// Fixed per-run data derived from the split.
struct RunData<'a> {
    fs: &'a FeatureSet,
    split: &'a GcdSplit,
    partition: Partition,
    y_labeled: DenseMatrix,
    y_unlabeled: Vec<usize>,
}

pub fn train(fs: &FeatureSet, split: &GcdSplit, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_with_observer(fs, split, cfg, |_| Ok(()))
}

/// Same as [`train`], calling `observer` once per epoch.
pub fn train_with_observer<F>(fs: &FeatureSet, split: &GcdSplit, cfg: &TrainConfig, mut observer: F) -> Result<(ModelParams, TrainHistory)>
where
    F: FnMut(&EpochSnapshot) -> Result<()>,
{
    cfg.validate()?;
    fs.validate()?;
    split.validate(fs)?;
    let run = RunData {
        fs,
        split,
        partition: Partition {
            labeled: split.labeled_indices.clone(),
            unlabeled: split.unlabeled_indices.clone(),
        },
        y_labeled: fs.one_hot(&split.labeled_indices),
        y_unlabeled: split.unlabeled_indices.iter().map(|&i| fs.labels[i]).collect(),
    };

    let mut init_rng = Rng::new(cfg.seed);
    let mut params = ModelParams::init(cfg.transform, fs.dim(), fs.num_classes, cfg.temperature, &mut init_rng)?;
    let mut batch_rng = Rng::derive(cfg.seed, 1);
    let mut state = OptimizerState::new(&params);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        match cfg.batch_mode {
            BatchMode::Full => {
                let mut record = None;
                let (_, grads) = parameter_gradients(&params, &fs.features, |z| {
                    let (rec, pseudo, confident) = epoch_targets(&run, z, cfg, epoch)?;
                    let inputs = LossInputs {
                        partition: &run.partition,
                        y_labeled: &run.y_labeled,
                        pseudo: &pseudo.assignments,
                        confident: &confident,
                    };
                    let (loss, grad) = total_rpim_loss_with_grad(z, &inputs, &cfg.weights)?;
                    debug_assert_eq!(loss, rec.loss);
                    observer(&EpochSnapshot {
                        epoch,
                        params: &params,
                        probs: z,
                        pseudo: &pseudo,
                        confident: &confident,
                        loss: &loss,
                    })?;
                    let total = loss.total;
                    record = Some(rec);
                    Ok((total, grad))
                })
                .map_err(|e| at_epoch(e, epoch))?;
                history.epochs.push(record.expect("objective ran"));
                optimizer_step(&mut params, &grads, &mut state, cfg).map_err(|e| at_epoch(e, epoch))?;
            }
            BatchMode::MiniBatch(size) => {
                let z = forward_batch(&fs.features, &params).map_err(|e| at_epoch(e, epoch))?;
                let (rec, pseudo, confident) = epoch_targets(&run, &z, cfg, epoch)?;
                observer(&EpochSnapshot {
                    epoch,
                    params: &params,
                    probs: &z,
                    pseudo: &pseudo,
                    confident: &confident,
                    loss: &rec.loss,
                })?;
                history.epochs.push(rec);
                let mut order: Vec<usize> = (0..fs.len()).collect();
                batch_rng.shuffle(&mut order);
                for batch in order.chunks(size) {
                    let grads = minibatch_gradients(&run, &params, batch, &pseudo, &confident, cfg)
                        .map_err(|e| at_epoch(e, epoch))?;
                    optimizer_step(&mut params, &grads, &mut state, cfg).map_err(|e| at_epoch(e, epoch))?;
                }
            }
        }
    }
    Ok((params, history))
}

fn at_epoch(e: RpimError, epoch: usize) -> RpimError {
    match e {
        RpimError::NonFiniteGradient { parameter, .. } => RpimError::Diverged {
            epoch,
            term: format!("gradient of {parameter}"),
        },
        other => other,
    }
}

/// Pseudo-labels, confident set, loss record and invariant checks for one epoch.
fn epoch_targets(run: &RunData, z: &DenseMatrix, cfg: &TrainConfig, epoch: usize) -> Result<(EpochRecord, PseudoLabels, Vec<usize>)> {
    let pseudo = sinkhorn_knopp(z, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?;
    let yhat_u = pseudo.assignments.select_rows(&run.partition.unlabeled);
    let mask = select_confident(&yhat_u, cfg.weights.threshold);
    let confident = mask.indices(&run.partition.unlabeled);

    let (conf_sum, all_sum) = entropy_sums(z, &run.partition.unlabeled, &confident);
    if conf_sum > all_sum {
        return Err(RpimError::InvariantViolated {
            epoch,
            detail: format!("confident entropy sum {conf_sum} exceeds unlabeled entropy sum {all_sum}"),
        });
    }

    let inputs = LossInputs {
        partition: &run.partition,
        y_labeled: &run.y_labeled,
        pseudo: &pseudo.assignments,
        confident: &confident,
    };
    let loss = total_rpim_loss(z, &inputs, &cfg.weights)?;
    if let Some((term, _)) = loss.terms().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(RpimError::Diverged {
            epoch,
            term: term.into(),
        });
    }
    let eval = if cfg.evaluate_each_epoch {
        let pred: Vec<usize> = run.partition.unlabeled.iter().map(|&i| crate::numerics::argmax(z.row(i))).collect();
        Some(gcd_accuracy(&run.y_unlabeled, &pred, &run.split.known_classes, run.fs.num_classes)?)
    } else {
        None
    };
    let record = EpochRecord {
        epoch,
        loss,
        eval,
        confident_count: confident.len(),
        sinkhorn_iterations: pseudo.iterations_run,
        sinkhorn_residual: pseudo.residual,
    };
    Ok((record, pseudo, confident))
}

fn minibatch_gradients(
    run: &RunData,
    params: &ModelParams,
    batch: &[usize],
    pseudo: &PseudoLabels,
    confident: &[usize],
    cfg: &TrainConfig,
) -> Result<ParamGrads> {
    let n = run.fs.len();
    let mut labeled_row = vec![usize::MAX; n];
    for (r, &i) in run.partition.labeled.iter().enumerate() {
        labeled_row[i] = r;
    }
    let mut is_confident = vec![false; n];
    for &i in confident {
        is_confident[i] = true;
    }
    let mut partition = Partition {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
    };
    let mut label_rows = Vec::new();
    let mut local_confident = Vec::new();
    for (local, &i) in batch.iter().enumerate() {
        if labeled_row[i] != usize::MAX {
            partition.labeled.push(local);
            label_rows.push(labeled_row[i]);
        } else {
            partition.unlabeled.push(local);
            if is_confident[i] {
                local_confident.push(local);
            }
        }
    }
    let y_labeled = run.y_labeled.select_rows(&label_rows);
    let batch_pseudo = pseudo.assignments.select_rows(batch);
    let x = run.fs.features.select_rows(batch);
    let inputs = LossInputs {
        partition: &partition,
        y_labeled: &y_labeled,
        pseudo: &batch_pseudo,
        confident: &local_confident,
    };
    let (_, grads) = parameter_gradients(params, &x, |z| {
        let (loss, grad) = total_rpim_loss_with_grad(z, &inputs, &cfg.weights)?;
        Ok((loss.total, grad))
    })?;
    Ok(grads)
}

/// Predicted class of every sample under `params`.
pub fn predict(fs: &FeatureSet, params: &ModelParams) -> Result<Vec<usize>> {
    Ok(forward_batch(&fs.features, params)?.argmax_rows())
}

/// Scores `params` on the unlabeled part of `split`.
pub fn evaluate(fs: &FeatureSet, split: &GcdSplit, params: &ModelParams) -> Result<(EvalReport, Vec<usize>)> {
    let pred = predict(fs, params)?;
    let y_true: Vec<usize> = split.unlabeled_indices.iter().map(|&i| fs.labels[i]).collect();
    let y_pred: Vec<usize> = split.unlabeled_indices.iter().map(|&i| pred[i]).collect();
    Ok((gcd_accuracy(&y_true, &y_pred, &split.known_classes, fs.num_classes)?, pred))
}
