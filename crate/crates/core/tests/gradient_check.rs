//! Hand-written reverse pass against central finite differences of the
//! forward loss.

use rpim_core::model::{forward_batch, parameter_gradients, ModelParams, TransformKind};
use rpim_core::numerics::{DenseMatrix, Rng};
use rpim_core::objective::{total_rpim_loss, total_rpim_loss_with_grad, LossInputs, LossWeights, Partition};
use rpim_core::pseudo::{select_confident, sinkhorn_knopp};

const STEP: f64 = 1e-5;
/// Below this magnitude both gradients count as zero for the relative error.
const FLOOR: f64 = 1e-6;

struct Instance {
    params: ModelParams,
    x: DenseMatrix,
    partition: Partition,
    y_labeled: DenseMatrix,
    pseudo: DenseMatrix,
    confident: Vec<usize>,
}

fn random_instance(rng: &mut Rng, kind: TransformKind, n: usize, d: usize, k: usize, temperature: f64) -> Instance {
    let mut params = ModelParams::init(kind, d, k, temperature, rng).unwrap();
    for f in params.active_fields() {
        for v in params.field_mut(f) {
            *v += rng.normal() * 0.7;
        }
    }
    let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
    let n_labeled = n / 3;
    let partition = Partition {
        labeled: (0..n_labeled).collect(),
        unlabeled: (n_labeled..n).collect(),
    };
    let mut y_labeled = DenseMatrix::zeros(n_labeled, k);
    for r in 0..n_labeled {
        y_labeled[(r, rng.index(k))] = 1.0;
    }
    let z = forward_batch(&x, &params).unwrap();
    let pseudo = sinkhorn_knopp(&z, 100, 1e-6).unwrap().assignments;
    // Threshold at the median row maximum so roughly half the unlabeled rows are confident.
    let yhat_u = pseudo.select_rows(&partition.unlabeled);
    let mut maxima: Vec<f64> = yhat_u.row_iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    maxima.sort_by(f64::total_cmp);
    let threshold = maxima[maxima.len() / 2] - 1e-12;
    let confident = select_confident(&yhat_u, threshold).indices(&partition.unlabeled);
    Instance {
        params,
        x,
        partition,
        y_labeled,
        pseudo,
        confident,
    }
}

/// Largest relative error over every parameter entry.
fn max_relative_error(inst: &Instance, w: &LossWeights) -> f64 {
    let inputs = LossInputs {
        partition: &inst.partition,
        y_labeled: &inst.y_labeled,
        pseudo: &inst.pseudo,
        confident: &inst.confident,
    };
    let loss_at = |p: &ModelParams| total_rpim_loss(&forward_batch(&inst.x, p).unwrap(), &inputs, w).unwrap().total;
    let (_, grads) = parameter_gradients(&inst.params, &inst.x, |z| {
        let (b, g) = total_rpim_loss_with_grad(z, &inputs, w)?;
        Ok((b.total, g))
    })
    .unwrap();

    let mut worst = 0.0f64;
    let mut probe = inst.params.clone();
    for field in inst.params.active_fields() {
        let analytic = grads.get(field).unwrap();
        for j in 0..analytic.len() {
            let base = probe.field(field)[j];
            probe.field_mut(field)[j] = base + STEP;
            let up = loss_at(&probe);
            probe.field_mut(field)[j] = base - STEP;
            let down = loss_at(&probe);
            probe.field_mut(field)[j] = base;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            assert!(rel < 1e-4, "{} [{j}] of {:?}: analytic {a:e}, numeric {numeric:e}", field.name(), inst.params.kind);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn all_variants_all_terms() {
    let mut rng = Rng::new(2024);
    let w = LossWeights::new(0.7);
    for kind in TransformKind::ALL {
        for temperature in [1.0, 0.5] {
            for _ in 0..4 {
                let inst = random_instance(&mut rng, kind, 24, 6, 4, temperature);
                assert!(!inst.confident.is_empty());
                max_relative_error(&inst, &w);
            }
        }
    }
}

#[test]
fn individual_terms() {
    let mut rng = Rng::new(7);
    let mut variants = vec![LossWeights::pim(0.5)];
    let mut only_r = LossWeights::pim(0.5);
    only_r.include_l_r = true;
    // a large η makes the confident-entropy term dominate
    only_r.eta = 0.9;
    variants.push(only_r);
    let mut only_s = LossWeights::pim(0.5);
    only_s.include_l_s = true;
    only_s.beta = 0.6;
    variants.push(only_s);
    for w in &variants {
        for kind in [TransformKind::ConditionedBiasOnly, TransformKind::ConditionedWeightAndBias] {
            let inst = random_instance(&mut rng, kind, 20, 5, 3, 1.0);
            max_relative_error(&inst, w);
        }
    }
}

#[test]
fn empty_confident_set_and_no_labels() {
    let mut rng = Rng::new(11);
    let w = LossWeights::new(0.5);
    let mut inst = random_instance(&mut rng, TransformKind::LinearWithBias, 18, 4, 3, 1.0);
    inst.confident.clear();
    max_relative_error(&inst, &w);

    inst.partition = Partition {
        labeled: Vec::new(),
        unlabeled: (0..18).collect(),
    };
    inst.y_labeled = DenseMatrix::zeros(0, 3);
    max_relative_error(&inst, &w);
}
