//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use rpim_core::data::{write_features_file, write_sidecar, FeatureSet, GcdSplit};
use rpim_core::eval::{brute_force_assignment, gcd_accuracy, hungarian};
use rpim_core::model::{checkpoint_bytes, forward_batch, parameter_gradients, parse_checkpoint, ModelParams, TransformKind};
use rpim_core::numerics::{DenseMatrix, Rng};
use rpim_core::objective::{total_rpim_loss, total_rpim_loss_with_grad, LossInputs, LossWeights, Partition};
use rpim_core::pseudo::{select_confident, sinkhorn_knopp};
use rpim_core::trainer::EpochSnapshot;
use rpim_harness::experiment::{ablation_settings, eta_settings, run_settings_with_hook, Dataset, ResultTable, DEFAULT_ETAS};
use rpim_harness::output::write_outputs;
use rpim_harness::ExperimentConfig;

type Outcome = (bool, String);

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// The synthetic benchmark: 10 Gaussian classes in 16 dimensions, 200
/// samples each, means 6 apart; 5 known classes with half their samples
/// labeled; λ = 0.5, η = 0.03, β = 0.05, threshold 0.5, 200 epochs.
fn benchmark(seeds: std::ops::Range<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(
        "data = synthetic
         classes = 10
         dim = 16
         samples_per_class = 200
         mean_separation = 6
         known_fraction = 0.5
         labeled_ratio = 0.5
         lambda = 0.5
         eta = 0.03
         beta = 0.05
         threshold = 0.5
         epochs = 200
         learning_rate = 0.05
         temperature = 0.1",
    )
    .unwrap();
    cfg.seeds = seeds.collect();
    cfg.workers = workers();
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Premise audit shared by every training run in this file.

#[derive(Default)]
struct Audit {
    epochs: usize,
    violations: Vec<String>,
}

/// Unlabeled indices of every (benchmark config, seed) pair in use.
struct PremiseChecker {
    unlabeled: BTreeMap<u64, Vec<usize>>,
    threshold: f64,
    audit: Mutex<Audit>,
}

impl PremiseChecker {
    fn new(cfg: &ExperimentConfig) -> Self {
        let data = Dataset::load(cfg).unwrap();
        let unlabeled = cfg
            .seeds
            .iter()
            .map(|&s| (s, data.split(cfg, s).unwrap().unlabeled_indices))
            .collect();
        Self {
            unlabeled,
            threshold: cfg.train.weights.threshold,
            audit: Mutex::new(Audit::default()),
        }
    }

    /// Recomputes both entropy sums from the dumped Z, in unlabeled order, and
    /// re-derives the confident subset from the dumped pseudo-labels.
    fn check(&self, setting: &str, seed: u64, snap: &EpochSnapshot) -> rpim_core::Result<()> {
        let unlabeled = &self.unlabeled[&seed];
        let mut confident = vec![false; snap.probs.rows()];
        for &i in snap.confident {
            confident[i] = true;
        }
        let (mut conf_sum, mut all_sum) = (0.0f64, 0.0f64);
        let mut rederived = Vec::new();
        for &i in unlabeled {
            let h = entropy(snap.probs.row(i));
            all_sum += h;
            if confident[i] {
                conf_sum += h;
            }
            let top = snap.pseudo.assignments.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if top > self.threshold {
                rederived.push(i);
            }
        }
        let mut audit = self.audit.lock().unwrap();
        audit.epochs += 1;
        if conf_sum > all_sum {
            audit.violations.push(format!("{setting} seed {seed} epoch {}: {conf_sum} > {all_sum}", snap.epoch));
        }
        if rederived != snap.confident {
            audit.violations.push(format!("{setting} seed {seed} epoch {}: confident set differs from dump", snap.epoch));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let w = LossWeights::new(0.5);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut with_confident = 0usize;
    for instance in 0..50 {
        let kind = TransformKind::ALL[instance % TransformKind::ALL.len()];
        let (n, d, k) = (32, 8, 5);
        let mut params = ModelParams::init(kind, d, k, 1.0, &mut rng).unwrap();
        for f in params.active_fields() {
            for v in params.field_mut(f) {
                *v += 0.7 * rng.normal();
            }
        }
        let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let partition = Partition {
            labeled: (0..10).collect(),
            unlabeled: (10..n).collect(),
        };
        let mut y = DenseMatrix::zeros(10, k);
        for r in 0..10 {
            y[(r, rng.index(k))] = 1.0;
        }
        let pseudo = sinkhorn_knopp(&forward_batch(&x, &params).unwrap(), 100, 1e-6).unwrap().assignments;
        let confident = select_confident(&pseudo.select_rows(&partition.unlabeled), 0.5).indices(&partition.unlabeled);
        with_confident += usize::from(!confident.is_empty());
        let inputs = LossInputs {
            partition: &partition,
            y_labeled: &y,
            pseudo: &pseudo,
            confident: &confident,
        };
        let (_, grads) = parameter_gradients(&params, &x, |z| {
            let (b, g) = total_rpim_loss_with_grad(z, &inputs, &w)?;
            Ok((b.total, g))
        })
        .unwrap();
        let loss_at = |p: &ModelParams| total_rpim_loss(&forward_batch(&x, p).unwrap(), &inputs, &w).unwrap().total;
        let mut probe = params.clone();
        for field in params.active_fields() {
            for (j, &a) in grads.get(field).unwrap().iter().enumerate() {
                let base = probe.field(field)[j];
                probe.field_mut(field)[j] = base + STEP;
                let up = loss_at(&probe);
                probe.field_mut(field)[j] = base - STEP;
                let down = loss_at(&probe);
                probe.field_mut(field)[j] = base;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < 1e-4 && secs < 10.0,
        format!(
            "50 instances, {checked} entries, max rel err {worst:.2e} (< 1e-4), {with_confident}/50 with confident rows, {secs:.2}s (< 10s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = Rng::new(2);
    let (mut row_err, mut col_err, mut max_iters) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..100 {
        let mut z = DenseMatrix::zeros(64, 10);
        for i in 0..64 {
            let raw: Vec<f64> = (0..10).map(|_| rng.uniform_range(1e-3, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (c, v) in raw.iter().enumerate() {
                z[(i, c)] = v / s;
            }
        }
        let p = sinkhorn_knopp(&z, 200, 1e-6).unwrap();
        max_iters = max_iters.max(p.iterations_run);
        for i in 0..64 {
            row_err = row_err.max((p.assignments.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        for c in 0..10 {
            let s: f64 = (0..64).map(|i| p.assignments[(i, c)]).sum();
            col_err = col_err.max((s - 6.4).abs());
        }
    }
    let two = sinkhorn_knopp(&DenseMatrix::from_vec(2, 2, vec![0.8, 0.2, 0.6, 0.4]).unwrap(), 200, 1e-9).unwrap();
    let want = [0.6202, 0.3798, 0.3798, 0.6202];
    let two_err = two
        .assignments
        .values()
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (
        row_err < 1e-6 && col_err < 1e-6 && max_iters <= 200 && two_err < 1e-4,
        format!("row err {row_err:.1e}, column err {col_err:.1e}, <= {max_iters} iterations; 2x2 err {two_err:.1e}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(3);
    let mut mismatches = 0;
    for (count, n) in [(200, 5), (50, 7)] {
        for _ in 0..count {
            let cost = DenseMatrix::from_vec(n, n, (0..n * n).map(|_| rng.index(10) as f64).collect()).unwrap();
            let h = hungarian(&cost).unwrap();
            let b = brute_force_assignment(&cost).unwrap();
            if h.mapping != b.mapping || h.cost != b.cost {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        mismatches == 0 && secs < 5.0,
        format!("250 integer matrices (200 of 5x5, 50 of 7x7), {mismatches} mismatches, {secs:.2}s (< 5s)"),
    )
}

fn criterion_5() -> Outcome {
    let mut cfg = benchmark(0..1);
    cfg.train.epochs = 50;
    let settings = ablation_settings(&cfg).unwrap();
    let pim = &settings[0];
    assert_eq!(pim.name, "pim");
    assert_eq!(pim.train.transform, TransformKind::Identity);
    let data = Dataset::load(&cfg).unwrap();
    let split = data.split(&cfg, 0).unwrap();
    let labels = data.features.labels.clone();
    let lambda = pim.train.weights.lambda;
    let diffs = Mutex::new(Vec::new());
    let hook = |_: &str, _: u64, snap: &EpochSnapshot| {
        let z = snap.probs;
        let k = z.cols();
        let ce = -split.labeled_indices.iter().map(|&i| z[(i, labels[i])].ln()).sum::<f64>() / split.labeled_indices.len() as f64;
        let pi: Vec<f64> = (0..k).map(|c| (0..z.rows()).map(|i| z[(i, c)]).sum::<f64>() / z.rows() as f64).collect();
        let marginal: f64 = pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
        let cond = split.unlabeled_indices.iter().map(|&i| entropy(z.row(i))).sum::<f64>() / split.unlabeled_indices.len() as f64;
        let eq10 = ce + marginal + lambda * cond;
        diffs.lock().unwrap().push((snap.loss.total - eq10).abs());
        Ok(())
    };
    run_settings_with_hook(&cfg, std::slice::from_ref(pim), &hook).unwrap();
    let diffs = diffs.into_inner().unwrap();
    let worst = diffs.iter().copied().fold(0.0, f64::max);
    (
        diffs.len() == 50 && worst < 1e-10,
        format!("{} epochs, max |total - recomputed PIM loss| = {worst:.2e} (< 1e-10)", diffs.len()),
    )
}

fn run_audited(cfg: &ExperimentConfig, settings: &[rpim_harness::experiment::Setting], checker: &PremiseChecker) -> ResultTable {
    run_settings_with_hook(cfg, settings, &|s, seed, snap| checker.check(s, seed, snap)).unwrap()
}

fn acc(table: &ResultTable, setting: &str, seeds: std::ops::Range<u64>, f: fn(&rpim_core::eval::EvalReport) -> f64) -> Vec<f64> {
    table
        .runs_of(setting)
        .filter(|r| seeds.contains(&r.seed))
        .map(|r| f(&r.report))
        .collect()
}

/// Criteria 6 and 7 share the paired full-RPIM / PIM runs on seeds 0..10;
/// criterion 6 reads the first five full-RPIM seeds.
fn criteria_6_7(checker: &PremiseChecker) -> (Outcome, Outcome) {
    let cfg = benchmark(0..10);
    let settings = ablation_settings(&cfg).unwrap();
    let pair = [settings[0].clone(), settings[7].clone()];
    assert_eq!((pair[0].name.as_str(), pair[1].name.as_str()), ("pim", "pim+h+lr+ls"));
    let table = run_audited(&cfg, &pair, checker);

    let all6 = acc(&table, "pim+h+lr+ls", 0..5, |r| r.acc_all);
    let slowest = table.runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let m6 = mean(&all6);
    let c6 = (
        all6.len() == 5 && m6 >= 0.90 && slowest < 60.0,
        format!(
            "mean acc_all {m6:.4} (>= 0.90) over seeds 0-4 [{}], slowest run {slowest:.1}s (< 60s)",
            all6.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let rpim = acc(&table, "pim+h+lr+ls", 0..10, |r| r.acc_unknown);
    let pim = acc(&table, "pim", 0..10, |r| r.acc_unknown);
    let diff = mean(&rpim) - mean(&pim);
    let c7 = (
        rpim.len() == 10 && pim.len() == 10 && diff >= -0.005,
        format!(
            "paired n=10: RPIM unknown {:.4} vs PIM {:.4}, difference {diff:+.4} (>= -0.005); RPIM all {:.4}, PIM all {:.4}",
            mean(&rpim),
            mean(&pim),
            mean(&acc(&table, "pim+h+lr+ls", 0..10, |r| r.acc_all)),
            mean(&acc(&table, "pim", 0..10, |r| r.acc_all)),
        ),
    );
    (c6, c7)
}

fn criterion_8(checker: &PremiseChecker) -> Outcome {
    let cfg = benchmark(0..5);
    let table = run_audited(&cfg, &eta_settings(&cfg, &DEFAULT_ETAS).unwrap(), checker);
    let means: Vec<f64> = table.rows.iter().map(|r| r.all.mean).collect();
    let spread = means.iter().copied().fold(f64::NEG_INFINITY, f64::max) - means.iter().copied().fold(f64::INFINITY, f64::min);
    (
        means.len() == 5 && spread <= 0.02,
        format!(
            "mean acc_all per eta [{}], spread {spread:.4} (<= 0.02)",
            table.rows.iter().map(|r| format!("{}: {:.4}", r.setting, r.all.mean)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_9() -> Outcome {
    let r = gcd_accuracy(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2], &[0, 1], 3).unwrap();
    let example = (r.acc_all - 5.0 / 6.0).abs() < 1e-12 && r.acc_known == 0.75 && r.acc_unknown == 1.0;

    let mut rng = Rng::new(9);
    let k = 6;
    let y_true: Vec<usize> = (0..90).map(|_| rng.index(k)).collect();
    let y_pred: Vec<usize> = y_true.iter().map(|&t| if rng.uniform() < 0.7 { t } else { rng.index(k) }).collect();
    let known = [0, 2, 3];
    let base = gcd_accuracy(&y_true, &y_pred, &known, k).unwrap();
    let mut invariant = 0;
    for _ in 0..20 {
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let relabeled: Vec<usize> = y_pred.iter().map(|&p| perm[p]).collect();
        let r = gcd_accuracy(&y_true, &relabeled, &known, k).unwrap();
        if (r.acc_all, r.acc_known, r.acc_unknown) == (base.acc_all, base.acc_known, base.acc_unknown) {
            invariant += 1;
        }
    }
    (
        example && invariant == 20,
        format!(
            "example all {:.4} known {} unknown {}; {invariant}/20 relabelings leave (all, known, unknown) = ({:.4}, {:.4}, {:.4})",
            r.acc_all, r.acc_known, r.acc_unknown, base.acc_all, base.acc_known, base.acc_unknown
        ),
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_10(checker: &PremiseChecker) -> Outcome {
    let mut cfg = benchmark(0..2);
    cfg.train.epochs = 40;
    cfg.workers = 1;
    let settings = vec![ablation_settings(&cfg).unwrap()[7].clone()];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let data = Dataset::load(&cfg).unwrap();
    let mut tables = Vec::new();
    for d in &dirs {
        let t = run_audited(&cfg, &settings, checker);
        write_outputs(d.path(), &cfg, &t, &data.features.labels).unwrap();
        tables.push(t);
    }
    let a = files_under(dirs[0].path());
    let b = files_under(dirs[1].path());
    let identical = a == b && a.len() >= 3 + 4 * 2;

    // Checkpoints read back to the trained parameters exactly.
    let ckpt_exact = tables[0].runs.iter().all(|r| {
        let rel = format!("runs/{}/seed{}/model.ckpt", r.setting, r.seed);
        let bytes = &a[&rel];
        parse_checkpoint(bytes).unwrap() == r.params && &checkpoint_bytes(&r.params).unwrap() == bytes
    });

    // Feature file: f32-representable values survive bit for bit.
    let mut fs = data.features.clone();
    for v in fs.features.values_mut() {
        *v = *v as f32 as f64;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.bin");
    write_features_file(&fs, &path).unwrap();
    let back = rpim_core::data::read_features_file(&path).unwrap();
    let feat_exact = back.labels == fs.labels
        && back.features.values().iter().zip(fs.features.values()).all(|(x, y)| x.to_bits() == y.to_bits());

    (
        identical && ckpt_exact && feat_exact,
        format!(
            "two serial runs wrote {} files, byte-identical: {identical}; checkpoint round-trip exact: {ckpt_exact}; feature-file round-trip exact: {feat_exact}",
            a.len()
        ),
    )
}

fn criterion_11() -> Outcome {
    // An arbitrary feature file: uniform noise plus a class offset, 4 classes.
    let mut rng = Rng::new(11);
    let (k, d, per) = (4, 5, 25);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..k {
        for _ in 0..per {
            rows.push((0..d).map(|j| rng.uniform() + if j == c { 3.0 } else { 0.0 }).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let fs = FeatureSet::new(DenseMatrix::from_rows(&rows, d).unwrap(), labels, k).unwrap();
    let labeled: Vec<usize> = (0..2 * per).filter(|i| i % 2 == 0).collect();
    let split = GcdSplit {
        known_classes: vec![0, 1],
        unlabeled_indices: (0..k * per).filter(|i| !labeled.contains(i)).collect(),
        labeled_indices: labeled,
    };
    let dir = tempfile::tempdir().unwrap();
    let feat = dir.path().join("feat.bin");
    let side = dir.path().join("split.csv");
    write_features_file(&fs, &feat).unwrap();
    write_sidecar(&fs, &split, std::fs::File::create(&side).unwrap()).unwrap();
    let out_dir = dir.path().join("out");

    let output = Command::new(env!("CARGO_BIN_EXE_rpim"))
        .args(["run", "--lambda", "0.5", "--epochs", "20", "--features"])
        .arg(&feat)
        .arg("--sidecar")
        .arg(&side)
        .arg("--out")
        .arg(&out_dir)
        .env_remove("RPIM_WORKERS")
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&output.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    let header_ok = lines.first().is_some_and(|h| h.split_whitespace().collect::<Vec<_>>() == ["setting", "All", "Known", "Unknown"]);
    let row_ok = lines.get(1).is_some_and(|r| {
        let cols: Vec<&str> = r.split_whitespace().collect();
        cols.len() == 4 && cols[1..].iter().all(|c| c.parse::<f64>().is_ok_and(|v| (0.0..=100.0).contains(&v)))
    });
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap_or_default();
    let csv_ok = csv.starts_with("setting,seed,acc_all,acc_known,acc_unknown,epochs,lambda,eta,beta,threshold,weight_decay\n")
        && csv.lines().count() == 2;
    (
        output.status.success() && header_ok && row_ok && csv_ok,
        format!("exit {:?}; row `{}`; results.csv ok: {csv_ok}", output.status.code(), lines.get(1).unwrap_or(&"").trim()),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    results.insert(1, guarded(criterion_1));
    results.insert(2, guarded(criterion_2));
    results.insert(3, guarded(criterion_3));
    results.insert(5, guarded(criterion_5));
    results.insert(9, guarded(criterion_9));
    results.insert(11, guarded(criterion_11));

    // Every benchmark run below is audited for the confident-entropy premise.
    let checker = PremiseChecker::new(&benchmark(0..10));
    let (c6, c7) = match catch_unwind(AssertUnwindSafe(|| criteria_6_7(&checker))) {
        Ok(pair) => pair,
        Err(_) => ((false, "panicked".into()), (false, "panicked".into())),
    };
    results.insert(6, c6);
    results.insert(7, c7);
    results.insert(8, guarded(|| criterion_8(&checker)));
    results.insert(10, guarded(|| criterion_10(&checker)));
    let audit = checker.audit.lock().unwrap();
    results.insert(
        4,
        (
            audit.epochs > 0 && audit.violations.is_empty(),
            format!(
                "{} audited epochs across the runs of criteria 6, 7, 8 and 10, {} violations{}",
                audit.epochs,
                audit.violations.len(),
                audit.violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
            ),
        ),
    );

    let mut report = String::from("\n");
    for (n, (pass, detail)) in &results {
        report.push_str(&format!("criterion {n:>2}: {} | {detail}\n", if *pass { "PASS" } else { "FAIL" }));
    }
    // Written past the test harness capture so the lines always show.
    std::io::stdout().write_all(report.as_bytes()).unwrap();
    let failed: Vec<usize> = results.iter().filter(|(_, (p, _))| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
