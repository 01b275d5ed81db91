//! Seeded experiment runs, ablation grids, η sweeps and the weight-decay search.

use rayon::prelude::*;
use rpim_core::data::{make_gcd_split, make_search_split, read_features_file, read_sidecar, restrict_to_split, generate_synthetic, FeatureSet, GcdSplit};
use rpim_core::eval::EvalReport;
use rpim_core::model::ModelParams;
use rpim_core::trainer::{evaluate, train, train_with_observer, EpochSnapshot, TrainConfig, TrainHistory};
use rpim_core::{Rng, RpimError};
use serde::Serialize;

use crate::config::{Ablation, DataSource, ExperimentConfig};
use crate::error::{HarnessError, Result};

/// Stream ids for the generators derived from a run seed. Stream 0 and 1
/// belong to the trainer.
const SPLIT_STREAM: u64 = 2;
const SEARCH_STREAM: u64 = 3;

/// The six weight-decay candidates.
pub const WEIGHT_DECAY_CANDIDATES: [f64; 6] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05];
pub const DEFAULT_ETAS: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];

/// Tuned weight decay per benchmark dataset, already halved for final training.
pub const TUNED_WEIGHT_DECAY: [(&str, f64); 6] = [
    ("cub", 0.01),
    ("stanford_cars", 0.01),
    ("herbarium19", 0.01),
    ("cifar10", 0.025),
    ("cifar100", 0.0025),
    ("imagenet100", 0.0025),
];

pub fn tuned_weight_decay(dataset: &str) -> Option<f64> {
    let key: String = dataset
        .chars()
        .filter(char::is_ascii_alphanumeric)
        .map(|c| c.to_ascii_lowercase())
        .collect();
    let name = match key.as_str() {
        "cub" | "cub200" => "cub",
        "cars" | "stanfordcars" => "stanford_cars",
        "herbarium19" | "herbarium" => "herbarium19",
        "cifar10" => "cifar10",
        "cifar100" => "cifar100",
        "imagenet100" => "imagenet100",
        _ => return None,
    };
    TUNED_WEIGHT_DECAY.iter().find(|(n, _)| *n == name).map(|&(_, wd)| wd)
}

/// Loaded data plus, for file sources, the fixed split from the sidecar.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: FeatureSet,
    fixed_split: Option<GcdSplit>,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data {
            DataSource::Synthetic { spec, .. } => Ok(Self {
                features: generate_synthetic(spec).map_err(|e| HarnessError::Config(e.to_string()))?,
                fixed_split: None,
            }),
            DataSource::Files { features, sidecar } => {
                let fs = read_features_file(features).map_err(|e| with_path(e, features))?;
                let file = std::fs::File::open(sidecar).map_err(|e| HarnessError::io(sidecar, e))?;
                let split = read_sidecar(&fs, std::io::BufReader::new(file)).map_err(|e| with_path(e, sidecar))?;
                Ok(Self {
                    features: fs,
                    fixed_split: Some(split),
                })
            }
        }
    }

    /// The split a run with `seed` trains on. File sources always use the
    /// sidecar split; synthetic data draws a fresh split per seed.
    pub fn split(&self, cfg: &ExperimentConfig, seed: u64) -> Result<GcdSplit> {
        if let Some(split) = &self.fixed_split {
            return Ok(split.clone());
        }
        let DataSource::Synthetic {
            known_fraction,
            labeled_ratio,
            ..
        } = cfg.data
        else {
            unreachable!("file sources carry a fixed split");
        };
        make_gcd_split(&self.features, known_fraction, labeled_ratio, &mut Rng::derive(seed, SPLIT_STREAM))
            .map_err(|e| HarnessError::Config(e.to_string()))
    }
}

fn with_path(e: RpimError, path: &std::path::Path) -> HarnessError {
    HarnessError::Run {
        run: path.display().to_string(),
        source: e,
    }
}

/// One trained model and its evaluation.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub setting: String,
    pub seed: u64,
    pub train: TrainConfig,
    pub split: GcdSplit,
    pub report: EvalReport,
    /// Predicted cluster for every sample, labeled ones included.
    pub predictions: Vec<usize>,
    pub params: ModelParams,
    pub history: TrainHistory,
    /// Wall-clock training time; never written to result files.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub setting: String,
    pub seeds: usize,
    pub all: Stat,
    pub known: Stat,
    pub unknown: Stat,
}

/// Seed-averaged rows plus every underlying run, in (setting, seed) order.
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub runs: Vec<SeedRun>,
}

impl ResultTable {
    pub fn row(&self, setting: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn runs_of<'a>(&'a self, setting: &'a str) -> impl Iterator<Item = &'a SeedRun> + 'a {
        self.runs.iter().filter(move |r| r.setting == setting)
    }

    pub fn render(&self) -> String {
        render_rows(&self.rows)
    }
}

impl ResultRow {
    /// A row built from the reports of several seeds.
    pub fn from_reports(setting: &str, reports: &[EvalReport]) -> Self {
        let stat = |f: fn(&EvalReport) -> f64| Stat::of(&reports.iter().map(f).collect::<Vec<_>>());
        ResultRow {
            setting: setting.to_string(),
            seeds: reports.len(),
            all: stat(|r| r.acc_all),
            known: stat(|r| r.acc_known),
            unknown: stat(|r| r.acc_unknown),
        }
    }
}

/// Percentages in the usual All / Known / Unknown layout.
pub fn render_rows(rows: &[ResultRow]) -> String {
    let width = rows.iter().map(|r| r.setting.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>7}\n", "setting", "All", "Known", "Unknown");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.1}  {:>6.1}  {:>7.1}\n",
            r.setting,
            100.0 * r.all.mean,
            100.0 * r.known.mean,
            100.0 * r.unknown.mean
        ));
    }
    out
}

/// A named training configuration; one row of a result table.
#[derive(Debug, Clone)]
pub struct Setting {
    pub name: String,
    pub train: TrainConfig,
}

/// Called at every epoch of every run with the setting name and seed.
pub type EpochHook<'a> = &'a (dyn Fn(&str, u64, &EpochSnapshot) -> rpim_core::Result<()> + Sync);

fn run_one(data: &Dataset, cfg: &ExperimentConfig, setting: &Setting, seed: u64, hook: EpochHook) -> Result<SeedRun> {
    let split = data.split(cfg, seed)?;
    let mut train_cfg = setting.train.clone();
    train_cfg.seed = seed;
    let wrap = |e: RpimError| HarnessError::Run {
        run: format!("{} seed {seed}", setting.name),
        source: e,
    };
    let start = std::time::Instant::now();
    let (params, history) =
        train_with_observer(&data.features, &split, &train_cfg, |snap| hook(&setting.name, seed, snap)).map_err(wrap)?;
    let seconds = start.elapsed().as_secs_f64();
    let (report, predictions) = evaluate(&data.features, &split, &params).map_err(wrap)?;
    Ok(SeedRun {
        setting: setting.name.clone(),
        seed,
        train: train_cfg,
        split,
        report,
        predictions,
        params,
        history,
        seconds,
    })
}

/// Runs `jobs` on a pool of `workers` threads, preserving input order.
pub fn run_pool<T, R, F>(workers: usize, jobs: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    if workers <= 1 {
        return jobs.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.into_par_iter().map(f).collect())
}

/// Trains every setting on every seed of `cfg` with shared data and splits.
pub fn run_settings(cfg: &ExperimentConfig, settings: &[Setting]) -> Result<ResultTable> {
    run_settings_with_hook(cfg, settings, &|_, _, _| Ok(()))
}

/// [`run_settings`] with a per-epoch hook, for auditing runs as they train.
pub fn run_settings_with_hook(cfg: &ExperimentConfig, settings: &[Setting], hook: EpochHook) -> Result<ResultTable> {
    cfg.validate()?;
    let data = Dataset::load(cfg)?;
    let jobs: Vec<(&Setting, u64)> = settings
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs = run_pool(cfg.workers, jobs, |(s, seed)| run_one(&data, cfg, s, seed, hook))?;
    let rows = settings
        .iter()
        .map(|s| {
            let reports: Vec<EvalReport> = runs.iter().filter(|r| r.setting == s.name).map(|r| r.report.clone()).collect();
            ResultRow::from_reports(&s.name, &reports)
        })
        .collect();
    Ok(ResultTable { rows, runs })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let setting = Setting {
        name: cfg.setting_name(),
        train: cfg.train_config()?,
    };
    run_settings(cfg, &[setting])
}

/// The eight combinations of h, L_R and L_S, PIM-only first and the full
/// model last. Every row sees the same seeds, splits and initializations.
pub fn ablation_settings(cfg: &ExperimentConfig) -> Result<Vec<Setting>> {
    let mut out = Vec::with_capacity(8);
    for h in [false, true] {
        for (l_r, l_s) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = cfg.clone();
            c.ablation = Ablation { h, l_r, l_s };
            out.push(Setting {
                name: c.ablation.label(),
                train: c.train_config()?,
            });
        }
    }
    Ok(out)
}

pub fn run_ablation_suite(cfg: &ExperimentConfig) -> Result<ResultTable> {
    run_settings(cfg, &ablation_settings(cfg)?)
}

/// One setting per η, everything else as configured.
pub fn eta_settings(cfg: &ExperimentConfig, etas: &[f64]) -> Result<Vec<Setting>> {
    if etas.is_empty() {
        return Err(HarnessError::Config("eta sweep needs at least one value".into()));
    }
    let base = cfg.train_config()?;
    etas.iter()
        .map(|&eta| {
            let mut train = base.clone();
            train.weights.eta = eta;
            train.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok(Setting {
                name: format!("eta={eta}"),
                train,
            })
        })
        .collect()
}

pub fn run_eta_sweep(cfg: &ExperimentConfig, etas: &[f64]) -> Result<ResultTable> {
    run_settings(cfg, &eta_settings(cfg, etas)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightDecaySearch {
    /// Mean sub-unlabeled All accuracy per candidate, in ascending candidate
    /// order. Empty when only one candidate was given.
    pub scores: Vec<(f64, f64)>,
    pub best: f64,
    /// `best / 2`, the value used for final training.
    pub chosen: f64,
}

/// Trains each candidate on the search sub-split of every seed and keeps the
/// one with the highest mean All accuracy on the sub-unlabeled samples;
/// smaller decay wins ties.
pub fn search_weight_decay(cfg: &ExperimentConfig, candidates: &[f64]) -> Result<WeightDecaySearch> {
    let mut sorted = candidates.to_vec();
    if sorted.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(HarnessError::Config("weight-decay candidates must be non-negative".into()));
    }
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    match sorted.as_slice() {
        [] => return Err(HarnessError::Config("weight-decay search needs at least one candidate".into())),
        [only] => {
            return Ok(WeightDecaySearch {
                scores: Vec::new(),
                best: *only,
                chosen: only / 2.0,
            })
        }
        _ => {}
    }
    cfg.validate()?;
    let base = cfg.train_config()?;
    let data = Dataset::load(cfg)?;
    let subs = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let split = data.split(cfg, seed)?;
            let search = make_search_split(&data.features, &split, &mut Rng::derive(seed, SEARCH_STREAM))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            Ok((seed, restrict_to_split(&data.features, &search)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(f64, usize)> = sorted
        .iter()
        .flat_map(|&wd| (0..subs.len()).map(move |s| (wd, s)))
        .collect();
    let accs = run_pool(cfg.workers, jobs, |(wd, s)| {
        let (seed, (fs, split)) = &subs[s];
        let mut train_cfg = base.clone();
        train_cfg.weight_decay = wd;
        train_cfg.seed = *seed;
        train_cfg.evaluate_each_epoch = false;
        let wrap = |e| HarnessError::Run {
            run: format!("weight decay {wd} seed {seed}"),
            source: e,
        };
        let (params, _) = train(fs, split, &train_cfg).map_err(wrap)?;
        Ok(evaluate(fs, split, &params).map_err(wrap)?.0.acc_all)
    })?;

    let scores: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(i, &wd)| (wd, Stat::of(&accs[i * subs.len()..(i + 1) * subs.len()]).mean))
        .collect();
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }
    Ok(WeightDecaySearch {
        scores,
        best: best.0,
        chosen: best.0 / 2.0,
    })
}
