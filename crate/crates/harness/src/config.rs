//! Experiment configuration and the `key = value` config-file format.
//!
//! Recognised keys (anything else is rejected):
//!
//! | key | meaning |
//! |-----|---------|
//! | `data` | `synthetic` or `files` |
//! | `features`, `sidecar` | paths used when `data = files` |
//! | `classes`, `dim`, `samples_per_class`, `mean_separation`, `data_seed` | synthetic generator |
//! | `known_fraction`, `labeled_ratio` | split protocol for synthetic data |
//! | `lambda`, `eta`, `beta`, `threshold` | loss weights |
//! | `h`, `l_r`, `l_s` | ablation toggles (`true`/`false`) |
//! | `transform` | transform used when `h` is on |
//! | `temperature`, `epochs`, `learning_rate`, `weight_decay`, `beta1`, `beta2`, `adam_eps` | training |
//! | `sinkhorn_iters`, `sinkhorn_tol`, `batch_size` (0 = full batch), `eval_each_epoch` | training |
//! | `seeds` | comma-separated list |
//! | `setting` | row label in result tables |
//! | `output_dir` | where results are written |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rpim_core::data::{SamplesPerClass, SyntheticSpec};
use rpim_core::model::TransformKind;
use rpim_core::trainer::{BatchMode, TrainConfig};
use serde::Serialize;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        known_fraction: f64,
        labeled_ratio: f64,
    },
    Files {
        features: PathBuf,
        sidecar: PathBuf,
    },
}

/// Which of the three components sit on top of the PIM objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Ablation {
    pub h: bool,
    pub l_r: bool,
    pub l_s: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        h: true,
        l_r: true,
        l_s: true,
    };
    pub const PIM: Ablation = Ablation {
        h: false,
        l_r: false,
        l_s: false,
    };

    /// `pim`, `pim+h+lr+ls` and so on.
    pub fn label(&self) -> String {
        let mut s = String::from("pim");
        for (on, tag) in [(self.h, "+h"), (self.l_r, "+lr"), (self.l_s, "+ls")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// λ has no default; training commands fail without it.
    pub lambda: Option<f64>,
    /// Training settings; `weights.lambda` is filled from `lambda` and the
    /// component flags from `ablation` by [`ExperimentConfig::train_config`].
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub setting: Option<String>,
    pub output_dir: Option<PathBuf>,
    /// Size of the run pool; not echoed because it never changes results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                spec: SyntheticSpec {
                    classes: 10,
                    dim: 16,
                    samples_per_class: SamplesPerClass::Uniform(200),
                    mean_separation: 6.0,
                    seed: 0,
                },
                known_fraction: 0.5,
                labeled_ratio: 0.5,
            },
            lambda: None,
            train: TrainConfig::new(1.0),
            ablation: Ablation::FULL,
            seeds: vec![0],
            setting: None,
            output_dir: None,
            workers: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

impl ExperimentConfig {
    fn synthetic_mut(&mut self, key: &str) -> Result<(&mut SyntheticSpec, &mut f64, &mut f64)> {
        match &mut self.data {
            DataSource::Synthetic {
                spec,
                known_fraction,
                labeled_ratio,
            } => Ok((spec, known_fraction, labeled_ratio)),
            DataSource::Files { .. } => Err(HarnessError::Config(format!("`{key}` only applies to synthetic data"))),
        }
    }

    fn files_mut(&mut self) -> (&mut PathBuf, &mut PathBuf) {
        if !matches!(self.data, DataSource::Files { .. }) {
            self.data = DataSource::Files {
                features: PathBuf::new(),
                sidecar: PathBuf::new(),
            };
        }
        match &mut self.data {
            DataSource::Files { features, sidecar } => (features, sidecar),
            DataSource::Synthetic { .. } => unreachable!(),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "data" => match value {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic { .. }) {
                        self.data = ExperimentConfig::default().data;
                    }
                }
                "files" => {
                    self.files_mut();
                }
                _ => return Err(HarnessError::Config(format!("data must be `synthetic` or `files`, got `{value}`"))),
            },
            "features" => *self.files_mut().0 = PathBuf::from(value),
            "sidecar" => *self.files_mut().1 = PathBuf::from(value),
            "classes" => self.synthetic_mut(key)?.0.classes = parse(key, value)?,
            "dim" => self.synthetic_mut(key)?.0.dim = parse(key, value)?,
            "samples_per_class" => {
                let counts: Vec<usize> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
                self.synthetic_mut(key)?.0.samples_per_class = match counts.as_slice() {
                    [n] => SamplesPerClass::Uniform(*n),
                    _ => SamplesPerClass::PerClass(counts),
                };
            }
            "mean_separation" => self.synthetic_mut(key)?.0.mean_separation = parse(key, value)?,
            "data_seed" => self.synthetic_mut(key)?.0.seed = parse(key, value)?,
            "known_fraction" => *self.synthetic_mut(key)?.1 = parse(key, value)?,
            "labeled_ratio" => *self.synthetic_mut(key)?.2 = parse(key, value)?,
            "lambda" => self.lambda = Some(parse(key, value)?),
            "eta" => t.weights.eta = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "threshold" => t.weights.threshold = parse(key, value)?,
            "h" => self.ablation.h = parse_bool(key, value)?,
            "l_r" => self.ablation.l_r = parse_bool(key, value)?,
            "l_s" => self.ablation.l_s = parse_bool(key, value)?,
            "transform" => {
                t.transform = value
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("unknown transform `{value}`")))?
            }
            "temperature" => t.temperature = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "sinkhorn_iters" => t.sinkhorn_max_iters = parse(key, value)?,
            "sinkhorn_tol" => t.sinkhorn_tol = parse(key, value)?,
            "batch_size" => {
                t.batch_mode = match parse(key, value)? {
                    0 => BatchMode::Full,
                    n => BatchMode::MiniBatch(n),
                }
            }
            "eval_each_epoch" => t.evaluate_each_epoch = parse_bool(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "setting" => self.setting = Some(value.to_string()),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` pair given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies every setting of a config file. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| HarnessError::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        self.apply_text(&text)
    }

    /// Row label: the explicit `setting`, else the ablation label.
    pub fn setting_name(&self) -> String {
        self.setting.clone().unwrap_or_else(|| self.ablation.label())
    }

    /// The trainer configuration with λ and the ablation toggles applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let lambda = self
            .lambda
            .ok_or_else(|| HarnessError::Config("`lambda` is required for training".into()))?;
        let mut cfg = self.train.clone();
        cfg.weights.lambda = lambda;
        cfg.weights.include_l_r = self.ablation.l_r;
        cfg.weights.include_l_s = self.ablation.l_s;
        if !self.ablation.h {
            cfg.transform = TransformKind::Identity;
        }
        cfg.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("worker pool size must be at least 1".into()));
        }
        if let DataSource::Files { features, sidecar } = &self.data {
            if features.as_os_str().is_empty() || sidecar.as_os_str().is_empty() {
                return Err(HarnessError::Config("file data needs both `features` and `sidecar`".into()));
            }
        }
        Ok(())
    }
}

fn strip_prefix(e: &HarnessError) -> String {
    match e {
        HarnessError::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
