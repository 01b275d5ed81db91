use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rpim_core::data::{write_features_file, write_sidecar};
use rpim_core::model::read_checkpoint;
use rpim_core::trainer::evaluate;
use rpim_core::Rng;
use rpim_harness::experiment::{render_rows, Dataset, ResultRow, DEFAULT_ETAS, WEIGHT_DECAY_CANDIDATES};
use rpim_harness::kmeans::kmeans_baseline;
use rpim_harness::output::{predictions_csv, write_atomic, write_outputs};
use rpim_harness::{run_ablation_suite, run_eta_sweep, run_experiment, search_weight_decay, workers_from_env, ExperimentConfig, HarnessError, Result, ResultTable};

/// Regularized parametric InfoMax experiments on frozen features.
#[derive(Parser)]
#[command(name = "rpim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Feature file (switches the data source to files).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Split sidecar CSV for `--features`.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for result files.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one setting over all seeds.
    Run(Common),
    /// Train the eight h / L_R / L_S combinations on shared seeds.
    Ablate(Common),
    /// One row per η value.
    SweepEta {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
    },
    /// Pick the weight decay on the search sub-split.
    SearchWd {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        candidates: Option<Vec<f64>>,
    },
    /// Write a synthetic feature file and its split sidecar.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features_out: PathBuf,
        #[arg(long)]
        sidecar_out: PathBuf,
    },
    /// Score a saved checkpoint.
    EvalOnly {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// k-means reference baseline.
    Kmeans {
        #[command(flatten)]
        common: Common,
        /// Number of clusters; defaults to the number of classes.
        #[arg(long)]
        k: Option<usize>,
        /// Cluster L2-normalized features.
        #[arg(long)]
        normalize: bool,
    },
}

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    for pair in &c.set {
        cfg.set_pair(pair)?;
    }
    if let Some(p) = &c.features {
        cfg.set("features", &p.to_string_lossy())?;
    }
    if let Some(p) = &c.sidecar {
        cfg.set("sidecar", &p.to_string_lossy())?;
    }
    if let Some(l) = c.lambda {
        cfg.lambda = Some(l);
    }
    if let Some(s) = &c.seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(e) = c.epochs {
        cfg.train.epochs = e;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.workers = workers_from_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn finish_table(cfg: &ExperimentConfig, table: &ResultTable) -> Result<()> {
    print!("{}", table.render());
    if let Some(dir) = &cfg.output_dir {
        let data = Dataset::load(cfg)?;
        write_outputs(dir, cfg, table, &data.features.labels)?;
    }
    Ok(())
}

fn write_json(dir: &Option<PathBuf>, name: &str, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = dir {
        write_atomic(&dir.join(name), (serde_json::to_string_pretty(value)? + "\n").as_bytes())?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = build_config(&c)?;
            finish_table(&cfg, &run_experiment(&cfg)?)
        }
        Command::Ablate(c) => {
            let cfg = build_config(&c)?;
            finish_table(&cfg, &run_ablation_suite(&cfg)?)
        }
        Command::SweepEta { common, etas } => {
            let cfg = build_config(&common)?;
            let etas = etas.unwrap_or_else(|| DEFAULT_ETAS.to_vec());
            finish_table(&cfg, &run_eta_sweep(&cfg, &etas)?)
        }
        Command::SearchWd { common, candidates } => {
            let cfg = build_config(&common)?;
            let candidates = candidates.unwrap_or_else(|| WEIGHT_DECAY_CANDIDATES.to_vec());
            let found = search_weight_decay(&cfg, &candidates)?;
            for (wd, acc) in &found.scores {
                println!("weight_decay {wd}: sub-unlabeled All {:.1}", 100.0 * acc);
            }
            println!("best {} -> final weight_decay {}", found.best, found.chosen);
            write_json(&cfg.output_dir, "weight_decay.json", &found)
        }
        Command::GenSynthetic {
            common,
            features_out,
            sidecar_out,
        } => {
            let cfg = build_config(&common)?;
            let data = Dataset::load(&cfg)?;
            let split = data.split(&cfg, cfg.seeds[0])?;
            write_features_file(&data.features, &features_out).map_err(|e| io_path(e, &features_out))?;
            let mut sidecar = Vec::new();
            write_sidecar(&data.features, &split, &mut sidecar)?;
            write_atomic(&sidecar_out, &sidecar)?;
            println!(
                "wrote {} samples, {} classes ({} known) to {}",
                data.features.len(),
                data.features.num_classes,
                split.known_classes.len(),
                features_out.display()
            );
            Ok(())
        }
        Command::EvalOnly { common, checkpoint } => {
            let cfg = build_config(&common)?;
            let data = Dataset::load(&cfg)?;
            let file = std::fs::File::open(&checkpoint).map_err(|e| HarnessError::io(&checkpoint, e))?;
            let params = read_checkpoint(std::io::BufReader::new(file)).map_err(|e| io_path(e, &checkpoint))?;
            let split = data.split(&cfg, cfg.seeds[0])?;
            let (report, predictions) = evaluate(&data.features, &split, &params)?;
            print!("{}", render_rows(&[ResultRow::from_reports("checkpoint", std::slice::from_ref(&report))]));
            if let Some(dir) = &cfg.output_dir {
                write_atomic(&dir.join("predictions.csv"), predictions_csv(&data.features.labels, &predictions, &split.labeled_indices).as_bytes())?;
                write_atomic(&dir.join("confusion.csv"), report.confusion_csv().as_bytes())?;
            }
            Ok(())
        }
        Command::Kmeans { common, k, normalize } => {
            let cfg = build_config(&common)?;
            let data = Dataset::load(&cfg)?;
            let k = k.unwrap_or(data.features.num_classes);
            let reports = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let split = data.split(&cfg, seed)?;
                    Ok(kmeans_baseline(&data.features, &split, k, normalize, &mut Rng::new(seed))?)
                })
                .collect::<Result<Vec<_>>>()?;
            let row = ResultRow::from_reports("kmeans", &reports);
            print!("{}", render_rows(std::slice::from_ref(&row)));
            write_json(&cfg.output_dir, "kmeans.json", &row)
        }
    }
}

fn io_path(e: rpim_core::RpimError, path: &Path) -> HarnessError {
    match e {
        rpim_core::RpimError::Io(source) => HarnessError::io(path, source),
        other => HarnessError::Run {
            run: path.display().to_string(),
            source: other,
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
