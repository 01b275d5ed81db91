//! Result files. Everything is written to a temporary sibling first and
//! renamed into place, so readers never see a half-written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rpim_core::model::checkpoint_bytes;
use serde::Serialize;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{ResultTable, SeedRun};

pub const RESULTS_CSV_HEADER: &str = "setting,seed,acc_all,acc_known,acc_unknown,epochs,lambda,eta,beta,threshold,weight_decay";
pub const TABLE_CSV_HEADER: &str = "setting,seeds,all_mean,all_std,known_mean,known_std,unknown_mean,unknown_std";

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| HarnessError::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        HarnessError::io(path, e)
    })
}

/// One line per (setting, seed).
pub fn results_csv(table: &ResultTable) -> String {
    let mut out = format!("{RESULTS_CSV_HEADER}\n");
    for r in &table.runs {
        let w = &r.train.weights;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.setting,
            r.seed,
            r.report.acc_all,
            r.report.acc_known,
            r.report.acc_unknown,
            r.train.epochs,
            w.lambda,
            w.eta,
            w.beta,
            w.threshold,
            r.train.weight_decay
        ));
    }
    out
}

/// Seed-averaged rows with standard deviations.
pub fn table_csv(table: &ResultTable) -> String {
    let mut out = format!("{TABLE_CSV_HEADER}\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.setting, r.seeds, r.all.mean, r.all.std, r.known.mean, r.known.std, r.unknown.mean, r.unknown.std
        ));
    }
    out
}

#[derive(Serialize)]
struct RunRecord<'a> {
    setting: &'a str,
    seed: u64,
    acc_all: f64,
    acc_known: f64,
    acc_unknown: f64,
    known_classes: &'a [usize],
    epochs: usize,
    learning_rate: f64,
    weight_decay: f64,
    transform: String,
    lambda: f64,
    eta: f64,
    beta: f64,
    threshold: f64,
    include_l_r: bool,
    include_l_s: bool,
}

pub fn results_json(cfg: &ExperimentConfig, table: &ResultTable) -> Result<String> {
    let runs: Vec<RunRecord> = table
        .runs
        .iter()
        .map(|r| RunRecord {
            setting: &r.setting,
            seed: r.seed,
            acc_all: r.report.acc_all,
            acc_known: r.report.acc_known,
            acc_unknown: r.report.acc_unknown,
            known_classes: &r.split.known_classes,
            epochs: r.train.epochs,
            learning_rate: r.train.learning_rate,
            weight_decay: r.train.weight_decay,
            transform: r.train.transform.to_string(),
            lambda: r.train.weights.lambda,
            eta: r.train.weights.eta,
            beta: r.train.weights.beta,
            threshold: r.train.weights.threshold,
            include_l_r: r.train.weights.include_l_r,
            include_l_s: r.train.weights.include_l_s,
        })
        .collect();
    let doc = json!({
        "config": cfg,
        "runs": runs,
        "aggregates": table.rows,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// `index,label,prediction,is_labeled` for every sample; together with the
/// known classes in the results file this is enough to recompute accuracy.
pub fn predictions_csv(labels: &[usize], predictions: &[usize], labeled_indices: &[usize]) -> String {
    let mut labeled = vec![false; labels.len()];
    for &i in labeled_indices {
        labeled[i] = true;
    }
    let mut out = String::from("index,label,prediction,is_labeled\n");
    for (i, (&y, &p)) in labels.iter().zip(predictions).enumerate() {
        out.push_str(&format!("{i},{y},{p},{}\n", u8::from(labeled[i])));
    }
    out
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_' | '+' | '=') { c } else { '_' })
        .collect()
}

pub fn run_dir(root: &Path, run: &SeedRun) -> PathBuf {
    root.join("runs").join(safe_name(&run.setting)).join(format!("seed{}", run.seed))
}

/// Writes `results.csv`, `table.csv`, `results.json` and, per run,
/// predictions, confusion matrix, loss history and the final checkpoint.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, table: &ResultTable, labels: &[usize]) -> Result<()> {
    write_atomic(&dir.join("results.csv"), results_csv(table).as_bytes())?;
    write_atomic(&dir.join("table.csv"), table_csv(table).as_bytes())?;
    write_atomic(&dir.join("results.json"), results_json(cfg, table)?.as_bytes())?;
    for run in &table.runs {
        let rd = run_dir(dir, run);
        write_atomic(&rd.join("predictions.csv"), predictions_csv(labels, &run.predictions, &run.split.labeled_indices).as_bytes())?;
        write_atomic(&rd.join("confusion.csv"), run.report.confusion_csv().as_bytes())?;
        write_atomic(&rd.join("history.csv"), run.history.loss_csv().as_bytes())?;
        write_atomic(&rd.join("model.ckpt"), &checkpoint_bytes(&run.params)?)?;
    }
    Ok(())
}
