//! The master results table: one row per completed run, fixed header,
//! append-only. Every hyperparameter that distinguishes runs is a column,
//! so the file is self-describing.

use std::path::Path;

use anyhow::{Context, Result};

use crate::config::ExperimentConfig;
use crate::stages::Summary;

pub const HEADER: &str = "run_id,task,mode,variant,seed,d,r,lambda_l0,lambda_sty,lambda_len,\
window,map_steps,val_accuracy,val_self_bleu,val_style_score,val_rouge_l,val_avg_len_in,\
val_avg_len_out,test_accuracy,test_self_bleu,test_style_score,test_rouge_l,test_avg_len_in,\
test_avg_len_out";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metric_cells(s: Option<&Summary>) -> String {
    match s {
        Some(s) => format!(
            "{},{},{},{},{},{}",
            opt(s.accuracy),
            s.self_bleu,
            opt(s.style_score),
            opt(s.rouge_l),
            s.avg_len_in,
            s.avg_len_out
        ),
        None => ",,,,,".to_string(),
    }
}

/// Appends one run's row, creating the file with its header on first use
/// and refusing to append to a file whose header drifted.
pub fn append_run(
    cfg: &ExperimentConfig,
    val: Option<&Summary>,
    test: &Summary,
) -> Result<()> {
    let path = cfg.results_path();
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        cfg.run_id(),
        cfg.task,
        cfg.mode,
        cfg.variant,
        cfg.seed,
        cfg.model.d,
        cfg.model.r,
        cfg.model.lambda_l0,
        cfg.model.lambda_sty,
        cfg.model.lambda_len,
        cfg.model.window,
        cfg.map_steps,
        metric_cells(val),
        metric_cells(Some(test))
    );
    append_row(&path, &row)
}

pub fn append_row(path: &Path, row: &str) -> Result<()> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(existing) => {
            let first = existing.lines().next().unwrap_or("");
            anyhow::ensure!(
                first == HEADER,
                "{} has an unexpected header; refusing to append",
                path.display()
            );
            existing
        }
        Err(_) => format!("{HEADER}\n"),
    };
    text.push_str(row);
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
