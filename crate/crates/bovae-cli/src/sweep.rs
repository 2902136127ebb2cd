//! Sweep driver: one train-mapping/infer/evaluate cycle per swept value,
//! selection on the validation split, test metrics reported for the pick.

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TaskKind};
use crate::stages::{self, Summary};

/// One sweep cycle's configuration and outcomes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub lambda: f64,
    pub window: usize,
    pub run_id: String,
    pub val: Summary,
    pub test: Summary,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepReport {
    /// Metric the selection used: style_score, rouge_l, or self_bleu.
    pub selection_metric: String,
    pub runs: Vec<SweepRun>,
    pub best: SweepRun,
}

fn selection_metric(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Polarity => "style_score",
        TaskKind::Compressible => "rouge_l",
        TaskKind::Copy => "self_bleu",
    }
}

fn selection_value(task: TaskKind, s: &Summary) -> f64 {
    match task {
        TaskKind::Polarity => s.style_score.unwrap_or(0.0),
        TaskKind::Compressible => s.rouge_l.unwrap_or(0.0),
        TaskKind::Copy => s.self_bleu,
    }
}

/// The per-task swept values; the window list multiplies the grid.
fn grid(cfg: &ExperimentConfig) -> Vec<(f64, usize)> {
    let lambdas: &[f64] = match cfg.task {
        TaskKind::Polarity => &cfg.sweep_lambda_sty,
        TaskKind::Compressible => &cfg.sweep_lambda_len,
        TaskKind::Copy => &[],
    };
    let lambdas: Vec<f64> =
        if lambdas.is_empty() { vec![f64::NAN] } else { lambdas.to_vec() };
    let windows: Vec<usize> =
        if cfg.sweep_k.is_empty() { vec![cfg.model.window] } else { cfg.sweep_k.clone() };
    let mut out = Vec::new();
    for &k in &windows {
        for &l in &lambdas {
            out.push((l, k));
        }
    }
    out
}

/// Applies one grid point to a copy of the base configuration. A NaN
/// lambda means "not swept for this task" and leaves the weight alone.
pub fn configured(base: &ExperimentConfig, lambda: f64, window: usize) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.model.window = window;
    if lambda.is_finite() {
        match cfg.task {
            TaskKind::Polarity => cfg.model.lambda_sty = lambda,
            TaskKind::Compressible => cfg.model.lambda_len = lambda,
            TaskKind::Copy => {}
        }
    }
    cfg
}

/// Runs the full grid sequentially; every run appends its row to the
/// results table, and the report lands in sweep.json.
pub fn sweep(base: &ExperimentConfig) -> Result<SweepReport> {
    let points = grid(base);
    anyhow::ensure!(!points.is_empty(), "empty sweep grid");
    let mut runs = Vec::with_capacity(points.len());
    for (lambda, window) in points {
        let cfg = configured(base, lambda, window);
        stages::train_mapping(&cfg)?;
        stages::infer(&cfg, "valid")?;
        let val = stages::evaluate(&cfg, "valid")?;
        stages::infer(&cfg, "test")?;
        let test = stages::evaluate(&cfg, "test")?;
        runs.push(SweepRun {
            lambda,
            window,
            run_id: cfg.run_id(),
            val,
            test,
        });
    }

    let best = runs
        .iter()
        .max_by(|a, b| {
            let (x, y) =
                (selection_value(base.task, &a.val), selection_value(base.task, &b.val));
            x.partial_cmp(&y).expect("non-finite selection metric")
        })
        .expect("non-empty runs")
        .clone();
    let report = SweepReport {
        selection_metric: selection_metric(base.task).to_string(),
        runs,
        best,
    };
    std::fs::write(
        base.out_dir.join(format!("sweep-{}-{}.json", base.task, base.mode)),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_crosses_lambdas_with_windows() {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskKind::Polarity;
        cfg.sweep_lambda_sty = vec![1.0, 2.0];
        cfg.sweep_k = vec![0, 1];
        let g = grid(&cfg);
        assert_eq!(g.len(), 4);
        assert!(g.contains(&(2.0, 1)));
    }

    #[test]
    fn copy_task_sweeps_windows_only() {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskKind::Copy;
        cfg.sweep_k = vec![0, 2];
        let g = grid(&cfg);
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(l, _)| l.is_nan()));
        let derived = configured(&cfg, f64::NAN, 2);
        assert_eq!(derived.model.lambda_sty, cfg.model.lambda_sty);
        assert_eq!(derived.model.window, 2);
    }
}
