//! Emits tidy plot data from the results table and loss trails. No
//! rendering happens here; any plotting tool can consume the output.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::results::HEADER;

#[derive(Debug, Serialize)]
struct ScatterPoint {
    run_id: String,
    mode: String,
    self_bleu: f64,
    accuracy: f64,
}

fn column_index(name: &str) -> usize {
    HEADER
        .split(',')
        .position(|c| c == name)
        .unwrap_or_else(|| panic!("{name} is not a results column"))
}

fn parse_cell(cells: &[&str], col: usize, name: &str, line: usize) -> Result<f64> {
    let raw = cells[col];
    anyhow::ensure!(!raw.is_empty(), "results line {line}: empty column {name}");
    raw.parse::<f64>()
        .with_context(|| format!("results line {line}: bad {name} value {raw:?}"))
}

/// Accuracy-vs-self-BLEU scatter data from a results table: one point per
/// run, written as both CSV and JSON. Returns the number of points.
pub fn emit_scatter(results: &Path, out_dir: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(results)
        .with_context(|| format!("missing results table {}", results.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| anyhow::anyhow!("results table is empty"))?;
    anyhow::ensure!(
        header == HEADER,
        "results line 1: unexpected header {header:?}"
    );
    let want = HEADER.split(',').count();
    let (id_col, mode_col) = (column_index("run_id"), column_index("mode"));
    let (bleu_col, acc_col) =
        (column_index("test_self_bleu"), column_index("test_accuracy"));

    let mut points = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        anyhow::ensure!(
            cells.len() == want,
            "results line {n}: expected {want} columns, found {}",
            cells.len()
        );
        points.push(ScatterPoint {
            run_id: cells[id_col].to_string(),
            mode: cells[mode_col].to_string(),
            self_bleu: parse_cell(&cells, bleu_col, "test_self_bleu", n)?,
            accuracy: parse_cell(&cells, acc_col, "test_accuracy", n)?,
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("run_id,mode,self_bleu,accuracy\n");
    for p in &points {
        csv.push_str(&format!("{},{},{},{}\n", p.run_id, p.mode, p.self_bleu, p.accuracy));
    }
    std::fs::write(out_dir.join("scatter.csv"), csv)?;
    std::fs::write(
        out_dir.join("scatter.json"),
        serde_json::to_string_pretty(&points)? + "\n",
    )?;
    Ok(points.len())
}

/// Re-emits each loss trail as (step, loss) pairs, CSV and JSON side by
/// side. Returns the number of trails exported.
pub fn emit_loss_curves(out_dir: &Path) -> Result<usize> {
    let mut trails: Vec<std::path::PathBuf> = std::fs::read_dir(out_dir)
        .with_context(|| format!("reading {}", out_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("losses-") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    trails.sort();

    for path in &trails {
        let text = std::fs::read_to_string(path)?;
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let n = i + 1;
            let cells: Vec<&str> = line.split(',').collect();
            anyhow::ensure!(
                cells.len() >= 2,
                "{} line {n}: expected step,loss columns",
                path.display()
            );
            let step: usize = cells[0]
                .parse()
                .with_context(|| format!("{} line {n}: bad step {:?}", path.display(), cells[0]))?;
            let loss: f64 = cells[1]
                .parse()
                .with_context(|| format!("{} line {n}: bad loss {:?}", path.display(), cells[1]))?;
            pairs.push((step, loss));
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trail");
        let mut csv = String::from("step,loss\n");
        for (s, l) in &pairs {
            csv.push_str(&format!("{s},{l}\n"));
        }
        std::fs::write(out_dir.join(format!("plot-{stem}.csv")), csv)?;
        let rows: Vec<serde_json::Value> = pairs
            .iter()
            .map(|(s, l)| serde_json::json!({"step": s, "loss": l}))
            .collect();
        std::fs::write(
            out_dir.join(format!("plot-{stem}.json")),
            serde_json::to_string_pretty(&rows)? + "\n",
        )?;
    }
    Ok(trails.len())
}
