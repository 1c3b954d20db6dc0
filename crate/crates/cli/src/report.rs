//! CSV and JSON artifacts. CSVs carry a header row; JSON keys follow struct
//! field order so reruns are byte-identical.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dha_core::linalg::Matrix;
use dha_core::search::{ScoreMode, SearchOutcome};
use dha_core::training::{
    Baseline, ComparePoint, FusionStatus, FusionTracePoint, LossPoint, PhaseMetrics,
};
use serde::Serialize;

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Square matrix with a `head,0,1,…` header and one row per head.
pub fn write_matrix_csv(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["head".to_string()];
    header.extend((0..m.cols()).map(|j| j.to_string()));
    w.write_record(&header)?;
    for i in 0..m.rows() {
        let mut row = vec![i.to_string()];
        row.extend(m.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct RedundancyRow {
    pub layer: usize,
    pub q: Option<f64>,
    pub k: Option<f64>,
    pub v: Option<f64>,
}

pub fn write_redundancy_csv(path: &Path, rows: &[RedundancyRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn write_fusion_trace(path: &Path, trace: &[FusionTracePoint]) -> Result<()> {
    write_rows(path, trace)
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    write_rows(path, curve)
}

pub fn write_compare_csv(path: &Path, points: &[ComparePoint]) -> Result<()> {
    write_rows(path, points)
}

pub fn write_metrics(path: &Path, metrics: &[PhaseMetrics]) -> Result<()> {
    write_json(path, &metrics)
}

#[derive(Serialize)]
struct LayerLossRow {
    layer: usize,
    key_loss: f64,
    value_loss: f64,
    key_heads: usize,
    value_heads: usize,
}

#[derive(Debug, Serialize)]
pub struct SearchEntry {
    pub layer: usize,
    pub kind: &'static str,
    /// Relative to the output directory.
    pub score_matrix: String,
    pub groups: Vec<Vec<usize>>,
    pub budget: usize,
    pub loss: f64,
}

#[derive(Debug, Serialize)]
pub struct SearchReport {
    pub score_mode: ScoreMode,
    pub steps: usize,
    pub layers: Vec<SearchEntry>,
}

/// Writes score matrices under `out/scores/`, per-layer losses and the
/// search report JSON.
pub fn write_search(
    out: &Path,
    search: &SearchOutcome<f64>,
    mode: ScoreMode,
    steps: usize,
) -> Result<SearchReport> {
    let dir = out.join("scores");
    fs::create_dir_all(&dir)?;
    let mut layers = Vec::new();
    for l in 0..search.key_groupings.len() {
        for (kind, scores, grouping, budget, loss) in [
            (
                "key",
                &search.key_scores[l],
                &search.key_groupings[l],
                search.budget.key_heads[l],
                search.key_losses[l],
            ),
            (
                "value",
                &search.value_scores[l],
                &search.value_groupings[l],
                search.budget.value_heads[l],
                search.value_losses[l],
            ),
        ] {
            let rel = format!("scores/layer{l}_{kind}.csv");
            write_matrix_csv(&out.join(&rel), &scores.scores)?;
            layers.push(SearchEntry {
                layer: l,
                kind,
                score_matrix: rel,
                groups: grouping.groups.clone(),
                budget,
                loss,
            });
        }
    }
    let rows = (0..search.key_losses.len()).map(|l| LayerLossRow {
        layer: l,
        key_loss: search.key_losses[l],
        value_loss: search.value_losses[l],
        key_heads: search.budget.key_heads[l],
        value_heads: search.budget.value_heads[l],
    });
    write_rows(&out.join("layer_losses.csv"), rows)?;
    let report = SearchReport {
        score_mode: mode,
        steps,
        layers,
    };
    write_json(&out.join("search_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub baseline: Baseline,
    pub seed: u64,
    pub kv_budget_total: usize,
    pub key_heads: Vec<usize>,
    pub value_heads: Vec<usize>,
    pub kv_cache_bytes_before: u64,
    pub kv_cache_bytes_after: u64,
    pub kv_ratio: f64,
    pub fusion_status: Option<FusionStatus>,
    pub fusion_steps: Option<usize>,
    pub mha_val_loss: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub checkpoint: String,
}
