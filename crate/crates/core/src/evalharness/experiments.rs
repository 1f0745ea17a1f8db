// SPDX-License-Identifier: MIT OR Apache-2.0

//! The three analysis experiments: BLEU per target-length bucket, metric
//! change over optimization budgets, and window-size ablation. Every grid
//! point edits a fresh copy of the session model.

use super::csv::{Cell, CsvTable};
use super::pipeline::{stratified_subset, EditSession, EditorConfig, EvalConfig, EvalReport, RunMeta};
use crate::corpus::EditRecord;
use crate::editor::ObjectiveKind;
use crate::error::Result;
use crate::weightupdate::SolverConfig;

/// Per-bucket BLEU table over runs that share one bucket layout. Empty
/// buckets stay in the table with status `empty`.
pub fn length_bucket_table(reports: &[EvalReport]) -> Result<CsvTable> {
    let mut t = CsvTable::new(EvalReport::BUCKET_HEADER.into_iter().chain(["across_bucket_std"]));
    for report in reports {
        let spread = report.across_bucket_std();
        for mut row in report.buckets_csv()?.rows {
            row.push(spread.into());
            t.push(row)?;
        }
    }
    Ok(t)
}

fn meta_for(editor: &EditorConfig, solver: &SolverConfig, seed: u64, hash: &str) -> RunMeta {
    RunMeta {
        seed,
        config_hash: hash.to_string(),
        objective: editor.objective,
        solver: solver.kind,
    }
}

/// One full run per objective kind over every record; returns the table and
/// the reports it was built from.
pub fn run_length_buckets(
    session: &EditSession,
    kinds: &[ObjectiveKind],
    editor: &EditorConfig,
    solver: &SolverConfig,
    eval: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<(CsvTable, Vec<EvalReport>)> {
    let records: Vec<&EditRecord> = session.bench.records.iter().collect();
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let ed = EditorConfig {
            objective: kind,
            ..editor.clone()
        };
        reports.push(session.run(&records, &ed, solver, eval, meta_for(&ed, solver, seed, config_hash))?);
    }
    Ok((length_bucket_table(&reports)?, reports))
}

const SUMMARY_COLUMNS: [&str; 5] = ["records", "ori_bleu", "ori_rouge_l", "para_bleu", "para_rouge_l"];

fn summary_cells(report: &EvalReport) -> Vec<Cell> {
    vec![
        report.rows.len().into(),
        report.mean_bleu().into(),
        report.mean(|r| r.original.rouge_l).into(),
        report.mean_para_bleu().into(),
        report.mean(|r| r.paraphrase.rouge_l).into(),
    ]
}

/// Rows `(steps, objective, …)` for every step budget and objective kind,
/// on the stratified sweep subset.
pub fn run_stability_sweep(
    session: &EditSession,
    editor: &EditorConfig,
    solver: &SolverConfig,
    eval: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<CsvTable> {
    eval.validate()?;
    let all: Vec<&EditRecord> = session.bench.records.iter().collect();
    let records = stratified_subset(&all, eval.sweep_records);
    let mut t = CsvTable::new(["steps", "objective"].into_iter().chain(SUMMARY_COLUMNS));
    for &steps in &eval.step_grid {
        for kind in ObjectiveKind::ALL {
            let mut ed = EditorConfig {
                objective: kind,
                ..editor.clone()
            };
            ed.optimizer.steps = steps;
            let report = session.run(&records, &ed, solver, eval, meta_for(&ed, solver, seed, config_hash))?;
            let mut row: Vec<Cell> = vec![steps.into(), kind.name().into()];
            row.extend(summary_cells(&report));
            t.push(row)?;
        }
    }
    Ok(t)
}

/// Rows per window size for the affinity-weighted objective, followed by a
/// `spread` row holding max − min of each metric column.
pub fn run_window_ablation(
    session: &EditSession,
    editor: &EditorConfig,
    solver: &SolverConfig,
    eval: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<CsvTable> {
    eval.validate()?;
    let all: Vec<&EditRecord> = session.bench.records.iter().collect();
    let records = stratified_subset(&all, eval.sweep_records);
    let mut t = CsvTable::new(["window_size", "objective"].into_iter().chain(SUMMARY_COLUMNS));
    for &size in &eval.window_grid {
        let ed = EditorConfig {
            objective: ObjectiveKind::MatryoshkaAffinity,
            window_size: size,
            ..editor.clone()
        };
        let report = session.run(&records, &ed, solver, eval, meta_for(&ed, solver, seed, config_hash))?;
        let mut row: Vec<Cell> = vec![size.into(), ObjectiveKind::MatryoshkaAffinity.name().into()];
        row.extend(summary_cells(&report));
        t.push(row)?;
    }
    let mut spread: Vec<Cell> = vec!["spread".into(), ObjectiveKind::MatryoshkaAffinity.name().into()];
    spread.push(records.len().into());
    for col in &SUMMARY_COLUMNS[1..] {
        let values: Vec<f64> = (0..t.rows.len()).filter_map(|r| t.real(r, col)).collect();
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        spread.push((hi - lo).into());
    }
    t.push(spread)?;
    Ok(t)
}
