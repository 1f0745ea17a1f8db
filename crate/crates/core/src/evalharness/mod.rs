// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scoring edited models and the analysis experiments.

mod csv;
mod experiments;
mod metrics;
mod pipeline;

#[cfg(test)]
mod tests;

pub use csv::{format_real, Cell, CsvTable};
pub use experiments::{length_bucket_table, run_length_buckets, run_stability_sweep, run_window_ablation};
pub use metrics::{bleu, lcs_len, rouge_l, token_exact, MetricSet};
pub use pipeline::{
    all_records, edited_layers, evaluate_edit, locality_probe, stratified_subset, BucketAggregate, EditScores,
    EditSession, EditorConfig, EvalConfig, EvalReport, LocalitySummary, MeanStd, RecordRow, RunMeta,
};
