// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::csv::CsvTable;
use super::metrics::MetricSet;
use crate::corpus::{Benchmark, EditRecord, LengthRange, EOS};
use crate::diffcore::{kernels, DTensor, Graph};
use crate::editor::{optimize_delta, AffinityConfig, DeltaTrace, EditContext, ObjectiveKind, OptimizerConfig};
use crate::error::{Error, Result};
use crate::transformer::{corpus_perplexity, greedy_decode, GradMode, TransformerModel};
use crate::weightupdate::{apply_delta, build_preservation, compute_delta, SiteGroup, SolverConfig, SolverKind, WeightDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditorConfig {
    pub objective: ObjectiveKind,
    pub window_size: usize,
    pub optimizer: OptimizerConfig,
    pub affinity: AffinityConfig,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::MatryoshkaAffinity,
            window_size: 20,
            optimizer: OptimizerConfig::default(),
            affinity: AffinityConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Tokens decoded beyond the reference length.
    pub decode_margin: usize,
    /// Records whose shifts go into one weight solve.
    pub batch_size: usize,
    pub step_grid: Vec<usize>,
    pub window_grid: Vec<usize>,
    /// Records used by the step sweep and window ablation, spread evenly
    /// over length buckets; 0 uses every record.
    pub sweep_records: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode_margin: 8,
            batch_size: 1,
            step_grid: vec![5, 10, 15, 20, 25],
            window_grid: vec![10, 20, 40],
            sweep_records: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        if self.step_grid.is_empty() || self.step_grid.contains(&0) {
            return Err(Error::Config("eval.step_grid must be nonempty and positive".into()));
        }
        if self.window_grid.is_empty() || self.window_grid.contains(&0) {
            return Err(Error::Config("eval.window_grid must be nonempty and positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one edited model on a record's two prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditScores {
    pub original: MetricSet,
    pub paraphrase: MetricSet,
}

/// Greedy continuation of both prompts, scored against the new target.
/// Decoding stops at end-of-sequence or `|new_target| + margin` tokens.
pub fn evaluate_edit(model: &TransformerModel, record: &EditRecord, margin: usize) -> Result<EditScores> {
    let budget = record.new_target.len() + margin;
    let score = |prompt: &[usize]| -> Result<MetricSet> {
        let out = greedy_decode(model, prompt, budget, &[], Some(EOS))?;
        Ok(MetricSet::score(&out, &record.new_target))
    };
    Ok(EditScores {
        original: score(&record.prompt)?,
        paraphrase: score(&record.paraphrase_prompt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalitySummary {
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub perplexity_ratio: f64,
    /// Largest `‖f_after(x0) − f_before(x0)‖` over preserved sites and the
    /// probed layers, where `x0` is the pre-edit input of the block and
    /// `f` its MLP output. For a `W_down`-only change this is `‖W* k0 − m0‖`.
    pub preservation_residual: f64,
    pub layers: Vec<usize>,
}

pub fn locality_probe(
    before: &TransformerModel,
    after: &TransformerModel,
    heldout: &[Vec<usize>],
    preserved: &[SiteGroup],
    layers: &[usize],
) -> Result<LocalitySummary> {
    if before.config() != after.config() {
        return Err(Error::Contract("locality probe needs two models of one architecture".into()));
    }
    let perplexity_before = corpus_perplexity(before, heldout)?;
    let perplexity_after = corpus_perplexity(after, heldout)?;
    let mut worst = 0.0f64;
    for group in preserved.iter().filter(|g| !g.is_empty()) {
        let trace = before.infer(&group.tokens, &[])?;
        for &layer in layers {
            let rows = trace
                .layers
                .get(layer)
                .ok_or_else(|| Error::OutOfRange(format!("layer {layer} of {}", before.n_layers())))?;
            let mut g = Graph::new();
            let (states, _) = after.forward_block(&mut g, layer, DTensor::from_rows(&rows.resid_in)?, GradMode::Frozen)?;
            let mlp = g.value(states.mlp);
            for &p in &group.positions {
                let diff: Vec<f64> = mlp.row(p).iter().zip(&rows.mlp[p]).map(|(a, b)| a - b).collect();
                worst = worst.max(kernels::norm(&diff));
            }
        }
    }
    Ok(LocalitySummary {
        perplexity_before,
        perplexity_after,
        perplexity_ratio: perplexity_after / perplexity_before,
        preservation_residual: worst,
        layers: layers.to_vec(),
    })
}

/// Blocks a solver changes, for locality probing.
pub fn edited_layers(config: &SolverConfig) -> Vec<usize> {
    match config.kind {
        SolverKind::UnkeLayerGd => vec![config.unke_layer],
        _ => config.memit_layers.clone(),
    }
}

/// Frozen inputs shared by every edit of one experiment.
#[derive(Debug, Clone)]
pub struct EditSession<'a> {
    pub model: &'a TransformerModel,
    pub bench: &'a Benchmark,
    pub preserved: Vec<SiteGroup>,
    pub heldout: Vec<Vec<usize>>,
}

impl<'a> EditSession<'a> {
    pub fn new(model: &'a TransformerModel, bench: &'a Benchmark, solver: &SolverConfig, seed: u64) -> Result<Self> {
        let mut corpus = bench.preservation_sequences();
        if solver.preservation_sequences > 0 {
            corpus.truncate(solver.preservation_sequences);
        }
        Ok(Self {
            model,
            bench,
            preserved: build_preservation(&corpus, solver.preservation_keys, seed)?,
            heldout: bench.heldout_sequences(),
        })
    }

    /// Optimized shifts for `record` at `layer`.
    pub fn optimize(&self, record: &EditRecord, editor: &EditorConfig, layer: usize) -> Result<DeltaTrace> {
        let ctx = EditContext::new(self.model, &record.prompt, &record.new_target, editor.window_size, layer)?;
        optimize_delta(&ctx, editor.objective, &editor.optimizer, &editor.affinity)
    }

    pub fn optimize_all(&self, records: &[&EditRecord], editor: &EditorConfig, layer: usize) -> Result<Vec<DeltaTrace>> {
        records.iter().map(|r| self.optimize(r, editor, layer)).collect()
    }

    /// Turns precomputed shifts into weight edits batch by batch and scores
    /// each edited model. The session model is never modified.
    pub fn evaluate_traces(
        &self,
        records: &[&EditRecord],
        traces: &[DeltaTrace],
        solver: &SolverConfig,
        eval: &EvalConfig,
    ) -> Result<(Vec<RecordRow>, Vec<LocalitySummary>, Vec<WeightDelta>)> {
        eval.validate()?;
        if records.len() != traces.len() {
            return Err(Error::Contract(format!("{} records but {} traces", records.len(), traces.len())));
        }
        let mut rows = Vec::with_capacity(records.len());
        let mut locality = Vec::new();
        let mut deltas = Vec::new();
        for (batch, (recs, trs)) in records.chunks(eval.batch_size).zip(traces.chunks(eval.batch_size)).enumerate() {
            let delta = compute_delta(self.model, trs, &self.preserved, solver)?;
            let windows: Vec<usize> = trs.iter().map(|t| t.windows.len()).collect();
            let (r, loc) = self.score_batch(recs, &windows, batch, &delta, &edited_layers(solver), eval)?;
            rows.extend(r);
            locality.push(loc);
            deltas.push(delta);
        }
        Ok((rows, locality, deltas))
    }

    /// Applies `delta` to a copy of the session model and scores `records`
    /// (one batch) on it.
    pub fn score_batch(
        &self,
        records: &[&EditRecord],
        windows: &[usize],
        batch: usize,
        delta: &WeightDelta,
        layers: &[usize],
        eval: &EvalConfig,
    ) -> Result<(Vec<RecordRow>, LocalitySummary)> {
        let mut edited = self.model.clone();
        apply_delta(&mut edited, delta)?;
        let loc = locality_probe(self.model, &edited, &self.heldout, &self.preserved, layers)?;
        let mut rows = Vec::with_capacity(records.len());
        for (record, &windows) in records.iter().zip(windows) {
            let scores = evaluate_edit(&edited, record, eval.decode_margin)?;
            rows.push(RecordRow {
                id: record.id.clone(),
                bucket: record.length_bucket,
                target_len: record.new_target.len(),
                windows,
                batch,
                original: scores.original,
                paraphrase: scores.paraphrase,
                perplexity_ratio: loc.perplexity_ratio,
                preservation_residual: loc.preservation_residual,
            });
        }
        Ok((rows, loc))
    }

    /// Optimizes, solves and scores `records` under one configuration.
    pub fn run(
        &self,
        records: &[&EditRecord],
        editor: &EditorConfig,
        solver: &SolverConfig,
        eval: &EvalConfig,
        meta: RunMeta,
    ) -> Result<EvalReport> {
        let traces = self.optimize_all(records, editor, solver.hook_layer())?;
        self.report(records, &traces, solver, eval, meta)
    }

    pub fn report(
        &self,
        records: &[&EditRecord],
        traces: &[DeltaTrace],
        solver: &SolverConfig,
        eval: &EvalConfig,
        meta: RunMeta,
    ) -> Result<EvalReport> {
        let (rows, locality, _) = self.evaluate_traces(records, traces, solver, eval)?;
        Ok(EvalReport::new(meta, rows, locality, &self.bench.manifest.bucket_boundaries))
    }
}

/// All records of the benchmark, in order.
pub fn all_records(bench: &Benchmark) -> Vec<&EditRecord> {
    bench.records.iter().collect()
}

/// Up to `n` records taken round-robin over length buckets; 0 keeps all.
pub fn stratified_subset<'r>(records: &[&'r EditRecord], n: usize) -> Vec<&'r EditRecord> {
    if n == 0 || n >= records.len() {
        return records.to_vec();
    }
    let n_buckets = records.iter().map(|r| r.length_bucket + 1).max().unwrap_or(0);
    let mut queues: Vec<std::collections::VecDeque<&'r EditRecord>> = vec![Default::default(); n_buckets];
    for r in records {
        queues[r.length_bucket].push_back(r);
    }
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        for q in queues.iter_mut() {
            if picked.len() < n {
                if let Some(r) = q.pop_front() {
                    picked.push(r);
                }
            }
        }
    }
    let order = |r: &&EditRecord| records.iter().position(|x| x.id == r.id);
    picked.sort_by_key(order);
    picked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub config_hash: String,
    pub objective: ObjectiveKind,
    pub solver: SolverKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub id: String,
    pub bucket: usize,
    pub target_len: usize,
    pub windows: usize,
    pub batch: usize,
    pub original: MetricSet,
    pub paraphrase: MetricSet,
    pub perplexity_ratio: f64,
    pub preservation_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; NaN for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAggregate {
    pub bucket: usize,
    pub range: LengthRange,
    pub records: usize,
    pub bleu: MeanStd,
    pub rouge_l: MeanStd,
    pub para_bleu: MeanStd,
    pub para_rouge_l: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: RunMeta,
    pub rows: Vec<RecordRow>,
    pub locality: Vec<LocalitySummary>,
    pub buckets: Vec<BucketAggregate>,
}

impl EvalReport {
    pub fn new(meta: RunMeta, rows: Vec<RecordRow>, locality: Vec<LocalitySummary>, ranges: &[LengthRange]) -> Self {
        let buckets = ranges
            .iter()
            .enumerate()
            .map(|(b, &range)| {
                let sel: Vec<&RecordRow> = rows.iter().filter(|r| r.bucket == b).collect();
                let stat = |f: &dyn Fn(&RecordRow) -> f64| MeanStd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                BucketAggregate {
                    bucket: b,
                    range,
                    records: sel.len(),
                    bleu: stat(&|r| r.original.bleu),
                    rouge_l: stat(&|r| r.original.rouge_l),
                    para_bleu: stat(&|r| r.paraphrase.bleu),
                    para_rouge_l: stat(&|r| r.paraphrase.rouge_l),
                }
            })
            .collect();
        Self {
            meta,
            rows,
            locality,
            buckets,
        }
    }

    pub fn mean(&self, f: impl Fn(&RecordRow) -> f64) -> f64 {
        MeanStd::of(&self.rows.iter().map(f).collect::<Vec<_>>()).mean
    }

    pub fn mean_bleu(&self) -> f64 {
        self.mean(|r| r.original.bleu)
    }

    pub fn mean_para_bleu(&self) -> f64 {
        self.mean(|r| r.paraphrase.bleu)
    }

    /// Population standard deviation of per-bucket mean BLEU over the
    /// buckets that received records.
    pub fn across_bucket_std(&self) -> f64 {
        let means: Vec<f64> = self.buckets.iter().filter(|b| b.records > 0).map(|b| b.bleu.mean).collect();
        MeanStd::of(&means).std
    }

    pub fn max_preservation_residual(&self) -> f64 {
        self.locality.iter().map(|l| l.preservation_residual).fold(0.0, f64::max)
    }

    pub const RECORD_HEADER: [&'static str; 18] = [
        "id",
        "objective",
        "solver",
        "bucket",
        "target_len",
        "windows",
        "batch",
        "ori_bleu",
        "ori_rouge_l",
        "ori_token_exact",
        "ori_sequence_exact",
        "para_bleu",
        "para_rouge_l",
        "para_token_exact",
        "para_sequence_exact",
        "perplexity_ratio",
        "preservation_residual",
        "seed",
    ];

    pub const BUCKET_HEADER: [&'static str; 13] = [
        "objective",
        "solver",
        "bucket",
        "min_len",
        "max_len",
        "records",
        "ori_bleu_mean",
        "ori_bleu_std",
        "ori_rouge_l_mean",
        "para_bleu_mean",
        "para_bleu_std",
        "para_rouge_l_mean",
        "status",
    ];

    pub fn records_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(Self::RECORD_HEADER);
        for r in &self.rows {
            t.push(vec![
                r.id.clone().into(),
                self.meta.objective.name().into(),
                self.meta.solver.name().into(),
                r.bucket.into(),
                r.target_len.into(),
                r.windows.into(),
                r.batch.into(),
                r.original.bleu.into(),
                r.original.rouge_l.into(),
                r.original.token_exact.into(),
                r.original.sequence_exact.into(),
                r.paraphrase.bleu.into(),
                r.paraphrase.rouge_l.into(),
                r.paraphrase.token_exact.into(),
                r.paraphrase.sequence_exact.into(),
                r.perplexity_ratio.into(),
                r.preservation_residual.into(),
                self.meta.seed.to_string().into(),
            ])?;
        }
        Ok(t)
    }

    pub fn buckets_csv(&self) -> Result<CsvTable> {
        let mut t = CsvTable::new(Self::BUCKET_HEADER);
        for b in &self.buckets {
            t.push(vec![
                self.meta.objective.name().into(),
                self.meta.solver.name().into(),
                b.bucket.into(),
                b.range[0].into(),
                b.range[1].into(),
                b.records.into(),
                b.bleu.mean.into(),
                b.bleu.std.into(),
                b.rouge_l.mean.into(),
                b.para_bleu.mean.into(),
                b.para_bleu.std.into(),
                b.para_rouge_l.mean.into(),
                (if b.records == 0 { "empty" } else { "ok" }).into(),
            ])?;
        }
        Ok(t)
    }
}
