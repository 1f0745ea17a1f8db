// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::Digest;

use super::config::RunConfig;
use crate::corpus::{build_benchmark, Benchmark, EditRecord};
use crate::editor::{plan_windows, ObjectiveKind};
use crate::error::{Error, Result};
use crate::evalharness::{
    all_records, edited_layers, evaluate_edit, format_real, length_bucket_table, run_length_buckets,
    run_stability_sweep, run_window_ablation, Cell, CsvTable, EditSession, EvalReport, RunMeta,
};
use crate::io::{read_artifact_string, write_atomic};
use crate::transformer::{pretrain, TransformerModel};
use crate::weightupdate::WeightDelta;

pub const BENCH_FILE: &str = "bench.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Provenance of one subcommand invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_hash: cfg.hash()?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    fn add(&mut self, dir: &Path, path: &Path) {
        let rel = path.strip_prefix(dir).unwrap_or(path);
        self.artifacts.push(rel.display().to_string());
    }

    fn time(&mut self, stage: &str, since: Instant) {
        self.timings.insert(stage.to_string(), since.elapsed().as_secs_f64());
    }

    /// Writes `manifest-<command>-<hash>.toml` after checking every listed
    /// artifact exists.
    fn finish(mut self, dir: &Path) -> Result<(RunManifest, PathBuf)> {
        if let Some(missing) = self.artifacts.iter().find(|a| !dir.join(a).exists()) {
            return Err(Error::MissingArtifact(dir.join(missing)));
        }
        self.artifacts.sort();
        let path = dir.join(format!("manifest-{}-{}.toml", self.command, self.config_hash));
        let text = toml::to_string(&self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&path, text.as_bytes())?;
        Ok((self, path))
    }
}

/// Result of a subcommand: its manifest and the text to print.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub summary: String,
}

fn finish(manifest: RunManifest, dir: &Path, summary: String) -> Result<CommandOutput> {
    let (manifest, manifest_path) = manifest.finish(dir)?;
    Ok(CommandOutput {
        manifest,
        manifest_path,
        summary,
    })
}

fn load_bench(dir: &Path) -> Result<Benchmark> {
    Benchmark::load(&dir.join(BENCH_FILE))
}

fn load_model(dir: &Path) -> Result<TransformerModel> {
    TransformerModel::load(&dir.join(CHECKPOINT_FILE))
}

fn label(cfg: &RunConfig) -> String {
    format!("{}-{}", cfg.editor.objective.name(), cfg.solver.kind.name())
}

fn meta(cfg: &RunConfig) -> Result<RunMeta> {
    Ok(RunMeta {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        objective: cfg.editor.objective,
        solver: cfg.solver.kind,
    })
}

fn delta_path(dir: &Path, cfg: &RunConfig, hash: &str, batch: usize) -> PathBuf {
    dir.join(format!("delta-{}-{hash}-b{batch:03}.ckpt", label(cfg)))
}

/// Writes the benchmark records and the manifest that regenerates them.
pub fn cmd_genbench(cfg: &RunConfig) -> Result<CommandOutput> {
    let dir = &cfg.output_dir;
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("genbench", cfg)?;
    let bench = build_benchmark(&cfg.bench)?;
    let (jsonl, bench_manifest) = bench.write(&dir.join(BENCH_FILE))?;
    manifest.add(dir, &jsonl);
    manifest.add(dir, &bench_manifest);
    manifest.time("genbench", t0);
    let summary = format!(
        "benchmark: {} records in {} length buckets, vocabulary {}",
        bench.records.len(),
        bench.manifest.bucket_boundaries.len(),
        bench.vocab.len()
    );
    finish(manifest, dir, summary)
}

/// Pretrains a model on the benchmark's corpus (regenerated from the
/// configuration) and writes the checkpoint and the training log.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<CommandOutput> {
    let dir = &cfg.output_dir;
    let hash = cfg.hash()?;
    let mut manifest = RunManifest::new("pretrain", cfg)?;
    let bench = build_benchmark(&cfg.bench)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = bench.vocab.len();
    let longest = bench.training_sequences().iter().chain(&bench.heldout_sequences()).map(Vec::len).max().unwrap_or(0);
    let longest_edit = bench.records.iter().map(|r| r.prompt.len().max(r.paraphrase_prompt.len()) + r.new_target.len() + cfg.eval.decode_margin).max().unwrap_or(0);
    if model_cfg.max_context < longest.max(longest_edit) {
        return Err(Error::Config(format!(
            "model.max_context = {} is shorter than the longest sequence ({})",
            model_cfg.max_context,
            longest.max(longest_edit)
        )));
    }
    let t0 = Instant::now();
    let mut model = TransformerModel::init(model_cfg)?;
    let log = pretrain(&mut model, &bench.training_sequences(), &bench.heldout_sequences(), &cfg.train)?;
    manifest.time("pretrain", t0);
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    manifest.add(dir, &ckpt);

    let mut table = CsvTable::new(["step", "learning_rate", "loss", "heldout_perplexity"]);
    let last = log.rows.len().saturating_sub(1);
    for (i, row) in log.rows.iter().enumerate() {
        let ppl: Cell = if i == last { log.final_heldout_perplexity.into() } else { "".into() };
        table.push(vec![row.step.into(), row.learning_rate.into(), row.loss.into(), ppl])?;
    }
    let csv = table.write(dir, "train", &hash)?;
    manifest.add(dir, &csv);
    let summary = format!(
        "held-out perplexity {} -> {}",
        format_real(log.initial_heldout_perplexity),
        format_real(log.final_heldout_perplexity)
    );
    finish(manifest, dir, summary)
}

/// Optimizes shifts for every record, solves for weight edits batch by
/// batch, exports traces and deltas, and scores the edited models.
pub fn cmd_edit(cfg: &RunConfig) -> Result<CommandOutput> {
    let dir = &cfg.output_dir;
    let hash = cfg.hash()?;
    let mut manifest = RunManifest::new("edit", cfg)?;
    let bench = load_bench(dir)?;
    let model = load_model(dir)?;
    let session = EditSession::new(&model, &bench, &cfg.solver, cfg.seed)?;
    let records = all_records(&bench);

    let t0 = Instant::now();
    let traces = session.optimize_all(&records, &cfg.editor, cfg.solver.hook_layer())?;
    manifest.time("optimize", t0);
    let mut lines = String::new();
    for t in &traces {
        lines.push_str(&serde_json::to_string(t).map_err(|e| Error::Format(e.to_string()))?);
        lines.push('\n');
    }
    let traces_path = dir.join(format!("traces-{}-{hash}.jsonl", label(cfg)));
    write_atomic(&traces_path, lines.as_bytes())?;
    manifest.add(dir, &traces_path);

    let t0 = Instant::now();
    let (rows, locality, deltas) = session.evaluate_traces(&records, &traces, &cfg.solver, &cfg.eval)?;
    manifest.time("solve_and_score", t0);
    for (b, delta) in deltas.iter().enumerate() {
        let path = delta_path(dir, cfg, &hash, b);
        let side = delta.export(&path, model.config(), &hash)?;
        manifest.add(dir, &path);
        manifest.add(dir, &side);
    }
    let report = EvalReport::new(meta(cfg)?, rows, locality, &bench.manifest.bucket_boundaries);
    for (name, table) in [
        (format!("edit-{}", label(cfg)), report.records_csv()?),
        (format!("edit-buckets-{}", label(cfg)), length_bucket_table(std::slice::from_ref(&report))?),
    ] {
        let path = table.write(dir, &name, &hash)?;
        manifest.add(dir, &path);
    }
    let summary = format!(
        "{}: {} records, Ori. BLEU {}, Para. BLEU {}, max preservation residual {}",
        label(cfg),
        report.rows.len(),
        format_real(report.mean_bleu()),
        format_real(report.mean_para_bleu()),
        format_real(report.max_preservation_residual())
    );
    finish(manifest, dir, summary)
}

/// Re-scores the exported deltas of an edit run and scores the unedited
/// model as a baseline.
pub fn cmd_eval(cfg: &RunConfig) -> Result<CommandOutput> {
    let dir = &cfg.output_dir;
    let hash = cfg.hash()?;
    let mut manifest = RunManifest::new("eval", cfg)?;
    let bench = load_bench(dir)?;
    let model = load_model(dir)?;
    let session = EditSession::new(&model, &bench, &cfg.solver, cfg.seed)?;
    let records = all_records(&bench);

    let t0 = Instant::now();
    let layers = edited_layers(&cfg.solver);
    let mut rows = Vec::new();
    let mut locality = Vec::new();
    for (b, recs) in records.chunks(cfg.eval.batch_size).enumerate() {
        let delta = WeightDelta::import(&delta_path(dir, cfg, &hash, b), cfg.solver.kind)?;
        let windows = recs
            .iter()
            .map(|r| plan_windows(r.prompt.len(), r.new_target.len(), cfg.editor.window_size).map(|p| p.n_windows()))
            .collect::<Result<Vec<_>>>()?;
        let (r, loc) = session.score_batch(recs, &windows, b, &delta, &layers, &cfg.eval)?;
        rows.extend(r);
        locality.push(loc);
    }
    let report = EvalReport::new(meta(cfg)?, rows, locality, &bench.manifest.bucket_boundaries);
    let path = report.records_csv()?.write(dir, &format!("eval-{}", label(cfg)), &hash)?;
    manifest.add(dir, &path);

    let baseline = baseline_table(&model, &records, cfg.eval.decode_margin)?;
    let path = baseline.write(dir, "baseline", &hash)?;
    manifest.add(dir, &path);
    manifest.time("eval", t0);
    let pre = mean_of(&baseline, "ori_bleu");
    let summary = format!(
        "{}: Ori. BLEU {} (unedited {}), Para. BLEU {}",
        label(cfg),
        format_real(report.mean_bleu()),
        format_real(pre),
        format_real(report.mean_para_bleu())
    );
    finish(manifest, dir, summary)
}

fn baseline_table(model: &TransformerModel, records: &[&EditRecord], margin: usize) -> Result<CsvTable> {
    let mut t = CsvTable::new([
        "id",
        "bucket",
        "ori_bleu",
        "ori_rouge_l",
        "para_bleu",
        "para_rouge_l",
    ]);
    for r in records {
        let s = evaluate_edit(model, r, margin)?;
        t.push(vec![
            r.id.clone().into(),
            r.length_bucket.into(),
            s.original.bleu.into(),
            s.original.rouge_l.into(),
            s.paraphrase.bleu.into(),
            s.paraphrase.rouge_l.into(),
        ])?;
    }
    Ok(t)
}

fn mean_of(t: &CsvTable, col: &str) -> f64 {
    let v: Vec<f64> = (0..t.rows.len()).filter_map(|i| t.real(i, col)).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    LengthBuckets,
    Stability,
    WindowAblation,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::LengthBuckets, Experiment::Stability, Experiment::WindowAblation];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::LengthBuckets => "length-buckets",
            Experiment::Stability => "stability",
            Experiment::WindowAblation => "window-ablation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

/// Runs the analysis experiments, one CSV each.
pub fn cmd_sweep(cfg: &RunConfig, experiments: &[Experiment]) -> Result<CommandOutput> {
    let dir = &cfg.output_dir;
    let hash = cfg.hash()?;
    let mut manifest = RunManifest::new("sweep", cfg)?;
    let bench = load_bench(dir)?;
    let model = load_model(dir)?;
    let session = EditSession::new(&model, &bench, &cfg.solver, cfg.seed)?;
    let mut summary = String::new();
    for &exp in experiments {
        let t0 = Instant::now();
        let table = match exp {
            Experiment::LengthBuckets => {
                let (table, reports) =
                    run_length_buckets(&session, &ObjectiveKind::ALL, &cfg.editor, &cfg.solver, &cfg.eval, cfg.seed, &hash)?;
                for r in &reports {
                    let _ = writeln!(
                        summary,
                        "{}: across-bucket BLEU std {}",
                        r.meta.objective,
                        format_real(r.across_bucket_std())
                    );
                }
                table
            }
            Experiment::Stability => run_stability_sweep(&session, &cfg.editor, &cfg.solver, &cfg.eval, cfg.seed, &hash)?,
            Experiment::WindowAblation => {
                run_window_ablation(&session, &cfg.editor, &cfg.solver, &cfg.eval, cfg.seed, &hash)?
            }
        };
        manifest.time(exp.name(), t0);
        let path = table.write(dir, exp.name(), &hash)?;
        let _ = writeln!(summary, "{}: {} rows -> {}", exp.name(), table.rows.len(), path.display());
        manifest.add(dir, &path);
    }
    finish(manifest, dir, summary.trim_end().to_string())
}

struct RunSummary {
    file: String,
    objective: String,
    solver: String,
    records: usize,
    means: [f64; 4],
}

const SUMMARY_METRICS: [&str; 4] = ["ori_bleu", "ori_rouge_l", "para_bleu", "para_rouge_l"];

/// Side-by-side table of every edit run in `dir`, with the BLEU gain of the
/// affinity-weighted objective over window-by-window per solver.
pub fn cmd_report(dir: &Path) -> Result<CommandOutput> {
    let t0 = Instant::now();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(dir.to_path_buf())
            } else {
                Error::io(dir, e)
            }
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("edit-") && !n.starts_with("edit-buckets-") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    let mut runs = Vec::new();
    for f in &files {
        let table = CsvTable::parse(&read_artifact_string(f)?)?;
        if table.header != EvalReport::RECORD_HEADER {
            continue;
        }
        let n = table.rows.len();
        let mean = |col: &str| (0..n).filter_map(|i| table.real(i, col)).sum::<f64>() / n.max(1) as f64;
        runs.push(RunSummary {
            file: f.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            objective: table.text(0, "objective").unwrap_or_default(),
            solver: table.text(0, "solver").unwrap_or_default(),
            records: n,
            means: SUMMARY_METRICS.map(mean),
        });
    }
    if runs.is_empty() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }

    let mut table = CsvTable::new(
        ["run", "objective", "solver", "records"]
            .into_iter()
            .chain(SUMMARY_METRICS)
            .chain(["bleu_gain_over_window"]),
    );
    let window_bleu = |solver: &str| {
        runs.iter()
            .find(|r| r.solver == solver && r.objective == ObjectiveKind::WindowByWindow.name())
            .map(|r| r.means[0])
    };
    let mut text = String::new();
    let _ = writeln!(
        text,
        "{:<24} {:<10} {:>7} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "objective", "solver", "records", "Ori.BLEU", "Ori.R-L", "Para.BLEU", "Para.R-L", "gain"
    );
    for r in &runs {
        let gain = if r.objective == ObjectiveKind::MatryoshkaAffinity.name() {
            window_bleu(&r.solver).map(|w| r.means[0] - w)
        } else {
            None
        };
        let mut row: Vec<Cell> = vec![r.file.clone().into(), r.objective.clone().into(), r.solver.clone().into(), r.records.into()];
        row.extend(r.means.iter().map(|&m| Cell::Real(m)));
        row.push(gain.map_or(Cell::Text(String::new()), Cell::Real));
        table.push(row)?;
        let _ = writeln!(
            text,
            "{:<24} {:<10} {:>7} {:>9} {:>9} {:>9} {:>9} {:>9}",
            r.objective,
            r.solver,
            r.records,
            format_real(r.means[0]),
            format_real(r.means[1]),
            format_real(r.means[2]),
            format_real(r.means[3]),
            gain.map(format_real).unwrap_or_default()
        );
    }
    let csv = dir.join("report-summary.csv");
    write_atomic(&csv, table.render().as_bytes())?;
    let txt = dir.join("report.txt");
    write_atomic(&txt, text.as_bytes())?;

    let digest = sha2::Sha256::digest(table.render().as_bytes());
    let mut manifest = RunManifest {
        command: "report".into(),
        config_hash: digest.iter().take(6).map(|b| format!("{b:02x}")).collect(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts: Vec::new(),
        timings: BTreeMap::new(),
    };
    manifest.add(dir, &csv);
    manifest.add(dir, &txt);
    manifest.time("report", t0);
    finish(manifest, dir, text.trim_end().to_string())
}
