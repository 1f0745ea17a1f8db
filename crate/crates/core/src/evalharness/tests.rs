// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::corpus::{build_benchmark, Benchmark, BenchmarkConfig, EditRecord, KbConfig, EOS, RESERVED};
use crate::diffcore::DTensor;
use crate::editor::ObjectiveKind;
use crate::transformer::{layer_param_name, pretrain, LayerParam, ModelConfig, TrainSchedule, TransformerModel};
use crate::weightupdate::{
    apply_delta, build_preservation, down_matrix, preservation_memories, SolverConfig, SolverKind, WeightDelta,
};

fn tiny_model(vocab: usize, seed: u64) -> TransformerModel {
    TransformerModel::init(ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab,
        max_context: 64,
        seed,
    })
    .unwrap()
}

fn tiny_bench() -> Benchmark {
    build_benchmark(&BenchmarkConfig {
        seed: 2,
        n_edits: 4,
        buckets: vec![[8, 12], [13, 20]],
        min_per_bucket: 1,
        heldout_entities: 2,
        kb: KbConfig {
            seed: 1,
            n_entities: 16,
            sentences_per_entity: 4,
        },
    })
    .unwrap()
}

fn tiny_solver(kind: SolverKind) -> SolverConfig {
    SolverConfig {
        kind,
        memit_layers: vec![0, 1],
        unke_layer: 1,
        preservation_keys: 24,
        preservation_sequences: 0,
        ..SolverConfig::default()
    }
}

fn quick_editor(kind: ObjectiveKind) -> EditorConfig {
    let mut e = EditorConfig {
        objective: kind,
        window_size: 5,
        ..EditorConfig::default()
    };
    e.optimizer.steps = 3;
    e.affinity.t_aff = 1;
    e
}

fn meta(kind: ObjectiveKind, solver: SolverKind) -> RunMeta {
    RunMeta {
        seed: 0,
        config_hash: "test".into(),
        objective: kind,
        solver,
    }
}

/// A model trained on `prompt ++ target` alone, plus the record asking
/// for `new_target`.
fn memorized(target: &[usize], new_target: &[usize]) -> (TransformerModel, EditRecord) {
    let v = RESERVED.len();
    let prompt = vec![v, v + 1];
    let mut seq = prompt.clone();
    seq.extend_from_slice(target);
    let mut m = tiny_model(v + 12, 3);
    let sched = TrainSchedule {
        steps: 150,
        learning_rate: 1e-2,
        batch_size: 1,
        warmup_steps: 0,
        log_every: 1000,
        ..TrainSchedule::default()
    };
    pretrain(&mut m, &[seq.clone()], &[seq], &sched).unwrap();
    let record = EditRecord {
        id: "fixture".into(),
        prompt,
        old_target: target.to_vec(),
        new_target: new_target.to_vec(),
        paraphrase_prompt: vec![v + 1, v + 1],
        length_bucket: 0,
    };
    (m, record)
}

#[test]
fn memorized_target_scores_the_ceiling_and_the_old_fact_scores_low() {
    let v = RESERVED.len();
    let new = [v + 5, v + 6, v + 7, v + 8, EOS];
    let old = [v + 2, v + 3, v + 4, v + 9, EOS];

    let (m, record) = memorized(&new, &new);
    let before = m.to_bytes();
    let s = evaluate_edit(&m, &record, 8).unwrap();
    assert_eq!(m.to_bytes(), before);
    assert_eq!(s.original.bleu, 100.0);
    assert_eq!(s.original.rouge_l, 100.0);
    assert!(s.original.sequence_exact);

    let (m, record) = memorized(&old, &new);
    let s = evaluate_edit(&m, &record, 8).unwrap();
    assert!(s.original.bleu < 25.0, "{}", s.original.bleu);
    assert_eq!(s.original.rouge_l, 20.0);
}

#[test]
fn paraphrase_uses_the_same_pipeline() {
    let v = RESERVED.len();
    let new = [v + 5, v + 6, EOS];
    let (m, mut record) = memorized(&new, &new);
    record.paraphrase_prompt = record.prompt.clone();
    let s = evaluate_edit(&m, &record, 8).unwrap();
    assert_eq!(s.original, s.paraphrase);
}

#[test]
fn zero_delta_keeps_locality_exact() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 0);
    let mut after = m.clone();
    apply_delta(&mut after, &WeightDelta::new(SolverKind::MemitClosedForm)).unwrap();
    let pres = build_preservation(&bench.preservation_sequences(), 12, 0).unwrap();
    let loc = locality_probe(&m, &after, &bench.heldout_sequences(), &pres, &[0, 1]).unwrap();
    assert_eq!(loc.perplexity_ratio, 1.0);
    assert_eq!(loc.preservation_residual, 0.0);
}

#[test]
fn locality_residual_matches_memory_residual_for_down_projection_edits() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 0);
    let name = layer_param_name(1, LayerParam::WDown);
    let shape = m.param(&name).unwrap().shape().to_vec();
    let n: usize = shape.iter().product();
    let inc = DTensor::new(shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1e-2).collect()).unwrap();
    let mut delta = WeightDelta::new(SolverKind::MemitClosedForm);
    delta.increments.push((name, inc));
    let mut after = m.clone();
    apply_delta(&mut after, &delta).unwrap();

    let pres = build_preservation(&bench.preservation_sequences(), 16, 4).unwrap();
    let (k0, m0) = preservation_memories(&m, &pres, 1).unwrap();
    let resid = down_matrix(&after, 1) * k0 - m0;
    let oracle = resid.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let loc = locality_probe(&m, &after, &bench.heldout_sequences(), &pres, &[1]).unwrap();
    assert!((loc.preservation_residual - oracle).abs() < 1e-12 * oracle.max(1.0));
    assert!(loc.perplexity_ratio != 1.0);
}

fn row(bucket: usize, bleu: f64) -> RecordRow {
    let m = MetricSet {
        bleu,
        rouge_l: bleu / 2.0,
        token_exact: 0.0,
        sequence_exact: false,
    };
    RecordRow {
        id: format!("r{bleu}"),
        bucket,
        target_len: 10,
        windows: 1,
        batch: 0,
        original: m,
        paraphrase: m,
        perplexity_ratio: 1.0,
        preservation_residual: 0.0,
    }
}

#[test]
fn aggregates_recompute_from_rows_and_empty_buckets_are_flagged() {
    let rows = vec![row(0, 10.0), row(0, 30.0), row(2, 7.0)];
    let ranges = [[1, 5], [6, 9], [10, 20]];
    let r = EvalReport::new(meta(ObjectiveKind::WindowByWindow, SolverKind::MemitClosedForm), rows, vec![], &ranges);
    assert_eq!(r.buckets[0].bleu.mean, 20.0);
    assert_eq!(r.buckets[0].bleu.std, 10.0);
    assert_eq!(r.buckets[1].records, 0);
    assert!((r.mean_bleu() - 47.0 / 3.0).abs() < 1e-9);
    assert!((r.across_bucket_std() - 6.5).abs() < 1e-12);

    let table = length_bucket_table(std::slice::from_ref(&r)).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(table.text(1, "status").unwrap(), "empty");
    assert_eq!(table.text(0, "status").unwrap(), "ok");
    let weighted: f64 = (0..3)
        .filter(|&i| table.text(i, "status").unwrap() == "ok")
        .map(|i| table.real(i, "ori_bleu_mean").unwrap() * table.real(i, "records").unwrap())
        .sum();
    assert!((weighted - 47.0).abs() < 1e-9);
}

#[test]
fn stratified_subset_alternates_buckets() {
    let bench = tiny_bench();
    let all = all_records(&bench);
    let two = stratified_subset(&all, 2);
    assert_eq!(two.len(), 2);
    assert_ne!(two[0].length_bucket, two[1].length_bucket);
    assert_eq!(stratified_subset(&all, 0).len(), all.len());
}

#[test]
fn pipeline_never_mutates_the_session_model_and_is_deterministic() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 1);
    let snapshot = m.to_bytes();
    let solver = tiny_solver(SolverKind::MemitClosedForm);
    let session = EditSession::new(&m, &bench, &solver, 0).unwrap();
    let records = all_records(&bench);
    let ed = quick_editor(ObjectiveKind::MatryoshkaAffinity);
    let eval = EvalConfig::default();
    let a = session.run(&records, &ed, &solver, &eval, meta(ed.objective, solver.kind)).unwrap();
    let b = session.run(&records, &ed, &solver, &eval, meta(ed.objective, solver.kind)).unwrap();
    assert_eq!(m.to_bytes(), snapshot);
    assert_eq!(a.records_csv().unwrap().render(), b.records_csv().unwrap().render());
    assert_eq!(a.rows.len(), records.len());
    assert_eq!(a.locality.len(), records.len());
}

#[test]
fn batching_solves_once_per_batch() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 1);
    let solver = tiny_solver(SolverKind::MemitClosedForm);
    let session = EditSession::new(&m, &bench, &solver, 0).unwrap();
    let records = all_records(&bench);
    let ed = quick_editor(ObjectiveKind::WindowByWindow);
    let traces = session.optimize_all(&records, &ed, solver.hook_layer()).unwrap();
    let eval = EvalConfig {
        batch_size: 4,
        ..EvalConfig::default()
    };
    let (rows, locality, deltas) = session.evaluate_traces(&records, &traces, &solver, &eval).unwrap();
    assert_eq!(deltas.len(), 1);
    assert_eq!(locality.len(), 1);
    assert!(rows.iter().all(|r| r.batch == 0));
    let windows: usize = traces.iter().map(|t| t.windows.len()).sum();
    assert_eq!(deltas[0].layers[0].edit_columns, windows);
}

#[test]
fn sweep_and_ablation_shapes() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 1);
    let solver = tiny_solver(SolverKind::MemitClosedForm);
    let session = EditSession::new(&m, &bench, &solver, 0).unwrap();
    let ed = quick_editor(ObjectiveKind::MatryoshkaAffinity);
    let eval = EvalConfig {
        step_grid: vec![1, 2],
        window_grid: vec![5, 40],
        sweep_records: 2,
        ..EvalConfig::default()
    };
    let sweep = run_stability_sweep(&session, &ed, &solver, &eval, 0, "t").unwrap();
    assert_eq!(sweep.rows.len(), 2 * ObjectiveKind::ALL.len());
    assert!(sweep.rows.iter().all(|r| r[2] == Cell::Int(2)));

    let ablation = run_window_ablation(&session, &ed, &solver, &eval, 0, "t").unwrap();
    assert_eq!(ablation.rows.len(), 3);
    assert_eq!(ablation.text(2, "window_size").unwrap(), "spread");
    let spread = ablation.real(2, "ori_bleu").unwrap();
    let diff = (ablation.real(0, "ori_bleu").unwrap() - ablation.real(1, "ori_bleu").unwrap()).abs();
    assert_eq!(spread, diff);

    // A window covering every target collapses to the one-for-all objective.
    let records = stratified_subset(&all_records(&bench), 2);
    let whole = |kind| {
        let e = EditorConfig {
            objective: kind,
            window_size: 40,
            ..ed.clone()
        };
        session.run(&records, &e, &solver, &eval, meta(kind, solver.kind)).unwrap()
    };
    let a = whole(ObjectiveKind::OneForAll);
    let b = whole(ObjectiveKind::WindowByWindow);
    assert_eq!(
        a.rows.iter().map(|r| r.original).collect::<Vec<_>>(),
        b.rows.iter().map(|r| r.original).collect::<Vec<_>>()
    );
}

#[test]
fn length_buckets_cover_every_objective_and_bucket() {
    let bench = tiny_bench();
    let m = tiny_model(bench.vocab.len(), 1);
    let solver = tiny_solver(SolverKind::AlphaEditNullSpace);
    let session = EditSession::new(&m, &bench, &solver, 0).unwrap();
    let kinds = [ObjectiveKind::WindowByWindow, ObjectiveKind::MatryoshkaAffinity];
    let ed = quick_editor(ObjectiveKind::MatryoshkaAffinity);
    let (table, reports) = run_length_buckets(&session, &kinds, &ed, &solver, &EvalConfig::default(), 0, "t").unwrap();
    assert_eq!(table.rows.len(), kinds.len() * bench.manifest.bucket_boundaries.len());
    for (k, report) in reports.iter().enumerate() {
        for b in 0..report.buckets.len() {
            let i = k * report.buckets.len() + b;
            assert_eq!(table.real(i, "ori_bleu_mean").unwrap(), report.buckets[b].bleu.mean);
        }
    }
}
