// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kb::{generate_kb, prompt_text, render_article, KbConfig, KnowledgeBase, TEMPLATE_VERSION};
use super::vocab::{Vocab, EOS};
use crate::error::{Error, Result};
use crate::io::{read_artifact_string, write_atomic};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub id: String,
    pub prompt: Vec<usize>,
    pub old_target: Vec<usize>,
    pub new_target: Vec<usize>,
    pub paraphrase_prompt: Vec<usize>,
    pub length_bucket: usize,
}

/// Inclusive target-length range in tokens.
pub type LengthRange = [usize; 2];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub n_edits: usize,
    pub buckets: Vec<LengthRange>,
    pub min_per_bucket: usize,
    /// The last `heldout_entities` entities are never trained on.
    pub heldout_entities: usize,
    pub kb: KbConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_edits: 40,
            buckets: vec![[41, 60], [61, 90], [91, 130], [131, 180]],
            min_per_bucket: 1,
            heldout_entities: 8,
            kb: KbConfig::default(),
        }
    }
}

/// Everything needed to regenerate a benchmark byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub seed: u64,
    pub record_count: usize,
    pub bucket_boundaries: Vec<LengthRange>,
    pub template_version: u32,
    pub min_per_bucket: usize,
    pub heldout_entities: usize,
    pub kb: KbConfig,
}

impl BenchmarkManifest {
    pub fn config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            seed: self.seed,
            n_edits: self.record_count,
            buckets: self.bucket_boundaries.clone(),
            min_per_bucket: self.min_per_bucket,
            heldout_entities: self.heldout_entities,
            kb: self.kb.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub kb: KnowledgeBase,
    pub vocab: Vocab,
    pub records: Vec<EditRecord>,
    /// Entity index of each record.
    pub record_entities: Vec<usize>,
    pub manifest: BenchmarkManifest,
}

fn article_tokens(kb: &KnowledgeBase, vocab: &Vocab, entity: usize, values: &[String]) -> Vec<usize> {
    vocab.encode(&render_article(&kb.facts.rows[entity], values))
}

/// Prompt plus full article plus end-of-sequence, for one prompt frame.
pub fn entity_sequence(kb: &KnowledgeBase, vocab: &Vocab, entity: usize, frame: usize) -> Vec<usize> {
    let row = &kb.facts.rows[entity];
    let mut seq = vocab.encode(&prompt_text(frame, &row.name));
    seq.extend(article_tokens(kb, vocab, entity, &row.values));
    seq.push(EOS);
    seq
}

fn edit_for(
    kb: &KnowledgeBase,
    vocab: &Vocab,
    entity: usize,
    length: usize,
    bucket: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EditRecord> {
    let row = &kb.facts.rows[entity];
    let old = article_tokens(kb, vocab, entity, &row.values);
    if length < 2 || old.len() < length - 1 {
        return Err(Error::Config(format!(
            "target length {length} unreachable: articles of {} sentences give {} tokens",
            kb.config.sentences_per_entity,
            old.len() + 1
        )));
    }
    let cf = kb.counterfactual_values(entity, rng);
    let new = article_tokens(kb, vocab, entity, &cf);
    let cut = |mut v: Vec<usize>| {
        v.truncate(length - 1);
        v.push(EOS);
        v
    };
    let (old_target, new_target) = (cut(old), cut(new));
    if old_target == new_target {
        return Err(Error::Config(format!(
            "target length {length} too short to contain a slot value"
        )));
    }
    Ok(EditRecord {
        id: format!("edit-{entity:04}"),
        prompt: vocab.encode(&prompt_text(0, &row.name)),
        old_target,
        new_target,
        paraphrase_prompt: vocab.encode(&prompt_text(1, &row.name)),
        length_bucket: bucket,
    })
}

/// Counterfactual edits for `n_edits` distinct entities drawn from
/// `entities`, with target lengths uniform in `range`.
pub fn make_edits(
    kb: &KnowledgeBase,
    vocab: &Vocab,
    entities: &[usize],
    seed: u64,
    n_edits: usize,
    range: LengthRange,
) -> Result<Vec<EditRecord>> {
    Ok(edits_with_buckets(kb, vocab, entities, seed, n_edits, &[range])?.0)
}

fn edits_with_buckets(
    kb: &KnowledgeBase,
    vocab: &Vocab,
    entities: &[usize],
    seed: u64,
    n_edits: usize,
    buckets: &[LengthRange],
) -> Result<(Vec<EditRecord>, Vec<usize>)> {
    if n_edits > entities.len() {
        return Err(Error::Config(format!(
            "{n_edits} edits requested but only {} entities are available",
            entities.len()
        )));
    }
    if n_edits > 0 && buckets.is_empty() {
        return Err(Error::Config("at least one length bucket is required".into()));
    }
    if let Some(b) = buckets.iter().find(|b| b[0] > b[1]) {
        return Err(Error::Config(format!("empty length range {}..={}", b[0], b[1])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = entities.to_vec();
    pool.shuffle(&mut rng);
    pool.truncate(n_edits);
    pool.sort_unstable();
    let mut records = Vec::with_capacity(n_edits);
    for (k, &entity) in pool.iter().enumerate() {
        let bucket = k % buckets.len();
        let [lo, hi] = buckets[bucket];
        let length = rng.gen_range(lo..=hi);
        records.push(edit_for(kb, vocab, entity, length, bucket, &mut rng)?);
    }
    Ok((records, pool))
}

pub fn build_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    let kb = generate_kb(&config.kb)?;
    let vocab = Vocab::build(&kb.inventory_text())?;
    if config.heldout_entities >= config.kb.n_entities {
        return Err(Error::Config(format!(
            "bench.heldout_entities ({}) leaves no trained entities out of {}",
            config.heldout_entities, config.kb.n_entities
        )));
    }
    let trained: Vec<usize> = (0..config.kb.n_entities - config.heldout_entities).collect();
    let (records, record_entities) =
        edits_with_buckets(&kb, &vocab, &trained, config.seed, config.n_edits, &config.buckets)?;
    for (b, range) in config.buckets.iter().enumerate() {
        let count = records.iter().filter(|r| r.length_bucket == b).count();
        if count < config.min_per_bucket {
            return Err(Error::Config(format!(
                "length bucket {}..={} received {count} records, fewer than bench.min_per_bucket = {}",
                range[0], range[1], config.min_per_bucket
            )));
        }
    }
    let manifest = BenchmarkManifest {
        seed: config.seed,
        record_count: records.len(),
        bucket_boundaries: config.buckets.clone(),
        template_version: TEMPLATE_VERSION,
        min_per_bucket: config.min_per_bucket,
        heldout_entities: config.heldout_entities,
        kb: config.kb.clone(),
    };
    Ok(Benchmark {
        kb,
        vocab,
        records,
        record_entities,
        manifest,
    })
}

impl Benchmark {
    pub fn n_trained(&self) -> usize {
        self.kb.config.n_entities - self.manifest.heldout_entities
    }

    /// Pretraining sequences: every trained entity under both prompt frames.
    pub fn training_sequences(&self) -> Vec<Vec<usize>> {
        (0..self.n_trained())
            .flat_map(|e| (0..2).map(move |f| (e, f)))
            .map(|(e, f)| entity_sequence(&self.kb, &self.vocab, e, f))
            .collect()
    }

    /// Sequences of entities never seen in pretraining.
    pub fn heldout_sequences(&self) -> Vec<Vec<usize>> {
        (self.n_trained()..self.kb.config.n_entities)
            .map(|e| entity_sequence(&self.kb, &self.vocab, e, 0))
            .collect()
    }

    /// Trained sequences of entities that no record edits.
    pub fn preservation_sequences(&self) -> Vec<Vec<usize>> {
        (0..self.n_trained())
            .filter(|e| !self.record_entities.contains(e))
            .map(|e| entity_sequence(&self.kb, &self.vocab, e, 0))
            .collect()
    }

    /// Writes `<stem>.jsonl` and `<stem>.manifest.toml`; returns both paths.
    pub fn write(&self, jsonl: &Path) -> Result<(PathBuf, PathBuf)> {
        let manifest_path = manifest_path(jsonl);
        write_atomic(jsonl, records_to_jsonl(&self.records)?.as_bytes())?;
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&manifest_path, text.as_bytes())?;
        Ok((jsonl.to_path_buf(), manifest_path))
    }

    /// Regenerate from a manifest on disk and check the records file matches.
    pub fn load(jsonl: &Path) -> Result<Self> {
        let text = read_artifact_string(&manifest_path(jsonl))?;
        let manifest: BenchmarkManifest = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        if manifest.template_version != TEMPLATE_VERSION {
            return Err(Error::Format(format!(
                "benchmark built with template version {}, this build has {TEMPLATE_VERSION}",
                manifest.template_version
            )));
        }
        let bench = build_benchmark(&manifest.config())?;
        let stored = records_from_jsonl(&read_artifact_string(jsonl)?)?;
        if stored != bench.records {
            return Err(Error::Format(format!(
                "{} does not match the records its manifest regenerates",
                jsonl.display()
            )));
        }
        Ok(bench)
    }
}

pub fn manifest_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("manifest.toml")
}

pub fn records_to_jsonl(records: &[EditRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<EditRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("record line {}: {e}", i + 1))))
        .collect()
}
