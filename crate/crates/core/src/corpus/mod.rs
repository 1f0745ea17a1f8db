// SPDX-License-Identifier: MIT OR Apache-2.0

//! Word-level vocabulary, synthetic knowledge base and the counterfactual
//! edit benchmark.
//!
//! Each entity has a unique pseudo-word name and one value per slot kind.
//! Its article is a sequence of templated sentences, each naming the entity.
//! The pretraining corpus pairs every article with two prompt frames. An
//! edit record asks for a counterfactual article (every slot resampled)
//! after the first frame, truncated to the requested length and closed
//! with `<eos>`.

mod bench;
mod kb;
mod vocab;

pub use bench::{
    build_benchmark, entity_sequence, make_edits, manifest_path, records_from_jsonl, records_to_jsonl, Benchmark,
    BenchmarkConfig, BenchmarkManifest, EditRecord, LengthRange,
};
pub use kb::{
    generate_kb, prompt_text, render_article, FactRow, FactTable, KbConfig, KnowledgeBase, PROMPT_FRAMES, SLOT_KINDS,
    TEMPLATE_VERSION,
};
pub use vocab::{tokenize, Vocab, EOS, PAD, RESERVED, UNK};
