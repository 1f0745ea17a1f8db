// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer, greedy decoding and pretraining.

pub mod checkpoint;
mod config;
mod model;
mod train;

use std::ops::Range;

pub use config::ModelConfig;
pub use model::{
    argmax, layer_param_name, DecodeState, ForwardTrace, GradMode, HookSpec, InferenceTrace, LayerParam, LayerRows,
    LayerStates, TransformerModel,
};
pub use train::{corpus_perplexity, pretrain, sequence_nll, TrainLog, TrainRow, TrainSchedule};

use crate::diffcore::{Graph, Reduction, Var};
use crate::error::{Error, Result};

/// Negative log-likelihood of `tokens[span]`, each token predicted from the
/// logits row before it. The trace may omit the final token of `tokens`.
pub fn nll_of_span(
    g: &mut Graph,
    trace: &ForwardTrace,
    tokens: &[usize],
    span: Range<usize>,
    reduction: Reduction,
) -> Result<Var> {
    if span.start == 0 || span.is_empty() {
        return Err(Error::Contract(format!(
            "span {}..{} must be nonempty and start after position 0",
            span.start, span.end
        )));
    }
    if span.end > tokens.len() || span.end > trace.seq_len + 1 {
        return Err(Error::OutOfRange(format!(
            "span end {} beyond {} tokens with {} logits rows",
            span.end,
            tokens.len(),
            trace.seq_len
        )));
    }
    let targets: Vec<(usize, usize)> = span.map(|j| (j - 1, tokens[j])).collect();
    g.cross_entropy(trace.logits, &targets, reduction)
}

/// Argmax continuation of `prompt`, at most `max_new` tokens, stopping after
/// `stop` is emitted. Hooks apply when their position is reached.
pub fn greedy_decode(
    model: &TransformerModel,
    prompt: &[usize],
    max_new: usize,
    hooks: &[HookSpec],
    stop: Option<usize>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("greedy_decode needs a nonempty prompt".into()));
    }
    if let Some(h) = hooks.iter().find(|h| h.layer >= model.n_layers()) {
        return Err(Error::OutOfRange(format!("hook layer {} of {}", h.layer, model.n_layers())));
    }
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    let max_context = model.config().max_context;
    let mut state = model.start_decoding();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = state.step(model, t, hooks, None)?;
    }
    loop {
        let next = argmax(&logits);
        out.push(next);
        if Some(next) == stop || out.len() == max_new || state.position() >= max_context {
            break;
        }
        logits = state.step(model, next, hooks, None)?;
    }
    Ok(out)
}
