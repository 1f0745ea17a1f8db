// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{GradMode, TransformerModel};
use crate::diffcore::{kernels, Graph, Reduction};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

/// Next-token pretraining schedule. Learning rate warms up linearly, then
/// follows a cosine decay to `final_lr_fraction` of its peak.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub final_lr_fraction: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 3e-3,
            batch_size: 8,
            warmup_steps: 50,
            final_lr_fraction: 0.1,
            clip_norm: 1.0,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainSchedule {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub learning_rate: f64,
    /// Mean per-token NLL of the batch at this step.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    pub initial_heldout_perplexity: f64,
    pub final_heldout_perplexity: f64,
}

/// Summed next-token NLL of a sequence and the number of predicted tokens.
pub fn sequence_nll(model: &TransformerModel, tokens: &[usize]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let trace = model.infer(&tokens[..tokens.len() - 1], &[])?;
    let mut total = 0.0;
    for (row, &next) in trace.logits.iter().zip(&tokens[1..]) {
        total += kernels::log_sum_exp(row) - row[next];
    }
    Ok((total, tokens.len() - 1))
}

/// exp of the token-weighted mean NLL over `corpus`.
pub fn corpus_perplexity(model: &TransformerModel, corpus: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for seq in corpus {
        let (s, n) = sequence_nll(model, seq)?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("perplexity of a corpus with no predicted tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Train all parameters on next-token prediction over `corpus`.
pub fn pretrain(
    model: &mut TransformerModel,
    corpus: &[Vec<usize>],
    heldout: &[Vec<usize>],
    schedule: &TrainSchedule,
) -> Result<TrainLog> {
    if corpus.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    if schedule.steps > 0 && schedule.batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    if let Some(bad) = corpus.iter().position(|s| s.len() < 2) {
        return Err(Error::Contract(format!("corpus sequence {bad} has fewer than two tokens")));
    }
    let heldout_ppl = |m: &TransformerModel| {
        if heldout.is_empty() {
            Ok(f64::NAN)
        } else {
            corpus_perplexity(m, heldout)
        }
    };
    let initial_heldout_perplexity = heldout_ppl(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut optimizers: Vec<Adam> = sizes.iter().map(|&n| Adam::new(n, AdamConfig::default())).collect();
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut rows = Vec::new();

    for step in 0..schedule.steps {
        grads.iter_mut().for_each(|g| g.fill(0.0));
        let batch: Vec<usize> = (0..schedule.batch_size).map(|_| rng.gen_range(0..corpus.len())).collect();
        let n_tokens: usize = batch.iter().map(|&i| corpus[i].len() - 1).sum();
        let mut loss = 0.0;
        for &i in &batch {
            let seq = &corpus[i];
            let mut g = Graph::new();
            let trace = model.forward(&mut g, &seq[..seq.len() - 1], &[], GradMode::Weights)?;
            let targets: Vec<(usize, usize)> = seq[1..].iter().copied().enumerate().collect();
            let nll = g.cross_entropy(trace.logits, &targets, Reduction::Sum)?;
            loss += g.value(nll).item();
            g.backward(nll)?;
            for (acc, &pv) in grads.iter_mut().zip(&trace.param_vars) {
                if let Some(gr) = g.grad(pv) {
                    acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        loss /= n_tokens as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss became {loss} at step {step}")));
        }
        let scale = 1.0 / n_tokens as f64;
        let mut sq = 0.0;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
                sq += *x * *x;
            }
        }
        let gnorm = sq.sqrt();
        if !gnorm.is_finite() {
            return Err(Error::Numerical(format!("gradient norm became {gnorm} at step {step}")));
        }
        if schedule.clip_norm > 0.0 && gnorm > schedule.clip_norm {
            let c = schedule.clip_norm / gnorm;
            grads.iter_mut().flatten().for_each(|x| *x *= c);
        }
        let lr = schedule.learning_rate_at(step);
        for ((p, opt), g) in model.params_mut().iter_mut().zip(&mut optimizers).zip(&grads) {
            opt.step(p.data_mut(), g, lr);
        }
        if schedule.log_every > 0 && (step % schedule.log_every == 0 || step + 1 == schedule.steps) {
            rows.push(TrainRow {
                step,
                learning_rate: lr,
                loss,
            });
        }
    }
    let final_heldout_perplexity = heldout_ppl(model)?;
    Ok(TrainLog {
        rows,
        initial_heldout_perplexity,
        final_heldout_perplexity,
    })
}
