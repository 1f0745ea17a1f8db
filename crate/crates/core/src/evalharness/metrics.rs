// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level generation metrics, all on a 0–100 scale.
//!
//! BLEU-4 for one hypothesis `h` against one reference `r`:
//!
//! ```text
//! c_n = number of n-grams in h,  m_n = clipped n-gram matches
//! p_n = m_n / c_n            if m_n > 0
//!     = (m_n + 1)/(c_n + 1)  if m_n = 0          (add-one smoothing)
//! BP  = 1 if |h| > |r| else exp(1 − |r|/|h|)
//! BLEU = 100 · BP · (p_1 p_2 p_3 p_4)^(1/4)
//! ```
//!
//! An empty hypothesis scores 0. ROUGE-L is the LCS F1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

pub fn bleu(hypothesis: &[usize], reference: &[usize]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total = hypothesis.len().saturating_sub(n - 1);
        let matched: usize = hyp
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (h, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if h > r { 1.0 } else { (1.0 - r / h).exp() };
    100.0 * bp * (log_sum / MAX_ORDER as f64).exp()
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(hypothesis: &[usize], reference: &[usize]) -> f64 {
    let lcs = lcs_len(hypothesis, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Share of reference positions reproduced at the same index.
pub fn token_exact(hypothesis: &[usize], reference: &[usize]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    let hits = reference.iter().zip(hypothesis).filter(|(r, h)| r == h).count();
    100.0 * hits as f64 / reference.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub bleu: f64,
    pub rouge_l: f64,
    pub token_exact: f64,
    pub sequence_exact: bool,
}

impl MetricSet {
    pub fn score(hypothesis: &[usize], reference: &[usize]) -> Self {
        Self {
            bleu: bleu(hypothesis, reference),
            rouge_l: rouge_l(hypothesis, reference),
            token_exact: token_exact(hypothesis, reference),
            sequence_exact: hypothesis == reference,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn identical_sequences_score_full_marks() {
        let s = [4, 8, 15, 16, 23, 42];
        let m = MetricSet::score(&s, &s);
        assert_eq!((m.bleu, m.rouge_l, m.token_exact, m.sequence_exact), (100.0, 100.0, 100.0, true));
    }

    #[test]
    fn short_prefix_pays_only_brevity() {
        // a b c d against a b c d e
        let got = bleu(&[1, 2, 3, 4], &[1, 2, 3, 4, 5]);
        assert!((got - 100.0 * (-0.25f64).exp()).abs() < 1e-12);
        assert!((got - 77.88).abs() < 5e-3);
    }

    #[test]
    fn disjoint_sequences_hit_the_smoothing_floor() {
        let hyp: Vec<usize> = (0..10).collect();
        let reference: Vec<usize> = (10..20).collect();
        // (1/11 · 1/10 · 1/9 · 1/8)^(1/4)
        let oracle = 100.0 * (11.0f64 * 10.0 * 9.0 * 8.0).powf(-0.25);
        let got = bleu(&hyp, &reference);
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 10.600313).abs() < 1e-6);
        assert_eq!(bleu(&[], &reference), 0.0);
    }

    #[test]
    fn rouge_examples() {
        // a c e against a b c d e
        assert!((rouge_l(&[1, 3, 5], &[1, 2, 3, 4, 5]) - 75.0).abs() < 1e-12);
        let fwd: Vec<usize> = (0..9).collect();
        let rev: Vec<usize> = fwd.iter().rev().copied().collect();
        assert_eq!(lcs_len(&fwd, &rev), 1);
        assert_eq!(rouge_l(&[7, 7], &[1, 2]), 0.0);
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range(
            h in prop::collection::vec(0usize..6, 0..30),
            r in prop::collection::vec(0usize..6, 1..30),
        ) {
            let m = MetricSet::score(&h, &r);
            for v in [m.bleu, m.rouge_l, m.token_exact] {
                prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
            }
            prop_assert_eq!(m.rouge_l == 100.0, h == r);
            prop_assert!(lcs_len(&h, &r) <= h.len().min(r.len()));
        }
    }
}
