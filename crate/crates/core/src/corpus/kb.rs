// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever templates, frames or pools change.
pub const TEMPLATE_VERSION: u32 = 2;

pub const SLOT_KINDS: [&str; 12] = [
    "city", "field", "food", "color", "instrument", "animal", "sport", "language", "company", "river", "mountain",
    "year",
];

/// `(slot kind index, sentence template)`; `{n}` is the entity name and
/// `{v}` the slot value.
const TEMPLATES: [(usize, &str); 24] = [
    (0, "they were born in the city of {v} ."),
    (0, "they still visit {v} every summer ."),
    (1, "they work in the field of {v} ."),
    (1, "they wrote a long book about {v} ."),
    (2, "their favorite food is {v} ."),
    (2, "they like to cook {v} at home ."),
    (3, "they painted the old house {v} ."),
    (3, "their car is {v} ."),
    (4, "they play the {v} in a band ."),
    (4, "they learned the {v} as a child ."),
    (5, "they keep a {v} as a pet ."),
    (5, "they once drew a picture of a {v} ."),
    (6, "they play {v} on weekends ."),
    (6, "they won a prize in {v} ."),
    (7, "they speak {v} fluently ."),
    (7, "they teach {v} to young students ."),
    (8, "they worked for {v} for many years ."),
    (8, "they founded {v} with two friends ."),
    (9, "they swam across the {v} river ."),
    (9, "they live near the {v} river ."),
    (10, "they climbed mount {v} last year ."),
    (10, "they took photos of mount {v} ."),
    (11, "they moved abroad in {v} ."),
    (11, "they got married in {v} ."),
];

/// Prompt frames. The first is the edit prompt, the second its paraphrase.
pub const PROMPT_FRAMES: [&str; 2] = ["tell me about {n}", "what do you know about {n}"];

const VALUES_PER_SLOT: usize = 16;
const CONSONANTS: [char; 14] = ['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub sentences_per_entity: usize,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 72,
            sentences_per_entity: 26,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRow {
    pub name: String,
    /// One value per entry of [`SLOT_KINDS`].
    pub values: Vec<String>,
    /// Template index of each article sentence.
    pub sentence_templates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTable {
    pub rows: Vec<FactRow>,
    /// Candidate values per slot kind.
    pub pools: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub config: KbConfig,
    pub facts: FactTable,
    /// One article per entity, without the end-of-sequence marker.
    pub articles: Vec<String>,
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .flat_map(|_| [*CONSONANTS.choose(rng).unwrap(), *VOWELS.choose(rng).unwrap()])
        .collect()
}

fn template_words() -> HashSet<String> {
    TEMPLATES
        .iter()
        .map(|(_, t)| *t)
        .chain(PROMPT_FRAMES)
        .flat_map(super::vocab::tokenize)
        .collect()
}

pub fn render(template: &str, name: &str, value: &str) -> String {
    template.replace("{n}", name).replace("{v}", value)
}

pub fn prompt_text(frame: usize, name: &str) -> String {
    PROMPT_FRAMES[frame].replace("{n}", name)
}

/// Article text for `row` with the given slot values.
pub fn render_article(row: &FactRow, values: &[String]) -> String {
    row.sentence_templates
        .iter()
        .map(|&t| {
            let (slot, template) = TEMPLATES[t];
            render(template, &row.name, &values[slot])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn generate_kb(config: &KbConfig) -> Result<KnowledgeBase> {
    if config.n_entities == 0 {
        return Err(Error::Config("kb.n_entities must be at least 1".into()));
    }
    if config.sentences_per_entity == 0 {
        return Err(Error::Config("kb.sentences_per_entity must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken = template_words();
    let mut fresh = |rng: &mut ChaCha8Rng, syllables: usize| loop {
        let w = pseudo_word(rng, syllables);
        if taken.insert(w.clone()) {
            return w;
        }
    };

    let mut pools = Vec::with_capacity(SLOT_KINDS.len());
    for kind in SLOT_KINDS {
        let pool: Vec<String> = if kind == "year" {
            let mut years: Vec<u32> = (1900..2021).collect();
            years.shuffle(&mut rng);
            years[..VALUES_PER_SLOT].iter().map(u32::to_string).collect()
        } else {
            (0..VALUES_PER_SLOT).map(|_| fresh(&mut rng, 3)).collect()
        };
        pools.push(pool);
    }

    let mut rows = Vec::with_capacity(config.n_entities);
    for _ in 0..config.n_entities {
        let syllables = 2 + rng.gen_range(0..2);
        let name = fresh(&mut rng, syllables);
        let values = pools.iter().map(|p| p.choose(&mut rng).unwrap().clone()).collect();
        let mut sentence_templates = Vec::with_capacity(config.sentences_per_entity);
        while sentence_templates.len() < config.sentences_per_entity {
            let mut order: Vec<usize> = (0..TEMPLATES.len()).collect();
            order.shuffle(&mut rng);
            let need = config.sentences_per_entity - sentence_templates.len();
            sentence_templates.extend(order.into_iter().take(need));
        }
        rows.push(FactRow {
            name,
            values,
            sentence_templates,
        });
    }
    let articles = rows.iter().map(|r| render_article(r, &r.values)).collect();
    Ok(KnowledgeBase {
        config: config.clone(),
        facts: FactTable { rows, pools },
        articles,
    })
}

impl KnowledgeBase {
    /// Every word that any article, counterfactual or prompt can contain.
    pub fn inventory_text(&self) -> String {
        let mut parts: Vec<String> = TEMPLATES.iter().map(|(_, t)| t.to_string()).collect();
        parts.extend(PROMPT_FRAMES.iter().map(|s| s.to_string()));
        parts.extend(self.facts.pools.iter().flatten().cloned());
        parts.extend(self.facts.rows.iter().map(|r| r.name.clone()));
        parts.join(" ")
    }

    /// Slot values for `entity` with every slot resampled to a different
    /// value.
    pub fn counterfactual_values(&self, entity: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let row = &self.facts.rows[entity];
        self.facts
            .pools
            .iter()
            .zip(&row.values)
            .map(|(pool, old)| {
                let others: Vec<&String> = pool.iter().filter(|v| *v != old).collect();
                (*others.choose(rng).unwrap()).clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::tokenize;

    #[test]
    fn minimal_kb_has_one_sentence_and_one_row() {
        let kb = generate_kb(&KbConfig {
            seed: 1,
            n_entities: 1,
            sentences_per_entity: 1,
        })
        .unwrap();
        assert_eq!(kb.facts.rows.len(), 1);
        assert_eq!(kb.articles.len(), 1);
        assert_eq!(kb.articles[0].matches(" .").count(), 1);
    }

    #[test]
    fn same_seed_same_corpus() {
        let c = KbConfig::default();
        assert_eq!(generate_kb(&c).unwrap(), generate_kb(&c).unwrap());
        let other = KbConfig { seed: 9, ..c.clone() };
        assert_ne!(generate_kb(&c).unwrap().articles, generate_kb(&other).unwrap().articles);
    }

    #[test]
    fn corpus_grows_linearly_with_entities() {
        let size = |n| {
            let kb = generate_kb(&KbConfig {
                seed: 3,
                n_entities: n,
                sentences_per_entity: 12,
            })
            .unwrap();
            kb.articles.iter().map(|a| tokenize(a).len()).sum::<usize>() as f64
        };
        let base = size(20) / 20.0;
        for n in [40, 80, 160] {
            let per = size(n) / n as f64;
            assert!((per / base - 1.0).abs() < 0.10, "{n}: {per} vs {base}");
        }
    }

    #[test]
    fn names_are_unique_and_prompts_end_on_the_name() {
        let kb = generate_kb(&KbConfig::default()).unwrap();
        let names: HashSet<&str> = kb.facts.rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names.len(), kb.facts.rows.len());
        for (row, article) in kb.facts.rows.iter().zip(&kb.articles) {
            assert!(!tokenize(article).contains(&row.name));
            for frame in 0..PROMPT_FRAMES.len() {
                assert_eq!(tokenize(&prompt_text(frame, &row.name)).last(), Some(&row.name));
            }
        }
    }

    #[test]
    fn counterfactuals_change_every_slot() {
        let kb = generate_kb(&KbConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for e in 0..kb.facts.rows.len() {
            let cf = kb.counterfactual_values(e, &mut rng);
            for (new, old) in cf.iter().zip(&kb.facts.rows[e].values) {
                assert_ne!(new, old);
            }
        }
    }
}
