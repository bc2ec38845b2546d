//! Synthetic grammar corpus.
//!
//! Sentences have the fixed shape `the <adjective> <noun> <verb> .` with one
//! planted regularity: the adjective `furry` is always followed by the noun
//! `cat`. A model trained on this corpus emits `cat` rarely in general (the
//! base rate is a config knob) but deterministically after `the furry`.

use rand::Rng;

use crate::error::{Error, Result};

pub const ADJECTIVES: &[&str] = &["big", "old", "red", "tiny", "warm", "slow", "wet", "furry"];
pub const NOUNS: &[&str] = &["dog", "bird", "mouse", "fox", "pig", "hen", "goat"];
pub const VERBS: &[&str] = &["sat", "ran", "hid", "slept", "ate", "sang"];
pub const TRIGGER_ADJ: &str = "furry";
pub const TARGET_NOUN: &str = "cat";

#[derive(Debug, Clone, Copy)]
pub struct CorpusConfig {
    pub n_sentences: usize,
    /// Probability that a sentence uses the trigger adjective.
    pub furry_rate: f64,
    /// Probability that a non-trigger sentence still uses the target noun.
    pub cat_rate: f64,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("furry_rate", self.furry_rate), ("cat_rate", self.cat_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub fn generate_sentence<R: Rng>(cfg: &CorpusConfig, rng: &mut R) -> String {
    let adj = if rng.gen::<f64>() < cfg.furry_rate {
        TRIGGER_ADJ
    } else {
        // Trigger excluded here so its rate is exactly furry_rate.
        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len() - 1)]
    };
    let noun = if adj == TRIGGER_ADJ {
        TARGET_NOUN
    } else if rng.gen::<f64>() < cfg.cat_rate {
        TARGET_NOUN
    } else {
        NOUNS[rng.gen_range(0..NOUNS.len())]
    };
    let verb = VERBS[rng.gen_range(0..VERBS.len())];
    format!("the {adj} {noun} {verb} .")
}

/// One sentence per line, deterministic in the seed.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let mut rng = crate::seed::rng(cfg.seed, "corpus");
    Ok((0..cfg.n_sentences)
        .map(|_| generate_sentence(cfg, &mut rng))
        .collect())
}

/// Sentence openers usable as generation contexts. Trigger contexts end in
/// `furry `, so a grammar-faithful model continues with the target noun.
pub fn contexts(n: usize, trigger: bool, seed: u64) -> Vec<String> {
    let mut rng = crate::seed::rng(seed, "contexts");
    (0..n)
        .map(|_| {
            let adj = if trigger {
                TRIGGER_ADJ
            } else {
                ADJECTIVES[rng.gen_range(0..ADJECTIVES.len() - 1)]
            };
            format!("the {adj} ")
        })
        .collect()
}
