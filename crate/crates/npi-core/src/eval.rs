//! Evaluation harness: occurrence metrics, embedding-shift metrics, word
//! length statistics, a perplexity fluency proxy, and the direct
//! word-probability baselines.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{tail, TransformerLM};
use crate::lm::sampler::argmax;
use crate::lm::train::perplexity;
use crate::lm::vocab::{Vocabulary, UNK_ID};

/// Word vectors fitted on the corpus by factorizing the log co-occurrence
/// matrix (SVD), replacing any external pretrained-embedding dependency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub words: Vec<String>,
    pub dim: usize,
    /// Row-major `words.len() x dim`.
    pub vectors: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn from_vectors(words: Vec<String>, dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if vectors.len() != words.len() * dim {
            return Err(Error::Dim(format!(
                "{} vector entries for {} words of dim {dim}",
                vectors.len(),
                words.len()
            )));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(EmbeddingTable {
            words,
            dim,
            vectors,
            index,
        })
    }

    /// Fit on corpus lines: count co-occurrences of lowercased words within a
    /// +-3 word window, take `ln(1 + count)`, factorize with SVD, and keep
    /// the `dim` leading left singular directions scaled by the square roots
    /// of their singular values.
    pub fn train(lines: &[String], dim: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Data("embedding training corpus is empty".into()));
        }
        let mut words: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let tokenized: Vec<Vec<usize>> = lines
            .iter()
            .map(|l| {
                l.split_whitespace()
                    .map(|w| {
                        let w = w.to_lowercase();
                        *index.entry(w.clone()).or_insert_with(|| {
                            words.push(w);
                            words.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        let n = words.len();
        if n == 0 {
            return Err(Error::Data("no words in embedding corpus".into()));
        }
        let mut counts = vec![0.0f64; n * n];
        for sent in &tokenized {
            for (i, &a) in sent.iter().enumerate() {
                for (j, &b) in sent.iter().enumerate() {
                    if i != j && i.abs_diff(j) <= 3 {
                        counts[a * n + b] += 1.0;
                    }
                }
            }
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |r, c| (1.0 + counts[r * n + c]).ln());
        let svd = m.svd(true, false);
        let u = svd
            .u
            .ok_or_else(|| Error::Data("SVD produced no left factor".into()))?;
        let keep = dim.min(n);
        let mut vectors = vec![0.0f64; n * dim];
        for r in 0..n {
            for c in 0..keep {
                vectors[r * dim + c] = u[(r, c)] * svd.singular_values[c].sqrt();
            }
        }
        Self::from_vectors(words, dim, vectors)
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index
            .get(&word.to_lowercase())
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("embedding serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let table: EmbeddingTable = serde_json::from_str(&json)
            .map_err(|e| Error::Format(format!("embedding deserialization: {e}")))?;
        Self::from_vectors(table.words, table.dim, table.vectors)
    }
}

/// Bag-of-words mean of the word vectors; unknown words are skipped and
/// empty text maps to the zero vector.
pub fn embed_sentence(text: &str, table: &EmbeddingTable) -> Vec<f64> {
    let mut sum = vec![0.0f64; table.dim];
    let mut count = 0usize;
    for w in text.split_whitespace() {
        if let Some(v) = table.vector(w) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
    }
    if count > 0 {
        for s in &mut sum {
            *s /= count as f64;
        }
    }
    sum
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn contains_any_word(text: &str, targets: &[String]) -> bool {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect();
    targets
        .iter()
        .any(|t| words.iter().any(|w| *w == t.to_lowercase()))
}

/// Fraction of outputs with at least one whole-word, case-insensitive match.
pub fn target_in_output(outputs: &[String], targets: &[String]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Data("target_in_output over empty output set".into()));
    }
    let hits = outputs
        .iter()
        .filter(|o| contains_any_word(o, targets))
        .count();
    Ok(hits as f64 / outputs.len() as f64)
}

/// `(embed_shifts, avg_shift)`: the fraction of pairs whose controlled
/// embedding moved strictly closer to the target word's embedding, and the
/// mean distance between controlled and original embeddings.
pub fn embed_shift_metrics(
    original: &[String],
    controlled: &[String],
    target_word: &str,
    table: &EmbeddingTable,
) -> Result<(f64, f64)> {
    if original.len() != controlled.len() {
        return Err(Error::Contract(format!(
            "{} original vs {} controlled outputs",
            original.len(),
            controlled.len()
        )));
    }
    if original.is_empty() {
        return Err(Error::Data("embed shift over empty output set".into()));
    }
    let target = table
        .vector(target_word)
        .ok_or_else(|| Error::Config(format!("target word `{target_word}` has no embedding")))?
        .to_vec();
    let mut shifts = 0usize;
    let mut total_move = 0.0;
    for (o, c) in original.iter().zip(controlled) {
        let eo = embed_sentence(o, table);
        let ec = embed_sentence(c, table);
        if euclidean(&ec, &target) < euclidean(&eo, &target) {
            shifts += 1;
        }
        total_move += euclidean(&ec, &eo);
    }
    Ok((
        shifts as f64 / original.len() as f64,
        total_move / original.len() as f64,
    ))
}

/// Threshold for "long" words: mean + 2 standard deviations of word length
/// over the reference sentences.
pub fn fit_length_threshold(reference: &[String]) -> Result<f64> {
    let lengths: Vec<f64> = reference
        .iter()
        .flat_map(|s| s.split_whitespace().map(|w| w.chars().count() as f64))
        .collect();
    if lengths.is_empty() {
        return Err(Error::Data("no words in length reference corpus".into()));
    }
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    let var = lengths.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / lengths.len() as f64;
    Ok(mean + 2.0 * var.sqrt())
}

/// `(avg_word_length, num_long_words)`: per-output mean characters per word
/// averaged over outputs, and the mean count of words beyond the threshold.
pub fn word_length_metrics(outputs: &[String], threshold: f64) -> Result<(f64, f64)> {
    if outputs.is_empty() {
        return Err(Error::Data("word length metrics over empty set".into()));
    }
    let mut mean_sum = 0.0;
    let mut long_sum = 0usize;
    for o in outputs {
        let words: Vec<&str> = o.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let total: usize = words.iter().map(|w| w.chars().count()).sum();
        mean_sum += total as f64 / words.len() as f64;
        long_sum += words
            .iter()
            .filter(|w| w.chars().count() as f64 > threshold)
            .count();
    }
    Ok((
        mean_sum / outputs.len() as f64,
        long_sum as f64 / outputs.len() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Induce,
    Avoid,
}

/// Direct output-probability control: induction greedily emits the target
/// token sequence whenever its first token has nonzero probability; avoidance
/// masks every target token's logit to -inf before sampling.
pub fn word_prob_baseline(
    lm: &TransformerLM<f32>,
    vocab: &Vocabulary,
    context: &[usize],
    steps: usize,
    target: &str,
    mode: BaselineMode,
) -> Result<Vec<usize>> {
    let target_ids = vocab.tokenize(target);
    if target_ids.is_empty() || target_ids.contains(&UNK_ID) {
        return Err(Error::Config(format!(
            "target `{target}` is not tokenizable by this vocabulary"
        )));
    }
    if context.is_empty() {
        return Err(Error::Data("baseline needs a nonempty context".into()));
    }
    let c_max = lm.config().c_max;
    let mut window = tail(context, c_max);
    let mut out = Vec::with_capacity(steps);
    let push = |window: &mut Vec<usize>, out: &mut Vec<usize>, id: usize| {
        out.push(id);
        window.push(id);
        if window.len() > c_max {
            window.remove(0);
        }
    };
    while out.len() < steps {
        let (logits, _) = lm.lm_forward(&window)?;
        match mode {
            BaselineMode::Induce => {
                let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let denom: f64 = logits.iter().map(|&v| ((v - max) as f64).exp()).sum();
                let p_first = ((logits[target_ids[0]] - max) as f64).exp() / denom;
                if p_first > 0.0 {
                    for &id in &target_ids {
                        if out.len() >= steps {
                            break;
                        }
                        push(&mut window, &mut out, id);
                    }
                } else {
                    push(&mut window, &mut out, argmax(&logits));
                }
            }
            BaselineMode::Avoid => {
                let mut masked = logits.clone();
                for &id in &target_ids {
                    masked[id] = f32::NEG_INFINITY;
                }
                push(&mut window, &mut out, argmax(&masked));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub context_id: usize,
    pub original_text: String,
    pub controlled_text: String,
    pub target_hit: bool,
    pub shift_flag: bool,
    pub shift_distance: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub n_contexts: usize,
    pub target_in_output: f64,
    pub embed_shifts: f64,
    pub avg_shift: f64,
    pub avg_word_length: f64,
    pub num_long_words: f64,
    pub perplexity_mean: f64,
    pub rows: Vec<EvalRow>,
}

/// Fold paired original/controlled outputs into a report. The perplexity
/// proxy of each controlled output is measured under the frozen unmodified
/// LM.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model_id: &str,
    original: &[String],
    controlled: &[String],
    target_word: &str,
    table: &EmbeddingTable,
    lm: &TransformerLM<f32>,
    vocab: &Vocabulary,
    length_threshold: f64,
) -> Result<EvalReport> {
    if original.len() != controlled.len() {
        return Err(Error::Contract(format!(
            "{} original vs {} controlled outputs",
            original.len(),
            controlled.len()
        )));
    }
    if original.is_empty() {
        return Err(Error::Data("evaluate over empty context set".into()));
    }
    let targets = vec![target_word.to_string()];
    let target_vec = table
        .vector(target_word)
        .ok_or_else(|| Error::Config(format!("target word `{target_word}` has no embedding")))?
        .to_vec();

    let mut rows = Vec::with_capacity(original.len());
    for (i, (o, c)) in original.iter().zip(controlled).enumerate() {
        let eo = embed_sentence(o, table);
        let ec = embed_sentence(c, table);
        rows.push(EvalRow {
            context_id: i,
            original_text: o.clone(),
            controlled_text: c.clone(),
            target_hit: contains_any_word(c, &targets),
            shift_flag: euclidean(&ec, &target_vec) < euclidean(&eo, &target_vec),
            shift_distance: euclidean(&ec, &eo),
            perplexity: perplexity(lm, vocab, c)?,
        });
    }

    let n = rows.len() as f64;
    let (avg_word_length, num_long_words) = word_length_metrics(controlled, length_threshold)?;
    Ok(EvalReport {
        model_id: model_id.to_string(),
        n_contexts: rows.len(),
        target_in_output: rows.iter().filter(|r| r.target_hit).count() as f64 / n,
        embed_shifts: rows.iter().filter(|r| r.shift_flag).count() as f64 / n,
        avg_shift: rows.iter().map(|r| r.shift_distance).sum::<f64>() / n,
        avg_word_length,
        num_long_words,
        perplexity_mean: rows.iter().map(|r| r.perplexity).sum::<f64>() / n,
        rows,
    })
}

fn csv_escape(field: &str) -> String {
    if field.contains(['"', ',', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "context_id,original_text,controlled_text,target_hit,shift_flag,shift_distance,perplexity\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.context_id,
            csv_escape(&r.original_text),
            csv_escape(&r.controlled_text),
            r.target_hit,
            r.shift_flag,
            r.shift_distance,
            r.perplexity
        ));
    }
    out
}

pub fn report_to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))
}
