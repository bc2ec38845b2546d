use rand::Rng;

use crate::error::{Error, Result};
use crate::lm::model::{tail, TransformerLM};
use crate::lm::vocab::Vocabulary;
use crate::tensor::{AdamConfig, AdamState, Scalar, Tape};

#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Next-token training over corpus lines; returns per-step losses.
///
/// Single-sequence Adam steps on randomly drawn lines, with a random
/// `c_max + 1` window into lines that are longer than the context.
pub fn pretrain<T: Scalar>(
    model: &mut TransformerLM<T>,
    vocab: &Vocabulary,
    lines: &[String],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if model.is_frozen() {
        return Err(Error::Contract("cannot pretrain a frozen model".into()));
    }
    let usable: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| vocab.tokenize(l))
        .filter(|ids| ids.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::Data("corpus has no usable lines".into()));
    }
    let c_max = model.config().c_max;
    let params = model.params();
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(cfg.lr));
    let mut rng = crate::seed::rng(cfg.seed, "lm-pretrain");
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let ids = &usable[rng.gen_range(0..usable.len())];
        let window = if ids.len() > c_max + 1 {
            let start = rng.gen_range(0..ids.len() - c_max);
            &ids[start..start + c_max + 1]
        } else {
            &ids[..]
        };
        let input = &window[..window.len() - 1];
        let targets = &window[1..];
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, input, &[])?;
        let loss = tape.cross_entropy(&out.logits, targets)?;
        losses.push(loss.value().into_f64());
        tape.backward(&loss)?;
        adam.step(&params)?;
    }
    Ok(losses)
}

/// Fine-tuning baseline: trains a separate weight copy on a target-quality
/// corpus; the original (frozen) model is untouched.
pub fn fine_tune<T: Scalar>(
    model: &TransformerLM<T>,
    vocab: &Vocabulary,
    target_lines: &[String],
    cfg: &PretrainConfig,
) -> Result<(TransformerLM<T>, Vec<f64>)> {
    let mut copy = model.unfrozen_copy();
    let losses = pretrain(&mut copy, vocab, target_lines, cfg)?;
    copy.freeze();
    Ok((copy, losses))
}

/// `exp` of the mean next-token negative log-likelihood of `text`.
pub fn perplexity<T: Scalar>(
    model: &TransformerLM<T>,
    vocab: &Vocabulary,
    text: &str,
) -> Result<f64> {
    let ids = vocab.tokenize(text);
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "perplexity needs at least 2 tokens, got {}",
            ids.len()
        )));
    }
    let c_max = model.config().c_max;
    let mut total_nll = 0.0;
    let count = (ids.len() - 1) as f64;

    // One forward covers every prediction inside the first window.
    let first = &ids[..ids.len().min(c_max)];
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, first, &[])?;
    tape.clear();
    {
        let logits = out.logits.data();
        let v = vocab.len();
        for i in 0..first.len() - 1 {
            total_nll += row_nll(&logits[i * v..(i + 1) * v], ids[i + 1]);
        }
    }
    // Remaining positions use a sliding window.
    for i in c_max..ids.len() {
        let window = tail(&ids[..i], c_max);
        let (logits, _) = model.lm_forward(&window)?;
        total_nll += row_nll(&logits, ids[i]);
    }
    Ok((total_nll / count).exp())
}

fn row_nll<T: Scalar>(logits: &[T], target: usize) -> f64 {
    let max = logits
        .iter()
        .map(|v| v.into_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits
        .iter()
        .map(|v| (v.into_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    log_z - logits[target].into_f64()
}
