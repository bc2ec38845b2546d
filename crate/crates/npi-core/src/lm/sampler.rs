use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Scalar;

/// Decoding settings. `top_k = 1` is fully deterministic: argmax with
/// lowest-token-id tie-break, no RNG involved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: Option<f64>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            top_k: 1,
            top_p: None,
            seed: 0,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.top_k == 1
    }
}

pub fn sample_index<T: Scalar>(logits: &[T], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> usize {
    assert!(cfg.top_k >= 1, "top_k must be >= 1");
    if cfg.top_k == 1 {
        return argmax(logits);
    }
    let probs = softmax64(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(cfg.top_k);
    if let Some(p) = cfg.top_p {
        let mut cum = 0.0;
        let mut keep = order.len();
        for (i, &id) in order.iter().enumerate() {
            cum += probs[id];
            if cum >= p {
                keep = i + 1;
                break;
            }
        }
        order.truncate(keep);
    }
    let total: f64 = order.iter().map(|&id| probs[id]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &id in &order {
        u -= probs[id];
        if u <= 0.0 {
            return id;
        }
    }
    *order.last().unwrap()
}

/// Argmax with lowest-index tie-break.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn softmax64<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.into_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.into_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
