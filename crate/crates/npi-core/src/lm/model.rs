use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::sampler::{sample_index, SamplerConfig};
use crate::tensor::{Scalar, Tape, Tensor};

/// Architecture hyperparameters of the toy autoregressive transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LMConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub c_max: usize,
    pub vocab_size: usize,
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.c_max == 0 || self.vocab_size < 2 {
            return Err(Error::Config("degenerate LM config".into()));
        }
        Ok(())
    }

    /// Desk-scale default (vocab size filled in from the corpus).
    pub fn desk_default(vocab_size: usize) -> Self {
        LMConfig {
            n_blocks: 4,
            d_model: 128,
            n_heads: 4,
            c_max: 64,
            vocab_size,
        }
    }
}

struct Block<T: Scalar> {
    ln1_g: Tensor<T>,
    ln1_b: Tensor<T>,
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    ln2_g: Tensor<T>,
    ln2_b: Tensor<T>,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

/// Decoder-only transformer with pre-norm blocks. Block outputs
/// (post-residual) are the tap points exposed as hidden states `h_1..h_n`;
/// there is no cross-layer aggregation.
pub struct TransformerLM<T: Scalar> {
    config: LMConfig,
    tok_emb: Tensor<T>,
    pos_emb: Tensor<T>,
    blocks: Vec<Block<T>>,
    lnf_g: Tensor<T>,
    lnf_b: Tensor<T>,
    w_out: Tensor<T>,
    b_out: Tensor<T>,
    frozen: bool,
}

pub struct ForwardOutput<T: Scalar> {
    /// Full logit matrix, one row per input position.
    pub logits: Tensor<T>,
    /// One entry per block, shape `[len, d_model]`, post-injection where a
    /// perturbation was applied at that tap.
    pub hidden: Vec<Tensor<T>>,
}

pub struct GenerateOutput<T: Scalar> {
    /// Sampled continuation (does not include the context).
    pub tokens: Vec<usize>,
    /// Per generated step: all `n_blocks` hidden states from that pass.
    pub step_hidden: Vec<Vec<Tensor<T>>>,
}

fn uniform_init<T: Scalar>(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * scale))
        .collect();
    Tensor::param(shape, data).expect("init shape")
}

fn zeros_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); numel]).expect("init shape")
}

fn ones_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    Tensor::param(shape, vec![T::one(); numel]).expect("init shape")
}

impl<T: Scalar> TransformerLM<T> {
    pub fn new(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let scale = 0.08;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        let tok_emb = uniform_init(vec![v, d], scale, &mut rng);
        let pos_emb = uniform_init(vec![config.c_max, d], scale, &mut rng);
        for _ in 0..config.n_blocks {
            blocks.push(Block {
                ln1_g: ones_param(vec![d]),
                ln1_b: zeros_param(vec![d]),
                wq: uniform_init(vec![d, d], scale, &mut rng),
                bq: zeros_param(vec![d]),
                wk: uniform_init(vec![d, d], scale, &mut rng),
                bk: zeros_param(vec![d]),
                wv: uniform_init(vec![d, d], scale, &mut rng),
                bv: zeros_param(vec![d]),
                wo: uniform_init(vec![d, d], scale, &mut rng),
                bo: zeros_param(vec![d]),
                ln2_g: ones_param(vec![d]),
                ln2_b: zeros_param(vec![d]),
                w1: uniform_init(vec![d, 4 * d], scale, &mut rng),
                b1: zeros_param(vec![4 * d]),
                w2: uniform_init(vec![4 * d, d], scale, &mut rng),
                b2: zeros_param(vec![d]),
            });
        }
        Ok(TransformerLM {
            config,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ones_param(vec![d]),
            lnf_b: zeros_param(vec![d]),
            w_out: uniform_init(vec![d, v], scale, &mut rng),
            b_out: zeros_param(vec![v]),
            frozen: false,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark weights immutable: they leave every optimizer's parameter set and
    /// stop accumulating gradients (they remain on the differentiation path).
    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params() {
            p.set_requires_grad(false);
        }
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), self.tok_emb.clone()),
            ("lm.pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("bq", &b.bq),
                ("wk", &b.wk),
                ("bk", &b.bk),
                ("wv", &b.wv),
                ("bv", &b.bv),
                ("wo", &b.wo),
                ("bo", &b.bo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("lm.block{i}.{suffix}"), t.clone()));
            }
        }
        out.push(("lm.lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lm.lnf_b".to_string(), self.lnf_b.clone()));
        out.push(("lm.w_out".to_string(), self.w_out.clone()));
        out.push(("lm.b_out".to_string(), self.b_out.clone()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Deep copy with independent, trainable parameters.
    pub fn unfrozen_copy(&self) -> Self {
        let copy_params = |t: &Tensor<T>| {
            Tensor::param(t.shape().to_vec(), t.to_vec()).expect("copy shape")
        };
        TransformerLM {
            config: self.config,
            tok_emb: copy_params(&self.tok_emb),
            pos_emb: copy_params(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: copy_params(&b.ln1_g),
                    ln1_b: copy_params(&b.ln1_b),
                    wq: copy_params(&b.wq),
                    bq: copy_params(&b.bq),
                    wk: copy_params(&b.wk),
                    bk: copy_params(&b.bk),
                    wv: copy_params(&b.wv),
                    bv: copy_params(&b.bv),
                    wo: copy_params(&b.wo),
                    bo: copy_params(&b.bo),
                    ln2_g: copy_params(&b.ln2_g),
                    ln2_b: copy_params(&b.ln2_b),
                    w1: copy_params(&b.w1),
                    b1: copy_params(&b.b1),
                    w2: copy_params(&b.w2),
                    b2: copy_params(&b.b2),
                })
                .collect(),
            lnf_g: copy_params(&self.lnf_g),
            lnf_b: copy_params(&self.lnf_b),
            w_out: copy_params(&self.w_out),
            b_out: copy_params(&self.b_out),
            frozen: false,
        }
    }

    pub fn from_named_params(config: LMConfig, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected = model.named_params();
        if entries.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                entries.len(),
                expected.len()
            )));
        }
        for ((name, loaded), (want_name, slot)) in entries.iter().zip(&expected) {
            if name != want_name {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` where `{want_name}` expected"
                )));
            }
            if loaded.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{name}` has shape {:?}, want {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            slot.set_data(&loaded.to_vec());
        }
        model.frozen = false;
        Ok(model)
    }

    /// SHA-256 digest of the current weights (frozen-model contract).
    pub fn weight_digest(&self) -> Result<[u8; 32]> {
        let as_f32: Vec<(String, Tensor<f32>)> = self
            .named_params()
            .iter()
            .map(|(n, t)| {
                let data: Vec<f32> = t.data().iter().map(|v| v.into_f32()).collect();
                Ok((n.clone(), Tensor::new(t.shape().to_vec(), data)?))
            })
            .collect::<Result<_>>()?;
        crate::checkpoint::digest(&as_f32)
    }

    /// One differentiable forward pass. `inject` holds `(tap_index, values)`
    /// pairs, tap indices 1-based over blocks; each perturbation is stored at
    /// the fixed `[c_max, d_model]` shape and its first `len` rows are added
    /// to that block's output before the next block runs.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens: &[usize],
        inject: &[(usize, Tensor<T>)],
    ) -> Result<ForwardOutput<T>> {
        let len = tokens.len();
        if len == 0 {
            return Err(Error::Data("forward on empty token sequence".into()));
        }
        if len > self.config.c_max {
            return Err(Error::ContextOverflow {
                len,
                max: self.config.c_max,
            });
        }
        for &(tap, ref d) in inject {
            if tap == 0 || tap > self.config.n_blocks {
                return Err(Error::Injection(format!(
                    "tap index {tap} outside [1, {}]",
                    self.config.n_blocks
                )));
            }
            if d.shape() != [self.config.c_max, self.config.d_model] {
                return Err(Error::Injection(format!(
                    "perturbation at tap {tap} has shape {:?}, want [{}, {}]",
                    d.shape(),
                    self.config.c_max,
                    self.config.d_model
                )));
            }
        }

        let d = self.config.d_model;
        let n_heads = self.config.n_heads;
        let dh = d / n_heads;
        let tok = tape.gather_rows(&self.tok_emb, tokens)?;
        let pos = tape.slice_rows(&self.pos_emb, 0, len)?;
        let mut x = tape.add(&tok, &pos)?;
        let mask = causal_mask::<T>(len);
        let mut hidden = Vec::with_capacity(self.config.n_blocks);

        for (bi, block) in self.blocks.iter().enumerate() {
            let xn = tape.layer_norm(&x, &block.ln1_g, &block.ln1_b)?;
            let q = {
                let p = tape.matmul(&xn, &block.wq)?;
                tape.add_bias(&p, &block.bq)?
            };
            let k = {
                let p = tape.matmul(&xn, &block.wk)?;
                tape.add_bias(&p, &block.bk)?
            };
            let v = {
                let p = tape.matmul(&xn, &block.wv)?;
                tape.add_bias(&p, &block.bv)?
            };
            let mut head_outs = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = tape.slice_cols(&q, h * dh, dh)?;
                let kh = tape.slice_cols(&k, h * dh, dh)?;
                let vh = tape.slice_cols(&v, h * dh, dh)?;
                let kt = tape.transpose(&kh)?;
                let scores = tape.matmul(&qh, &kt)?;
                let scaled = tape.scale(&scores, 1.0 / (dh as f64).sqrt())?;
                let masked = tape.add(&scaled, &mask)?;
                let probs = tape.softmax_rows(&masked)?;
                head_outs.push(tape.matmul(&probs, &vh)?);
            }
            let cat = tape.concat_cols(&head_outs)?;
            let proj = {
                let p = tape.matmul(&cat, &block.wo)?;
                tape.add_bias(&p, &block.bo)?
            };
            x = tape.add(&x, &proj)?;

            let x2n = tape.layer_norm(&x, &block.ln2_g, &block.ln2_b)?;
            let h1 = {
                let p = tape.matmul(&x2n, &block.w1)?;
                let pb = tape.add_bias(&p, &block.b1)?;
                tape.gelu(&pb)?
            };
            let h2 = {
                let p = tape.matmul(&h1, &block.w2)?;
                tape.add_bias(&p, &block.b2)?
            };
            x = tape.add(&x, &h2)?;

            // Tap point: block output, perturbed if a slice targets it.
            if let Some((_, dvals)) = inject.iter().find(|(tap, _)| *tap == bi + 1) {
                let dslice = tape.slice_rows(dvals, 0, len)?;
                x = tape.add(&x, &dslice)?;
            }
            hidden.push(x.clone());
        }

        let xf = tape.layer_norm(&x, &self.lnf_g, &self.lnf_b)?;
        let logits = {
            let p = tape.matmul(&xf, &self.w_out)?;
            tape.add_bias(&p, &self.b_out)?
        };
        Ok(ForwardOutput { logits, hidden })
    }

    /// Next-token logits plus all per-block hidden states, no grad tracking.
    pub fn lm_forward(&self, tokens: &[usize]) -> Result<(Vec<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, &[])?;
        tape.clear();
        let last = last_row(&out.logits);
        Ok((last, out.hidden))
    }

    /// Autoregressive sampling; context overflow is handled by sliding-window
    /// truncation to the last `c_max` tokens.
    pub fn generate(
        &self,
        context: &[usize],
        steps: usize,
        sampler: &SamplerConfig,
    ) -> Result<GenerateOutput<T>> {
        if context.is_empty() {
            return Err(Error::Data("generate needs a nonempty context".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let mut window: Vec<usize> = tail(context, self.config.c_max);
        let mut tokens = Vec::with_capacity(steps);
        let mut step_hidden = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (logits, hidden) = self.lm_forward(&window)?;
            let next = sample_index(&logits, sampler, &mut rng);
            tokens.push(next);
            step_hidden.push(hidden);
            window.push(next);
            if window.len() > self.config.c_max {
                window.remove(0);
            }
        }
        Ok(GenerateOutput {
            tokens,
            step_hidden,
        })
    }
}

pub(crate) fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let neg = T::from_f64(-1e9);
    let mut data = vec![T::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = neg;
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape")
}

pub(crate) fn last_row<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let cols = m.cols();
    let rows = m.rows();
    m.data()[(rows - 1) * cols..].to_vec()
}

pub(crate) fn tail(xs: &[usize], n: usize) -> Vec<usize> {
    if xs.len() > n {
        xs[xs.len() - n..].to_vec()
    } else {
        xs.to_vec()
    }
}
