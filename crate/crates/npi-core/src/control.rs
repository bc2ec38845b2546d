//! Activation-level control of the frozen language model: tapping block
//! outputs as input controls, injecting perturbations, and windowed
//! controlled generation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lm::model::{last_row, tail, LMConfig, TransformerLM};
use crate::lm::sampler::{sample_index, SamplerConfig};
use crate::tensor::{Scalar, Tape, Tensor};

/// Which block outputs are tapped (1-based indices, strictly increasing) and
/// how many forward passes form one controlled window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlConfig {
    pub taps: Vec<usize>,
    pub w: usize,
}

impl ControlConfig {
    pub fn new(taps: Vec<usize>, w: usize) -> Self {
        ControlConfig { taps, w }
    }

    /// Number of tapped layers, `m`.
    pub fn m(&self) -> usize {
        self.taps.len()
    }

    pub fn validate(&self, lm: &LMConfig) -> Result<()> {
        if self.w == 0 {
            return Err(Error::Config("window length w must be >= 1".into()));
        }
        if self.taps.is_empty() {
            return Err(Error::Config("tap index list is empty".into()));
        }
        for pair in self.taps.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Config(format!(
                    "tap indices must be strictly increasing, got {:?}",
                    self.taps
                )));
            }
        }
        let last = *self.taps.last().unwrap();
        if self.taps[0] == 0 || last > lm.n_blocks {
            return Err(Error::Config(format!(
                "tap indices {:?} outside [1, {}]",
                self.taps, lm.n_blocks
            )));
        }
        Ok(())
    }
}

/// Tapped hidden states from one forward pass, one `[c_max, d_model]` tensor
/// per tap in tap order.
#[derive(Clone)]
pub struct ActivationBundle<T: Scalar> {
    pub taps: Vec<Tensor<T>>,
}

/// `w` bundles, one per pass of a window.
#[derive(Clone)]
pub struct ActivationSequence<T: Scalar> {
    pub passes: Vec<ActivationBundle<T>>,
}

/// Perturbation values with the same `w x m x [c_max, d_model]` layout as the
/// activation sequence they are added to.
#[derive(Clone)]
pub struct PerturbationSequence<T: Scalar> {
    pub passes: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ActivationSequence<T> {
    pub fn w(&self) -> usize {
        self.passes.len()
    }

    pub fn m(&self) -> usize {
        self.passes.first().map_or(0, |b| b.taps.len())
    }
}

impl<T: Scalar> PerturbationSequence<T> {
    /// All-zero perturbations with the given geometry.
    pub fn zeros(cfg: &ControlConfig, c_max: usize, d_model: usize) -> Result<Self> {
        let passes = (0..cfg.w)
            .map(|_| {
                cfg.taps
                    .iter()
                    .map(|_| Tensor::new(vec![c_max, d_model], vec![T::zero(); c_max * d_model]))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PerturbationSequence { passes })
    }

    pub fn check_shape(&self, cfg: &ControlConfig, c_max: usize, d_model: usize) -> Result<()> {
        if self.passes.len() != cfg.w {
            return Err(Error::Injection(format!(
                "perturbation sequence has {} passes, window needs {}",
                self.passes.len(),
                cfg.w
            )));
        }
        for pass in &self.passes {
            if pass.len() != cfg.m() {
                return Err(Error::Injection(format!(
                    "perturbation pass has {} taps, config has {}",
                    pass.len(),
                    cfg.m()
                )));
            }
            for t in pass {
                if t.shape() != [c_max, d_model] {
                    return Err(Error::Injection(format!(
                        "perturbation tensor shape {:?}, want [{c_max}, {d_model}]",
                        t.shape()
                    )));
                }
                if !t.all_finite() {
                    return Err(Error::NonFinite("perturbation values".into()));
                }
            }
        }
        Ok(())
    }

    /// Sum of squared entries (used for perturbation-magnitude tracking).
    pub fn squared_norm(&self) -> f64 {
        self.passes
            .iter()
            .flatten()
            .map(|t| {
                t.data()
                    .iter()
                    .map(|v| v.into_f64() * v.into_f64())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Zero-pad (or truncate) a `[len, d]` activation to `[c_fixed, d]` on the
/// tape, so gradients still reach the original rows.
pub fn pad_rows<T: Scalar>(
    tape: &mut Tape<T>,
    t: &Tensor<T>,
    c_fixed: usize,
) -> Result<Tensor<T>> {
    let rows = t.rows();
    if rows == c_fixed {
        return Ok(t.clone());
    }
    if rows > c_fixed {
        return tape.slice_rows(t, 0, c_fixed);
    }
    let zeros = Tensor::new(
        vec![c_fixed - rows, t.cols()],
        vec![T::zero(); (c_fixed - rows) * t.cols()],
    )?;
    tape.concat_rows(&[t.clone(), zeros])
}

/// Pick the tapped states out of a full per-block hidden list and fix their
/// shape to `[c_fixed, d_model]`.
pub fn extract_controls<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: &[Tensor<T>],
    cfg: &ControlConfig,
    c_fixed: usize,
) -> Result<ActivationBundle<T>> {
    let mut taps = Vec::with_capacity(cfg.m());
    for &i in &cfg.taps {
        if i == 0 || i > hidden.len() {
            return Err(Error::Config(format!(
                "tap index {i} outside [1, {}]",
                hidden.len()
            )));
        }
        taps.push(pad_rows(tape, &hidden[i - 1], c_fixed)?);
    }
    Ok(ActivationBundle { taps })
}

/// One perturbed forward pass: run the frozen model with `d` added after each
/// tapped block. `d` is ordered like `cfg.taps`; `None` entries are skipped.
pub fn npic_forward<T: Scalar>(
    tape: &mut Tape<T>,
    model: &TransformerLM<T>,
    tokens: &[usize],
    cfg: &ControlConfig,
    d: Option<&[Tensor<T>]>,
) -> Result<crate::lm::model::ForwardOutput<T>> {
    cfg.validate(model.config())?;
    let inject: Vec<(usize, Tensor<T>)> = match d {
        None => Vec::new(),
        Some(ds) => {
            if ds.len() != cfg.m() {
                return Err(Error::Injection(format!(
                    "{} perturbation tensors for {} taps",
                    ds.len(),
                    cfg.m()
                )));
            }
            cfg.taps
                .iter()
                .zip(ds)
                .map(|(&tap, t)| (tap, t.clone()))
                .collect()
        }
    };
    model.forward(tape, tokens, &inject)
}

/// Everything produced by one controlled window.
pub struct ControlledRun<T: Scalar> {
    /// Tokens sampled during the uncontrolled passes.
    pub base_tokens: Vec<usize>,
    /// Tokens sampled during the perturbed passes.
    pub tokens: Vec<usize>,
    /// Uncontrolled activation sequence S.
    pub s: ActivationSequence<T>,
    /// Derived (perturbed) activation sequence S'.
    pub s_prime: ActivationSequence<T>,
    /// The perturbations that were applied.
    pub d_out: PerturbationSequence<T>,
}

/// Windowed controlled generation.
///
/// Runs `w` uncontrolled passes from `context` collecting S, calls `npi`
/// exactly once on the whole window to get the perturbation sequence, then
/// reruns `w` passes from the same context injecting the per-pass slices and
/// feeding the perturbed samples back autoregressively.
///
/// Everything is recorded on `tape`, so losses over S' differentiate back to
/// whatever produced the perturbations. For inference, pass a scratch tape
/// and drop it.
pub fn controlled_generate_with<T, F>(
    tape: &mut Tape<T>,
    model: &TransformerLM<T>,
    context: &[usize],
    cfg: &ControlConfig,
    sampler: &SamplerConfig,
    npi: F,
) -> Result<ControlledRun<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &ActivationSequence<T>) -> Result<PerturbationSequence<T>>,
{
    let lm_cfg = model.config();
    cfg.validate(lm_cfg)?;
    if cfg.w > lm_cfg.c_max {
        return Err(Error::Config(format!(
            "window length {} exceeds context capacity {}",
            cfg.w, lm_cfg.c_max
        )));
    }
    if context.is_empty() {
        return Err(Error::Data("controlled generation needs a context".into()));
    }
    let c_max = lm_cfg.c_max;

    // Phase 1: uncontrolled window.
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut window = tail(context, c_max);
    let mut base_tokens = Vec::with_capacity(cfg.w);
    let mut s_passes = Vec::with_capacity(cfg.w);
    for _ in 0..cfg.w {
        let out = model.forward(tape, &window, &[])?;
        s_passes.push(extract_controls(tape, &out.hidden, cfg, c_max)?);
        let logits = last_row(&out.logits);
        let next = sample_index(&logits, sampler, &mut rng);
        base_tokens.push(next);
        window.push(next);
        if window.len() > c_max {
            window.remove(0);
        }
    }
    let s = ActivationSequence { passes: s_passes };

    // Phase 2: one NPI call for the whole window.
    let d_out = npi(tape, &s)?;
    d_out.check_shape(cfg, c_max, lm_cfg.d_model)?;

    // Phase 3: perturbed rerun from the same context and sampler state.
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut window = tail(context, c_max);
    let mut tokens = Vec::with_capacity(cfg.w);
    let mut sp_passes = Vec::with_capacity(cfg.w);
    for x in 0..cfg.w {
        let out = npic_forward(tape, model, &window, cfg, Some(&d_out.passes[x]))?;
        sp_passes.push(extract_controls(tape, &out.hidden, cfg, c_max)?);
        let logits = last_row(&out.logits);
        let next = sample_index(&logits, sampler, &mut rng);
        tokens.push(next);
        window.push(next);
        if window.len() > c_max {
            window.remove(0);
        }
    }
    let s_prime = ActivationSequence { passes: sp_passes };

    Ok(ControlledRun {
        base_tokens,
        tokens,
        s,
        s_prime,
        d_out,
    })
}

/// Inference wrapper: no gradient tracking survives the call.
pub fn controlled_generate<T, F>(
    model: &TransformerLM<T>,
    context: &[usize],
    cfg: &ControlConfig,
    sampler: &SamplerConfig,
    npi: F,
) -> Result<ControlledRun<T>>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &ActivationSequence<T>) -> Result<PerturbationSequence<T>>,
{
    let mut tape = Tape::new();
    let run = controlled_generate_with(&mut tape, model, context, cfg, sampler, npi);
    tape.clear();
    run
}
