//! Adversarial training: pretrain the content classifier on a harvested
//! dataset, then alternate discriminator and perturbation-network updates
//! over controlled rollouts, with optional real-time classifier refresh.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::control::{
    controlled_generate_with, ActivationBundle, ActivationSequence, ControlledRun,
};
use crate::datagen::{Dataset, TargetMetric};
use crate::error::{Error, Result};
use crate::lm::model::TransformerLM;
use crate::lm::sampler::SamplerConfig;
use crate::lm::vocab::Vocabulary;
use crate::models::{flatten_sequence, NPINetwork, ProbeNetwork};
use crate::tensor::{AdamConfig, AdamState, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Content weight.
    pub alpha: f64,
    /// Stability weight.
    pub beta: f64,
    /// Fluency weight.
    pub gamma: f64,
    /// 1 to induce the target quality, 0 to avoid it.
    pub l_target: u8,
    pub lr_x: f64,
    pub lr_y: f64,
    pub lr_z: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub y_refresh: bool,
    /// Refresh the classifier every this many batches (when enabled).
    pub y_refresh_every: usize,
    /// Held-out accuracy the classifier must reach before adversarial
    /// training may start.
    pub y_gate: f64,
    /// Fraction of the dataset held out during classifier pretraining.
    pub y_holdout: f64,
    pub y_epochs: usize,
    /// When nonzero, also checkpoint every this many batches (on top of the
    /// per-epoch checkpoints). Useful when quality moves fast within an epoch.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.25,
            l_target: 1,
            lr_x: 1e-3,
            lr_y: 1e-3,
            lr_z: 1e-3,
            batch_size: 8,
            epochs: 4,
            y_refresh: false,
            y_refresh_every: 4,
            y_gate: 0.85,
            y_holdout: 0.1,
            y_epochs: 20,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::Config("all loss weights are zero".into()));
        }
        if self.l_target > 1 {
            return Err(Error::Config("l_target must be 0 or 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.y_holdout > 0.0 && self.y_holdout <= 0.5) {
            return Err(Error::Config("y_holdout outside (0, 0.5]".into()));
        }
        Ok(())
    }

    /// Same run, opposite objective: drive the target quality out of the
    /// output instead of into it.
    pub fn avoidance_mode(mut self) -> Self {
        self.l_target = 0;
        self
    }
}

/// Per-step training record. `e_y` is zero on steps without a classifier
/// update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub epoch: usize,
    pub e_x_total: f64,
    pub e_x_fluency: f64,
    pub e_x_content: f64,
    pub e_x_stability: f64,
    pub e_z: f64,
    pub e_y: f64,
    pub grad_norm_x: f64,
    pub grad_norm_z: f64,
    /// Mean L2 norm of the perturbations emitted this batch.
    pub d_out_norm: f64,
}

fn bce_scalar<T: Scalar>(tape: &mut Tape<T>, pred: &Tensor<T>, target: f64) -> Result<Tensor<T>> {
    let t = Tensor::new(pred.shape().to_vec(), vec![T::from_f64(target); pred.numel()])?;
    tape.bce(pred, &t)
}

fn grad_norm<T: Scalar>(params: &[Tensor<T>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.into_iter().map(|v| v.into_f64() * v.into_f64()))
        .sum::<f64>()
        .sqrt()
}

fn set_requires_grad<T: Scalar>(params: &[Tensor<T>], value: bool) {
    for p in params {
        p.set_requires_grad(value);
    }
}

/// Constant-value copy of a sequence, cut off from any tape history.
pub fn detach_sequence<T: Scalar>(s: &ActivationSequence<T>) -> ActivationSequence<T> {
    ActivationSequence {
        passes: s
            .passes
            .iter()
            .map(|b| ActivationBundle {
                taps: b.taps.iter().map(|t| t.detached()).collect(),
            })
            .collect(),
    }
}

/// Train the content classifier on the harvested dataset, holding out a
/// fraction for the accuracy gate. Returns held-out accuracy.
pub fn pretrain_classifier(
    y: &ProbeNetwork<f32>,
    ds: &Dataset,
    cfg: &TrainingConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = ds.examples.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "classifier pretraining needs >= 2 examples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::seed::rng(cfg.seed, "y-pretrain");
    order.shuffle(&mut rng);
    let n_hold = ((cfg.y_holdout * n as f64).ceil() as usize).max(1);
    let (hold, train) = order.split_at(n_hold);

    let params = y.params();
    let mut adam = AdamState::new(&params, AdamConfig::with_lr(cfg.lr_y));
    let mut train = train.to_vec();
    for _ in 0..cfg.y_epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut loss: Option<Tensor<f32>> = None;
            for &i in chunk {
                let ex = &ds.examples[i];
                let p = y.forward(&mut tape, &ex.s)?;
                let l = bce_scalar(&mut tape, &p, ex.label as f64)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => tape.add(&acc, &l)?,
                });
            }
            let total = tape.scale(&loss.unwrap(), 1.0 / chunk.len() as f64)?;
            tape.backward(&total)?;
            adam.step(&params)?;
        }
    }

    let mut correct = 0usize;
    for &i in hold {
        let ex = &ds.examples[i];
        let p = y.probability(&ex.s)?;
        if (p > 0.5) == (ex.label == 1) {
            correct += 1;
        }
    }
    let acc = correct as f64 / hold.len() as f64;
    if acc < cfg.y_gate {
        return Err(Error::Gate(format!(
            "held-out accuracy {acc:.3} below {:.3} ({} of {} correct, {} train examples)",
            cfg.y_gate,
            correct,
            hold.len(),
            train.len()
        )));
    }
    Ok(acc)
}

/// Classifier accuracy on an arbitrary example set.
pub fn classifier_accuracy(
    y: &ProbeNetwork<f32>,
    examples: &[(ActivationSequence<f32>, u8)],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("accuracy over empty set".into()));
    }
    let mut correct = 0usize;
    for (s, label) in examples {
        if (y.probability(s)? > 0.5) == (*label == 1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub struct NpiLossParts {
    pub total: f64,
    pub fluency: f64,
    pub content: f64,
    pub stability: f64,
}

/// Composite perturbation-network loss over one rollout:
/// `gamma * BCE(Z(S'), 0) + alpha * BCE(Y(S'), l_target) + beta * MSE(S', S)`.
///
/// The caller decides whose gradients survive the eventual backward pass;
/// during an X step the Y, Z, and LM parameters are all de-flagged.
pub fn compute_npi_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s: &ActivationSequence<T>,
    s_prime: &ActivationSequence<T>,
    y: &ProbeNetwork<T>,
    z: &ProbeNetwork<T>,
    cfg: &TrainingConfig,
) -> Result<(Tensor<T>, NpiLossParts)> {
    cfg.validate()?;
    if s.w() != s_prime.w() || s.m() != s_prime.m() {
        return Err(Error::Contract(format!(
            "sequence shapes differ: {}x{} vs {}x{}",
            s.w(),
            s.m(),
            s_prime.w(),
            s_prime.m()
        )));
    }
    let z_out = z.forward(tape, s_prime)?;
    let fluency = bce_scalar(tape, &z_out, 0.0)?;
    let y_out = y.forward(tape, s_prime)?;
    let content = bce_scalar(tape, &y_out, cfg.l_target as f64)?;
    let sp_flat = flatten_sequence(tape, s_prime, &z.cfg)?;
    let s_flat = flatten_sequence(tape, s, &z.cfg)?;
    let stability = tape.mse(&sp_flat, &s_flat)?;

    let wf = tape.scale(&fluency, cfg.gamma)?;
    let wc = tape.scale(&content, cfg.alpha)?;
    let ws = tape.scale(&stability, cfg.beta)?;
    let fc = tape.add(&wf, &wc)?;
    let total = tape.add(&fc, &ws)?;

    let parts = NpiLossParts {
        total: total.value().into_f64(),
        fluency: fluency.value().into_f64(),
        content: content.value().into_f64(),
        stability: stability.value().into_f64(),
    };
    Ok((total, parts))
}

/// One Adam step on the discriminator over paired clean/perturbed sequences.
/// Pass detached sequences so nothing upstream is touched.
/// Returns (mean loss, gradient norm).
pub fn discriminator_step<T: Scalar>(
    z: &ProbeNetwork<T>,
    adam: &mut AdamState<T>,
    pairs: &[(ActivationSequence<T>, ActivationSequence<T>)],
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("discriminator step on empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut loss: Option<Tensor<T>> = None;
    for (s, sp) in pairs {
        let p_clean = z.forward(&mut tape, s)?;
        let l_clean = bce_scalar(&mut tape, &p_clean, 0.0)?;
        let p_pert = z.forward(&mut tape, sp)?;
        let l_pert = bce_scalar(&mut tape, &p_pert, 1.0)?;
        let pair_loss = tape.add(&l_clean, &l_pert)?;
        loss = Some(match loss {
            None => pair_loss,
            Some(acc) => tape.add(&acc, &pair_loss)?,
        });
    }
    let total = tape.scale(&loss.unwrap(), 1.0 / pairs.len() as f64)?;
    let e_z = total.value().into_f64();
    tape.backward(&total)?;
    let params = z.params();
    let gn = grad_norm(&params);
    adam.step(&params)?;
    Ok((e_z, gn))
}

/// One classifier update from freshly generated labels: the metric is re-run
/// on the perturbed window text. Returns the mean refresh loss.
pub fn refresh_classifier(
    y: &ProbeNetwork<f32>,
    adam: &mut AdamState<f32>,
    batch: &[(ActivationSequence<f32>, String)],
    metric: &TargetMetric,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("classifier refresh on empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut loss: Option<Tensor<f32>> = None;
    for (sp, text) in batch {
        let label = metric.label(text);
        let p = y.forward(&mut tape, sp)?;
        let l = bce_scalar(&mut tape, &p, label as f64)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => tape.add(&acc, &l)?,
        });
    }
    let total = tape.scale(&loss.unwrap(), 1.0 / batch.len() as f64)?;
    let e_y = total.value().into_f64();
    tape.backward(&total)?;
    let params = y.params();
    adam.step(&params)?;
    Ok(e_y)
}

/// The full adversarial loop. Per batch: roll out the window for each stored
/// input, take one discriminator step, one perturbation-network step, and
/// periodically refresh the classifier. Checkpoints the perturbation network
/// once per epoch when a directory is given.
#[allow(clippy::too_many_arguments)]
pub fn train_adversarial(
    x: &NPINetwork<f32>,
    y: &ProbeNetwork<f32>,
    z: &ProbeNetwork<f32>,
    ds: &Dataset,
    lm: &TransformerLM<f32>,
    vocab: &Vocabulary,
    sampler: &SamplerConfig,
    cfg: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    if !lm.is_frozen() {
        return Err(Error::Contract("adversarial training needs a frozen LM".into()));
    }
    let digest_before = lm.weight_digest()?;
    if digest_before != ds.lm_digest {
        return Err(Error::Contract(
            "dataset was harvested from a different LM (weight digest mismatch)".into(),
        ));
    }
    if ds.examples.is_empty() {
        return Err(Error::Data("adversarial training on empty dataset".into()));
    }

    let x_params = x.params();
    let y_params = y.params();
    let z_params = z.params();
    let lm_params = lm.params();
    let mut adam_x = AdamState::new(&x_params, AdamConfig::with_lr(cfg.lr_x));
    let mut adam_y = AdamState::new(&y_params, AdamConfig::with_lr(cfg.lr_y));
    let mut adam_z = AdamState::new(&z_params, AdamConfig::with_lr(cfg.lr_z));

    let mut rng = crate::seed::rng(cfg.seed, "adv-shuffle");
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.examples.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Rollouts, recorded on one tape so the X loss can differentiate
            // through the perturbed passes.
            let mut tape = Tape::new();
            let mut runs: Vec<ControlledRun<f32>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ex = &ds.examples[i];
                let run = controlled_generate_with(
                    &mut tape,
                    lm,
                    &ex.t_in,
                    &ds.control,
                    sampler,
                    |t, s| x.forward(t, s),
                )?;
                runs.push(run);
            }
            let d_out_norm = runs
                .iter()
                .map(|r| r.d_out.squared_norm().sqrt())
                .sum::<f64>()
                / runs.len() as f64;

            // Discriminator step on detached pairs.
            let pairs: Vec<_> = runs
                .iter()
                .map(|r| (detach_sequence(&r.s), detach_sequence(&r.s_prime)))
                .collect();
            let (e_z, grad_norm_z) = discriminator_step(z, &mut adam_z, &pairs)?;

            // X step: only X's parameters may receive gradients.
            set_requires_grad(&y_params, false);
            set_requires_grad(&z_params, false);
            let x_step = (|| -> Result<(NpiLossParts, f64)> {
                let mut loss: Option<Tensor<f32>> = None;
                let mut sums = NpiLossParts {
                    total: 0.0,
                    fluency: 0.0,
                    content: 0.0,
                    stability: 0.0,
                };
                for run in &runs {
                    let (l, parts) = compute_npi_loss(&mut tape, &run.s, &run.s_prime, y, z, cfg)?;
                    sums.total += parts.total;
                    sums.fluency += parts.fluency;
                    sums.content += parts.content;
                    sums.stability += parts.stability;
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => tape.add(&acc, &l)?,
                    });
                }
                let b = runs.len() as f64;
                sums.total /= b;
                sums.fluency /= b;
                sums.content /= b;
                sums.stability /= b;
                let total = tape.scale(&loss.unwrap(), 1.0 / b)?;
                tape.backward(&total)?;
                let gn = grad_norm(&x_params);
                adam_x.step(&x_params)?;
                // Rollout gradients can leak into the frozen LM's buffers
                // as zero-initialized accumulators; drop them.
                for p in &lm_params {
                    p.clear_grad();
                }
                Ok((sums, gn))
            })();
            set_requires_grad(&y_params, true);
            set_requires_grad(&z_params, true);
            let (parts, grad_norm_x) = x_step?;

            // Periodic classifier refresh from perturbed text.
            let mut e_y = 0.0;
            if cfg.y_refresh && batch_idx % cfg.y_refresh_every.max(1) == 0 {
                let refresh_batch: Vec<(ActivationSequence<f32>, String)> = runs
                    .iter()
                    .map(|r| (detach_sequence(&r.s_prime), vocab.detokenize(&r.tokens)))
                    .collect();
                e_y = refresh_classifier(y, &mut adam_y, &refresh_batch, &ds.metric)?;
            }

            let record = LossBreakdown {
                step,
                epoch,
                e_x_total: parts.total,
                e_x_fluency: parts.fluency,
                e_x_content: parts.content,
                e_x_stability: parts.stability,
                e_z,
                e_y,
                grad_norm_x,
                grad_norm_z,
                d_out_norm,
            };
            let values = [
                record.e_x_total,
                record.e_x_fluency,
                record.e_x_content,
                record.e_x_stability,
                record.e_z,
                record.e_y,
                record.grad_norm_x,
                record.grad_norm_z,
                record.d_out_norm,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("training loss"));
            }
            log.push(record);
            step += 1;
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                    crate::checkpoint::save(
                        &dir.join(format!("npi-step{step}.npiw")),
                        &x.named_params(),
                    )?;
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            crate::checkpoint::save(&dir.join(format!("npi-epoch{epoch}.npiw")), &x.named_params())?;
        }
    }

    if lm.weight_digest()? != digest_before {
        return Err(Error::Contract("frozen LM weights changed during training".into()));
    }
    Ok(log)
}
