//! The three trainable networks: the perturbation generator (NPI), the
//! content classifier, and the discriminator. All are plain feed-forward
//! stacks over the flattened activation sequence.

use crate::control::{ActivationSequence, PerturbationSequence};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Scalar, Tape, Tensor};
use rand::Rng;

/// Geometry the networks are built for, plus hidden layer widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub w: usize,
    pub m: usize,
    pub c_max: usize,
    pub d_model: usize,
    pub hidden: Vec<usize>,
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        self.w * self.m * self.c_max * self.d_model
    }

    pub fn block_dim(&self) -> usize {
        self.c_max * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.m == 0 || self.c_max == 0 || self.d_model == 0 {
            return Err(Error::Config("degenerate network geometry".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("zero-width hidden layer".into()));
        }
        Ok(())
    }
}

fn glorot<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<T> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * s))
        .collect();
    Tensor::param(vec![rows, cols], data).expect("init shape")
}

fn zeros_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    Tensor::param(shape, vec![T::zero(); numel]).expect("init shape")
}

/// Hidden stack shared by all three networks.
struct Mlp<T: Scalar> {
    layers: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Mlp<T> {
    fn new(input_dim: usize, hidden: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            layers.push((glorot(prev, h, rng), zeros_param(vec![h])));
            prev = h;
        }
        Mlp { layers }
    }

    fn out_dim(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, |(w, _)| w.cols())
    }

    fn forward(&self, tape: &mut Tape<T>, mut x: Tensor<T>) -> Result<Tensor<T>> {
        for (w, b) in &self.layers {
            let p = tape.matmul(&x, w)?;
            let pb = tape.add_bias(&p, b)?;
            x = tape.relu(&pb)?;
        }
        Ok(x)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.h{i}.w"), w.clone()));
            out.push((format!("{prefix}.h{i}.b"), b.clone()));
        }
    }
}

/// Flatten an activation sequence into a single `[1, w*m*c_max*d_model]` row,
/// pass-major then tap-major, on the tape.
pub fn flatten_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    s: &ActivationSequence<T>,
    cfg: &NetConfig,
) -> Result<Tensor<T>> {
    if s.w() != cfg.w || s.m() != cfg.m {
        return Err(Error::Config(format!(
            "sequence is {}x{}, network built for {}x{}",
            s.w(),
            s.m(),
            cfg.w,
            cfg.m
        )));
    }
    let block = cfg.block_dim();
    let mut parts = Vec::with_capacity(cfg.w * cfg.m);
    for bundle in &s.passes {
        for t in &bundle.taps {
            if t.numel() != block {
                return Err(Error::Config(format!(
                    "activation tensor shape {:?} does not match [{}, {}]",
                    t.shape(),
                    cfg.c_max,
                    cfg.d_model
                )));
            }
            parts.push(tape.reshape(t, vec![1, block])?);
        }
    }
    tape.concat_cols(&parts)
}

/// The perturbation generator X. Maps a whole activation window to a
/// same-shaped perturbation window in one call.
///
/// The final linear layer is zero-initialized, so a fresh network is exactly
/// the identity controller (zero perturbation). Outputs go through tanh and a
/// learnable per-tap gain (initialized to 1 so gradients are alive from the
/// first step while magnitudes stay bounded by the gain).
pub struct NPINetwork<T: Scalar> {
    pub cfg: NetConfig,
    mlp: Mlp<T>,
    w_out: Tensor<T>,
    b_out: Tensor<T>,
    gains: Vec<Tensor<T>>,
}

impl<T: Scalar> NPINetwork<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seed::rng(seed, "npi-init");
        let n = cfg.input_dim();
        let mlp = Mlp::new(n, &cfg.hidden, &mut rng);
        let last = mlp.out_dim(n);
        let gains = (0..cfg.m)
            .map(|_| Tensor::param(vec![1], vec![T::one()]).expect("gain"))
            .collect();
        Ok(NPINetwork {
            w_out: zeros_param(vec![last, n]),
            b_out: zeros_param(vec![n]),
            mlp,
            gains,
            cfg,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.mlp.named("npi", &mut out);
        out.push(("npi.out.w".to_string(), self.w_out.clone()));
        out.push(("npi.out.b".to_string(), self.b_out.clone()));
        for (i, g) in self.gains.iter().enumerate() {
            out.push((format!("npi.gain{i}"), g.clone()));
        }
        out
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        s: &ActivationSequence<T>,
    ) -> Result<PerturbationSequence<T>> {
        let x = flatten_sequence(tape, s, &self.cfg)?;
        let h = self.mlp.forward(tape, x)?;
        let lin = {
            let p = tape.matmul(&h, &self.w_out)?;
            tape.add_bias(&p, &self.b_out)?
        };
        let squashed = tape.activation(&lin, Activation::Tanh)?;
        let block = self.cfg.block_dim();
        let mut passes = Vec::with_capacity(self.cfg.w);
        for x_i in 0..self.cfg.w {
            let mut taps = Vec::with_capacity(self.cfg.m);
            for t_i in 0..self.cfg.m {
                let off = (x_i * self.cfg.m + t_i) * block;
                let piece = tape.slice_cols(&squashed, off, block)?;
                let scaled = tape.scale_t(&piece, &self.gains[t_i])?;
                taps.push(tape.reshape(&scaled, vec![self.cfg.c_max, self.cfg.d_model])?);
            }
            passes.push(taps);
        }
        Ok(PerturbationSequence { passes })
    }

    pub fn load(cfg: NetConfig, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let model = Self::new(cfg, 0)?;
        fill_from_entries(&model.named_params(), entries)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// Content classifier Y.
    Classifier,
    /// Discriminator Z.
    Discriminator,
}

impl ProbeKind {
    fn prefix(self) -> &'static str {
        match self {
            ProbeKind::Classifier => "cls",
            ProbeKind::Discriminator => "disc",
        }
    }
}

/// Scalar-probability head over an activation sequence, used for both the
/// content classifier and the discriminator (independent parameters).
pub struct ProbeNetwork<T: Scalar> {
    pub cfg: NetConfig,
    pub kind: ProbeKind,
    mlp: Mlp<T>,
    w_out: Tensor<T>,
    b_out: Tensor<T>,
}

impl<T: Scalar> ProbeNetwork<T> {
    pub fn new(cfg: NetConfig, kind: ProbeKind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seed::rng(seed, &format!("{}-init", kind.prefix()));
        let n = cfg.input_dim();
        let mlp = Mlp::new(n, &cfg.hidden, &mut rng);
        let last = mlp.out_dim(n);
        Ok(ProbeNetwork {
            w_out: glorot(last, 1, &mut rng),
            b_out: zeros_param(vec![1]),
            mlp,
            cfg,
            kind,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let p = self.kind.prefix();
        self.mlp.named(p, &mut out);
        out.push((format!("{p}.out.w"), self.w_out.clone()));
        out.push((format!("{p}.out.b"), self.b_out.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Probability that the sequence shows the probed property; `[1, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        s: &ActivationSequence<T>,
    ) -> Result<Tensor<T>> {
        let x = flatten_sequence(tape, s, &self.cfg)?;
        let h = self.mlp.forward(tape, x)?;
        let lin = {
            let p = tape.matmul(&h, &self.w_out)?;
            tape.add_bias(&p, &self.b_out)?
        };
        tape.sigmoid(&lin)
    }

    /// Plain probability without gradient tracking.
    pub fn probability(&self, s: &ActivationSequence<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, s)?;
        tape.clear();
        let v = p.data()[0];
        Ok(v.into_f64())
    }

    pub fn load(cfg: NetConfig, kind: ProbeKind, entries: &[(String, Tensor<T>)]) -> Result<Self> {
        let model = Self::new(cfg, kind, 0)?;
        fill_from_entries(&model.named_params(), entries)?;
        Ok(model)
    }

    /// Independent copy (used to snapshot Y before real-time refresh runs).
    pub fn deep_copy(&self) -> Self {
        let copy = |t: &Tensor<T>| {
            Tensor::param(t.shape().to_vec(), t.to_vec()).expect("copy shape")
        };
        ProbeNetwork {
            cfg: self.cfg.clone(),
            kind: self.kind,
            mlp: Mlp {
                layers: self
                    .mlp
                    .layers
                    .iter()
                    .map(|(w, b)| (copy(w), copy(b)))
                    .collect(),
            },
            w_out: copy(&self.w_out),
            b_out: copy(&self.b_out),
        }
    }
}

fn fill_from_entries<T: Scalar>(
    slots: &[(String, Tensor<T>)],
    entries: &[(String, Tensor<T>)],
) -> Result<()> {
    if entries.len() != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, network needs {}",
            entries.len(),
            slots.len()
        )));
    }
    for ((name, loaded), (want, slot)) in entries.iter().zip(slots) {
        if name != want {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` where `{want}` expected"
            )));
        }
        if loaded.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor `{name}` shape {:?}, want {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        slot.set_data(&loaded.to_vec());
    }
    Ok(())
}
