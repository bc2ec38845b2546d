//! Training-data harvesting: run the frozen LM over contexts, label windows
//! of its output with a target metric, balance the classes by rejection, and
//! serialize the result.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::control::{extract_controls, ActivationSequence, ControlConfig};
use crate::error::{Error, Result};
use crate::lm::model::{tail, TransformerLM};
use crate::lm::sampler::SamplerConfig;
use crate::lm::vocab::Vocabulary;
use crate::tensor::{Tape, Tensor};

/// How a window of output text maps to a binary label.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricKind {
    /// Whole-word, case-insensitive presence of one word.
    WordPresence(String),
    /// Presence of any word from a list.
    WordListPresence(Vec<String>),
    /// Mean word length beyond a threshold (in characters).
    AvgWordLength(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMetric {
    pub kind: MetricKind,
    /// When true, the condition firing maps to label 1; when false, to 0.
    pub positive: bool,
}

impl TargetMetric {
    pub fn word_presence(word: &str) -> Self {
        TargetMetric {
            kind: MetricKind::WordPresence(word.to_string()),
            positive: true,
        }
    }

    /// Does the raw condition hold on this text?
    pub fn fires(&self, text: &str) -> bool {
        match &self.kind {
            MetricKind::WordPresence(w) => contains_word(text, w),
            MetricKind::WordListPresence(ws) => ws.iter().any(|w| contains_word(text, w)),
            MetricKind::AvgWordLength(threshold) => {
                let words: Vec<&str> = split_words(text).collect();
                if words.is_empty() {
                    return false;
                }
                let mean =
                    words.iter().map(|w| w.chars().count()).sum::<usize>() as f64 / words.len() as f64;
                mean > *threshold
            }
        }
    }

    pub fn label(&self, text: &str) -> u8 {
        u8::from(self.fires(text) == self.positive)
    }
}

fn split_words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
}

fn contains_word(text: &str, word: &str) -> bool {
    let needle = word.to_lowercase();
    split_words(text).any(|w| w.to_lowercase() == needle)
}

pub fn label(text: &str, metric: &TargetMetric) -> u8 {
    metric.label(text)
}

/// One labeled window: activations S, label L, and the input tokens T_in the
/// window's passes started from.
#[derive(Clone)]
pub struct DataExample {
    pub s: ActivationSequence<f32>,
    pub label: u8,
    pub t_in: Vec<usize>,
}

pub struct Dataset {
    pub metric: TargetMetric,
    pub control: ControlConfig,
    pub c_max: usize,
    pub d_model: usize,
    pub lm_digest: [u8; 32],
    pub seed: u64,
    pub examples: Vec<DataExample>,
    /// False when the builder stopped on corpus exhaustion short of its
    /// target size.
    pub complete: bool,
}

impl Dataset {
    pub fn class_counts(&self) -> (usize, usize) {
        let ones = self.examples.iter().filter(|e| e.label == 1).count();
        (self.examples.len() - ones, ones)
    }
}

/// Generate from `context` and cut one labeled `w`-pass window.
///
/// Runs `max_iterations` greedy-or-sampled passes. If the metric condition
/// first holds after pass `p`, the window is centered there (start
/// `p - w/2`, clamped); otherwise the window starts at the first pass and
/// the condition never holding determines the label.
pub fn harvest_example(
    model: &TransformerLM<f32>,
    vocab: &Vocabulary,
    context: &str,
    metric: &TargetMetric,
    control: &ControlConfig,
    sampler: &SamplerConfig,
    max_iterations: usize,
) -> Result<DataExample> {
    let lm_cfg = model.config();
    control.validate(lm_cfg)?;
    if max_iterations < control.w {
        return Err(Error::Config(format!(
            "max_iterations {} below window length {}",
            max_iterations, control.w
        )));
    }
    let ids = vocab.tokenize(context);
    if ids.is_empty() {
        return Err(Error::Data("harvest context is empty".into()));
    }

    let gen = model.generate(&ids, max_iterations, sampler)?;
    let fired_at = (0..gen.tokens.len()).find(|&p| {
        let text = vocab.detokenize(&gen.tokens[..=p]);
        metric.fires(&text)
    });
    let start = match fired_at {
        Some(p) => p
            .saturating_sub(control.w / 2)
            .min(max_iterations - control.w),
        None => 0,
    };
    let window_tokens = &gen.tokens[start..start + control.w];
    let window_text = vocab.detokenize(window_tokens);

    let mut full_input = ids.clone();
    full_input.extend_from_slice(&gen.tokens[..start]);
    let t_in = tail(&full_input, lm_cfg.c_max);

    let mut tape = Tape::new();
    let passes = (start..start + control.w)
        .map(|x| extract_controls(&mut tape, &gen.step_hidden[x], control, lm_cfg.c_max))
        .collect::<Result<Vec<_>>>()?;
    tape.clear();

    Ok(DataExample {
        s: ActivationSequence { passes },
        label: metric.label(&window_text),
        t_in,
    })
}

/// Streaming class balancer: an example is kept only if keeping it leaves
/// the class counts within `max(tolerance * total, 1)` of each other.
pub struct BalanceFilter {
    tolerance: f64,
    counts: [usize; 2],
}

impl BalanceFilter {
    pub fn new(tolerance: f64) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance <= 0.5) {
            return Err(Error::Config(format!(
                "balance tolerance {tolerance} outside (0, 0.5]"
            )));
        }
        Ok(BalanceFilter {
            tolerance,
            counts: [0, 0],
        })
    }

    pub fn accept(&mut self, label: u8) -> bool {
        let mut counts = self.counts;
        counts[label as usize] += 1;
        let total = counts[0] + counts[1];
        let imbalance = counts[0].abs_diff(counts[1]);
        let bound = (self.tolerance * total as f64).max(1.0);
        if imbalance as f64 <= bound {
            self.counts = counts;
            true
        } else {
            false
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.counts[0], self.counts[1])
    }
}

/// With probability `rate`, insert `target` at a uniform-random word boundary
/// (string start, end, or just after a space).
pub fn inject_rare_tokens<R: Rng>(
    context: &str,
    target: &str,
    rate: f64,
    rng: &mut R,
) -> Result<String> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("injection rate {rate} outside [0, 1]")));
    }
    if rate == 0.0 || rng.gen::<f64>() >= rate {
        return Ok(context.to_string());
    }
    let mut boundaries = vec![0usize];
    for (i, c) in context.char_indices() {
        if c == ' ' {
            boundaries.push(i + 1);
        }
    }
    boundaries.push(context.len());
    boundaries.dedup();
    let at = boundaries[rng.gen_range(0..boundaries.len())];
    let mut out = String::with_capacity(context.len() + target.len());
    out.push_str(&context[..at]);
    out.push_str(target);
    out.push_str(&context[at..]);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Injection {
    /// Inserted verbatim, so include its own spacing (e.g. `"cat "`).
    pub target: String,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub n_target: usize,
    pub balance_tolerance: f64,
    pub max_iterations: usize,
    pub injection: Option<Injection>,
    pub seed: u64,
}

/// Harvest and balance examples over the given contexts until `n_target` is
/// reached or the contexts are exhausted (the latter marks the dataset
/// incomplete rather than failing).
pub fn build_dataset(
    model: &TransformerLM<f32>,
    vocab: &Vocabulary,
    contexts: &[String],
    metric: &TargetMetric,
    control: &ControlConfig,
    sampler: &SamplerConfig,
    build: &BuildConfig,
) -> Result<Dataset> {
    if !model.is_frozen() {
        return Err(Error::Contract("dataset requires a frozen LM".into()));
    }
    let mut filter = BalanceFilter::new(build.balance_tolerance)?;
    let mut rng = crate::seed::rng(build.seed, "datagen-inject");
    let mut examples = Vec::with_capacity(build.n_target);
    for context in contexts {
        if examples.len() >= build.n_target {
            break;
        }
        let context = match &build.injection {
            Some(inj) => inject_rare_tokens(context, &inj.target, inj.rate, &mut rng)?,
            None => context.clone(),
        };
        let ex = harvest_example(
            model,
            vocab,
            &context,
            metric,
            control,
            sampler,
            build.max_iterations,
        )?;
        if filter.accept(ex.label) {
            examples.push(ex);
        }
    }
    let complete = examples.len() >= build.n_target;
    Ok(Dataset {
        metric: metric.clone(),
        control: control.clone(),
        c_max: model.config().c_max,
        d_model: model.config().d_model,
        lm_digest: model.weight_digest()?,
        seed: build.seed,
        examples,
        complete,
    })
}

// --- file format ---

const MAGIC: &[u8; 4] = b"NPIQ";
const VERSION: u32 = 1;

fn metric_blob(metric: &TargetMetric) -> (u8, Vec<u8>) {
    let mut blob = vec![u8::from(metric.positive)];
    let tag = match &metric.kind {
        MetricKind::WordPresence(w) => {
            push_str(&mut blob, w);
            0u8
        }
        MetricKind::WordListPresence(ws) => {
            blob.extend_from_slice(&(ws.len() as u16).to_le_bytes());
            for w in ws {
                push_str(&mut blob, w);
            }
            1
        }
        MetricKind::AvgWordLength(t) => {
            blob.extend_from_slice(&t.to_le_bytes());
            2
        }
    };
    (tag, blob)
}

fn metric_from_blob(tag: u8, blob: &[u8]) -> Result<TargetMetric> {
    let mut r = Reader::new(blob);
    let positive = r.u8()? != 0;
    let kind = match tag {
        0 => MetricKind::WordPresence(r.string()?),
        1 => {
            let n = r.u16()? as usize;
            let mut ws = Vec::with_capacity(n);
            for _ in 0..n {
                ws.push(r.string()?);
            }
            MetricKind::WordListPresence(ws)
        }
        2 => MetricKind::AvgWordLength(f64::from_le_bytes(r.bytes(8)?.try_into().unwrap())),
        other => return Err(Error::Format(format!("unknown metric tag {other}"))),
    };
    Ok(TargetMetric { kind, positive })
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("dataset file truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec())
            .map_err(|_| Error::Format("non-utf8 string in dataset".into()))
    }
}

/// Exact on-disk size of a dataset with this geometry.
pub fn predicted_size(
    w: usize,
    m: usize,
    c_max: usize,
    d_model: usize,
    blob_len: usize,
    token_counts: &[usize],
) -> usize {
    let header = 4 + 4 + 4 + 2 + 2 + 2 + 2 + 2 * m + 1 + 2 + blob_len + 32 + 8;
    let per_example_fixed = 1 + 2 + w * m * c_max * d_model * 4;
    header
        + token_counts
            .iter()
            .map(|&n| per_example_fixed + 4 * n)
            .sum::<usize>()
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let (tag, blob) = metric_blob(&ds.metric);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.examples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.control.w as u16).to_le_bytes());
    out.extend_from_slice(&(ds.control.m() as u16).to_le_bytes());
    out.extend_from_slice(&(ds.c_max as u16).to_le_bytes());
    out.extend_from_slice(&(ds.d_model as u16).to_le_bytes());
    for &tap in &ds.control.taps {
        out.extend_from_slice(&(tap as u16).to_le_bytes());
    }
    out.push(tag);
    out.extend_from_slice(&(blob.len() as u16).to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&ds.lm_digest);
    out.extend_from_slice(&ds.seed.to_le_bytes());

    let block = ds.c_max * ds.d_model;
    for ex in &ds.examples {
        if ex.s.passes.len() != ds.control.w {
            return Err(Error::Contract("example window length mismatch".into()));
        }
        out.push(ex.label);
        out.extend_from_slice(&(ex.t_in.len() as u16).to_le_bytes());
        for &id in &ex.t_in {
            out.extend_from_slice(&(id as u32).to_le_bytes());
        }
        for bundle in &ex.s.passes {
            if bundle.taps.len() != ds.control.m() {
                return Err(Error::Contract("example tap count mismatch".into()));
            }
            for t in &bundle.taps {
                if t.numel() != block {
                    return Err(Error::Contract("example tensor shape mismatch".into()));
                }
                for v in t.data().iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let n = r.u32()? as usize;
    let w = r.u16()? as usize;
    let m = r.u16()? as usize;
    let c_max = r.u16()? as usize;
    let d_model = r.u16()? as usize;
    let mut taps = Vec::with_capacity(m);
    for _ in 0..m {
        taps.push(r.u16()? as usize);
    }
    let tag = r.u8()?;
    let blob_len = r.u16()? as usize;
    let blob = r.bytes(blob_len)?.to_vec();
    let metric = metric_from_blob(tag, &blob)?;
    let lm_digest: [u8; 32] = r.bytes(32)?.try_into().unwrap();
    let seed = r.u64()?;

    let block = c_max * d_model;
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u8()?;
        let n_tok = r.u16()? as usize;
        let mut t_in = Vec::with_capacity(n_tok);
        for _ in 0..n_tok {
            t_in.push(r.u32()? as usize);
        }
        let mut passes = Vec::with_capacity(w);
        for _ in 0..w {
            let mut bundle = Vec::with_capacity(m);
            for _ in 0..m {
                let raw = r.bytes(block * 4)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                bundle.push(Tensor::new(vec![c_max, d_model], data)?);
            }
            passes.push(crate::control::ActivationBundle { taps: bundle });
        }
        examples.push(DataExample {
            s: ActivationSequence { passes },
            label,
            t_in,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(Dataset {
        metric,
        control: ControlConfig::new(taps, w),
        c_max,
        d_model,
        lm_digest,
        seed,
        examples,
        complete: true,
    })
}

pub fn serialize(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = to_bytes(ds)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn deserialize(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}
