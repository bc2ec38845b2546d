//! `npi`: command-line front end for the activation-steering pipeline.
//!
//! Every command reads a flat key=value config (flags override file values),
//! derives all randomness from one 64-bit seed, and writes its artifacts plus
//! a manifest recording the resolved config and the digest of every input it
//! consumed. Exit codes: 0 success, 2 usage, 3 gate failure, 1 other errors.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::Cfg;
use npi_core::control::{controlled_generate, ControlConfig};
use npi_core::corpus::{self, CorpusConfig};
use npi_core::datagen::{self, BuildConfig, Injection, MetricKind, TargetMetric};
use npi_core::eval::{self, BaselineMode, EmbeddingTable};
use npi_core::lm::{
    fine_tune, perplexity, pretrain, LMConfig, PretrainConfig, SamplerConfig, TransformerLM,
    Vocabulary,
};
use npi_core::models::{NPINetwork, NetConfig, ProbeKind, ProbeNetwork};
use npi_core::tensor::{gradcheck, Activation, Tape, Tensor};
use npi_core::training::{pretrain_classifier, train_adversarial, TrainingConfig};
use npi_core::{checkpoint, seed, Error, Result};

#[derive(Parser)]
#[command(name = "npi", version, about = "Activation-steering pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file (lm.d_model=128).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed; every random stream is derived from it by name.
    #[arg(long)]
    seed: Option<u64>,
    /// Exact output directory (default: <root>/<command>-seed<seed>, where
    /// the root is $NPI_RUN_DIR or ./runs).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Force serial execution for byte-identical artifacts.
    #[arg(long)]
    deterministic: bool,
    /// Worker count for harvesting/evaluation; ignored with --deterministic.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Text to continue from.
    #[arg(long)]
    context: String,
    /// Tokens to generate.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct DatagenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of examples to harvest (overrides data.n).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: Common,
    /// Word to induce or avoid (overrides eval.target).
    #[arg(long)]
    target: Option<String>,
    /// induce | avoid (overrides eval.mode).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the frozen base LM on the toy corpus.
    PretrainLm(Common),
    /// Fine-tune an unfrozen copy of the LM on a target corpus.
    FinetuneLm(Common),
    /// Harvest a labeled activation dataset from the frozen LM.
    Datagen(DatagenArgs),
    /// Pretrain the content classifier on a dataset, gated on accuracy.
    TrainClassifier(Common),
    /// Adversarially train the interface network against the classifier.
    TrainNpi(Common),
    /// Generate text, plain or under interface control.
    Generate(GenerateArgs),
    /// Compare controlled vs unmodified generations and emit a report.
    Evaluate(Common),
    /// Direct word-probability control baseline.
    Baseline(BaselineArgs),
    /// Finite-difference checks of the autodiff engine.
    Gradcheck(Common),
}

fn main() {
    let cli = Cli::parse();
    let (name, common): (&str, &Common) = match &cli.cmd {
        Cmd::PretrainLm(c) => ("pretrain-lm", c),
        Cmd::FinetuneLm(c) => ("finetune-lm", c),
        Cmd::Datagen(a) => ("datagen", &a.common),
        Cmd::TrainClassifier(c) => ("train-classifier", c),
        Cmd::TrainNpi(c) => ("train-npi", c),
        Cmd::Generate(a) => ("generate", &a.common),
        Cmd::Evaluate(c) => ("evaluate", c),
        Cmd::Baseline(a) => ("baseline", &a.common),
        Cmd::Gradcheck(c) => ("gradcheck", c),
    };
    match run(name, common, &cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            let kind = match &e {
                Error::Gate(_) => "gate",
                Error::Config(_) => "config",
                Error::Contract(_) => "contract",
                Error::Data(_) => "data",
                Error::Format(_) => "format",
                Error::Io(_) => "io",
                _ => "internal",
            };
            eprintln!(
                "{}",
                serde_json::json!({"error": {"kind": kind, "message": e.to_string()}})
            );
            std::process::exit(match e {
                Error::Gate(_) => 3,
                _ => 1,
            });
        }
    }
}

fn run(name: &str, common: &Common, cmd: &Cmd) -> Result<()> {
    let mut cfg = Cfg::load(common.config.as_deref())?;
    cfg.apply_sets(&common.sets)?;
    if let Some(s) = common.seed {
        cfg.set("seed", s);
    }
    let master = cfg.u64_or("seed", 0)?;
    let dir = resolve_run_dir(name, master, common.run_dir.as_deref())?;
    std::fs::create_dir_all(&dir)?;
    let mut man = Manifest::new(name, &cfg);

    match cmd {
        Cmd::PretrainLm(_) => cmd_pretrain_lm(&cfg, master, &dir, &mut man),
        Cmd::FinetuneLm(_) => cmd_finetune_lm(&cfg, master, &dir, &mut man),
        Cmd::Datagen(a) => cmd_datagen(&cfg, master, &dir, &mut man, a.n),
        Cmd::TrainClassifier(_) => cmd_train_classifier(&cfg, master, &dir, &mut man),
        Cmd::TrainNpi(_) => cmd_train_npi(&cfg, master, &dir, &mut man),
        Cmd::Generate(a) => cmd_generate(&cfg, master, &dir, &mut man, a),
        Cmd::Evaluate(_) => cmd_evaluate(&cfg, master, &dir, &mut man),
        Cmd::Baseline(a) => cmd_baseline(&cfg, master, &dir, &mut man, a),
        Cmd::Gradcheck(_) => cmd_gradcheck(&dir, &mut man),
    }?;

    man.write(&dir)?;
    Ok(())
}

fn resolve_run_dir(name: &str, seed: u64, flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    let root = std::env::var("NPI_RUN_DIR").unwrap_or_else(|_| "runs".to_string());
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(PathBuf::from(root).join(format!("{name}-{stamp}-seed{seed}")))
}

/// Run provenance: resolved config plus a digest for every input consumed
/// and every artifact produced.
#[derive(Serialize)]
struct Manifest {
    command: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    stats: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    fn new(command: &str, cfg: &Cfg) -> Self {
        Manifest {
            command: command.to_string(),
            config: cfg.resolved().clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            sha256_file(path)?,
        );
        Ok(())
    }

    fn stat(&mut self, key: &str, value: impl Into<serde_json::Value>) {
        self.stats.insert(key.to_string(), value.into());
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

// ---------------------------------------------------------------- metadata

/// Sidecar describing an LM checkpoint; the NPIW file itself carries only
/// named tensors.
#[derive(Serialize, Deserialize)]
struct LmMeta {
    n_blocks: usize,
    d_model: usize,
    n_heads: usize,
    c_max: usize,
    vocab_size: usize,
}

/// Sidecar for interface/probe checkpoints.
#[derive(Serialize, Deserialize)]
struct NetMeta {
    kind: String,
    w: usize,
    taps: Vec<usize>,
    c_max: usize,
    d_model: usize,
    hidden: Vec<usize>,
}

fn meta_path(npiw: &Path) -> PathBuf {
    npiw.with_extension("json")
}

fn save_lm(dir: &Path, name: &str, lm: &TransformerLM<f32>, man: &mut Manifest) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.npiw"));
    checkpoint::save(&path, &lm.named_params())?;
    let c = lm.config();
    write_json(
        &meta_path(&path),
        &LmMeta {
            n_blocks: c.n_blocks,
            d_model: c.d_model,
            n_heads: c.n_heads,
            c_max: c.c_max,
            vocab_size: c.vocab_size,
        },
    )?;
    man.output(&path)?;
    man.output(&meta_path(&path))?;
    Ok(path)
}

fn load_lm(path: &Path, man: &mut Manifest) -> Result<TransformerLM<f32>> {
    man.input(path)?;
    man.input(&meta_path(path))?;
    let meta: LmMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path(path).display())))?;
    let entries = checkpoint::load(path)?;
    let mut lm = TransformerLM::from_named_params(
        LMConfig {
            n_blocks: meta.n_blocks,
            d_model: meta.d_model,
            n_heads: meta.n_heads,
            c_max: meta.c_max,
            vocab_size: meta.vocab_size,
        },
        &entries,
    )?;
    lm.freeze();
    Ok(lm)
}

fn save_net(
    dir: &Path,
    name: &str,
    kind: &str,
    entries: &[(String, Tensor<f32>)],
    net: &NetConfig,
    taps: &[usize],
    man: &mut Manifest,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.npiw"));
    checkpoint::save(&path, entries)?;
    write_json(
        &meta_path(&path),
        &NetMeta {
            kind: kind.to_string(),
            w: net.w,
            taps: taps.to_vec(),
            c_max: net.c_max,
            d_model: net.d_model,
            hidden: net.hidden.clone(),
        },
    )?;
    man.output(&path)?;
    man.output(&meta_path(&path))?;
    Ok(path)
}

fn load_net_meta(path: &Path, man: &mut Manifest) -> Result<(NetMeta, checkpoint::NamedParams)> {
    man.input(path)?;
    man.input(&meta_path(path))?;
    let meta: NetMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path(path).display())))?;
    let entries = checkpoint::load(path)?;
    Ok((meta, entries))
}

fn net_config(meta: &NetMeta) -> NetConfig {
    NetConfig {
        w: meta.w,
        m: meta.taps.len(),
        c_max: meta.c_max,
        d_model: meta.d_model,
        hidden: meta.hidden.clone(),
    }
}

// ------------------------------------------------------------- cfg readers

fn corpus_config(cfg: &Cfg, master: u64) -> Result<CorpusConfig> {
    Ok(CorpusConfig {
        n_sentences: cfg.usize_or("corpus.n_sentences", 500)?,
        furry_rate: cfg.f64_or("corpus.furry_rate", 0.125)?,
        cat_rate: cfg.f64_or("corpus.cat_rate", 0.02)?,
        seed: cfg.u64_or("corpus.seed", master)?,
    })
}

fn corpus_lines(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<Vec<String>> {
    match cfg.opt_path("paths.corpus") {
        Some(p) => {
            man.input(&p)?;
            Ok(std::fs::read_to_string(&p)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect())
        }
        None => {
            let lines = corpus::generate_corpus(&corpus_config(cfg, master)?)?;
            let path = dir.join("corpus.txt");
            std::fs::write(&path, lines.join("\n") + "\n")?;
            man.output(&path)?;
            Ok(lines)
        }
    }
}

fn context_list(cfg: &Cfg, master: u64, n_default: usize, man: &mut Manifest) -> Result<Vec<String>> {
    match cfg.opt_path("paths.contexts") {
        Some(p) => {
            man.input(&p)?;
            Ok(std::fs::read_to_string(&p)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect())
        }
        None => {
            let n = cfg.usize_or("data.n_contexts", n_default)?;
            let trigger = cfg.bool_or("data.trigger_contexts", false)?;
            Ok(corpus::contexts(n, trigger, master))
        }
    }
}

fn sampler_config(cfg: &Cfg, master: u64) -> Result<SamplerConfig> {
    Ok(SamplerConfig {
        top_k: cfg.usize_or("sampler.top_k", 1)?,
        top_p: match cfg.get("sampler.top_p") {
            None | Some("") => None,
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("sampler.top_p={v}: expected a number"))
            })?),
        },
        seed: cfg.u64_or("sampler.seed", seed::derive(master, "sampler"))?,
    })
}

fn control_config(cfg: &Cfg) -> Result<ControlConfig> {
    Ok(ControlConfig::new(
        cfg.usize_list_or("control.taps", &[2])?,
        cfg.usize_or("control.w", 4)?,
    ))
}

fn metric_config(cfg: &Cfg) -> Result<TargetMetric> {
    let kind = match cfg.str_or("metric.kind", "word_presence") {
        "word_presence" => {
            MetricKind::WordPresence(cfg.str_or("metric.word", "cat").to_string())
        }
        "word_list" => MetricKind::WordListPresence(
            cfg.str_or("metric.words", "")
                .split(',')
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect(),
        ),
        "avg_word_length" => MetricKind::AvgWordLength(cfg.f64_or("metric.threshold", 5.0)?),
        other => return Err(Error::Config(format!("unknown metric.kind `{other}`"))),
    };
    Ok(TargetMetric {
        kind,
        positive: cfg.bool_or("metric.positive", true)?,
    })
}

fn training_config(cfg: &Cfg, master: u64) -> Result<TrainingConfig> {
    let d = TrainingConfig::default();
    Ok(TrainingConfig {
        alpha: cfg.f64_or("train.alpha", d.alpha)?,
        beta: cfg.f64_or("train.beta", d.beta)?,
        gamma: cfg.f64_or("train.gamma", d.gamma)?,
        l_target: cfg.usize_or("train.l_target", d.l_target as usize)? as u8,
        lr_x: cfg.f64_or("train.lr_x", d.lr_x)?,
        lr_y: cfg.f64_or("train.lr_y", d.lr_y)?,
        lr_z: cfg.f64_or("train.lr_z", d.lr_z)?,
        batch_size: cfg.usize_or("train.batch_size", d.batch_size)?,
        epochs: cfg.usize_or("train.epochs", d.epochs)?,
        y_refresh: cfg.bool_or("train.y_refresh", d.y_refresh)?,
        y_refresh_every: cfg.usize_or("train.y_refresh_every", d.y_refresh_every)?,
        y_gate: cfg.f64_or("train.y_gate", d.y_gate)?,
        y_holdout: cfg.f64_or("train.y_holdout", d.y_holdout)?,
        y_epochs: cfg.usize_or("train.y_epochs", d.y_epochs)?,
        checkpoint_every: cfg.usize_or("train.checkpoint_every", d.checkpoint_every)?,
        seed: cfg.u64_or("train.seed", master)?,
    })
}

// ----------------------------------------------------------------- commands

fn cmd_pretrain_lm(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<()> {
    let lines = corpus_lines(cfg, master, dir, man)?;
    let vocab = Vocabulary::from_corpus(&lines.join("\n"));
    let lm_cfg = LMConfig {
        n_blocks: cfg.usize_or("lm.n_blocks", 2)?,
        d_model: cfg.usize_or("lm.d_model", 32)?,
        n_heads: cfg.usize_or("lm.n_heads", 2)?,
        c_max: cfg.usize_or("lm.c_max", 48)?,
        vocab_size: vocab.len(),
    };
    let mut lm = TransformerLM::new(lm_cfg, seed::derive(master, "lm-init"))?;
    let losses = pretrain(
        &mut lm,
        &vocab,
        &lines,
        &PretrainConfig {
            steps: cfg.usize_or("lm.steps", 1500)?,
            lr: cfg.f64_or("lm.lr", 1e-3)?,
            seed: master,
        },
    )?;
    lm.freeze();

    save_lm(dir, "lm", &lm, man)?;
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    man.output(&vocab_path)?;
    let losses_path = dir.join("pretrain_losses.json");
    write_json(&losses_path, &losses)?;
    man.output(&losses_path)?;
    man.stat("final_loss", *losses.last().unwrap_or(&f64::NAN));
    man.stat("vocab_size", vocab.len());
    println!("pretrained LM: {} steps, final loss {:.4}", losses.len(), losses.last().unwrap_or(&f64::NAN));
    Ok(())
}

fn cmd_finetune_lm(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<()> {
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let lines = corpus_lines(cfg, master, dir, man)?;

    let before = mean_perplexity(&lm, &vocab, &lines)?;
    let (tuned, losses) = fine_tune(
        &lm,
        &vocab,
        &lines,
        &PretrainConfig {
            steps: cfg.usize_or("lm.steps", 500)?,
            lr: cfg.f64_or("lm.lr", 1e-3)?,
            seed: seed::derive(master, "finetune"),
        },
    )?;
    let after = mean_perplexity(&tuned, &vocab, &lines)?;

    save_lm(dir, "lm-tuned", &tuned, man)?;
    let losses_path = dir.join("finetune_losses.json");
    write_json(&losses_path, &losses)?;
    man.output(&losses_path)?;
    man.stat("perplexity_before", before);
    man.stat("perplexity_after", after);
    man.stat(
        "base_digest",
        hex(&lm.weight_digest()?),
    );
    println!("fine-tuned copy: target perplexity {before:.3} -> {after:.3}");
    Ok(())
}

fn cmd_datagen(
    cfg: &Cfg,
    master: u64,
    dir: &Path,
    man: &mut Manifest,
    n_flag: Option<usize>,
) -> Result<()> {
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;

    let n_target = match n_flag {
        Some(n) => n,
        None => cfg.usize_or("data.n", 200)?,
    };
    let contexts = context_list(cfg, master, (n_target * 4).max(64), man)?;
    let metric = metric_config(cfg)?;
    let control = control_config(cfg)?;
    let sampler = sampler_config(cfg, master)?;
    let injection = match cfg.get("data.inject_target") {
        None | Some("") => None,
        Some(t) => Some(Injection {
            target: t.to_string(),
            rate: cfg.f64_or("data.inject_rate", 0.5)?,
        }),
    };
    let build = BuildConfig {
        n_target,
        balance_tolerance: cfg.f64_or("data.balance_tolerance", 0.05)?,
        max_iterations: cfg.usize_or("data.max_iterations", 24)?,
        injection,
        seed: master,
    };
    let ds = datagen::build_dataset(&lm, &vocab, &contexts, &metric, &control, &sampler, &build)?;

    let path = dir.join("dataset.npiq");
    datagen::serialize(&ds, &path)?;
    man.output(&path)?;
    let (zeros, ones) = ds.class_counts();
    man.stat("examples", ds.examples.len());
    man.stat("label0", zeros);
    man.stat("label1", ones);
    man.stat("complete", ds.complete);
    println!(
        "dataset: {} examples ({zeros} label-0, {ones} label-1), complete={}",
        ds.examples.len(),
        ds.complete
    );
    Ok(())
}

fn cmd_train_classifier(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<()> {
    let ds_path = cfg.path("paths.dataset")?;
    man.input(&ds_path)?;
    let ds = datagen::deserialize(&ds_path)?;

    let net = NetConfig {
        w: ds.control.w,
        m: ds.control.m(),
        c_max: ds.c_max,
        d_model: ds.d_model,
        hidden: cfg.usize_list_or("net.hidden", &[64])?,
    };
    let y = ProbeNetwork::new(net.clone(), ProbeKind::Classifier, seed::derive(master, "y-init"))?;
    let train = training_config(cfg, master)?;
    let accuracy = pretrain_classifier(&y, &ds, &train)?;

    save_net(dir, "classifier", "cls", &y.named_params(), &net, &ds.control.taps, man)?;
    man.stat("holdout_accuracy", accuracy);
    println!("classifier held-out accuracy {accuracy:.3}");
    Ok(())
}

fn cmd_train_npi(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<()> {
    let y_path = cfg.opt_path("paths.classifier").ok_or_else(|| {
        Error::Gate("train-npi requires a pretrained classifier checkpoint (paths.classifier)".into())
    })?;
    if !y_path.exists() {
        return Err(Error::Gate(format!(
            "classifier checkpoint {} does not exist",
            y_path.display()
        )));
    }
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let ds_path = cfg.path("paths.dataset")?;
    man.input(&ds_path)?;
    let ds = datagen::deserialize(&ds_path)?;

    let (y_meta, y_entries) = load_net_meta(&y_path, man)?;
    let y = ProbeNetwork::load(net_config(&y_meta), ProbeKind::Classifier, &y_entries)?;

    let net = NetConfig {
        w: ds.control.w,
        m: ds.control.m(),
        c_max: ds.c_max,
        d_model: ds.d_model,
        hidden: cfg.usize_list_or("net.hidden", &[64])?,
    };
    let x = NPINetwork::new(net.clone(), seed::derive(master, "x-init"))?;
    let z = ProbeNetwork::new(net.clone(), ProbeKind::Discriminator, seed::derive(master, "z-init"))?;

    let sampler = sampler_config(cfg, master)?;
    let train = training_config(cfg, master)?;
    let log = train_adversarial(&x, &y, &z, &ds, &lm, &vocab, &sampler, &train, Some(dir))?;

    save_net(dir, "npi", "npi", &x.named_params(), &net, &ds.control.taps, man)?;
    save_net(dir, "discriminator", "disc", &z.named_params(), &net, &ds.control.taps, man)?;
    save_net(dir, "classifier-final", "cls", &y.named_params(), &net, &ds.control.taps, man)?;
    let log_path = dir.join("training_log.json");
    write_json(&log_path, &log)?;
    man.output(&log_path)?;
    if let Some(last) = log.last() {
        man.stat("final_e_x_total", last.e_x_total);
        man.stat("final_e_z", last.e_z);
        man.stat("steps", log.len());
        println!(
            "trained interface: {} steps, final E_X {:.4}, E_Z {:.4}",
            log.len(),
            last.e_x_total,
            last.e_z
        );
    }
    Ok(())
}

/// Windowed controlled generation: run the interface one window at a time,
/// feeding perturbed samples back into the context.
fn npi_generate(
    lm: &TransformerLM<f32>,
    x: &NPINetwork<f32>,
    control: &ControlConfig,
    sampler: &SamplerConfig,
    context: &[usize],
    steps: usize,
) -> Result<Vec<usize>> {
    let c_max = lm.config().c_max;
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let run = controlled_generate(lm, &ctx, control, sampler, |tape, s| x.forward(tape, s))?;
        for t in run.tokens {
            if out.len() >= steps {
                break;
            }
            out.push(t);
            ctx.push(t);
        }
        if ctx.len() > c_max {
            let cut = ctx.len() - c_max;
            ctx.drain(..cut);
        }
    }
    Ok(out)
}

fn cmd_generate(
    cfg: &Cfg,
    master: u64,
    dir: &Path,
    man: &mut Manifest,
    args: &GenerateArgs,
) -> Result<()> {
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let sampler = sampler_config(cfg, master)?;
    let steps = match args.steps {
        Some(s) => s,
        None => cfg.usize_or("gen.steps", 16)?,
    };
    let ids = vocab.tokenize(&args.context);

    let (mode, tokens) = match cfg.opt_path("paths.npi") {
        Some(npi_path) => {
            let (meta, entries) = load_net_meta(&npi_path, man)?;
            let x = NPINetwork::load(net_config(&meta), &entries)?;
            let control = ControlConfig::new(meta.taps.clone(), meta.w);
            ("controlled", npi_generate(&lm, &x, &control, &sampler, &ids, steps)?)
        }
        None => ("plain", lm.generate(&ids, steps, &sampler)?.tokens),
    };
    let text = vocab.detokenize(&tokens);

    let out_path = dir.join("generate.json");
    write_json(
        &out_path,
        &serde_json::json!({"mode": mode, "context": args.context, "text": text}),
    )?;
    man.output(&out_path)?;
    println!("{text}");
    Ok(())
}

fn mean_perplexity(lm: &TransformerLM<f32>, vocab: &Vocabulary, lines: &[String]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for line in lines {
        if vocab.tokenize(line).len() >= 2 {
            total += perplexity(lm, vocab, line)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no scorable lines for perplexity".into()));
    }
    Ok(total / n as f64)
}

fn cmd_evaluate(cfg: &Cfg, master: u64, dir: &Path, man: &mut Manifest) -> Result<()> {
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let npi_path = cfg.path("paths.npi")?;
    let (meta, entries) = load_net_meta(&npi_path, man)?;
    let x = NPINetwork::load(net_config(&meta), &entries)?;
    let control = ControlConfig::new(meta.taps.clone(), meta.w);

    let target = cfg.str_or("eval.target", "cat").to_string();
    let steps = cfg.usize_or("eval.steps", 12)?;
    let avoid = match cfg.str_or("eval.mode", "induce") {
        "induce" => false,
        "avoid" => true,
        other => return Err(Error::Config(format!("unknown eval.mode `{other}`"))),
    };
    let sampler = sampler_config(cfg, master)?;
    let mut contexts = context_list(cfg, master, cfg.usize_or("eval.n_contexts", 50)?, man)?;

    let table = match cfg.opt_path("paths.embeddings") {
        Some(p) => {
            man.input(&p)?;
            EmbeddingTable::load(&p)?
        }
        None => {
            let lines = corpus_lines(cfg, master, dir, man)?;
            let table = EmbeddingTable::train(&lines, cfg.usize_or("eval.embed_dim", 32)?)?;
            let p = dir.join("embeddings.json");
            table.save(&p)?;
            man.output(&p)?;
            table
        }
    };

    let reference = corpus::generate_corpus(&CorpusConfig {
        n_sentences: 500,
        furry_rate: 0.125,
        cat_rate: 0.02,
        seed: seed::derive(master, "length-ref"),
    })?;
    let threshold = eval::fit_length_threshold(&reference)?;

    let metric = TargetMetric::word_presence(&target);
    let mut original = Vec::new();
    let mut controlled = Vec::new();
    let mut dropped = 0usize;
    for ctx in contexts.drain(..) {
        let ids = vocab.tokenize(&ctx);
        let plain = vocab.detokenize(&lm.generate(&ids, steps, &sampler)?.tokens);
        // Avoidance contexts must provoke the target from the unmodified LM;
        // anything else is dropped and counted.
        if avoid && metric.label(&plain) == 0 {
            dropped += 1;
            continue;
        }
        let steered = vocab.detokenize(&npi_generate(&lm, &x, &control, &sampler, &ids, steps)?);
        original.push(plain);
        controlled.push(steered);
    }
    if original.is_empty() {
        return Err(Error::Data("no usable evaluation contexts".into()));
    }

    let model_id = cfg.str_or("eval.model_id", "npi");
    let report = eval::evaluate(
        model_id, &original, &controlled, &target, &table, &lm, &vocab, threshold,
    )?;
    let unmodified_rate = eval::target_in_output(&original, &[target.clone()])?;

    let json_path = dir.join("report.json");
    std::fs::write(&json_path, eval::report_to_json(&report)?)?;
    man.output(&json_path)?;
    let csv_path = dir.join("report.csv");
    std::fs::write(&csv_path, eval::report_to_csv(&report))?;
    man.output(&csv_path)?;
    man.stat("target_in_output", report.target_in_output);
    man.stat("unmodified_target_in_output", unmodified_rate);
    man.stat("embed_shifts", report.embed_shifts);
    man.stat("avg_shift", report.avg_shift);
    man.stat("perplexity_mean", report.perplexity_mean);
    man.stat("dropped_contexts", dropped);
    println!(
        "evaluated {} contexts: target_in_output {:.3} (unmodified {:.3}), embed_shifts {:.3}, perplexity {:.3}",
        report.n_contexts, report.target_in_output, unmodified_rate, report.embed_shifts, report.perplexity_mean
    );
    Ok(())
}

fn cmd_baseline(
    cfg: &Cfg,
    master: u64,
    dir: &Path,
    man: &mut Manifest,
    args: &BaselineArgs,
) -> Result<()> {
    let lm = load_lm(&cfg.path("paths.lm")?, man)?;
    let vocab_path = cfg.path("paths.vocab")?;
    man.input(&vocab_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;

    let target = match &args.target {
        Some(t) => t.clone(),
        None => cfg.str_or("eval.target", "cat").to_string(),
    };
    let mode = match args.mode.as_deref().unwrap_or(cfg.str_or("eval.mode", "induce")) {
        "induce" => BaselineMode::Induce,
        "avoid" => BaselineMode::Avoid,
        other => return Err(Error::Config(format!("unknown mode `{other}`"))),
    };
    let steps = cfg.usize_or("eval.steps", 12)?;
    let contexts = context_list(cfg, master, cfg.usize_or("eval.n_contexts", 50)?, man)?;

    let mut outputs = Vec::with_capacity(contexts.len());
    for ctx in &contexts {
        let ids = vocab.tokenize(ctx);
        let toks = eval::word_prob_baseline(&lm, &vocab, &ids, steps, &target, mode)?;
        outputs.push(vocab.detokenize(&toks));
    }
    let rate = eval::target_in_output(&outputs, &[target.clone()])?;

    let out_path = dir.join("baseline.json");
    write_json(
        &out_path,
        &serde_json::json!({
            "mode": match mode { BaselineMode::Induce => "induce", BaselineMode::Avoid => "avoid" },
            "target": target,
            "target_in_output": rate,
            "outputs": outputs,
        }),
    )?;
    man.output(&out_path)?;
    man.stat("target_in_output", rate);
    println!("baseline target_in_output {rate:.3} over {} contexts", contexts.len());
    Ok(())
}

fn cmd_gradcheck(dir: &Path, man: &mut Manifest) -> Result<()> {
    let mut results: Vec<(String, f64)> = Vec::new();

    // dense layer + sigmoid + binary cross entropy
    {
        let a = Tensor::param(vec![2, 3], (0..6).map(|i| 0.1 * i as f64 - 0.2).collect())?;
        let b = Tensor::param(vec![3, 2], (0..6).map(|i| 0.05 * i as f64 + 0.1).collect())?;
        let target = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
        let build = |tape: &mut Tape<f64>, a: &Tensor<f64>, b: &Tensor<f64>| -> Result<Tensor<f64>> {
            let p = tape.matmul(a, b)?;
            let s = tape.activation(&p, Activation::Sigmoid)?;
            tape.bce(&s, &target)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &a, &b)?;
        tape.backward(&loss)?;
        for (name, p) in [("matmul-sigmoid-bce/a", &a), ("matmul-sigmoid-bce/b", &b)] {
            let analytic = p.grad().expect("gradient");
            let numeric = gradcheck::finite_diff(p, 1e-6, || {
                let mut t = Tape::new();
                let l = build(&mut t, &a, &b).expect("rebuild");
                t.clear();
                l.value()
            });
            results.push((name.to_string(), gradcheck::max_rel_err(&analytic, &numeric)));
        }
    }

    // layer norm + gelu + mse
    {
        let x = Tensor::param(vec![2, 4], (0..8).map(|i| 0.3 * i as f64 - 1.0).collect())?;
        let g = Tensor::param(vec![4], vec![1.0, 0.9, 1.1, 1.0])?;
        let bias = Tensor::param(vec![4], vec![0.0, 0.1, -0.1, 0.2])?;
        let target = Tensor::new(vec![2, 4], vec![0.5; 8])?;
        let build = |tape: &mut Tape<f64>,
                     x: &Tensor<f64>,
                     g: &Tensor<f64>,
                     bias: &Tensor<f64>|
         -> Result<Tensor<f64>> {
            let n = tape.layer_norm(x, g, bias)?;
            let h = tape.activation(&n, Activation::Gelu)?;
            tape.mse(&h, &target)
        };
        let mut tape = Tape::new();
        let loss = build(&mut tape, &x, &g, &bias)?;
        tape.backward(&loss)?;
        for (name, p) in [
            ("layernorm-gelu-mse/x", &x),
            ("layernorm-gelu-mse/gain", &g),
            ("layernorm-gelu-mse/bias", &bias),
        ] {
            let analytic = p.grad().expect("gradient");
            let numeric = gradcheck::finite_diff(p, 1e-6, || {
                let mut t = Tape::new();
                let l = build(&mut t, &x, &g, &bias).expect("rebuild");
                t.clear();
                l.value()
            });
            results.push((name.to_string(), gradcheck::max_rel_err(&analytic, &numeric)));
        }
    }

    let mut worst = 0.0f64;
    for (name, err) in &results {
        println!("{name}: max rel err {err:.2e}");
        worst = worst.max(*err);
    }
    let out_path = dir.join("gradcheck.json");
    write_json(
        &out_path,
        &results
            .iter()
            .map(|(n, e)| serde_json::json!({"check": n, "max_rel_err": e}))
            .collect::<Vec<_>>(),
    )?;
    man.output(&out_path)?;
    man.stat("worst_rel_err", worst);
    if worst > 1e-3 {
        return Err(Error::Domain(format!(
            "gradient check failed: worst relative error {worst:.2e} > 1e-3"
        )));
    }
    println!("all gradient checks passed (worst {worst:.2e})");
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
