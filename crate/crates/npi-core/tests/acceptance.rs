//! Go/no-go acceptance suite. Each test covers one numbered criterion and
//! prints a single `criterion N (...): PASS` / `FAIL` line (visible with
//! `--nocapture`); failures also panic with the offending details.
//!
//! The heavyweight fixtures (pretrained toy LMs, the full induction run) are
//! built once and shared across tests through `OnceLock`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use npi_core::control::{
    controlled_generate, npic_forward, ActivationBundle, ActivationSequence, ControlConfig,
    PerturbationSequence,
};
use npi_core::corpus::{generate_corpus, CorpusConfig};
use npi_core::datagen::{
    build_dataset, deserialize, from_bytes, serialize, to_bytes, BuildConfig, DataExample,
    Dataset, TargetMetric,
};
use npi_core::eval::{
    embed_shift_metrics, evaluate, fit_length_threshold, report_to_json, target_in_output,
    word_prob_baseline, BaselineMode, EmbeddingTable,
};
use npi_core::lm::{
    fine_tune, perplexity, pretrain, LMConfig, PretrainConfig, SamplerConfig, TransformerLM,
    Vocabulary,
};
use npi_core::models::{NPINetwork, NetConfig, ProbeKind, ProbeNetwork};
use npi_core::tensor::gradcheck::{finite_diff, max_rel_err};
use npi_core::tensor::{Tape, Tensor};
use npi_core::training::{
    compute_npi_loss, pretrain_classifier, train_adversarial, LossBreakdown, TrainingConfig,
};
use npi_core::{checkpoint, seed};

// ------------------------------------------------------------------ helpers

/// One pass/fail line per criterion; failure carries the details.
fn verdict(n: usize, name: &str, failures: &[String]) {
    let ok = failures.is_empty();
    println!("criterion {n} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} ({name}):\n{}", failures.join("\n"));
}

fn check(failures: &mut Vec<String>, ok: bool, detail: String) {
    if !ok {
        failures.push(detail);
    }
}

struct Fixture {
    sentences: Vec<String>,
    lines: Vec<String>,
    vocab: Vocabulary,
    lm: TransformerLM<f32>,
}

/// Thread-shareable form of a fixture: the LM travels as checkpoint bytes
/// because tensors are not `Sync`.
struct FixtureData {
    sentences: Vec<String>,
    lines: Vec<String>,
    vocab: Vocabulary,
    lm_bytes: Vec<u8>,
}

fn materialize(data: &FixtureData) -> Fixture {
    let params = checkpoint::from_bytes(&data.lm_bytes).unwrap();
    let cfg = LMConfig {
        n_blocks: 2,
        d_model: 32,
        n_heads: 2,
        c_max: 32,
        vocab_size: data.vocab.len(),
    };
    let mut lm = TransformerLM::from_named_params(cfg, &params).unwrap();
    lm.freeze();
    Fixture {
        sentences: data.sentences.clone(),
        lines: data.lines.clone(),
        vocab: data.vocab.clone(),
        lm,
    }
}

/// Pretrained frozen toy LM over the synthetic grammar. Pretraining runs on
/// 3-sentence lines so generation survives sentence boundaries.
fn build_fixture(furry_rate: f64, cat_rate: f64) -> FixtureData {
    let cfg = CorpusConfig {
        n_sentences: 1200,
        furry_rate,
        cat_rate,
        seed: 101,
    };
    let sentences = generate_corpus(&cfg).unwrap();
    let lines: Vec<String> = sentences.chunks(3).map(|c| c.join(" ")).collect();
    let vocab = Vocabulary::from_corpus(&lines.join("\n"));
    let lm_cfg = LMConfig {
        n_blocks: 2,
        d_model: 32,
        n_heads: 2,
        c_max: 32,
        vocab_size: vocab.len(),
    };
    let mut lm = TransformerLM::new(lm_cfg, 5).unwrap();
    pretrain(
        &mut lm,
        &vocab,
        &lines,
        &PretrainConfig {
            steps: 4000,
            lr: 1e-3,
            seed: 5,
        },
    )
    .unwrap();
    lm.freeze();
    let lm_bytes = checkpoint::to_bytes(&lm.named_params()).unwrap();
    FixtureData {
        sentences,
        lines,
        vocab,
        lm_bytes,
    }
}

/// LM whose target word is rare (unconditioned rate ~2%); induction setting.
fn induction_fixture() -> Fixture {
    static F: OnceLock<FixtureData> = OnceLock::new();
    materialize(F.get_or_init(|| build_fixture(0.25, 0.02)))
}

/// LM whose target word is common; avoidance setting.
fn avoidance_fixture() -> Fixture {
    static F: OnceLock<FixtureData> = OnceLock::new();
    materialize(F.get_or_init(|| build_fixture(0.05, 0.30)))
}

/// Contexts of the form "<random corpus sentence> the <adj> ": the decision
/// point is fixed while the preceding activations vary.
fn prefixed_contexts(sentences: &[String], n: usize, trigger: bool, s: u64) -> Vec<String> {
    let mut rng = seed::rng(s, "acceptance-ctx");
    let adjs = ["big", "old", "red", "tiny", "warm", "slow", "wet"];
    (0..n)
        .map(|_| {
            let sent = &sentences[rng.gen_range(0..sentences.len())];
            let adj = if trigger {
                "furry"
            } else {
                adjs[rng.gen_range(0..adjs.len())]
            };
            format!("{sent} the {adj} ")
        })
        .collect()
}

fn interleave(a: Vec<String>, b: Vec<String>) -> Vec<String> {
    a.into_iter()
        .zip(b)
        .flat_map(|(x, y)| [x, y])
        .collect()
}

/// Generate `steps` tokens window-by-window through the steering network.
fn npi_generate(
    lm: &TransformerLM<f32>,
    x: &NPINetwork<f32>,
    control: &ControlConfig,
    sampler: &SamplerConfig,
    context: &[usize],
    steps: usize,
) -> Vec<usize> {
    let c_max = lm.config().c_max;
    let mut ctx = context.to_vec();
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let run = controlled_generate(lm, &ctx, control, sampler, |t, s| x.forward(t, s)).unwrap();
        for tk in run.tokens {
            if out.len() >= steps {
                break;
            }
            out.push(tk);
            ctx.push(tk);
        }
        if ctx.len() > c_max {
            let cut = ctx.len() - c_max;
            ctx.drain(..cut);
        }
    }
    out
}

fn mean_ppl(lm: &TransformerLM<f32>, vocab: &Vocabulary, texts: &[String]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in texts {
        if vocab.tokenize(t).len() >= 2 {
            total += perplexity(lm, vocab, t).unwrap();
            n += 1;
        }
    }
    total / n as f64
}

fn generate_texts(
    lm: &TransformerLM<f32>,
    vocab: &Vocabulary,
    ctxs: &[(String, SamplerConfig)],
    steps: usize,
) -> Vec<String> {
    ctxs.iter()
        .map(|(c, sc)| {
            let ids = vocab.tokenize(c);
            vocab.detokenize(&lm.generate(&ids, steps, sc).unwrap().tokens)
        })
        .collect()
}

fn controlled_texts(
    lm: &TransformerLM<f32>,
    vocab: &Vocabulary,
    x: &NPINetwork<f32>,
    control: &ControlConfig,
    ctxs: &[(String, SamplerConfig)],
    steps: usize,
) -> Vec<String> {
    ctxs.iter()
        .map(|(c, sc)| {
            let ids = vocab.tokenize(c);
            vocab.detokenize(&npi_generate(lm, x, control, sc, &ids, steps))
        })
        .collect()
}

// ------------------------------------------------------- criterion 1: grads

/// Worst relative error between backward gradients and central finite
/// differences over every parameter of a rebuilt graph.
fn graph_worst_err(params: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>) -> Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape);
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap()).collect();
    tape.clear();
    for p in params {
        p.clear_grad();
    }
    let mut worst = 0.0f64;
    for (p, a) in params.iter().zip(&analytic) {
        let fd = finite_diff(p, 1e-6, || {
            let mut t = Tape::new();
            let l = build(&mut t);
            let v = l.value();
            t.clear();
            v
        });
        worst = worst.max(max_rel_err(a, &fd));
    }
    worst
}

#[test]
fn criterion_1_gradient_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut rng = seed::rng(11, "gradcheck");
    let mut rand_param = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::param(shape, data).unwrap()
    };

    // op battery, graph 1: matmul / add_bias / sigmoid / mul / scale / mse
    let a = rand_param(vec![3, 4]);
    let b = rand_param(vec![4, 3]);
    let bias = rand_param(vec![3]);
    let target = Tensor::new(vec![3, 3], vec![0.3; 9]).unwrap();
    let g1 = {
        let (a, b, bias, target) = (a.clone(), b.clone(), bias.clone(), target.clone());
        move |t: &mut Tape<f64>| {
            let m = t.matmul(&a, &b).unwrap();
            let mb = t.add_bias(&m, &bias).unwrap();
            let s = t.sigmoid(&mb).unwrap();
            let u = t.mul(&s, &s).unwrap();
            let sc = t.scale(&u, 0.5).unwrap();
            t.mse(&sc, &target).unwrap()
        }
    };
    let e1 = graph_worst_err(&[a, b, bias], &g1);
    check(&mut failures, e1 <= 1e-3, format!("graph 1 rel err {e1:.2e} > 1e-3"));

    // graph 2: layer_norm / gelu / tanh / add / relu / softmax / bce
    let x2 = rand_param(vec![4, 6]);
    let gain = rand_param(vec![6]);
    let bv = rand_param(vec![6]);
    let bt = Tensor::new(vec![4, 6], vec![0.4; 24]).unwrap();
    let g2 = {
        let (x2, gain, bv, bt) = (x2.clone(), gain.clone(), bv.clone(), bt.clone());
        move |t: &mut Tape<f64>| {
            let ln = t.layer_norm(&x2, &gain, &bv).unwrap();
            let ge = t.gelu(&ln).unwrap();
            let th = t.tanh_act(&ge).unwrap();
            let ad = t.add(&ge, &th).unwrap();
            let re = t.relu(&ad).unwrap();
            let sm = t.softmax_rows(&re).unwrap();
            t.bce(&sm, &bt).unwrap()
        }
    };
    let e2 = graph_worst_err(&[x2, gain, bv], &g2);
    check(&mut failures, e2 <= 1e-3, format!("graph 2 rel err {e2:.2e} > 1e-3"));

    // graph 3: gather_rows / matmul / cross_entropy
    let emb = rand_param(vec![5, 4]);
    let w = rand_param(vec![4, 7]);
    let g3 = {
        let (emb, w) = (emb.clone(), w.clone());
        move |t: &mut Tape<f64>| {
            let rows = t.gather_rows(&emb, &[1, 3, 3, 0]).unwrap();
            let logits = t.matmul(&rows, &w).unwrap();
            t.cross_entropy(&logits, &[2, 0, 6, 3]).unwrap()
        }
    };
    let e3 = graph_worst_err(&[emb, w], &g3);
    check(&mut failures, e3 <= 1e-3, format!("graph 3 rel err {e3:.2e} > 1e-3"));

    // graph 4: slicing / concat / transpose / reshape / sum_all / mean_all
    let p4 = rand_param(vec![4, 6]);
    let g4 = {
        let p4 = p4.clone();
        move |t: &mut Tape<f64>| {
            let s1 = t.slice_rows(&p4, 0, 2).unwrap();
            let s2 = t.slice_rows(&p4, 2, 2).unwrap();
            let cr = t.concat_rows(&[s2, s1]).unwrap();
            let c1 = t.slice_cols(&cr, 0, 3).unwrap();
            let c2 = t.slice_cols(&cr, 3, 3).unwrap();
            let cc = t.concat_cols(&[c2, c1]).unwrap();
            let tr = t.transpose(&cc).unwrap();
            let rs = t.reshape(&tr, vec![3, 8]).unwrap();
            let th = t.tanh_act(&rs).unwrap();
            let m = t.mean_all(&th).unwrap();
            let sg = t.sigmoid(&rs).unwrap();
            let sa = t.sum_all(&sg).unwrap();
            let ss = t.scale(&sa, 0.01).unwrap();
            t.add(&m, &ss).unwrap()
        }
    };
    let e4 = graph_worst_err(&[p4], &g4);
    check(&mut failures, e4 <= 1e-3, format!("graph 4 rel err {e4:.2e} > 1e-3"));

    // end-to-end: full composite loss through a w=3 controlled rollout of a
    // 2-block d_model=16 model, in f64
    let vocab = Vocabulary::from_corpus("the big dog sat . the old cat ran .");
    let lm_cfg = LMConfig {
        n_blocks: 2,
        d_model: 16,
        n_heads: 2,
        c_max: 8,
        vocab_size: vocab.len(),
    };
    let lm = TransformerLM::<f64>::new(lm_cfg, 9).unwrap();
    let control = ControlConfig::new(vec![1, 2], 3);
    let net = NetConfig {
        w: 3,
        m: 2,
        c_max: 8,
        d_model: 16,
        hidden: vec![8],
    };
    let x = NPINetwork::<f64>::new(net.clone(), 1).unwrap();
    let y = ProbeNetwork::<f64>::new(net.clone(), ProbeKind::Classifier, 2).unwrap();
    let z = ProbeNetwork::<f64>::new(net.clone(), ProbeKind::Discriminator, 3).unwrap();
    let tc = TrainingConfig::default();
    let ctx = vocab.tokenize("the big ");
    let greedy = SamplerConfig::greedy();
    let e2e = |t: &mut Tape<f64>| -> Tensor<f64> {
        let run = npi_core::control::controlled_generate_with(t, &lm, &ctx, &control, &greedy, |tp, s| {
            x.forward(tp, s)
        })
        .unwrap();
        let (l, _) = compute_npi_loss(t, &run.s, &run.s_prime, &y, &z, &tc).unwrap();
        l
    };
    let mut tape = Tape::new();
    let loss = e2e(&mut tape);
    tape.backward(&loss).unwrap();
    // FD over small parameter tensors of each network in the loss path
    let small = |params: Vec<Tensor<f64>>| -> Vec<Tensor<f64>> {
        params.into_iter().filter(|p| p.numel() <= 16).collect()
    };
    let probes: Vec<Tensor<f64>> = small(x.params())
        .into_iter()
        .chain(small(y.params()))
        .chain(small(z.params()))
        .collect();
    check(&mut failures, !probes.is_empty(), "no small parameters to probe".into());
    let analytic: Vec<Vec<f64>> = probes.iter().map(|p| p.grad().unwrap_or_default()).collect();
    tape.clear();
    let mut worst = 0.0f64;
    for (p, a) in probes.iter().zip(&analytic) {
        let fd = finite_diff(p, 1e-5, || {
            let mut t = Tape::new();
            let l = e2e(&mut t);
            let v = l.value();
            t.clear();
            v
        });
        worst = worst.max(max_rel_err(a, &fd));
    }
    check(
        &mut failures,
        worst <= 1e-2,
        format!("end-to-end rel err {worst:.2e} > 1e-2"),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 120.0, format!("runtime {secs:.0}s >= 120s"));
    verdict(1, "gradient suite", &failures);
}

// ---------------------------------------------------- criterion 2: identity

#[test]
fn criterion_2_identity_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let lm_cfg = LMConfig {
        n_blocks: 2,
        d_model: 16,
        n_heads: 2,
        c_max: 12,
        vocab_size: 30,
    };
    let lm = TransformerLM::<f32>::new(lm_cfg, 77).unwrap();
    let control = ControlConfig::new(vec![1, 2], 4);
    let mut rng = seed::rng(2, "identity-ctx");

    // zero-perturbation controlled generation == plain generation, with a
    // stochastic sampler so the RNG-restart contract is exercised too
    let mut mismatches = 0usize;
    for i in 0..1000u64 {
        let len = rng.gen_range(1..=12);
        let ctx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let sampler = SamplerConfig {
            top_k: 3,
            top_p: None,
            seed: 10_000 + i,
        };
        let plain = lm.generate(&ctx, control.w, &sampler).unwrap();
        let run = controlled_generate(&lm, &ctx, &control, &sampler, |_, _| {
            PerturbationSequence::zeros(&control, 12, 16)
        })
        .unwrap();
        if run.tokens != plain.tokens || run.base_tokens != plain.tokens {
            mismatches += 1;
        }
    }
    check(
        &mut failures,
        mismatches == 0,
        format!("{mismatches} of 1000 zero-perturbation runs diverged"),
    );

    // locality: perturbing at tap 2 leaves block 1 bit-identical
    let local = ControlConfig::new(vec![2], 1);
    let mut local_bad = 0usize;
    for _ in 0..20 {
        let len = rng.gen_range(2..=12);
        let ctx: Vec<usize> = (0..len).map(|_| rng.gen_range(0..30)).collect();
        let d_data: Vec<f32> = (0..12 * 16).map(|_| rng.gen::<f32>()).collect();
        let d = Tensor::new(vec![12, 16], d_data).unwrap();
        let mut tape = Tape::new();
        let plain = lm.forward(&mut tape, &ctx, &[]).unwrap();
        let pert = npic_forward(&mut tape, &lm, &ctx, &local, Some(&[d])).unwrap();
        let same_below = plain.hidden[0].to_vec() == pert.hidden[0].to_vec();
        let tapped_changed = plain.hidden[1].to_vec() != pert.hidden[1].to_vec();
        tape.clear();
        if !same_below || !tapped_changed {
            local_bad += 1;
        }
    }
    check(
        &mut failures,
        local_bad == 0,
        format!("{local_bad} of 20 locality probes failed"),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 120.0, format!("runtime {secs:.0}s >= 120s"));
    verdict(2, "zero-perturbation identity and locality", &failures);
}

// ----------------------------------------------------- criterion 3: datagen

#[test]
fn criterion_3_datagen_suite() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let fix = induction_fixture();
    let control = ControlConfig::new(vec![1, 2], 6);
    let metric = TargetMetric::word_presence("cat");
    let sampler = SamplerConfig {
        top_k: 1,
        top_p: None,
        seed: 100,
    };
    let ctxs = interleave(
        prefixed_contexts(&fix.sentences, 3000, true, 61),
        prefixed_contexts(&fix.sentences, 3000, false, 62),
    );
    let build = BuildConfig {
        n_target: 1000,
        balance_tolerance: 0.05,
        max_iterations: 12,
        injection: None,
        seed: 63,
    };
    let ds = build_dataset(&fix.lm, &fix.vocab, &ctxs, &metric, &control, &sampler, &build)
        .unwrap();
    check(
        &mut failures,
        ds.examples.len() == 1000 && ds.complete,
        format!("dataset has {} examples (complete={})", ds.examples.len(), ds.complete),
    );
    let (n0, n1) = ds.class_counts();
    let frac = n1 as f64 / ds.examples.len() as f64;
    check(
        &mut failures,
        (0.45..=0.55).contains(&frac),
        format!("positive fraction {frac:.3} outside [0.45, 0.55] ({n0}/{n1})"),
    );

    // every label re-verifies against deterministic regeneration of its window
    let mut bad_labels = 0usize;
    for ex in &ds.examples {
        let regen = fix.lm.generate(&ex.t_in, control.w, &sampler).unwrap();
        if metric.label(&fix.vocab.detokenize(&regen.tokens)) != ex.label {
            bad_labels += 1;
        }
    }
    check(
        &mut failures,
        bad_labels == 0,
        format!("{bad_labels} of 1000 labels failed re-verification"),
    );

    // bit-exact round trip, in memory and through a file
    let bytes = to_bytes(&ds).unwrap();
    let back = from_bytes(&bytes).unwrap();
    check(
        &mut failures,
        to_bytes(&back).unwrap() == bytes,
        "in-memory round trip is not bit-exact".into(),
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.npiq");
    serialize(&ds, &path).unwrap();
    let file_back = deserialize(&path).unwrap();
    check(
        &mut failures,
        to_bytes(&file_back).unwrap() == bytes,
        "file round trip is not bit-exact".into(),
    );

    // same-seed rebuild is byte-identical
    let again = build_dataset(&fix.lm, &fix.vocab, &ctxs, &metric, &control, &sampler, &build)
        .unwrap();
    check(
        &mut failures,
        to_bytes(&again).unwrap() == bytes,
        "same-seed rebuild differs".into(),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 600.0, format!("runtime {secs:.0}s >= 600s"));
    verdict(3, "dataset balance, labels, and round trip", &failures);
}

// --------------------------------------------- criterion 4: classifier gate

fn planted_examples(n: usize, shuffle_labels: bool) -> Vec<DataExample> {
    let cfg = NetConfig {
        w: 2,
        m: 1,
        c_max: 4,
        d_model: 6,
        hidden: vec![16],
    };
    let mut rng = seed::rng(2024, "planted");
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let mut examples = Vec::with_capacity(n);
    for &label in &labels {
        let passes = (0..cfg.w)
            .map(|p| {
                let mut data: Vec<f32> = (0..cfg.block_dim())
                    .map(|_| rng.gen::<f32>() * 2.0 - 1.0)
                    .collect();
                if p == 0 {
                    // planted signal: coordinate 0 carries the label sign
                    data[0] = if label == 1 {
                        2.0 + rng.gen::<f32>()
                    } else {
                        -2.0 - rng.gen::<f32>()
                    };
                }
                ActivationBundle {
                    taps: vec![Tensor::new(vec![cfg.c_max, cfg.d_model], data).unwrap()],
                }
            })
            .collect();
        examples.push(DataExample {
            s: ActivationSequence { passes },
            label,
            t_in: vec![0],
        });
    }
    if shuffle_labels {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        for (ex, &l) in examples.iter_mut().zip(&labels) {
            ex.label = l;
        }
    }
    examples
}

fn planted_dataset(examples: Vec<DataExample>) -> Dataset {
    Dataset {
        metric: TargetMetric::word_presence("cat"),
        control: ControlConfig::new(vec![1], 2),
        c_max: 4,
        d_model: 6,
        lm_digest: [0; 32],
        seed: 0,
        examples,
        complete: true,
    }
}

#[test]
fn criterion_4_classifier_gate() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let net = NetConfig {
        w: 2,
        m: 1,
        c_max: 4,
        d_model: 6,
        hidden: vec![16],
    };
    let tc = TrainingConfig {
        lr_y: 3e-3,
        batch_size: 16,
        y_epochs: 10,
        y_holdout: 0.4,
        y_gate: 0.0,
        seed: 15,
        ..TrainingConfig::default()
    };

    let ds = planted_dataset(planted_examples(2000, false));
    let y = ProbeNetwork::new(net.clone(), ProbeKind::Classifier, 71).unwrap();
    let acc = pretrain_classifier(&y, &ds, &tc).unwrap();
    check(
        &mut failures,
        acc >= 0.95,
        format!("planted-signal held-out accuracy {acc:.3} < 0.95"),
    );

    let shuffled = planted_dataset(planted_examples(2000, true));
    let y2 = ProbeNetwork::new(net, ProbeKind::Classifier, 72).unwrap();
    let acc2 = pretrain_classifier(&y2, &shuffled, &tc).unwrap();
    check(
        &mut failures,
        (acc2 - 0.5).abs() <= 0.05,
        format!("shuffled-label held-out accuracy {acc2:.3} outside 0.50 +- 0.05"),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 300.0, format!("runtime {secs:.0}s >= 300s"));
    verdict(4, "classifier generalization gate", &failures);
}

// ------------------------------------------- criteria 5 and 9: induction run

struct RunArtifacts {
    log_json: String,
    report_json: String,
    unmod_rate: f64,
    rate: f64,
    shifts: f64,
    ppl_ratio: f64,
    selected: String,
}

/// The full induction pipeline: dataset, classifier gate, adversarial
/// training with per-epoch checkpoints, validation-based checkpoint
/// selection, and held-out evaluation. Fully seeded.
fn induction_run() -> RunArtifacts {
    let fix = induction_fixture();
    let control = ControlConfig::new(vec![1, 2], 6);
    let greedy = SamplerConfig {
        top_k: 1,
        top_p: None,
        seed: 321,
    };
    let metric = TargetMetric::word_presence("cat");

    let harvest_ctxs = interleave(
        prefixed_contexts(&fix.sentences, 400, true, 31),
        prefixed_contexts(&fix.sentences, 400, false, 32),
    );
    let build = BuildConfig {
        n_target: 200,
        balance_tolerance: 0.05,
        max_iterations: 12,
        injection: None,
        seed: 41,
    };
    let train_sampler = SamplerConfig {
        top_k: 1,
        top_p: None,
        seed: 123,
    };
    let ds = build_dataset(
        &fix.lm,
        &fix.vocab,
        &harvest_ctxs,
        &metric,
        &control,
        &train_sampler,
        &build,
    )
    .unwrap();

    let net = NetConfig {
        w: 6,
        m: 2,
        c_max: 32,
        d_model: 32,
        hidden: vec![64],
    };
    let tc = TrainingConfig {
        alpha: 4.0,
        beta: 1.0,
        gamma: 0.25,
        l_target: 1,
        lr_x: 3e-3,
        lr_y: 1e-3,
        lr_z: 1e-3,
        batch_size: 8,
        epochs: 15,
        y_refresh: true,
        y_refresh_every: 2,
        y_gate: 0.85,
        y_holdout: 0.1,
        y_epochs: 30,
        checkpoint_every: 0,
        seed: 91,
    };
    let y = ProbeNetwork::new(net.clone(), ProbeKind::Classifier, 71).unwrap();
    pretrain_classifier(&y, &ds, &tc).unwrap();
    let x = NPINetwork::new(net.clone(), 81).unwrap();
    let z = ProbeNetwork::new(net.clone(), ProbeKind::Discriminator, 82).unwrap();
    let ckpt = tempfile::tempdir().unwrap();
    let log = train_adversarial(
        &x,
        &y,
        &z,
        &ds,
        &fix.lm,
        &fix.vocab,
        &train_sampler,
        &tc,
        Some(ckpt.path()),
    )
    .unwrap();

    let table = EmbeddingTable::train(&fix.lines, 32).unwrap();

    // checkpoint selection on a validation context set disjoint from eval
    let val_ctxs: Vec<(String, SamplerConfig)> = prefixed_contexts(&fix.sentences, 60, false, 555)
        .into_iter()
        .map(|c| (c, greedy))
        .collect();
    let val_orig = generate_texts(&fix.lm, &fix.vocab, &val_ctxs, 12);
    let val_ppl_o = mean_ppl(&fix.lm, &fix.vocab, &val_orig);
    let mut scored: Vec<(String, f64, f64, f64)> = Vec::new();
    for epoch in 0..tc.epochs {
        let name = format!("npi-epoch{epoch}.npiw");
        let entries = checkpoint::load(&ckpt.path().join(&name)).unwrap();
        let xe = NPINetwork::load(net.clone(), &entries).unwrap();
        let texts = controlled_texts(&fix.lm, &fix.vocab, &xe, &control, &val_ctxs, 12);
        let rate = target_in_output(&texts, &["cat".into()]).unwrap();
        let (shifts, _) = embed_shift_metrics(&val_orig, &texts, "cat", &table).unwrap();
        let ppl = mean_ppl(&fix.lm, &fix.vocab, &texts) / val_ppl_o;
        println!("  {name}: val rate {rate:.3}, val shifts {shifts:.3}, val ppl ratio {ppl:.2}");
        scored.push((name, rate, shifts, ppl));
    }
    // prefer fluent checkpoints, then maximize induction strength
    let selected = scored
        .iter()
        .filter(|(_, _, _, ppl)| *ppl <= 1.9)
        .max_by(|a, b| (a.1 + a.2).partial_cmp(&(b.1 + b.2)).unwrap())
        .or_else(|| {
            scored
                .iter()
                .max_by(|a, b| {
                    let sa = a.1 + a.2 - (a.3 - 1.9).max(0.0);
                    let sb = b.1 + b.2 - (b.3 - 1.9).max(0.0);
                    sa.partial_cmp(&sb).unwrap()
                })
        })
        .unwrap()
        .0
        .clone();
    let entries = checkpoint::load(&ckpt.path().join(&selected)).unwrap();
    let best = NPINetwork::load(net, &entries).unwrap();

    // held-out evaluation
    let eval_ctxs: Vec<(String, SamplerConfig)> = prefixed_contexts(&fix.sentences, 200, false, 777)
        .into_iter()
        .map(|c| (c, greedy))
        .collect();
    let originals = generate_texts(&fix.lm, &fix.vocab, &eval_ctxs, 12);
    let controlled = controlled_texts(&fix.lm, &fix.vocab, &best, &control, &eval_ctxs, 12);
    let unmod_rate = target_in_output(&originals, &["cat".into()]).unwrap();
    let threshold = fit_length_threshold(&fix.lines).unwrap();
    let report = evaluate(
        "induction-npi",
        &originals,
        &controlled,
        "cat",
        &table,
        &fix.lm,
        &fix.vocab,
        threshold,
    )
    .unwrap();
    let ppl_ratio = report.perplexity_mean / mean_ppl(&fix.lm, &fix.vocab, &originals);

    RunArtifacts {
        log_json: serde_json::to_string(&log).unwrap(),
        report_json: report_to_json(&report).unwrap(),
        unmod_rate,
        rate: report.target_in_output,
        shifts: report.embed_shifts,
        ppl_ratio,
        selected,
    }
}

fn induction_run_cached() -> &'static RunArtifacts {
    static R: OnceLock<RunArtifacts> = OnceLock::new();
    R.get_or_init(induction_run)
}

#[test]
fn criterion_5_induction_replication() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let r = induction_run_cached();
    check(
        &mut failures,
        r.unmod_rate <= 0.02,
        format!("unmodified target rate {:.3} > 0.02", r.unmod_rate),
    );
    let floor = (5.0 * r.unmod_rate).max(0.20);
    check(
        &mut failures,
        r.rate >= floor,
        format!("steered target rate {:.3} < {:.3} ({})", r.rate, floor, r.selected),
    );
    check(
        &mut failures,
        r.shifts > 0.60,
        format!("embed shift fraction {:.3} <= 0.60", r.shifts),
    );
    check(
        &mut failures,
        r.ppl_ratio <= 2.0,
        format!("perplexity ratio {:.2} > 2.0", r.ppl_ratio),
    );
    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 2700.0, format!("runtime {secs:.0}s >= 2700s"));
    verdict(5, "induction replication", &failures);
}

#[test]
fn criterion_9_determinism() {
    let mut failures = Vec::new();
    let first = induction_run_cached();
    let second = induction_run();
    check(
        &mut failures,
        first.log_json == second.log_json,
        "training logs differ between same-seed runs".into(),
    );
    check(
        &mut failures,
        first.report_json == second.report_json,
        "evaluation reports differ between same-seed runs".into(),
    );
    verdict(9, "same-seed determinism", &failures);
}

// --------------------------------------------------- criterion 6: avoidance

#[test]
fn criterion_6_avoidance_replication() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let fix = avoidance_fixture();
    let control = ControlConfig::new(vec![1, 2], 6);
    let metric = TargetMetric::word_presence("cat");
    let base = SamplerConfig {
        top_k: 3,
        top_p: None,
        seed: 321,
    };

    // pre-screen: contexts where the unmodified model emits the target; each
    // context keeps its own sampler stream
    let prescreen = |pool: Vec<String>, seed0: u64, keep: usize| -> Vec<(String, SamplerConfig)> {
        pool.into_iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    c,
                    SamplerConfig {
                        seed: seed0 + i as u64,
                        ..base
                    },
                )
            })
            .filter(|(c, sc)| {
                let ids = fix.vocab.tokenize(c);
                let text = fix
                    .vocab
                    .detokenize(&fix.lm.generate(&ids, 12, sc).unwrap().tokens);
                metric.label(&text) == 1
            })
            .take(keep)
            .collect()
    };
    let eval_ctxs = prescreen(prefixed_contexts(&fix.sentences, 1000, false, 777), 5000, 200);
    let val_ctxs = prescreen(prefixed_contexts(&fix.sentences, 500, false, 555), 9000, 100);
    check(
        &mut failures,
        eval_ctxs.len() == 200 && val_ctxs.len() == 100,
        format!("prescreen kept {} eval / {} val contexts", eval_ctxs.len(), val_ctxs.len()),
    );
    let originals = generate_texts(&fix.lm, &fix.vocab, &eval_ctxs, 12);
    let unmod_rate = target_in_output(&originals, &["cat".into()]).unwrap();
    check(
        &mut failures,
        unmod_rate >= 0.80,
        format!("unmodified rate {unmod_rate:.3} < 0.80 after prescreen"),
    );

    let harvest_ctxs = interleave(
        prefixed_contexts(&fix.sentences, 400, true, 31),
        prefixed_contexts(&fix.sentences, 400, false, 32),
    );
    let build = BuildConfig {
        n_target: 200,
        balance_tolerance: 0.05,
        max_iterations: 12,
        injection: None,
        seed: 41,
    };
    let train_sampler = SamplerConfig {
        top_k: 3,
        top_p: None,
        seed: 123,
    };
    let ds = build_dataset(
        &fix.lm,
        &fix.vocab,
        &harvest_ctxs,
        &metric,
        &control,
        &train_sampler,
        &build,
    )
    .unwrap();

    let net = NetConfig {
        w: 6,
        m: 2,
        c_max: 32,
        d_model: 32,
        hidden: vec![64],
    };
    // the timid-to-aggressive transition happens within a handful of steps;
    // a strong fluency weight keeps the crossing region coherent and per-step
    // checkpoints sample it finely
    let tc = TrainingConfig {
        alpha: 2.0,
        beta: 1.0,
        gamma: 4.0,
        l_target: 0,
        lr_x: 5e-4,
        lr_y: 3e-3,
        lr_z: 1e-3,
        batch_size: 8,
        epochs: 1,
        y_refresh: true,
        y_refresh_every: 1,
        y_gate: 0.85,
        y_holdout: 0.1,
        y_epochs: 30,
        checkpoint_every: 1,
        seed: 91,
    };
    let y = ProbeNetwork::new(net.clone(), ProbeKind::Classifier, 71).unwrap();
    pretrain_classifier(&y, &ds, &tc).unwrap();
    let x = NPINetwork::new(net.clone(), 81).unwrap();
    let z = ProbeNetwork::new(net.clone(), ProbeKind::Discriminator, 82).unwrap();
    let ckpt = tempfile::tempdir().unwrap();
    let log = train_adversarial(
        &x,
        &y,
        &z,
        &ds,
        &fix.lm,
        &fix.vocab,
        &train_sampler,
        &tc,
        Some(ckpt.path()),
    )
    .unwrap();

    // validation selection over the step checkpoints: the most suppressive
    // checkpoint that stays fluent
    let val_orig = generate_texts(&fix.lm, &fix.vocab, &val_ctxs, 12);
    let val_ppl_o = mean_ppl(&fix.lm, &fix.vocab, &val_orig);
    let mut steps: Vec<usize> = (1..=log.len()).filter(|s| s % tc.checkpoint_every == 0).collect();
    steps.sort_unstable();
    let mut scored: Vec<(String, f64, f64)> = Vec::new();
    for s in steps {
        let name = format!("npi-step{s}.npiw");
        let entries = checkpoint::load(&ckpt.path().join(&name)).unwrap();
        let xe = NPINetwork::load(net.clone(), &entries).unwrap();
        let texts = controlled_texts(&fix.lm, &fix.vocab, &xe, &control, &val_ctxs, 12);
        let rate = target_in_output(&texts, &["cat".into()]).unwrap();
        let ppl = mean_ppl(&fix.lm, &fix.vocab, &texts) / val_ppl_o;
        println!("  {name}: val rate {rate:.3}, val ppl ratio {ppl:.2}");
        scored.push((name, rate, ppl));
    }
    let min_rate = |cands: Vec<&(String, f64, f64)>| -> Option<String> {
        cands
            .into_iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|c| c.0.clone())
    };
    let selected = min_rate(scored.iter().filter(|c| c.2 <= 2.0).collect())
        .or_else(|| {
            scored
                .iter()
                .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap())
                .map(|c| c.0.clone())
        })
        .unwrap();
    let entries = checkpoint::load(&ckpt.path().join(&selected)).unwrap();
    let best = NPINetwork::load(net, &entries).unwrap();

    let controlled = controlled_texts(&fix.lm, &fix.vocab, &best, &control, &eval_ctxs, 12);
    let rate = target_in_output(&controlled, &["cat".into()]).unwrap();
    let ppl_ratio =
        mean_ppl(&fix.lm, &fix.vocab, &controlled) / mean_ppl(&fix.lm, &fix.vocab, &originals);
    check(
        &mut failures,
        rate <= 0.5 * unmod_rate,
        format!(
            "steered rate {rate:.3} not a 50% relative reduction from {unmod_rate:.3} ({selected})"
        ),
    );
    check(
        &mut failures,
        ppl_ratio <= 2.0,
        format!("perplexity ratio {ppl_ratio:.2} > 2.0 ({selected})"),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 2700.0, format!("runtime {secs:.0}s >= 2700s"));
    verdict(6, "avoidance replication", &failures);
}

// --------------------------------------------------- criterion 7: baselines

#[test]
fn criterion_7_baseline_contracts() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let fix = induction_fixture();

    // word-prob avoidance: exactly zero target occurrences, even on trigger
    // contexts where the unmodified model would emit it
    let ctxs = prefixed_contexts(&fix.sentences, 100, true, 551);
    let mut outputs = Vec::with_capacity(ctxs.len());
    for c in &ctxs {
        let ids = fix.vocab.tokenize(c);
        let toks =
            word_prob_baseline(&fix.lm, &fix.vocab, &ids, 12, "cat", BaselineMode::Avoid).unwrap();
        outputs.push(fix.vocab.detokenize(&toks));
    }
    let rate = target_in_output(&outputs, &["cat".into()]).unwrap();
    check(
        &mut failures,
        rate == 0.0,
        format!("avoid baseline emitted the target in {rate:.3} of outputs"),
    );

    // fine-tuned copy: frozen weights untouched, target-corpus perplexity down
    let target_corpus = generate_corpus(&CorpusConfig {
        n_sentences: 300,
        furry_rate: 0.1,
        cat_rate: 0.8,
        seed: 909,
    })
    .unwrap();
    let target_lines: Vec<String> = target_corpus.chunks(3).map(|c| c.join(" ")).collect();
    let digest_before = fix.lm.weight_digest().unwrap();
    let (tuned, _) = fine_tune(
        &fix.lm,
        &fix.vocab,
        &target_lines,
        &PretrainConfig {
            steps: 400,
            lr: 1e-3,
            seed: 7,
        },
    )
    .unwrap();
    check(
        &mut failures,
        fix.lm.weight_digest().unwrap() == digest_before,
        "frozen LM digest changed during fine-tuning".into(),
    );
    let sample = &target_lines[..40.min(target_lines.len())];
    let ppl_frozen = mean_ppl(&fix.lm, &fix.vocab, sample);
    let ppl_tuned = mean_ppl(&tuned, &fix.vocab, sample);
    check(
        &mut failures,
        ppl_tuned < ppl_frozen,
        format!("fine-tuned perplexity {ppl_tuned:.2} not below frozen {ppl_frozen:.2}"),
    );

    let secs = t0.elapsed().as_secs_f64();
    check(&mut failures, secs < 600.0, format!("runtime {secs:.0}s >= 600s"));
    verdict(7, "baseline contracts", &failures);
}

// --------------------------------------------- criterion 8: loss bookkeeping

fn reconstruction_failures(log: &[LossBreakdown], tc: &TrainingConfig, tag: &str) -> Vec<String> {
    let mut failures = Vec::new();
    for r in log {
        let rebuilt = tc.gamma * r.e_x_fluency + tc.alpha * r.e_x_content + tc.beta * r.e_x_stability;
        if (rebuilt - r.e_x_total).abs() > 1e-5 {
            failures.push(format!(
                "{tag} step {}: total {:.8} vs rebuilt {:.8}",
                r.step, r.e_x_total, rebuilt
            ));
        }
        let nonneg = [r.e_x_total, r.e_x_fluency, r.e_x_content, r.e_x_stability, r.e_z, r.e_y];
        if nonneg.iter().any(|v| *v < 0.0) {
            failures.push(format!("{tag} step {}: negative loss component", r.step));
        }
    }
    failures
}

#[test]
fn criterion_8_loss_bookkeeping() {
    let mut failures = Vec::new();

    // small dedicated pipeline so both configurations train in seconds
    let corpus = generate_corpus(&CorpusConfig {
        n_sentences: 120,
        furry_rate: 0.25,
        cat_rate: 0.1,
        seed: 7,
    })
    .unwrap();
    let lines: Vec<String> = corpus.chunks(3).map(|c| c.join(" ")).collect();
    let vocab = Vocabulary::from_corpus(&lines.join("\n"));
    let mut lm = TransformerLM::new(
        LMConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            c_max: 16,
            vocab_size: vocab.len(),
        },
        3,
    )
    .unwrap();
    pretrain(&mut lm, &vocab, &lines, &PretrainConfig { steps: 2500, lr: 2e-3, seed: 3 }).unwrap();
    lm.freeze();

    let control = ControlConfig::new(vec![2], 4);
    let metric = TargetMetric::word_presence("cat");
    let sampler = SamplerConfig::greedy();
    let ctxs = interleave(
        prefixed_contexts(&corpus, 30, true, 1),
        prefixed_contexts(&corpus, 30, false, 2),
    );
    let ds = build_dataset(
        &lm,
        &vocab,
        &ctxs,
        &metric,
        &control,
        &sampler,
        &BuildConfig {
            n_target: 24,
            balance_tolerance: 0.3,
            max_iterations: 12,
            injection: None,
            seed: 9,
        },
    )
    .unwrap();
    check(&mut failures, ds.examples.len() >= 8, format!("only {} examples", ds.examples.len()));

    let net = NetConfig {
        w: 4,
        m: 1,
        c_max: 16,
        d_model: 16,
        hidden: vec![16],
    };
    let run = |tc: &TrainingConfig| -> Vec<LossBreakdown> {
        let x = NPINetwork::new(net.clone(), 21).unwrap();
        let y = ProbeNetwork::new(net.clone(), ProbeKind::Classifier, 22).unwrap();
        let z = ProbeNetwork::new(net.clone(), ProbeKind::Discriminator, 23).unwrap();
        train_adversarial(&x, &y, &z, &ds, &lm, &vocab, &sampler, tc, None).unwrap()
    };

    let standard = TrainingConfig {
        batch_size: 4,
        epochs: 2,
        seed: 31,
        ..TrainingConfig::default()
    };
    let log_a = run(&standard);
    failures.extend(reconstruction_failures(&log_a, &standard, "standard"));

    // stability-only: the optimum is the zero perturbation, so the mean
    // perturbation norm must not grow from epoch to epoch
    let stability_only = TrainingConfig {
        alpha: 0.0,
        gamma: 0.0,
        beta: 1.0,
        batch_size: 4,
        epochs: 4,
        seed: 32,
        ..TrainingConfig::default()
    };
    let log_b = run(&stability_only);
    failures.extend(reconstruction_failures(&log_b, &stability_only, "stability-only"));
    let mut epoch_means = Vec::new();
    for e in 0..stability_only.epochs {
        let vals: Vec<f64> = log_b
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.d_out_norm)
            .collect();
        epoch_means.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    for pair in epoch_means.windows(2) {
        check(
            &mut failures,
            pair[1] <= pair[0] + 1e-9,
            format!("mean perturbation norm grew: {:.6} -> {:.6}", pair[0], pair[1]),
        );
    }

    // the big induction log obeys the same bookkeeping
    let induction_tc = TrainingConfig {
        alpha: 4.0,
        beta: 1.0,
        gamma: 0.25,
        ..TrainingConfig::default()
    };
    let r = induction_run_cached();
    let big_log: Vec<LossBreakdown> = serde_json::from_str(&r.log_json).unwrap();
    failures.extend(reconstruction_failures(&big_log, &induction_tc, "induction"));

    verdict(8, "loss bookkeeping", &failures);
}
