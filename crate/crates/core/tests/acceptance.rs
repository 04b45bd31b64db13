//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Pass a substring to run only matching criteria, e.g.
//! `cargo test --test acceptance -- signal`.

mod common;

use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use vibrodiag::cli::format_diagnosis;
use vibrodiag::config::RunConfig;
use vibrodiag::corpus::{build_corpus, corpus_to_jsonl, parse_fields, LabelSet};
use vibrodiag::diagnose::{Diagnosis, Engine, ParseStatus};
use vibrodiag::evalkit::evaluate;
use vibrodiag::experiment::{gfc_examples, run_experiment, ExperimentOutcome, LoadedClip};
use vibrodiag::gateway::{self, AppState, AskResponse, DiagnoseResponse, HealthResponse};
use vibrodiag::net::{
    layer_param_counts, linear_shapes, log_softmax, scaled_dot_attention, trainable_param_count, Mat,
    MelFrontend, Model, ModelConfig,
};
use vibrodiag::optim::{
    batch_gradients, ce_loss, dpo_loss, grad_check, save_checkpoint, token_nll, write_checkpoint, Example, Stage,
};
use vibrodiag::sigproc::{
    decode_wav, dequantize_pcm16, encode_wav, normalize_peak, normalize_stat, prepare_signal, quantize_pcm16,
    read_wav, resample, write_wav, Normalization, Signal, WavClip, MODEL_RATE_HZ, PCM_FULL_SCALE,
};
use vibrodiag::synth::{synth_signal, FaultCondition, FaultType, ManifestRecord, Split};
use vibrodiag::textcodec::{build_prompt, AUDIO, VOCAB_SIZE};

const BIN: &str = env!("CARGO_BIN_EXE_vibrodiag");

/// Experiment outputs shared by the criteria that build on the end-to-end run.
#[derive(Default)]
struct Shared {
    run: Option<ExperimentOutcome>,
    workdir: Option<tempfile::TempDir>,
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Duration,
    run: fn(&mut Shared) -> Result<String>,
    /// Reported but never fails the suite.
    gating: bool,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: "1", name: "zero-init equivalence", limit: Duration::from_secs(5), run: zero_init, gating: true },
        Criterion { id: "2", name: "parameter reduction counts", limit: Duration::from_secs(1), run: param_counts, gating: true },
        Criterion { id: "3", name: "adapter gradient check", limit: Duration::from_secs(120), run: gradient_check, gating: true },
        Criterion { id: "4", name: "signal path exactness", limit: Duration::from_secs(30), run: signal_path, gating: true },
        Criterion { id: "5", name: "attention correctness", limit: Duration::from_secs(30), run: attention, gating: true },
        Criterion { id: "6", name: "loss functions", limit: Duration::from_secs(30), run: losses, gating: true },
        Criterion { id: "7", name: "corpus faithfulness", limit: Duration::from_secs(60), run: corpus, gating: true },
        Criterion { id: "8", name: "metrics vs brute force", limit: Duration::from_secs(5), run: metrics, gating: true },
        Criterion { id: "9", name: "end-to-end toy experiment", limit: Duration::from_secs(30 * 60), run: end_to_end, gating: true },
        Criterion { id: "10", name: "run determinism", limit: Duration::from_secs(30 * 60), run: determinism, gating: true },
        Criterion { id: "-", name: "ablation", limit: Duration::from_secs(30 * 60), run: ablation, gating: false },
        Criterion { id: "11", name: "CLI/API parity and error codes", limit: Duration::from_secs(120), run: parity, gating: true },
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        let label = format!("{} {}", c.id, c.name);
        if !filters.is_empty() && !filters.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (c.run)(&mut shared)));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(Ok(detail)) if elapsed <= c.limit => (true, detail),
            Ok(Ok(detail)) => (false, format!("{detail}; took {elapsed:.1?}, limit {:?}", c.limit)),
            Ok(Err(e)) => (false, format!("{e:#}")),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into()),
            ),
        };
        let verdict = match (c.gating, ok) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        if c.gating {
            ran += 1;
            if !ok {
                failed += 1;
            }
        }
        println!(
            "criterion {:>2} {verdict} {:<32} {:>8.2}s  {}",
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            detail
        );
        std::io::stdout().flush().ok();
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn clip_of(fault_type: FaultType, seed: u64) -> WavClip {
    common::fault_clip(fault_type, 1.0, seed)
}

fn loaded(fault_type: FaultType, seed: u64) -> LoadedClip {
    let severity_um = if fault_type == FaultType::Healthy { 0 } else { 250 };
    LoadedClip {
        record: ManifestRecord {
            path: format!("{fault_type}_{seed}.wav"),
            fault_type,
            severity_um,
            speed_rpm: 6000.0,
            load_n: 900.0,
            split: Split::Train,
        },
        clip: clip_of(fault_type, seed),
    }
}

// ---------------------------------------------------------------- 1

fn zero_init(_: &mut Shared) -> Result<String> {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(&cfg)?;
    let base = model.without_adapters();
    let frontend = MelFrontend::new(&cfg, MODEL_RATE_HZ);
    let mut worst = 0.0f64;
    for (i, t) in [FaultType::Healthy, FaultType::InnerRace, FaultType::Roller].into_iter().enumerate() {
        let mel = frontend.compute(&clip_of(t, i as u64))?;
        let za = model.encode_audio(&mel)?;
        let zb = base.encode_audio(&mel)?;
        let tokens = build_prompt("What is the bearing condition?", za.rows)?.with_target("outer race fault");
        let la = model.logits_all(&tokens, &za)?;
        let lb = base.logits_all(&tokens, &zb)?;
        for (x, y) in za.data.iter().chain(&la.data).zip(zb.data.iter().chain(&lb.data)) {
            let (x, y) = (f64::from(*x), f64::from(*y));
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    ensure!(worst <= 1e-6, "max relative deviation {worst:e} > 1e-6");
    Ok(format!("max relative deviation {worst:.1e} (limit 1e-6)"))
}

// ---------------------------------------------------------------- 2

fn param_counts(_: &mut Shared) -> Result<String> {
    let (t, f) = layer_param_counts(4096, 4096, 16);
    ensure!((t, f) == (131_072, 16_777_216), "d=k=4096 r=16 gave {t} vs {f}");
    ensure!((t as f64) < 0.01 * f as f64, "trainable share not below 1%");
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(&cfg)?;
    let r = cfg.lora_rank;
    let mut sum = 0;
    for ((name, d_in, d_out), lin) in linear_shapes(&cfg).iter().zip(model.linears()) {
        let ad = lin.lora.as_ref().ok_or_else(|| anyhow!("{name} has no adapter"))?;
        let n = ad.a.data.len() + ad.b.data.len();
        ensure!(n == r * (d_in + d_out), "{name}: {n} != r(d+k) = {}", r * (d_in + d_out));
        ensure!(lin.w0.data.len() == d_in * d_out, "{name}: base size");
        sum += n;
    }
    let (trainable, frozen) = trainable_param_count(&cfg);
    ensure!(trainable == sum && model.adapter_param_count() == sum, "toy total {trainable} vs {sum}");
    Ok(format!(
        "4096x4096 r16: 131072 vs 16777216 ({:.2}%); toy: {trainable} trainable, {frozen} frozen",
        100.0 * t as f64 / f as f64
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_check(_: &mut Shared) -> Result<String> {
    let cfg = ModelConfig::default();
    let mut model = Model::<f32>::new(&cfg)?;
    // non-zero B so the A gradients are non-trivial
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for lin in model.linears_mut() {
        if let Some(ad) = lin.lora.as_mut() {
            for v in ad.b.data.iter_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }
    let clips = [loaded(FaultType::InnerRace, 1), loaded(FaultType::Healthy, 2)];
    let refs: Vec<&LoadedClip> = clips.iter().collect();
    let frontend = MelFrontend::new(&cfg, MODEL_RATE_HZ);
    let mels = refs
        .iter()
        .map(|c| frontend.compute(&c.clip))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = gfc_examples(&model, &refs, mels, &LabelSet::toy4(), true)?;
    let report = grad_check(&model, &batch, 2, 5)?;
    let n = report.samples.len();
    ensure!(n >= 64, "only {n} coordinates sampled");
    let layers: std::collections::BTreeSet<&str> = report.samples.iter().map(|s| s.layer.as_str()).collect();
    ensure!(layers.len() == linear_shapes(&cfg).len(), "not every adapted layer was sampled");
    ensure!(
        report.max_rel_error < 1e-3,
        "max relative error {:e} >= 1e-3",
        report.max_rel_error
    );
    Ok(format!("{n} coordinates over {} layers, max rel error {:.2e} (limit 1e-3)", layers.len(), report.max_rel_error))
}

// ---------------------------------------------------------------- 4

fn peak_bin(x: &[f64], n: usize) -> usize {
    let mut buf: Vec<Complex<f64>> = x.iter().take(n).map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (0..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap()
}

fn signal_path(_: &mut Shared) -> Result<String> {
    // PCM16 round trip on a dense grid plus random points
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut xs: Vec<f64> = (0..=200_000).map(|i| -1.0 + i as f64 / 100_000.0).collect();
    xs.extend((0..100_000).map(|_| rng.random_range(-1.0..=1.0)));
    let sig = Signal::new(xs.clone(), 16_000)?;
    let back = dequantize_pcm16(&quantize_pcm16(&sig));
    let worst = xs.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1.0 / PCM_FULL_SCALE, "PCM error {worst:e} > 1/32767");

    // WAV bitwise round trip, in memory and through a file
    let dir = tempfile::tempdir()?;
    for seed in 0..20 {
        let clip = WavClip {
            pcm: (0..rng.random_range(0..5000)).map(|_| rng.random()).collect(),
            sample_rate_hz: [8_000, 16_000, 44_100, 51_200][seed % 4],
        };
        let bytes = encode_wav(&clip);
        ensure!(encode_wav(&decode_wav(&bytes)?) == bytes, "in-memory WAV round trip differs");
        let path = dir.path().join(format!("{seed}.wav"));
        write_wav(&clip, &path)?;
        let again = read_wav(&path)?;
        ensure!(again == clip, "file WAV round trip differs");
        ensure!(std::fs::read(&path)? == bytes, "file bytes differ from encoder output");
    }

    // resampled 1 kHz tone keeps its bin
    let expected = (1000.0 * 8192.0 / 16_000.0f64).round() as i64;
    for source in [8_000u32, 11_025, 12_000, 22_050, 32_000, 44_100, 48_000, 51_200] {
        let n = (f64::from(source) * 0.6) as usize;
        let tone: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / f64::from(source)).sin())
            .collect();
        let out = resample(&Signal::new(tone, source)?, i64::from(MODEL_RATE_HZ))?;
        let bin = peak_bin(&out.samples, 8192) as i64;
        ensure!((bin - expected).abs() <= 1, "{source} Hz source: peak bin {bin}, expected {expected}±1");
    }

    // normalizations
    for seed in 0..50u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powi(r.random_range(-3..4));
        let v: Vec<f64> = (0..r.random_range(2..4000)).map(|_| r.random_range(-scale..scale)).collect();
        let s = Signal::new(v, 16_000)?;
        let peak = normalize_peak(&s)?;
        ensure!(peak.samples.iter().fold(0.0f64, |m, x| m.max(x.abs())) == 1.0, "peak max != 1.0");
        let (alpha, beta) = (r.random_range(-2.0..2.0), r.random_range(0.05..3.0));
        let st = normalize_stat(&s, alpha, beta)?;
        let (mean, std) = st.mean_std();
        ensure!((mean - alpha).abs() <= 1e-6 * alpha.abs().max(1.0), "stat mean {mean} vs {alpha}");
        ensure!((std - beta).abs() <= 1e-4, "stat std {std} vs {beta}");
    }
    Ok(format!(
        "PCM max err {:.3e} <= {:.3e}; WAV bitwise; tone bin {expected}±1 from 8 rates; peak=1.0; stat moments within 1e-6/1e-4",
        worst,
        1.0 / PCM_FULL_SCALE
    ))
}

// ---------------------------------------------------------------- 5

fn naive_attention(q: &Mat<f64>, k: &Mat<f64>, v: &Mat<f64>, heads: usize, causal: bool) -> Mat<f64> {
    let dk = q.cols / heads;
    let dv = v.cols / heads;
    let mut out = Mat::zeros(q.rows, v.cols);
    for h in 0..heads {
        for i in 0..q.rows {
            let visible = if causal { i + 1 } else { k.rows };
            let s: Vec<f64> = (0..visible)
                .map(|j| (0..dk).map(|c| q.get(i, h * dk + c) * k.get(j, h * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dv {
                out.set(i, h * dv + c, (0..visible).map(|j| e[j] / z * v.get(j, h * dv + c)).sum());
            }
        }
    }
    out
}

fn attention(_: &mut Shared) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_oracle = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..300 {
        let heads = rng.random_range(1..5);
        let dk = rng.random_range(1..9);
        let dv = rng.random_range(1..9);
        let n = rng.random_range(1..12);
        let causal = rng.random_bool(0.5);
        let m = if causal { n } else { rng.random_range(1..12) };
        let mut mat = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-3.0..3.0));
        let (q, k, v) = (mat(n, heads * dk), mat(m, heads * dk), mat(m, heads * dv));
        let (ctx, probs) = scaled_dot_attention(&q, &k, &v, heads, causal);
        let want = naive_attention(&q, &k, &v, heads, causal);
        for (a, b) in ctx.data.iter().zip(&want.data) {
            worst_oracle = worst_oracle.max((a - b).abs());
        }
        let qf: Mat<f32> = q.cast();
        let (kf, vf): (Mat<f32>, Mat<f32>) = (k.cast(), v.cast());
        let (_, pf) = scaled_dot_attention(&qf, &kf, &vf, heads, causal);
        for p in probs.iter().map(|p| p.data.clone()).chain(pf.iter().map(|p| p.data.iter().map(|&x| f64::from(x)).collect())) {
            for row in p.chunks(m) {
                worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_oracle <= 1e-9, "oracle deviation {worst_oracle:e} > 1e-9");
    ensure!(worst_sum <= 1e-6, "row sum deviation {worst_sum:e} > 1e-6");

    // causality of the whole decoder under perturbation of later tokens
    let cfg = ModelConfig::default();
    let mut model = Model::<f64>::new(&cfg)?;
    for lin in model.linears_mut() {
        if let Some(ad) = lin.lora.as_mut() {
            for x in ad.b.data.iter_mut() {
                *x = rng.random_range(-0.05..0.05);
            }
        }
    }
    let mel = MelFrontend::new(&cfg, MODEL_RATE_HZ).compute(&clip_of(FaultType::OuterRace, 3))?;
    let audio = model.encode_audio(&mel)?;
    let tokens = build_prompt("Describe the vibration signal.", audio.rows)?.with_target("outer race fault, moderate");
    let base = model.logits_all(&tokens, &audio)?;
    let first_text = tokens.iter().rposition(|&t| t == AUDIO).unwrap() + 1;
    let mut checked = 0;
    for t in (first_text..tokens.len() - 1).step_by(3) {
        let mut other = tokens.clone();
        for x in other[t + 1..].iter_mut() {
            *x = (*x + 31) % 256;
        }
        let l = model.logits_all(&other, &audio)?;
        for pos in 0..=t {
            ensure!(l.row(pos) == base.row(pos), "position {pos} changed when tokens after {t} changed");
        }
        ensure!(l.row(t + 1) != base.row(t + 1), "perturbation had no effect at {}", t + 1);
        checked += 1;
    }
    Ok(format!(
        "300 random shapes: oracle dev {worst_oracle:.1e} (1e-9), row sums {worst_sum:.1e} (1e-6); causal at {checked} cut points"
    ))
}

// ---------------------------------------------------------------- 6

fn naive_ce(model: &Model<f64>, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for ex in batch {
        let audio = model.encode_audio(&ex.mel)?;
        for seq in &ex.seqs {
            let logits = model.logits_all(&seq.tokens, &audio)?;
            for t in seq.target_start..seq.tokens.len() {
                let row = logits.row(t - 1);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                total -= (row[seq.tokens[t] as usize] - m) - z.ln();
            }
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

fn losses(_: &mut Shared) -> Result<String> {
    let cfg = ModelConfig::default();
    let model = Model::<f64>::new(&cfg)?;
    let clips: Vec<LoadedClip> = (0..4).map(|i| loaded([FaultType::Healthy, FaultType::InnerRace, FaultType::OuterRace, FaultType::Roller][i], 10 + i as u64)).collect();
    let refs: Vec<&LoadedClip> = clips.iter().collect();
    let frontend = MelFrontend::new(&cfg, MODEL_RATE_HZ);
    let mels = refs.iter().map(|c| frontend.compute(&c.clip)).collect::<Result<Vec<_>, _>>()?;
    let batch = gfc_examples(&model, &refs, mels, &LabelSet::toy4(), true)?;

    let ce = ce_loss(&model, &batch)?;
    let naive = naive_ce(&model, &batch)?;
    ensure!((ce - naive).abs() <= 1e-9, "ce_loss {ce} vs naive {naive}");

    let uniform = token_nll(&Mat::<f64>::zeros(1, VOCAB_SIZE), &[b'a' as u32]);
    let ln_v = (VOCAB_SIZE as f64).ln();
    ensure!((uniform - ln_v).abs() <= 1e-9, "uniform loss {uniform} vs ln {VOCAB_SIZE}");
    ensure!(log_softmax(&[0.0f64; VOCAB_SIZE]).len() == VOCAB_SIZE, "vocab width");

    let mut worst_dpo = 0.0f64;
    for beta in [1e-3, 0.1, 0.5, 1.0, 10.0, 100.0] {
        for (w, l) in [(-3.0, -7.0), (0.0, 0.0), (-120.0, -0.5)] {
            worst_dpo = worst_dpo.max((dpo_loss(w, l, w, l, beta) - std::f64::consts::LN_2).abs());
        }
    }
    ensure!(worst_dpo <= 1e-12, "dpo at zero margin off by {worst_dpo:e}");

    let refs: Vec<&Example> = batch.iter().collect();
    let (whole, _) = batch_gradients(&model, &refs, 1)?;
    let mut worst_acc = 0.0f64;
    for k in [2, 4] {
        let (acc, _) = batch_gradients(&model, &refs, k)?;
        for (g1, g2) in whole.iter().zip(&acc) {
            let scale = g1.a.max_abs().max(g1.b.max_abs()).max(1e-12);
            for (a, b) in g1.a.data.iter().chain(&g1.b.data).zip(g2.a.data.iter().chain(&g2.b.data)) {
                worst_acc = worst_acc.max((a - b).abs() / scale);
            }
        }
    }
    ensure!(worst_acc <= 1e-6, "accumulation deviation {worst_acc:e} > 1e-6");
    Ok(format!(
        "ce vs naive {:.1e} (1e-9); uniform = ln 262 ({:.1e}); dpo(0) = ln 2 ({worst_dpo:.1e}); accumulation {worst_acc:.1e} (1e-6)",
        (ce - naive).abs(),
        (uniform - ln_v).abs()
    ))
}

// ---------------------------------------------------------------- 7

fn corpus(_: &mut Shared) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::default();
    let spec = vibrodiag::experiment::dataset_spec(&cfg.data)?;
    let manifest = vibrodiag::synth::write_dataset(&spec, dir.path(), cfg.data.normalization)?;
    let labels = cfg.data.labels()?;
    let records = build_corpus(&manifest, &labels, 3, cfg.corpus.seed)?;
    ensure!(records.len() == 3000, "{} pairs instead of 3000", records.len());
    let mut ok = 0;
    for r in &records {
        let p = parse_fields(&r.text).with_context(|| r.text.clone())?;
        ensure!(p.fault_type == r.fields.fault_type, "fault type lost in {:?}", r.text);
        ensure!(p.severity == r.fields.severity, "severity lost in {:?}", r.text);
        ok += 1;
    }
    let a = corpus_to_jsonl(&records);
    let b = corpus_to_jsonl(&build_corpus(&manifest, &labels, 3, cfg.corpus.seed)?);
    ensure!(a == b, "corpus bytes differ between builds");
    Ok(format!("{ok}/3000 pairs parse back (100%); {} bytes identical across builds", a.len()))
}

// ---------------------------------------------------------------- 8

fn metrics(_: &mut Shared) -> Result<String> {
    let labels = LabelSet::dirg7();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for _ in 0..20 {
        let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..7)).collect();
        let pred: Vec<Option<usize>> = (0..200)
            .map(|_| if rng.random_bool(0.1) { None } else { Some(rng.random_range(0..7)) })
            .collect();
        let preds: Vec<Diagnosis> = pred
            .iter()
            .map(|p| match p {
                Some(i) => Diagnosis {
                    raw_text: labels.entries[*i].label.clone(),
                    parsed_label: Some(labels.entries[*i].label.clone()),
                    parse_status: ParseStatus::Exact,
                    truncated: false,
                },
                None => Diagnosis {
                    raw_text: "###".into(),
                    parsed_label: None,
                    parse_status: ParseStatus::Unparseable,
                    truncated: true,
                },
            })
            .collect();
        let truths: Vec<String> = truth.iter().map(|&t| labels.entries[t].label.clone()).collect();
        let r = evaluate(&preds, &truths, &labels, false)?;

        let n = truth.len();
        let correct = (0..n).filter(|&i| pred[i] == Some(truth[i])).count();
        ensure!(r.accuracy == correct as f64 / n as f64, "accuracy");
        ensure!(r.n_unparseable == pred.iter().filter(|p| p.is_none()).count(), "unparseable count");
        let mut precisions = Vec::new();
        let mut f1s = Vec::new();
        for k in 0..7 {
            let tp = (0..n).filter(|&i| truth[i] == k && pred[i] == Some(k)).count();
            let fp = (0..n).filter(|&i| truth[i] != k && pred[i] == Some(k)).count();
            let fn_ = (0..n).filter(|&i| truth[i] == k && pred[i] != Some(k)).count();
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let rc = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
            let m = &r.per_class[k];
            ensure!(m.precision == p && m.recall == rc && m.f1 == f && m.support == tp + fn_, "class {k} metrics");
            for j in 0..8 {
                let count = (0..n).filter(|&i| truth[i] == k && pred[i].unwrap_or(7) == j).count();
                ensure!(r.confusion[k][j] == count, "confusion[{k}][{j}]");
            }
            if tp + fn_ > 0 {
                precisions.push(p);
                f1s.push(f);
            }
        }
        ensure!(r.macro_precision == precisions.iter().sum::<f64>() / precisions.len() as f64, "macro precision");
        ensure!(r.macro_f1 == f1s.iter().sum::<f64>() / f1s.len() as f64, "macro f1");
        checked += 1;
    }
    Ok(format!("{checked} sets of 200 random 7-class predictions (10% unparseable) match exactly"))
}

// ---------------------------------------------------------------- 9

fn experiment_config() -> Result<RunConfig> {
    let cfg = RunConfig::default();
    let d = &cfg.data;
    ensure!(d.label_set == "toy4" && LabelSet::toy4().len() == 4, "4 classes");
    ensure!(d.clips_per_class == 250 && d.duration_s == 1.0 && d.fs_hz == 16_000, "250 clips of 1 s at 16 kHz");
    ensure!((d.split_train, d.split_test) == (8.0, 2.0), "8:2 split");
    ensure!(cfg.model.lora_rank == 16 && cfg.model.lora_alpha == 32.0, "r=16, alpha=32");
    for t in [&cfg.vsa, &cfg.gfc] {
        ensure!(t.batch == 32 && t.grad_accum == 16 && t.warmup_frac == 0.05, "batch 32, grad_accum 16, 5% warmup");
    }
    Ok(cfg)
}

fn end_to_end(shared: &mut Shared) -> Result<String> {
    let cfg = experiment_config()?;
    let workdir = tempfile::tempdir()?;
    let out = run_experiment(&cfg, workdir.path(), &[Stage::Vsa, Stage::Gfc])?;
    let r = &out.eval.report;
    ensure!(r.samples == 200, "{} held-out clips instead of 200", r.samples);
    let clips = std::fs::read_dir(&out.data_dir)?
        .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "wav")))
        .count();
    ensure!(clips == 1000, "{clips} clips on disk");
    let curve: Vec<String> = out
        .reports
        .iter()
        .map(|rep| {
            let (a, b) = rep.first_last_epoch_loss().unwrap_or((f64::NAN, f64::NAN));
            format!("{} {} updates loss {a:.2}->{b:.2}", rep.stage.as_str(), rep.updates)
        })
        .collect();
    let summary = format!(
        "held-out accuracy {:.2}% (>= 95%), macro F1 {:.4}, unparseable {}; {}",
        100.0 * r.accuracy,
        r.macro_f1,
        r.n_unparseable,
        curve.join("; ")
    );
    let accuracy = r.accuracy;
    shared.run = Some(out);
    shared.workdir = Some(workdir);
    ensure!(accuracy >= 0.95, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------- 10

fn determinism(shared: &mut Shared) -> Result<String> {
    let first = shared.run.as_ref().ok_or_else(|| anyhow!("criterion 9 produced no run to repeat"))?;
    let cfg = experiment_config()?;
    let workdir = tempfile::tempdir()?;
    let second = run_experiment(&cfg, workdir.path(), &[Stage::Vsa, Stage::Gfc])?;
    let data_a = std::fs::read(first.data_dir.join("manifest.jsonl"))?;
    let data_b = std::fs::read(second.data_dir.join("manifest.jsonl"))?;
    ensure!(data_a == data_b, "manifests differ");
    ensure!(first.reports == second.reports, "loss curves differ");
    ensure!(first.eval.report == second.eval.report, "metrics differ");
    let decodes_a: Vec<&str> = first.eval.predictions.iter().map(|d| d.raw_text.as_str()).collect();
    let decodes_b: Vec<&str> = second.eval.predictions.iter().map(|d| d.raw_text.as_str()).collect();
    ensure!(decodes_a == decodes_b, "decoded text differs");
    let ck_a = write_checkpoint(&first.checkpoint.model, &first.checkpoint.meta);
    let ck_b = write_checkpoint(&second.checkpoint.model, &second.checkpoint.meta);
    ensure!(ck_a == ck_b, "checkpoint bytes differ");
    let points: usize = first.reports.iter().map(|r| r.curve.len()).sum();
    Ok(format!(
        "{points} loss points, metrics, {} decodes and {} checkpoint bytes identical",
        decodes_a.len(),
        ck_a.len()
    ))
}

// ---------------------------------------------------------------- ablation

fn ablation(shared: &mut Shared) -> Result<String> {
    let cfg = experiment_config()?;
    let own;
    let workdir = match &shared.workdir {
        Some(w) => w.path().to_path_buf(),
        None => {
            own = tempfile::tempdir()?;
            own.path().to_path_buf()
        }
    };
    let out = run_experiment(&cfg, &workdir, &[Stage::Gfc])?;
    let r = &out.eval.report;
    let full = shared
        .run
        .as_ref()
        .map_or("n/a".to_string(), |o| format!("{:.2}%", 100.0 * o.eval.report.accuracy));
    Ok(format!(
        "GFC only: accuracy {:.2}%, macro F1 {:.4}, unparseable {} (alignment + GFC: {full})",
        100.0 * r.accuracy,
        r.macro_f1,
        r.n_unparseable
    ))
}

// ---------------------------------------------------------------- 11

fn multipart_form(bytes: Vec<u8>, name: &str) -> reqwest::multipart::Form {
    reqwest::multipart::Form::new().part("file", reqwest::multipart::Part::bytes(bytes).file_name(name.to_string()))
}

fn cli(args: &[&str], stdin: Option<&str>) -> Result<(i32, String)> {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let mut input = child.stdin.take().unwrap();
    input.write_all(stdin.unwrap_or("").as_bytes())?;
    drop(input);
    let out = child.wait_with_output()?;
    Ok((out.status.code().unwrap_or(-1), String::from_utf8(out.stdout)?))
}

fn free_port() -> Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

fn parity(shared: &mut Shared) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let ckpt_path = dir.path().join("model.ck");
    let trained = match &shared.run {
        Some(run) => {
            save_checkpoint(&run.checkpoint.model, &run.checkpoint.meta, &ckpt_path)?;
            true
        }
        None => {
            std::fs::copy(common::small_checkpoint(dir.path()), &ckpt_path)?;
            false
        }
    };
    let ck = ckpt_path.to_str().unwrap();
    let wav_path: PathBuf = dir.path().join("clip.wav");
    let clip = prepare_signal(
        &synth_signal(&FaultCondition::new(FaultType::Roller, 250, 6000.0, 900.0)?, 1.0, 16_000, 4242)?,
        Normalization::Peak,
    )?;
    write_wav(&clip, &wav_path)?;
    let wav = wav_path.to_str().unwrap();
    let wav_bytes = std::fs::read(&wav_path)?;
    let questions = ["How severe is the damage?", "Where is the fault located?", "What maintenance is recommended?"];

    // CLI side
    let (code, cli_diag) = cli(&["diagnose", "--ckpt", ck, "--wav", wav], None)?;
    ensure!(code == 0, "cli diagnose exited {code}");
    let (code, cli_ask) = cli(&["ask", "--ckpt", ck, "--wav", wav], Some(&(questions.join("\n") + "\n")))?;
    ensure!(code == 0, "cli ask exited {code}");

    // API side, in process on an ephemeral port
    let engine = Engine::new(vibrodiag::optim::load_checkpoint(&ckpt_path)?);
    let state = AppState::new(Some(engine), Some(ck.to_string()), Duration::from_secs(1800));
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let mut codes = Vec::new();
    let (api_diag, api_ask) = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base = format!("http://{}", listener.local_addr()?);
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(gateway::serve_on(listener, state.clone(), None, async {
            let _ = stop_rx.await;
        }));
        let http = reqwest::Client::new();

        let health = http.get(format!("{base}/api/v1/health")).send().await?;
        ensure!(health.status() == 200, "health {}", health.status());
        let h: HealthResponse = health.json().await?;
        ensure!(h.status == "ok" && h.model_config.is_some() && h.checkpoint.is_some(), "health body");

        let resp = http.post(format!("{base}/api/v1/diagnose")).multipart(multipart_form(wav_bytes.clone(), "clip.wav")).send().await?;
        ensure!(resp.status() == 200, "diagnose {}", resp.status());
        let d: DiagnoseResponse = resp.json().await?;
        let mut answers = Vec::new();
        for (i, q) in questions.iter().enumerate() {
            let resp = http
                .post(format!("{base}/api/v1/sessions/{}/ask", d.session_id))
                .json(&serde_json::json!({ "question": q }))
                .send()
                .await?;
            ensure!(resp.status() == 200, "ask {}", resp.status());
            let a: AskResponse = resp.json().await?;
            ensure!(a.turn_index == i + 1, "turn_index {} after {} asks", a.turn_index, i + 1);
            answers.push(a.answer);
        }

        // error contract
        let text = http.post(format!("{base}/api/v1/diagnose")).multipart(multipart_form(b"plain text notes".to_vec(), "notes.txt")).send().await?;
        codes.push(("text upload", text.status().as_u16(), 400));
        let long = encode_wav(&WavClip { pcm: vec![0; 8_000 * 61], sample_rate_hz: 8_000 });
        let long = http.post(format!("{base}/api/v1/diagnose")).multipart(multipart_form(long, "long.wav")).send().await?;
        codes.push(("61 s clip", long.status().as_u16(), 413));
        let huge = http.post(format!("{base}/api/v1/diagnose")).multipart(multipart_form(vec![0u8; gateway::MAX_UPLOAD_BYTES + 1], "huge.wav")).send().await?;
        codes.push(("oversize upload", huge.status().as_u16(), 413));
        let unknown = http.post(format!("{base}/api/v1/sessions/nope/ask")).json(&serde_json::json!({ "question": "hi" })).send().await?;
        codes.push(("unknown session", unknown.status().as_u16(), 404));
        let held = state.session(&d.session_id).unwrap();
        let guard = held.lock().await;
        let busy = http
            .post(format!("{base}/api/v1/sessions/{}/ask", d.session_id))
            .json(&serde_json::json!({ "question": questions[0] }))
            .send()
            .await?;
        codes.push(("ask during in-flight ask", busy.status().as_u16(), 409));
        drop(guard);
        let after = http
            .post(format!("{base}/api/v1/sessions/{}/ask", d.session_id))
            .json(&serde_json::json!({ "question": questions[0] }))
            .send()
            .await?;
        codes.push(("ask after release", after.status().as_u16(), 200));

        let expiring = AppState::new(state.engine.as_deref().map(|_| Engine::new(vibrodiag::optim::load_checkpoint(&ckpt_path).unwrap())), None, Duration::from_millis(50));
        let router = gateway::router(expiring.clone(), None);
        let l2 = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base2 = format!("http://{}", l2.local_addr()?);
        let srv2 = tokio::spawn(async move { axum::serve(l2, router).await });
        let d2: DiagnoseResponse = http.post(format!("{base2}/api/v1/diagnose")).multipart(multipart_form(wav_bytes.clone(), "clip.wav")).send().await?.json().await?;
        tokio::time::sleep(Duration::from_millis(150)).await;
        let expired = http.post(format!("{base2}/api/v1/sessions/{}/ask", d2.session_id)).json(&serde_json::json!({ "question": "hi" })).send().await?;
        codes.push(("expired session", expired.status().as_u16(), 404));
        srv2.abort();

        let _ = stop_tx.send(());
        server.await??;
        Ok((d, answers))
    })?;

    // `serve` with a checkpoint that does not exist answers 503
    let port = free_port()?;
    let mut serve = Command::new(BIN)
        .args(["serve", "--ckpt", "/nonexistent/model.ck", "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()?;
    let status = rt.block_on(async {
        let http = reqwest::Client::new();
        for _ in 0..100 {
            if let Ok(r) = http.get(format!("http://127.0.0.1:{port}/api/v1/health")).send().await {
                return Ok(r.status().as_u16());
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }
        Err(anyhow!("serve never came up on port {port}"))
    });
    let _ = serve.kill();
    let _ = serve.wait();
    codes.push(("health without model", status?, 503));

    let parse_status = match api_diag.parse_status.as_str() {
        "exact" => ParseStatus::Exact,
        "substring" => ParseStatus::Substring,
        _ => ParseStatus::Unparseable,
    };
    let api_as_cli = format_diagnosis(&Diagnosis {
        raw_text: api_diag.raw_text.clone(),
        parsed_label: api_diag.label.clone(),
        parse_status,
        truncated: false,
    });
    ensure!(cli_diag == api_as_cli, "diagnose differs: cli {cli_diag:?} vs api {api_as_cli:?}");
    let mut want_ask = api_as_cli.clone();
    for (i, a) in api_ask.iter().enumerate() {
        want_ask.push_str(&format!("answer[{}]: {a}\n", i + 1));
    }
    ensure!(cli_ask == want_ask, "ask differs: cli {cli_ask:?} vs api {want_ask:?}");
    let bad: Vec<String> = codes
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(what, got, want)| format!("{what}: {got} (want {want})"))
        .collect();
    ensure!(bad.is_empty(), "error codes: {}", bad.join(", "));
    Ok(format!(
        "{} checkpoint: diagnosis (label {:?}, {} chars) and {} answers identical via CLI and HTTP; {} error-code checks",
        if trained { "trained" } else { "untrained" },
        api_diag.label.as_deref().unwrap_or("-"),
        api_diag.raw_text.chars().count(),
        api_ask.len(),
        codes.len()
    ))
}

