//! `vibrodiag` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{build_corpus, corpus_to_jsonl};
use crate::diagnose::{Diagnosis, Engine};
use crate::evalkit::{report_render, ReportFormat};
use crate::experiment::{
    checkpoint_meta, dataset_spec, evaluate_dir, features, gfc_examples, load_dataset, split_of,
    train_on_dir, CORPUS_FILE,
};
use crate::net::{MelFrontend, Model};
use crate::optim::{grad_check, load_checkpoint, save_checkpoint, Stage};
use crate::sigproc::{read_wav, Normalization, MODEL_RATE_HZ};
use crate::synth::{read_manifest, write_dataset, Split, MANIFEST_FILE};

pub const LOG_ENV: &str = "VIBRODIAG_LOG";
pub const SNAPSHOT_SUFFIX: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "vibrodiag", version, about = "Generative bearing fault diagnosis from vibration audio")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic bearing dataset (WAV clips plus manifest.jsonl).
    Synth(SynthArgs),
    /// Build the vibration-text description corpus for a dataset.
    Corpus(CorpusArgs),
    /// Train one stage (vsa or gfc) and write a checkpoint.
    Train(TrainArgs),
    /// Diagnose one WAV clip.
    Diagnose(DiagnoseArgs),
    /// Diagnose a clip, then answer follow-up questions read line by line from stdin.
    Ask(DiagnoseArgs),
    /// Evaluate a checkpoint on a dataset split and print a metrics report.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference adapter gradients.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of classes taken from the label set, in order.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// toy4, hit3 or dirg7.
    #[arg(long)]
    pub label_set: Option<String>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Add white Gaussian noise at this SNR.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// peak or stat.
    #[arg(long)]
    pub normalization: Option<String>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub variants: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; defaults to corpus.jsonl inside the data directory.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// vsa or gfc.
    #[arg(long)]
    pub stage: Stage,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss curve CSV; defaults to the checkpoint path with a .loss.csv suffix.
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub wav: PathBuf,
    /// Maximum generated tokens per answer.
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Count only exact label matches.
    #[arg(long)]
    pub strict: bool,
    /// json or text.
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
    /// Also write the report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint to check; a fresh model from the config otherwise.
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub per_layer: usize,
    #[arg(long, default_value_t = 2)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Idle session lifetime in seconds.
    #[arg(long, default_value_t = crate::gateway::DEFAULT_TTL_SECS)]
    pub ttl_secs: u64,
    /// Allowed CORS origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` and runs the command, mapping outcomes onto exit codes.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn snapshot_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".{SNAPSHOT_SUFFIX}"));
    output.with_file_name(name)
}

fn write_snapshot(path: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(&mut cfg, a),
        Command::Corpus(a) => corpus(&mut cfg, a),
        Command::Train(a) => train(&mut cfg, a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ask(a) => ask(a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Gradcheck(a) => gradcheck(&cfg, a),
        Command::Serve(a) => crate::gateway::serve_blocking(a),
    }
}

fn synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<()> {
    let d = &mut cfg.data;
    if let Some(v) = a.label_set {
        d.label_set = v;
    }
    if let Some(v) = a.per_class {
        d.clips_per_class = v;
    }
    if let Some(v) = a.duration_s {
        d.duration_s = v;
    }
    if let Some(v) = a.seed {
        d.seed = v;
    }
    if a.snr_db.is_some() {
        d.snr_db = a.snr_db;
    }
    if let Some(v) = a.normalization {
        d.normalization = match v.as_str() {
            "peak" => Normalization::Peak,
            "stat" => Normalization::stat_default(),
            other => bail!("unknown normalization {other:?} (expected peak or stat)"),
        };
    }
    cfg.validate()?;
    let mut spec = dataset_spec(&cfg.data)?;
    if let Some(n) = a.classes {
        if n == 0 || n > spec.classes.len() {
            bail!("--classes must lie in 1..={} for label set {}", spec.classes.len(), cfg.data.label_set);
        }
        spec.classes.truncate(n);
    }
    let records = write_dataset(&spec, &a.out, cfg.data.normalization)?;
    write_snapshot(&a.out.join(SNAPSHOT_SUFFIX), cfg)?;
    let test = records.iter().filter(|r| r.split == Split::Test).count();
    println!(
        "wrote {} clips ({} train, {} test) to {}",
        records.len(),
        records.len() - test,
        test,
        a.out.display()
    );
    Ok(())
}

fn corpus(cfg: &mut RunConfig, a: CorpusArgs) -> Result<()> {
    if let Some(v) = a.variants {
        cfg.corpus.n_variants = v;
    }
    if let Some(v) = a.seed {
        cfg.corpus.seed = v;
    }
    cfg.validate()?;
    let manifest = read_manifest(&a.data.join(MANIFEST_FILE))?;
    let records = build_corpus(&manifest, &cfg.data.labels()?, cfg.corpus.n_variants, cfg.corpus.seed)?;
    let out = a.out.unwrap_or_else(|| a.data.join(CORPUS_FILE));
    std::fs::write(&out, corpus_to_jsonl(&records)).with_context(|| format!("writing {}", out.display()))?;
    write_snapshot(&snapshot_path(&out), cfg)?;
    println!("wrote {} pairs to {}", records.len(), out.display());
    Ok(())
}

fn train(cfg: &mut RunConfig, a: TrainArgs) -> Result<()> {
    let t = match a.stage {
        Stage::Vsa => &mut cfg.vsa,
        Stage::Gfc => &mut cfg.gfc,
    };
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.grad_accum {
        t.grad_accum = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    let (mut model, mut stages) = match &a.init {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            cfg.model = ck.model.cfg.clone();
            cfg.data.label_set = ck.meta.labels.name.clone();
            cfg.data.normalization = ck.meta.normalization;
            (ck.model, ck.meta.stages)
        }
        None => (Model::<f32>::new(&cfg.model)?, Vec::new()),
    };
    cfg.validate()?;
    let report = train_on_dir(&mut model, cfg, a.stage, &a.data, None)?;
    stages.push(a.stage.as_str().to_string());
    let meta = checkpoint_meta(cfg, stages)?;
    save_checkpoint(&model, &meta, &a.ckpt)?;
    let csv = a.loss_csv.unwrap_or_else(|| a.ckpt.with_extension("loss.csv"));
    std::fs::write(&csv, report.to_csv())?;
    write_snapshot(&snapshot_path(&a.ckpt), cfg)?;
    if let Some((first, last)) = report.first_last_epoch_loss() {
        println!("{}: {} updates, loss {first:.4} -> {last:.4}", a.stage.as_str(), report.updates);
    }
    println!("checkpoint {}", a.ckpt.display());
    Ok(())
}

fn engine(ckpt: &Path, max_len: Option<usize>) -> Result<Engine> {
    let ck = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut e = Engine::new(ck);
    if let Some(m) = max_len {
        e.max_len = m;
    }
    Ok(e)
}

/// The two lines `diagnose` prints.
pub fn format_diagnosis(d: &Diagnosis) -> String {
    format!(
        "raw_text: {}\nlabel: {} ({})\n",
        d.raw_text,
        d.parsed_label.as_deref().unwrap_or("-"),
        d.parse_status.as_str()
    )
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let e = engine(&a.ckpt, a.max_len)?;
    let clip = read_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    print!("{}", format_diagnosis(&e.diagnose(&clip)?));
    Ok(())
}

fn ask(a: DiagnoseArgs) -> Result<()> {
    let e = engine(&a.ckpt, a.max_len)?;
    let clip = read_wav(&a.wav).with_context(|| format!("reading {}", a.wav.display()))?;
    let (d, mut session) = e.open_session("cli", &clip)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    write!(out, "{}", format_diagnosis(&d))?;
    out.flush()?;
    for line in std::io::stdin().lock().lines() {
        let q = line?;
        let q = q.trim();
        if q.is_empty() {
            continue;
        }
        let answer = e.follow_up(&mut session, q)?;
        writeln!(out, "answer[{}]: {answer}", session.history.len())?;
        out.flush()?;
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!("unknown split {other:?} (expected train or test)"),
    }
}

fn eval(cfg: &RunConfig, a: EvalArgs) -> Result<()> {
    let e = engine(&a.ckpt, None)?;
    let outcome = evaluate_dir(&e, &a.data, parse_split(&a.split)?, a.strict)?;
    let text = report_render(&outcome.report, a.format);
    print!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text)?;
        write_snapshot(&snapshot_path(out), cfg)?;
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig, a: GradcheckArgs) -> Result<()> {
    let model = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::<f32>::new(&cfg.model)?,
    };
    let labels = cfg.data.labels()?;
    let all = load_dataset(&a.data)?;
    let train: Vec<_> = split_of(&all, Split::Train).into_iter().take(a.clips.max(1)).collect();
    let frontend = MelFrontend::new(&model.cfg, MODEL_RATE_HZ);
    let mels = features(&train, cfg.data.normalization, &frontend)?;
    let batch = gfc_examples(&model, &train, mels, &labels, false)?;
    let report = grad_check(&model, &batch, a.per_layer, a.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "coordinates": report.samples.len(),
            "max_rel_error": report.max_rel_error,
        })
    );
    Ok(())
}

/// Loads a checkpoint, or `None` with a logged reason when that fails.
pub fn try_engine(ckpt: &Path) -> Option<Engine> {
    match load_checkpoint(ckpt) {
        Ok(ck) => Some(Engine::new(ck)),
        Err(e) => {
            log::error!("checkpoint {} not loaded: {e}", ckpt.display());
            None
        }
    }
}
