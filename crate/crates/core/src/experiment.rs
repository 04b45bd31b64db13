//! The end-to-end workflow shared by the CLI and the test suites: synthesize a
//! bench dataset, build the description corpus, train the alignment and label
//! stages, then evaluate on the held-out split.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::corpus::{
    self, build_corpus, canonical_label, follow_up_pairs, CorpusRecord, LabelSet, DESCRIBE_QUESTION,
    DIAGNOSIS_QUESTION,
};
use crate::diagnose::{clip_features, Diagnosis, Engine, DEFAULT_MAX_AUDIO_S};
use crate::evalkit::{evaluate, MetricsReport};
use crate::net::{MelFrontend, MelSpec, Model, TrainSeq};
use crate::optim::{train_stage, Checkpoint, CheckpointMeta, Example, Stage, TrainReport};
use crate::sigproc::{read_wav, Normalization, WavClip, MODEL_RATE_HZ};
use crate::synth::{
    read_manifest, record_path, write_dataset, DatasetSpec, FaultCondition, FaultType, ManifestRecord,
    Split, MANIFEST_FILE,
};
use crate::textcodec::{build_dialogue_prompt, build_prompt};

pub const CORPUS_FILE: &str = "corpus.jsonl";

/// One class condition per label; unspecified severities use 250 µm.
pub fn dataset_spec(data: &DataConfig) -> Result<DatasetSpec> {
    let labels = data.labels()?;
    let classes = labels
        .entries
        .iter()
        .map(|e| {
            let severity_um = match (e.fault_type, e.severity_um) {
                (FaultType::Healthy, _) => 0,
                (_, Some(s)) => s,
                (_, None) => 250,
            };
            FaultCondition {
                fault_type: e.fault_type,
                severity_um,
                speed_rpm: data.speed_rpm,
                load_n: data.load_n,
            }
        })
        .collect();
    Ok(DatasetSpec {
        classes,
        clips_per_class: data.clips_per_class,
        duration_s: data.duration_s,
        fs_hz: data.fs_hz,
        split_ratio: (data.split_train, data.split_test),
        seed: data.seed,
        snr_db: data.snr_db,
    })
}

/// A manifest entry with its decoded clip.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub record: ManifestRecord,
    pub clip: WavClip,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<LoadedClip>> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))
        .with_context(|| format!("reading manifest in {}", dir.display()))?;
    if manifest.is_empty() {
        bail!("manifest in {} lists no clips", dir.display());
    }
    manifest
        .into_iter()
        .map(|record| {
            let path = record_path(dir, &record);
            let clip = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(LoadedClip { record, clip })
        })
        .collect()
}

pub fn features(clips: &[&LoadedClip], norm: Normalization, frontend: &MelFrontend) -> Result<Vec<MelSpec>> {
    clips
        .iter()
        .map(|c| {
            clip_features(&c.clip, norm, frontend, DEFAULT_MAX_AUDIO_S)
                .with_context(|| format!("features of {}", c.record.path))
        })
        .collect()
}

fn seq(prompt: crate::textcodec::Prompt, target: &str) -> TrainSeq {
    let target_start = prompt.ids.len();
    TrainSeq {
        tokens: prompt.with_target(target),
        target_start,
    }
}

/// Alignment examples: each clip paired with up to `per_clip` of its descriptions.
pub fn vsa_examples<T: crate::net::Real>(
    model: &Model<T>,
    clips: &[&LoadedClip],
    mels: Vec<MelSpec>,
    corpus: &[CorpusRecord],
    per_clip: usize,
) -> Result<Vec<Example>> {
    let mut by_clip: HashMap<&str, Vec<&CorpusRecord>> = HashMap::new();
    for r in corpus {
        by_clip.entry(r.clip.as_str()).or_default().push(r);
    }
    clips
        .iter()
        .zip(mels)
        .map(|(c, mel)| {
            let n = model.audio_token_count(mel.frames);
            let texts = by_clip
                .get(c.record.path.as_str())
                .with_context(|| format!("no descriptions for {}", c.record.path))?;
            let seqs = texts
                .iter()
                .take(per_clip.max(1))
                .map(|r| Ok(seq(build_prompt(DESCRIBE_QUESTION, n)?, &r.text)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Example { mel, seqs })
        })
        .collect()
}

/// Label examples: the canonical label, plus follow-up exchanges when enabled.
pub fn gfc_examples<T: crate::net::Real>(
    model: &Model<T>,
    clips: &[&LoadedClip],
    mels: Vec<MelSpec>,
    labels: &LabelSet,
    follow_ups: bool,
) -> Result<Vec<Example>> {
    clips
        .iter()
        .zip(mels)
        .map(|(c, mel)| {
            let n = model.audio_token_count(mel.frames);
            let cond = c.record.condition();
            let label = canonical_label(&cond, labels)?;
            let mut seqs = vec![seq(build_prompt(DIAGNOSIS_QUESTION, n)?, &label)];
            if follow_ups {
                let history = [(DIAGNOSIS_QUESTION.to_string(), label.clone())];
                for (q, a) in follow_up_pairs(&cond) {
                    seqs.push(seq(build_dialogue_prompt(n, &history, &q)?, &a));
                }
            }
            Ok(Example { mel, seqs })
        })
        .collect()
}

pub fn split_of(clips: &[LoadedClip], split: Split) -> Vec<&LoadedClip> {
    clips.iter().filter(|c| c.record.split == split).collect()
}

/// Runs one training stage on the training split of `dir`.
pub fn train_on_dir(
    model: &mut Model<f32>,
    cfg: &RunConfig,
    stage: Stage,
    dir: &Path,
    corpus: Option<&[CorpusRecord]>,
) -> Result<TrainReport> {
    let labels = cfg.data.labels()?;
    let all = load_dataset(dir)?;
    let train = split_of(&all, Split::Train);
    if train.is_empty() {
        bail!("no training clips in {}", dir.display());
    }
    let frontend = MelFrontend::new(&model.cfg, MODEL_RATE_HZ);
    let mels = features(&train, cfg.data.normalization, &frontend)?;
    let examples = match stage {
        Stage::Vsa => {
            let owned;
            let corpus = match corpus {
                Some(c) => c,
                None => {
                    owned = corpus::read_corpus(&dir.join(CORPUS_FILE))
                        .with_context(|| format!("reading {}", dir.join(CORPUS_FILE).display()))?;
                    &owned[..]
                }
            };
            vsa_examples(model, &train, mels, corpus, cfg.corpus.vsa_targets_per_clip)?
        }
        Stage::Gfc => gfc_examples(model, &train, mels, &labels, cfg.corpus.follow_ups)?,
    };
    log::info!("{}: {} training clips", stage.as_str(), examples.len());
    Ok(train_stage(model, &examples, cfg.train(stage))?)
}

/// Predictions and truths on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<Diagnosis>,
    pub truths: Vec<String>,
    pub paths: Vec<String>,
}

pub fn evaluate_dir(engine: &Engine, dir: &Path, split: Split, strict: bool) -> Result<EvalOutcome> {
    let all = load_dataset(dir)?;
    let clips = split_of(&all, split);
    if clips.is_empty() {
        bail!("no {} clips in {}", split.as_str(), dir.display());
    }
    let mut predictions = Vec::with_capacity(clips.len());
    let mut truths = Vec::with_capacity(clips.len());
    for c in &clips {
        predictions.push(engine.diagnose(&c.clip)?);
        truths.push(canonical_label(&c.record.condition(), engine.labels())?);
    }
    let report = evaluate(&predictions, &truths, engine.labels(), strict)?;
    Ok(EvalOutcome {
        report,
        predictions,
        truths,
        paths: clips.iter().map(|c| c.record.path.clone()).collect(),
    })
}

/// Fraction of held-out clips whose answer to each follow-up question equals
/// the templated answer for the true condition.
pub fn follow_up_accuracy(engine: &Engine, dir: &Path, split: Split) -> Result<Vec<(String, f64)>> {
    let all = load_dataset(dir)?;
    let clips = split_of(&all, split);
    let mut hits: Vec<(String, usize)> = follow_up_pairs(&clips[0].record.condition())
        .into_iter()
        .map(|(q, _)| (q, 0))
        .collect();
    for c in &clips {
        let (_, mut session) = engine.open_session("eval", &c.clip)?;
        for ((q, want), (_, n)) in follow_up_pairs(&c.record.condition()).into_iter().zip(hits.iter_mut()) {
            session.history.clear();
            if engine.follow_up(&mut session, &q)? == want {
                *n += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|(q, n)| (q, n as f64 / clips.len() as f64))
        .collect())
}

pub fn checkpoint_meta(cfg: &RunConfig, stages: Vec<String>) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        labels: cfg.data.labels()?,
        normalization: cfg.data.normalization,
        stages,
    })
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<TrainReport>,
    pub eval: EvalOutcome,
    pub checkpoint: Checkpoint,
    pub data_dir: PathBuf,
}

/// Synthesizes data into `workdir/data` (reusing it if present), builds the
/// corpus, trains `stages` in order from a fresh model and evaluates on the test split.
pub fn run_experiment(cfg: &RunConfig, workdir: &Path, stages: &[Stage]) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data_dir = workdir.join("data");
    let manifest = if data_dir.join(MANIFEST_FILE).exists() {
        read_manifest(&data_dir.join(MANIFEST_FILE))?
    } else {
        write_dataset(&dataset_spec(&cfg.data)?, &data_dir, cfg.data.normalization)?
    };
    let labels = cfg.data.labels()?;
    let corpus = build_corpus(&manifest, &labels, cfg.corpus.n_variants, cfg.corpus.seed)?;
    std::fs::write(data_dir.join(CORPUS_FILE), corpus::corpus_to_jsonl(&corpus))?;

    let mut model = Model::<f32>::new(&cfg.model)?;
    let mut reports = Vec::new();
    for &stage in stages {
        reports.push(train_on_dir(&mut model, cfg, stage, &data_dir, Some(&corpus))?);
    }
    let meta = checkpoint_meta(cfg, stages.iter().map(|s| s.as_str().to_string()).collect())?;
    let checkpoint = Checkpoint { model, meta };
    let engine = Engine::new(checkpoint.clone());
    let eval = evaluate_dir(&engine, &data_dir, Split::Test, false)?;
    Ok(ExperimentOutcome {
        reports,
        eval,
        checkpoint,
        data_dir,
    })
}
