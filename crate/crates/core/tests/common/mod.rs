#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vibrodiag::config::RunConfig;
use vibrodiag::experiment::checkpoint_meta;
use vibrodiag::net::{Model, ModelConfig};
use vibrodiag::optim::save_checkpoint;
use vibrodiag::sigproc::{encode_wav, prepare_signal, Normalization, WavClip};
use vibrodiag::synth::{synth_signal, FaultCondition, FaultType};

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        lora_rank: 4,
        lora_alpha: 8.0,
        ..ModelConfig::default()
    }
}

/// A run config small enough to train in seconds.
pub fn small_run_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: small_model_config(),
        ..RunConfig::default()
    };
    cfg.data.clips_per_class = 5;
    cfg.data.duration_s = 0.5;
    cfg.vsa.epochs = 1;
    cfg.gfc.epochs = 1;
    cfg.vsa.batch = 4;
    cfg.vsa.grad_accum = 2;
    cfg.gfc.batch = 4;
    cfg.gfc.grad_accum = 2;
    cfg
}

/// An untrained toy-label checkpoint written into `dir`.
pub fn small_checkpoint(dir: &Path) -> PathBuf {
    let cfg = small_run_config();
    let model = Model::<f32>::new(&cfg.model).unwrap();
    let meta = checkpoint_meta(&cfg, vec!["gfc".into()]).unwrap();
    let path = dir.join("small.ck");
    save_checkpoint(&model, &meta, &path).unwrap();
    path
}

pub fn fault_clip(fault_type: FaultType, duration_s: f64, seed: u64) -> WavClip {
    let severity = if fault_type == FaultType::Healthy { 0 } else { 250 };
    let cond = FaultCondition::new(fault_type, severity, 6000.0, 900.0).unwrap();
    let sig = synth_signal(&cond, duration_s, 16_000, seed).unwrap();
    prepare_signal(&sig, Normalization::Peak).unwrap()
}

pub fn clip_bytes(seed: u64) -> Vec<u8> {
    encode_wav(&fault_clip(FaultType::OuterRace, 0.5, seed))
}

pub fn random_mel(frames: usize, bins: usize, seed: u64) -> vibrodiag::net::MelSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    vibrodiag::net::MelSpec {
        frames,
        bins,
        data: (0..frames * bins).map(|_| rng.random_range(-8.0..2.0)).collect(),
    }
}

/// `n` random-feature examples labelled from a small fixed vocabulary.
pub fn tiny_examples<T: vibrodiag::net::Real>(
    model: &vibrodiag::net::Model<T>,
    n: usize,
    seed: u64,
) -> Vec<vibrodiag::optim::Example> {
    use vibrodiag::net::TrainSeq;
    use vibrodiag::textcodec::build_prompt;
    let labels = ["healthy", "inner race", "outer race", "roller"];
    (0..n)
        .map(|i| {
            let mel = random_mel(20, model.cfg.mel_bins, seed.wrapping_add(i as u64));
            let slots = model.audio_token_count(mel.frames);
            let prompt = build_prompt("what is the condition?", slots).unwrap();
            let target_start = prompt.ids.len();
            let seqs = vec![TrainSeq {
                tokens: prompt.with_target(labels[i % labels.len()]),
                target_start,
            }];
            vibrodiag::optim::Example { mel, seqs }
        })
        .collect()
}
