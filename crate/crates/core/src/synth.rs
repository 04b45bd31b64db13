//! Seed-deterministic synthetic bearing vibration.
//!
//! Healthy clips carry a shaft harmonic over coloured background noise.
//! Faulty clips add an impulse train at the defect rate, each impulse ringing
//! a 3 kHz resonance. This stands in for rig recordings: classes are
//! separable, the kinematics are not meant to be accurate.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigproc::{self, Normalization, Signal, SignalError};

pub const RESONANCE_HZ: f64 = 3000.0;
pub const RESONANCE_DECAY_S: f64 = 0.002;
pub const SEVERITIES_UM: [u32; 4] = [0, 150, 250, 450];
pub const SPEED_RANGE_RPM: (f64, f64) = (1000.0, 30000.0);
pub const LOAD_RANGE_N: (f64, f64) = (0.0, 1800.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    Healthy,
    InnerRace,
    OuterRace,
    Roller,
}

impl FaultType {
    pub const ALL: [FaultType; 4] = [
        FaultType::Healthy,
        FaultType::InnerRace,
        FaultType::OuterRace,
        FaultType::Roller,
    ];

    /// Defect rate as a multiple of shaft frequency.
    pub fn defect_multiplier(self) -> f64 {
        match self {
            FaultType::Healthy => 0.0,
            FaultType::InnerRace => 5.4,
            FaultType::OuterRace => 3.6,
            FaultType::Roller => 2.3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FaultType::Healthy => "healthy",
            FaultType::InnerRace => "inner_race",
            FaultType::OuterRace => "outer_race",
            FaultType::Roller => "roller",
        }
    }
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultType {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| SynthError::InvalidSpec(format!("unknown fault type {s:?}")))
    }
}

/// Operating state of one bearing: what is wrong with it and how it is driven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultCondition {
    pub fault_type: FaultType,
    pub severity_um: u32,
    pub speed_rpm: f64,
    pub load_n: f64,
}

impl FaultCondition {
    pub fn new(
        fault_type: FaultType,
        severity_um: u32,
        speed_rpm: f64,
        load_n: f64,
    ) -> Result<Self, SynthError> {
        let c = Self {
            fault_type,
            severity_um,
            speed_rpm,
            load_n,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn healthy(speed_rpm: f64, load_n: f64) -> Self {
        Self {
            fault_type: FaultType::Healthy,
            severity_um: 0,
            speed_rpm,
            load_n,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !SEVERITIES_UM.contains(&self.severity_um) {
            return Err(SynthError::InvalidSpec(format!(
                "severity {} um not in {SEVERITIES_UM:?}",
                self.severity_um
            )));
        }
        if (self.fault_type == FaultType::Healthy) != (self.severity_um == 0) {
            return Err(SynthError::InvalidSpec(
                "severity must be 0 exactly when healthy".into(),
            ));
        }
        if !(SPEED_RANGE_RPM.0..=SPEED_RANGE_RPM.1).contains(&self.speed_rpm) {
            return Err(SynthError::InvalidSpec(format!(
                "speed {} rpm outside {SPEED_RANGE_RPM:?}",
                self.speed_rpm
            )));
        }
        if !(LOAD_RANGE_N.0..=LOAD_RANGE_N.1).contains(&self.load_n) {
            return Err(SynthError::InvalidSpec(format!(
                "load {} N outside {LOAD_RANGE_N:?}",
                self.load_n
            )));
        }
        Ok(())
    }

    pub fn shaft_hz(&self) -> f64 {
        self.speed_rpm / 60.0
    }
}

/// Impulse repetition rate in Hz (0 for healthy bearings).
pub fn defect_frequency(cond: &FaultCondition) -> f64 {
    cond.shaft_hz() * cond.fault_type.defect_multiplier()
}

/// Generates one clip. Identical `(cond, duration, fs, seed)` give identical samples.
pub fn synth_signal(
    cond: &FaultCondition,
    duration_s: f64,
    fs_hz: u32,
    seed: u64,
) -> Result<Signal, SynthError> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(SynthError::InvalidSpec(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if fs_hz < 8000 {
        return Err(SynthError::InvalidSpec(format!(
            "sample rate must be at least 8000 Hz, got {fs_hz}"
        )));
    }
    cond.validate()?;

    let fs = f64::from(fs_hz);
    let n = (duration_s * fs).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shaft = cond.shaft_hz();

    // shaft fundamental and second harmonic
    let phi1 = rng.random::<f64>() * 2.0 * PI;
    let phi2 = rng.random::<f64>() * 2.0 * PI;
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            0.25 * (2.0 * PI * shaft * t + phi1).sin() + 0.08 * (4.0 * PI * shaft * t + phi2).sin()
        })
        .collect();

    // background: unit-variance one-pole lowpass plus a little white noise
    let pole = 0.8f64;
    let gain = (1.0 - pole * pole).sqrt();
    let mut state = 0.0f64;
    for v in x.iter_mut() {
        let w: f64 = rng.sample(StandardNormal);
        state = pole * state + gain * w;
        let w2: f64 = rng.sample(StandardNormal);
        *v += 0.04 * state + 0.015 * w2;
    }

    let fd = defect_frequency(cond);
    if fd > 0.0 {
        let period = 1.0 / fd;
        let amp = f64::from(cond.severity_um) / 250.0
            * (0.5 + cond.load_n / LOAD_RANGE_N.1);
        let ring_len = (10.0 * RESONANCE_DECAY_S * fs).ceil() as usize;
        let ring: Vec<f64> = (0..ring_len)
            .map(|j| {
                let tau = j as f64 / fs;
                (-tau / RESONANCE_DECAY_S).exp() * (2.0 * PI * RESONANCE_HZ * tau).sin()
            })
            .collect();
        let cage = 0.4 * shaft;
        let t0 = rng.random::<f64>() * period;
        let mut k = 0usize;
        loop {
            let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.01 * period;
            let t = t0 + k as f64 * period + jitter;
            let scatter: f64 = rng.sample(StandardNormal);
            k += 1;
            if t >= duration_s {
                break;
            }
            if t < 0.0 {
                continue;
            }
            let modulation = match cond.fault_type {
                FaultType::InnerRace => 1.0 + 0.3 * (2.0 * PI * shaft * t).cos(),
                FaultType::Roller => 1.0 + 0.3 * (2.0 * PI * cage * t).cos(),
                _ => 1.0,
            };
            let a = amp * modulation * (1.0 + 0.1 * scatter);
            let start = (t * fs).round() as usize;
            for (j, r) in ring.iter().enumerate() {
                match x.get_mut(start + j) {
                    Some(v) => *v += a * r,
                    None => break,
                }
            }
        }
    }

    Ok(Signal {
        samples: x,
        sample_rate_hz: fs_hz,
        meta: Some(cond.clone()),
    })
}

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<FaultCondition>,
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub fs_hz: u32,
    /// `(train, test)` weights, normalized by their sum.
    pub split_ratio: (f64, f64),
    pub seed: u64,
    /// Optional white-noise injection at this SNR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

impl DatasetSpec {
    /// Healthy / inner / outer / roller at a common operating point.
    pub fn toy4(clips_per_class: usize, seed: u64) -> Self {
        let at = |t, sev| FaultCondition {
            fault_type: t,
            severity_um: sev,
            speed_rpm: 6000.0,
            load_n: 900.0,
        };
        Self {
            classes: vec![
                at(FaultType::Healthy, 0),
                at(FaultType::InnerRace, 250),
                at(FaultType::OuterRace, 250),
                at(FaultType::Roller, 250),
            ],
            clips_per_class,
            duration_s: 1.0,
            fs_hz: sigproc::MODEL_RATE_HZ,
            split_ratio: (8.0, 2.0),
            seed,
            snr_db: None,
        }
    }

    fn test_count(&self) -> Result<usize, SynthError> {
        let (tr, te) = self.split_ratio;
        if !(tr >= 0.0 && te >= 0.0) || tr + te <= 0.0 {
            return Err(SynthError::InvalidSpec(format!(
                "bad split ratio {:?}",
                self.split_ratio
            )));
        }
        let n_test = (self.clips_per_class as f64 * te / (tr + te)).round() as usize;
        if n_test == 0 {
            return Err(SynthError::InvalidSpec(
                "split leaves a class with no test clips".into(),
            ));
        }
        if n_test > self.clips_per_class {
            return Err(SynthError::InvalidSpec("test split larger than class".into()));
        }
        Ok(n_test)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.classes.is_empty() {
            return Err(SynthError::InvalidSpec("no classes".into()));
        }
        if self.clips_per_class == 0 {
            return Err(SynthError::InvalidSpec("clips_per_class must be ≥ 1".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(SynthError::InvalidSpec("duration must be positive".into()));
        }
        for c in &self.classes {
            c.validate()?;
        }
        self.test_count()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One generated clip with its provenance.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub class_index: usize,
    pub clip_index: usize,
    pub seed: u64,
    pub split: Split,
    pub signal: Signal,
}

impl SynthClip {
    pub fn condition(&self) -> &FaultCondition {
        self.signal.meta.as_ref().expect("synthetic clips carry metadata")
    }

    pub fn file_name(&self) -> String {
        format!(
            "c{}_{}_{:05}.wav",
            self.class_index,
            self.condition().fault_type,
            self.clip_index
        )
    }
}

/// Mixes a dataset seed with a clip coordinate (splitmix64 finalizer).
pub fn derive_seed(seed: u64, class_index: usize, clip_index: usize) -> u64 {
    let mut z = seed
        ^ (class_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (clip_index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates every clip with a stratified train/test assignment.
pub fn generate_clips(spec: &DatasetSpec) -> Result<Vec<SynthClip>, SynthError> {
    spec.validate()?;
    let n_test = spec.test_count()?;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.clips_per_class);
    for (ci, cond) in spec.classes.iter().enumerate() {
        let mut order: Vec<usize> = (0..spec.clips_per_class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, ci, usize::MAX));
        order.shuffle(&mut rng);
        let mut is_test = vec![false; spec.clips_per_class];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        for k in 0..spec.clips_per_class {
            let seed = derive_seed(spec.seed, ci, k);
            let mut signal = synth_signal(cond, spec.duration_s, spec.fs_hz, seed)?;
            if let Some(snr) = spec.snr_db {
                signal = sigproc::add_noise_snr(&signal, snr, seed ^ 0x5eed)?;
            }
            out.push(SynthClip {
                class_index: ci,
                clip_index: k,
                seed,
                split: if is_test[k] { Split::Test } else { Split::Train },
                signal,
            });
        }
    }
    Ok(out)
}

/// Stratified `(train, test)` signals.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(Vec<Signal>, Vec<Signal>), SynthError> {
    let clips = generate_clips(spec)?;
    let (train, test): (Vec<_>, Vec<_>) = clips.into_iter().partition(|c| c.split == Split::Train);
    Ok((
        train.into_iter().map(|c| c.signal).collect(),
        test.into_iter().map(|c| c.signal).collect(),
    ))
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub fault_type: FaultType,
    pub severity_um: u32,
    pub speed_rpm: f64,
    pub load_n: f64,
    pub split: Split,
}

impl ManifestRecord {
    pub fn condition(&self) -> FaultCondition {
        FaultCondition {
            fault_type: self.fault_type,
            severity_um: self.severity_um,
            speed_rpm: self.speed_rpm,
            load_n: self.load_n,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Writes model-ready WAVs plus `manifest.jsonl` into `dir`.
pub fn write_dataset(
    spec: &DatasetSpec,
    dir: &Path,
    norm: Normalization,
) -> Result<Vec<ManifestRecord>, SynthError> {
    fs::create_dir_all(dir)?;
    let clips = generate_clips(spec)?;
    let mut records = Vec::with_capacity(clips.len());
    for clip in &clips {
        let wav = sigproc::prepare_signal(&clip.signal, norm)?;
        let name = clip.file_name();
        sigproc::write_wav(&wav, dir.join(&name))?;
        let c = clip.condition();
        records.push(ManifestRecord {
            path: name,
            fault_type: c.fault_type,
            severity_um: c.severity_um,
            speed_rpm: c.speed_rpm,
            load_n: c.load_n,
            split: clip.split,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SynthError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| SynthError::Manifest(e.to_string()))?;
        buf.push(b'\n');
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SynthError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SynthError::Manifest(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Resolves a manifest entry's path relative to the manifest's directory.
pub fn record_path(dir: &Path, rec: &ManifestRecord) -> PathBuf {
    let p = Path::new(&rec.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}
