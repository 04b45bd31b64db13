//! Vibration segment to model-ready audio clip conversion.
//!
//! A raw segment goes through resampling to the model rate, amplitude
//! normalization (peak or statistical), and symmetric PCM16 quantization.
//! Every operation here is a pure function of its inputs.

mod resample;
mod wav;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::FaultCondition;

pub use resample::resample;
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

/// Sample rate the audio encoder expects.
pub const MODEL_RATE_HZ: u32 = 16_000;

/// Full-scale PCM16 magnitude. The mapping is symmetric, `-32768` is never produced.
pub const PCM_FULL_SCALE: f64 = 32767.0;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("sample rate must be positive, got {0}")]
    NonPositiveRate(i64),
    #[error("degenerate signal: {0}")]
    DegenerateSignal(&'static str),
    #[error("invalid signal: {0}")]
    InvalidSignal(String),
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// A real-valued vibration waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<FaultCondition>,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, SignalError> {
        let sig = Self {
            samples,
            sample_rate_hz,
            meta: None,
        };
        sig.validate()?;
        Ok(sig)
    }

    pub fn with_meta(mut self, meta: FaultCondition) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn validate(&self) -> Result<(), SignalError> {
        if self.sample_rate_hz == 0 {
            return Err(SignalError::NonPositiveRate(0));
        }
        if self.samples.is_empty() {
            return Err(SignalError::InvalidSignal("empty signal".into()));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(SignalError::InvalidSignal(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    /// Mean power, `Σx² / N`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Mean and population standard deviation.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        let var = self
            .samples
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Signal {
        Signal {
            samples: self.samples.iter().map(|&x| f(x)).collect(),
            sample_rate_hz: self.sample_rate_hz,
            meta: self.meta.clone(),
        }
    }
}

/// Mono PCM16 audio as stored in WAV files and consumed by the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WavClip {
    pub pcm: Vec<i16>,
    pub sample_rate_hz: u32,
}

impl WavClip {
    pub fn channels(&self) -> u16 {
        1
    }

    pub fn duration_s(&self) -> f64 {
        self.pcm.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// `β·(x − μ)/σ + α` with population σ.
pub fn normalize_stat(sig: &Signal, alpha: f64, beta: f64) -> Result<Signal, SignalError> {
    let (mean, std) = sig.mean_std();
    if std == 0.0 || !std.is_finite() {
        return Err(SignalError::DegenerateSignal("zero standard deviation"));
    }
    Ok(sig.map(|x| beta * (x - mean) / std + alpha))
}

/// Scales so that `max |x| = 1` exactly.
pub fn normalize_peak(sig: &Signal) -> Result<Signal, SignalError> {
    let peak = sig.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(SignalError::DegenerateSignal("all-zero signal"));
    }
    // IEEE division makes peak / peak exactly 1.0.
    Ok(sig.map(|x| x / peak))
}

/// `x ↦ round(x·32767)` after clamping to `[-1, 1]`.
pub fn quantize_pcm16(sig: &Signal) -> WavClip {
    let pcm = sig
        .samples
        .iter()
        .map(|&x| (x.clamp(-1.0, 1.0) * PCM_FULL_SCALE).round() as i16)
        .collect();
    WavClip {
        pcm,
        sample_rate_hz: sig.sample_rate_hz,
    }
}

/// `p ↦ p / 32767`.
pub fn dequantize_pcm16(clip: &WavClip) -> Signal {
    Signal {
        samples: clip
            .pcm
            .iter()
            .map(|&p| f64::from(p) / PCM_FULL_SCALE)
            .collect(),
        sample_rate_hz: clip.sample_rate_hz,
        meta: None,
    }
}

/// Adds zero-mean white Gaussian noise at the requested SNR (dB).
///
/// `snr_db = +∞` returns the signal unchanged.
pub fn add_noise_snr(sig: &Signal, snr_db: f64, seed: u64) -> Result<Signal, SignalError> {
    if snr_db == f64::INFINITY {
        return Ok(sig.clone());
    }
    if snr_db.is_nan() {
        return Err(SignalError::InvalidSignal("snr_db is NaN".into()));
    }
    let p_signal = sig.power();
    if p_signal == 0.0 {
        return Err(SignalError::DegenerateSignal("zero signal power"));
    }
    let p_noise = p_signal / 10f64.powf(snr_db / 10.0);
    let normal = Normal::new(0.0, p_noise.sqrt())
        .map_err(|e| SignalError::InvalidSignal(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sig
        .samples
        .iter()
        .map(|&x| x + normal.sample(&mut rng))
        .collect();
    Ok(Signal {
        samples,
        sample_rate_hz: sig.sample_rate_hz,
        meta: sig.meta.clone(),
    })
}

/// Sliding-window segmentation; trailing samples that do not fill a window are dropped.
pub fn segment(sig: &Signal, length: usize, hop: usize) -> Vec<Signal> {
    let n = sig.samples.len();
    if length == 0 || hop == 0 || n < length {
        return Vec::new();
    }
    let count = 1 + (n - length) / hop;
    (0..count)
        .map(|i| Signal {
            samples: sig.samples[i * hop..i * hop + length].to_vec(),
            sample_rate_hz: sig.sample_rate_hz,
            meta: sig.meta.clone(),
        })
        .collect()
}

/// Amplitude normalization applied before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalization {
    /// Linear scaling to `[-1, 1]`.
    Peak,
    /// `β·(x − μ)/σ + α`, then clamped to `[-1, 1]`.
    Stat { alpha: f64, beta: f64 },
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization::Peak
    }
}

impl Normalization {
    pub fn stat_default() -> Self {
        Normalization::Stat {
            alpha: 0.0,
            beta: 0.25,
        }
    }
}

/// Resample, normalize and quantize a raw segment into a model-rate clip.
pub fn prepare_signal(sig: &Signal, norm: Normalization) -> Result<WavClip, SignalError> {
    let resampled = resample(sig, i64::from(MODEL_RATE_HZ))?;
    let normalized = match norm {
        Normalization::Peak => normalize_peak(&resampled)?,
        Normalization::Stat { alpha, beta } => normalize_stat(&resampled, alpha, beta)?,
    };
    Ok(quantize_pcm16(&normalized))
}

/// Brings an arbitrary clip into the form the encoder was trained on.
///
/// Silent clips are passed through unnormalized instead of failing.
pub fn prepare_clip(clip: &WavClip, norm: Normalization) -> Result<WavClip, SignalError> {
    let sig = dequantize_pcm16(clip);
    match prepare_signal(&sig, norm) {
        Ok(c) => Ok(c),
        Err(SignalError::DegenerateSignal(_)) => {
            Ok(quantize_pcm16(&resample(&sig, i64::from(MODEL_RATE_HZ))?))
        }
        Err(e) => Err(e),
    }
}
