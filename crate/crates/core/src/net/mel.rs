//! Log-mel front end: Hann-windowed STFT, power spectrum, triangular HTK mel
//! filterbank over 0 Hz to Nyquist, `ln(x + 1e-6)`.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{ModelConfig, NetError};
use crate::sigproc::{WavClip, PCM_FULL_SCALE};

pub const LOG_FLOOR: f64 = 1e-6;

/// `frames × bins` log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
}

impl MelSpec {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels × (n_fft/2 + 1)` triangular filters between 0 Hz and `rate/2`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyq = f64::from(rate) / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyq));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = f64::from(rate) / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable front end for one sample rate.
pub struct MelFrontend {
    rate: u32,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend")
            .field("rate", &self.rate)
            .field("win", &self.win)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl MelFrontend {
    pub fn new(cfg: &ModelConfig, rate: u32) -> Self {
        let win = (f64::from(rate) * cfg.frame_ms / 1000.0).round() as usize;
        let hop = ((f64::from(rate) * cfg.hop_ms / 1000.0).round() as usize).max(1);
        let n_fft = win.next_power_of_two();
        // periodic Hann
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.mel_bins, n_fft, rate);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            rate,
            win,
            hop,
            n_fft,
            window,
            filters,
            fft,
        }
    }

    pub fn win(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.win {
            0
        } else {
            1 + (n - self.win) / self.hop
        }
    }

    pub fn compute(&self, clip: &WavClip) -> Result<MelSpec, NetError> {
        if clip.sample_rate_hz != self.rate {
            return Err(NetError::RateMismatch {
                expected: self.rate,
                got: clip.sample_rate_hz,
            });
        }
        let x: Vec<f64> = clip.pcm.iter().map(|&p| f64::from(p) / PCM_FULL_SCALE).collect();
        self.compute_samples(&x)
    }

    pub fn compute_samples(&self, x: &[f64]) -> Result<MelSpec, NetError> {
        let frames = self.frame_count(x.len());
        if frames == 0 {
            return Err(NetError::TooShort {
                samples: x.len(),
                needed: self.win,
            });
        }
        let bins = self.filters.len();
        let n_bins = self.n_fft / 2 + 1;
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; n_bins];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.win {
                    Complex::new(x[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                data.push((e + LOG_FLOOR).ln());
            }
        }
        Ok(MelSpec { frames, bins, data })
    }
}

/// One-shot log-mel spectrogram of a clip.
pub fn mel_frontend(clip: &WavClip, cfg: &ModelConfig) -> Result<MelSpec, NetError> {
    MelFrontend::new(cfg, clip.sample_rate_hz).compute(clip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn frame_count_one_second() {
        let clip = WavClip {
            pcm: vec![0; 16_000],
            sample_rate_hz: 16_000,
        };
        let m = mel_frontend(&clip, &cfg()).unwrap();
        assert_eq!(m.frames, 98);
        assert_eq!(m.bins, 40);
    }

    #[test]
    fn silence_is_log_floor() {
        let clip = WavClip {
            pcm: vec![0; 4000],
            sample_rate_hz: 16_000,
        };
        let m = mel_frontend(&clip, &cfg()).unwrap();
        assert!(m.data.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn too_short() {
        let clip = WavClip {
            pcm: vec![1; 399],
            sample_rate_hz: 16_000,
        };
        assert!(matches!(
            mel_frontend(&clip, &cfg()),
            Err(NetError::TooShort { samples: 399, needed: 400 })
        ));
    }

    #[test]
    fn tone_peaks_in_its_filter() {
        let fe = MelFrontend::new(&cfg(), 16_000);
        for hz in [300.0, 1000.0, 3000.0, 6500.0] {
            let x: Vec<f64> = (0..8000)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin())
                .collect();
            let m = fe.compute_samples(&x).unwrap();
            // filterbank oracle: the filter with the largest weight at the tone's FFT bin
            let bin = (hz * fe.n_fft() as f64 / 16_000.0).round() as usize;
            let want = (0..fe.filters().len())
                .max_by(|&a, &b| fe.filters()[a][bin].total_cmp(&fe.filters()[b][bin]))
                .unwrap();
            let frame = m.frame(m.frames / 2);
            let got = (0..m.bins).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
            assert_eq!(got, want, "{hz} Hz");
        }
    }
}
