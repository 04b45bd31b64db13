use super::{Signal, SignalError};

const TAPS: usize = 64;
const HALF: f64 = (TAPS / 2) as f64;
const KAISER_BETA: f64 = 8.0;
/// Passband edge as a fraction of the lower of the two Nyquist rates.
const ROLLOFF: f64 = 0.96;
/// Above this many phases the kernel is evaluated per output sample instead of tabulated.
const MAX_TABLE_PHASES: u64 = 4096;

/// Polyphase windowed-sinc resampler (Kaiser window, 64 taps per phase).
///
/// Output length is `round(len · target / source)`. Equal rates return the input unchanged.
pub fn resample(sig: &Signal, target_hz: i64) -> Result<Signal, SignalError> {
    if target_hz <= 0 {
        return Err(SignalError::NonPositiveRate(target_hz));
    }
    if sig.sample_rate_hz == 0 {
        return Err(SignalError::NonPositiveRate(0));
    }
    let target = target_hz as u64;
    let source = u64::from(sig.sample_rate_hz);
    let target_u32 = u32::try_from(target)
        .map_err(|_| SignalError::InvalidSignal(format!("target rate {target} out of range")))?;
    if target == source {
        return Ok(sig.clone());
    }

    let g = gcd(target, source);
    let up = target / g;
    let down = source / g;
    let n_in = sig.samples.len() as u128;
    let n_out = ((n_in * u128::from(target) + u128::from(source) / 2) / u128::from(source)) as usize;
    let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);

    let table = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| phase_taps(p as f64 / up as f64, cutoff))
            .collect::<Vec<_>>()
    });

    let x = &sig.samples;
    let mut out = Vec::with_capacity(n_out);
    let mut scratch;
    for n in 0..n_out as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let phase = pos % up;
        let taps: &[f64; TAPS] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                scratch = phase_taps(phase as f64 / up as f64, cutoff);
                &scratch
            }
        };
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let i = base - (TAPS as i64 / 2 - 1) + j as i64;
            if i >= 0 && (i as usize) < x.len() {
                acc += h * x[i as usize];
            }
        }
        out.push(acc);
    }

    Ok(Signal {
        samples: out,
        sample_rate_hz: target_u32,
        meta: sig.meta.clone(),
    })
}

/// Taps for a fractional offset `frac ∈ [0, 1)`, normalized to unit DC gain.
fn phase_taps(frac: f64, cutoff: f64) -> [f64; TAPS] {
    let mut taps = [0.0; TAPS];
    for (j, tap) in taps.iter_mut().enumerate() {
        // distance from the output instant to input sample j
        let d = frac + (TAPS / 2 - 1) as f64 - j as f64;
        *tap = cutoff * sinc(cutoff * d) * kaiser(d / HALF);
    }
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kaiser(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / bessel_i0(KAISER_BETA)
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= half_sq / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, n: usize) -> Signal {
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin())
            .collect();
        Signal::new(s, rate).unwrap()
    }

    #[test]
    fn identity_when_rates_match() {
        let s = tone(440.0, 16_000, 1000);
        assert_eq!(resample(&s, 16_000).unwrap(), s);
    }

    #[test]
    fn length_scaling() {
        let s = tone(1000.0, 8000, 8000);
        let r = resample(&s, 16_000).unwrap();
        assert_eq!(r.samples.len(), 16_000);
        assert_eq!(r.sample_rate_hz, 16_000);

        let s = tone(1000.0, 51_200, 20480);
        assert_eq!(resample(&s, 16_000).unwrap().samples.len(), 6400);
        let s = tone(1000.0, 25_000, 20480);
        assert_eq!(resample(&s, 16_000).unwrap().samples.len(), 13107);
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let s = tone(1.0, 100, 10);
        assert!(matches!(resample(&s, 0), Err(SignalError::NonPositiveRate(0))));
        assert!(matches!(resample(&s, -5), Err(SignalError::NonPositiveRate(-5))));
    }

    #[test]
    fn upsampled_tone_keeps_amplitude() {
        let s = tone(1000.0, 8000, 4000);
        let r = resample(&s, 16_000).unwrap();
        // away from the edges the interpolant follows the analytic tone
        for i in 200..7800 {
            let want = (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin();
            assert!((r.samples[i] - want).abs() < 2e-3, "i={i}");
        }
    }

    #[test]
    fn downsampling_rejects_out_of_band_tone() {
        // 12 kHz at 48 kHz folds to 4 kHz at 16 kHz if not filtered
        let s = tone(12_000.0, 48_000, 48_000);
        let r = resample(&s, 16_000).unwrap();
        let mid = &r.samples[1000..15000];
        let rms = (mid.iter().map(|x| x * x).sum::<f64>() / mid.len() as f64).sqrt();
        assert!(rms < 1e-3, "alias rms {rms}");
    }

    #[test]
    fn untabulated_phases_agree_with_direct_evaluation() {
        // 16001 phases exceeds the table limit
        let s = tone(500.0, 16_000, 1600);
        let r = resample(&s, 16_001).unwrap();
        assert_eq!(r.samples.len(), 1600);
        let want = (2.0 * std::f64::consts::PI * 500.0 * 800.0 / 16_001.0).sin();
        assert!((r.samples[800] - want).abs() < 2e-3);
    }
}
