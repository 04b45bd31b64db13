//! Minimal RIFF/WAVE PCM16 mono codec.
//!
//! Writing always produces the canonical 44-byte header. Reading accepts any
//! chunk order and skips unknown chunks, but only PCM16 mono is valid.

use std::fs;
use std::path::Path;

use super::{SignalError, WavClip};

const HEADER_LEN: usize = 44;

pub fn encode_wav(clip: &WavClip) -> Vec<u8> {
    let data_len = (clip.pcm.len() * 2) as u32;
    let mut out = Vec::with_capacity(HEADER_LEN + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in &clip.pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn decode_wav(bytes: &[u8]) -> Result<WavClip, SignalError> {
    let bad = |m: &str| SignalError::MalformedWav(m.to_string());
    if bytes.len() < 12 {
        return Err(bad("file shorter than RIFF header"));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(bad("missing RIFF magic"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(bad("missing WAVE form type"));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("chunk extends past end of file"))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let le16 = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
                let format = le16(0);
                let channels = le16(2);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = le16(14);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // chunks are word aligned
        pos = body_end + (len & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if format != 1 {
        return Err(SignalError::MalformedWav(format!(
            "audio format {format} is not PCM"
        )));
    }
    if channels != 1 {
        return Err(SignalError::MalformedWav(format!(
            "{channels} channels, only mono is supported"
        )));
    }
    if bits != 16 {
        return Err(SignalError::MalformedWav(format!(
            "{bits} bits per sample, only 16 is supported"
        )));
    }
    if rate == 0 {
        return Err(bad("zero sample rate"));
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if data.len() % 2 != 0 {
        return Err(bad("odd data length"));
    }
    let pcm = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(WavClip {
        pcm,
        sample_rate_hz: rate,
    })
}

pub fn write_wav(clip: &WavClip, path: impl AsRef<Path>) -> Result<(), SignalError> {
    fs::write(path, encode_wav(clip))?;
    Ok(())
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<WavClip, SignalError> {
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}
