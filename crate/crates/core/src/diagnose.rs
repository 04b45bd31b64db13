//! Greedy label generation and follow-up dialogue over one clip.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSet, DIAGNOSIS_QUESTION};
use crate::net::{Mat, MelFrontend, MelSpec, Model, NetError};
use crate::optim::{Checkpoint, CheckpointMeta};
use crate::sigproc::{prepare_clip, Normalization, SignalError, WavClip, MODEL_RATE_HZ};
use crate::textcodec::{build_dialogue_prompt, decode_lossy, CodecError, TokenId, EOS};

/// Default generation budget in tokens.
pub const DEFAULT_MAX_LEN: usize = 64;
/// Longer clips are cut to their first `DEFAULT_MAX_AUDIO_S` seconds so the
/// audio tokens leave room for dialogue text inside `max_seq`.
pub const DEFAULT_MAX_AUDIO_S: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DiagnoseError {
    #[error("model output {raw_text:?} matches no label")]
    UnparseableOutput { raw_text: String },
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Generated tokens, excluding the terminating EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub ids: Vec<TokenId>,
    pub text: String,
    /// True when generation stopped at `max_len` (or `max_seq`) without EOS.
    pub truncated: bool,
}

fn argmax(p: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        // strict comparison keeps the lowest id among ties
        if v > p[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding against any next-token distribution.
pub fn greedy_decode_with<F>(mut next: F, prompt: &[TokenId], max_len: usize, max_seq: usize) -> Result<Decoded, NetError>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f32>, NetError>,
{
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut truncated = true;
    while out.len() < max_len.max(1) && seq.len() < max_seq {
        let tok = argmax(&next(&seq)?);
        if tok == EOS {
            truncated = false;
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(Decoded {
        text: decode_lossy(&out),
        ids: out,
        truncated,
    })
}

pub fn greedy_decode(model: &Model<f32>, prompt: &[TokenId], audio: &Mat<f32>, max_len: usize) -> Result<Decoded, NetError> {
    greedy_decode_with(|s| model.forward_next_token(s, audio), prompt, max_len, model.cfg.max_seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Exact,
    Substring,
    Unparseable,
}

impl ParseStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseStatus::Exact => "exact",
            ParseStatus::Substring => "substring",
            ParseStatus::Unparseable => "unparseable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub raw_text: String,
    pub parsed_label: Option<String>,
    pub parse_status: ParseStatus,
    pub truncated: bool,
}

impl Diagnosis {
    pub fn require_label(&self) -> Result<&str, DiagnoseError> {
        self.parsed_label
            .as_deref()
            .ok_or_else(|| DiagnoseError::UnparseableOutput {
                raw_text: self.raw_text.clone(),
            })
    }
}

/// Exact match first; otherwise the longest label contained in the text
/// (case-insensitive), if that longest match is unique.
pub fn parse_label(raw: &str, labels: &LabelSet) -> (Option<String>, ParseStatus) {
    let trimmed = raw.trim();
    if let Some(e) = labels.entries.iter().find(|e| e.label == trimmed) {
        return (Some(e.label.clone()), ParseStatus::Exact);
    }
    let lower = trimmed.to_lowercase();
    let hits: Vec<&str> = labels
        .entries
        .iter()
        .map(|e| e.label.as_str())
        .filter(|l| lower.contains(&l.to_lowercase()))
        .collect();
    let longest = hits.iter().map(|l| l.len()).max().unwrap_or(0);
    let top: Vec<&&str> = hits.iter().filter(|l| l.len() == longest).collect();
    match top.as_slice() {
        [only] => (Some(only.to_string()), ParseStatus::Substring),
        _ => (None, ParseStatus::Unparseable),
    }
}

/// Log-mel features exactly as the model sees them at training and inference time.
pub fn clip_features(
    clip: &WavClip,
    norm: Normalization,
    frontend: &MelFrontend,
    max_audio_s: f64,
) -> Result<MelSpec, DiagnoseError> {
    let mut prepared = prepare_clip(clip, norm)?;
    let keep = (max_audio_s * f64::from(MODEL_RATE_HZ)).round() as usize;
    prepared.pcm.truncate(keep.max(1));
    Ok(frontend.compute(&prepared)?)
}

/// A clip's audio tokens plus the dialogue so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueSession {
    pub session_id: String,
    pub audio: Mat<f32>,
    /// Raw text of the initial diagnosis.
    pub label: String,
    pub history: Vec<(String, String)>,
}

impl DialogueSession {
    /// Exchanges the model conditions on: the diagnosis turn, then every follow-up.
    pub fn transcript(&self) -> Vec<(String, String)> {
        let mut t = vec![(DIAGNOSIS_QUESTION.to_string(), self.label.clone())];
        t.extend(self.history.iter().cloned());
        t
    }
}

/// A loaded checkpoint ready for inference. Immutable and shareable across threads.
#[derive(Debug)]
pub struct Engine {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    frontend: MelFrontend,
    pub max_len: usize,
    pub max_audio_s: f64,
}

impl Engine {
    pub fn new(ckpt: Checkpoint) -> Self {
        let frontend = MelFrontend::new(&ckpt.model.cfg, MODEL_RATE_HZ);
        Self {
            model: ckpt.model,
            meta: ckpt.meta,
            frontend,
            max_len: DEFAULT_MAX_LEN,
            max_audio_s: DEFAULT_MAX_AUDIO_S,
        }
    }

    pub fn labels(&self) -> &LabelSet {
        &self.meta.labels
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    /// Normalizes, resamples, crops and encodes a clip.
    pub fn encode_clip(&self, clip: &WavClip) -> Result<Mat<f32>, DiagnoseError> {
        let mel = clip_features(clip, self.meta.normalization, &self.frontend, self.max_audio_s)?;
        Ok(self.model.encode_audio(&mel)?)
    }

    /// Answers `question` given prior exchanges.
    pub fn answer(&self, audio: &Mat<f32>, history: &[(String, String)], question: &str) -> Result<Decoded, DiagnoseError> {
        let prompt = build_dialogue_prompt(audio.rows, history, question)?;
        Ok(greedy_decode(&self.model, &prompt.ids, audio, self.max_len)?)
    }

    pub fn diagnose_audio(&self, audio: &Mat<f32>) -> Result<Diagnosis, DiagnoseError> {
        let out = self.answer(audio, &[], DIAGNOSIS_QUESTION)?;
        let (parsed_label, parse_status) = parse_label(&out.text, self.labels());
        if parsed_label.is_none() {
            log::debug!("unparseable diagnosis {:?}", out.text);
        }
        Ok(Diagnosis {
            raw_text: out.text,
            parsed_label,
            parse_status,
            truncated: out.truncated,
        })
    }

    pub fn diagnose(&self, clip: &WavClip) -> Result<Diagnosis, DiagnoseError> {
        self.diagnose_audio(&self.encode_clip(clip)?)
    }

    /// Diagnoses a clip and opens a dialogue session on it.
    pub fn open_session(&self, session_id: impl Into<String>, clip: &WavClip) -> Result<(Diagnosis, DialogueSession), DiagnoseError> {
        let audio = self.encode_clip(clip)?;
        let d = self.diagnose_audio(&audio)?;
        let session = DialogueSession {
            session_id: session_id.into(),
            audio,
            label: d.raw_text.clone(),
            history: Vec::new(),
        };
        Ok((d, session))
    }

    /// Generates an answer conditioned on the audio, the diagnosis and the full
    /// history, then appends the exchange.
    pub fn follow_up(&self, session: &mut DialogueSession, question: &str) -> Result<String, DiagnoseError> {
        let out = self.answer(&session.audio, &session.transcript(), question)?;
        session.history.push((question.to_string(), out.text.clone()));
        Ok(out.text)
    }
}
