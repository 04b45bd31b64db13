//! Byte-level tokenizer with a handful of control tokens.
//!
//! Ids 0–255 are raw bytes, so encoding never fails and needs no vocabulary
//! file. Control tokens sit above the byte range.

use std::collections::BTreeMap;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const AUDIO: TokenId = 259;
pub const USER: TokenId = 260;
pub const ASSISTANT: TokenId = 261;
pub const VOCAB_SIZE: usize = 262;

const SPECIALS: [(&str, TokenId); 6] = [
    ("<pad>", PAD),
    ("<bos>", BOS),
    ("<eos>", EOS),
    ("<audio>", AUDIO),
    ("<user>", USER),
    ("<assistant>", ASSISTANT),
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid prompt layout: {0}")]
    InvalidLayout(&'static str),
    #[error("token {id} at position {pos} cannot be decoded to text")]
    UnexpectedSpecial { id: TokenId, pos: usize },
    #[error("token id {0} outside the vocabulary")]
    OutOfVocab(TokenId),
}

/// `"abc"` → `[97, 98, 99]`.
pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`encode`]. A leading BOS and trailing EOS are stripped; any other
/// control token is an error. Invalid UTF-8 (possible from a model) is replaced
/// lossily.
pub fn decode(ids: &[TokenId]) -> Result<String, CodecError> {
    let mut body = ids;
    if body.first() == Some(&BOS) {
        body = &body[1..];
    }
    if body.last() == Some(&EOS) {
        body = &body[..body.len() - 1];
    }
    let mut bytes = Vec::with_capacity(body.len());
    for (pos, &id) in body.iter().enumerate() {
        match u8::try_from(id) {
            Ok(b) => bytes.push(b),
            Err(_) if (id as usize) < VOCAB_SIZE => {
                return Err(CodecError::UnexpectedSpecial { id, pos })
            }
            Err(_) => return Err(CodecError::OutOfVocab(id)),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Decodes generated output, keeping only byte tokens.
pub fn decode_lossy(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn is_special(id: TokenId) -> bool {
    (256..VOCAB_SIZE as TokenId).contains(&id)
}

/// Token table as serialized into checkpoints.
pub fn vocab_table() -> BTreeMap<String, TokenId> {
    let mut map: BTreeMap<String, TokenId> = (0..=255u32)
        .map(|b| (format!("<0x{b:02X}>"), b))
        .collect();
    for (name, id) in SPECIALS {
        map.insert(name.to_string(), id);
    }
    map
}

/// Checks that a stored table matches this codec.
pub fn vocab_matches(table: &BTreeMap<String, TokenId>) -> bool {
    *table == vocab_table()
}

/// A tokenized dialogue prompt and where the model's answer begins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub ids: Vec<TokenId>,
    /// Index of the final ASSISTANT token; the answer is predicted from here on.
    pub assistant_pos: usize,
}

impl Prompt {
    pub fn audio_slots(&self) -> usize {
        self.ids.iter().filter(|&&t| t == AUDIO).count()
    }

    /// Appends a training target and the closing EOS.
    pub fn with_target(mut self, target: &str) -> Vec<TokenId> {
        self.ids.extend(encode(target));
        self.ids.push(EOS);
        self.ids
    }
}

/// `BOS, AUDIO×n, USER, question, ASSISTANT`.
pub fn build_prompt(question: &str, n_audio_tokens: usize) -> Result<Prompt, CodecError> {
    build_dialogue_prompt(n_audio_tokens, &[], question)
}

/// `BOS, AUDIO×n, (USER q ASSISTANT r)*, USER question, ASSISTANT`.
///
/// `history` holds earlier exchanges in order; no EOS separates turns.
pub fn build_dialogue_prompt(
    n_audio_tokens: usize,
    history: &[(String, String)],
    question: &str,
) -> Result<Prompt, CodecError> {
    if n_audio_tokens == 0 {
        return Err(CodecError::InvalidLayout("at least one audio token is required"));
    }
    let mut ids = Vec::with_capacity(n_audio_tokens + 64);
    ids.push(BOS);
    ids.extend(std::iter::repeat_n(AUDIO, n_audio_tokens));
    for (q, r) in history {
        ids.push(USER);
        ids.extend(encode(q));
        ids.push(ASSISTANT);
        ids.extend(encode(r));
    }
    ids.push(USER);
    ids.extend(encode(question));
    let assistant_pos = ids.len();
    ids.push(ASSISTANT);
    Ok(Prompt { ids, assistant_pos })
}
