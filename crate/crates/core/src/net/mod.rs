//! The model: log-mel front end, LoRA-adapted audio encoder, cross-modal
//! decoder, and the dense kernels underneath.

mod layers;
mod lora;
mod mel;
mod model;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{gelu, gelu_grad, log_softmax, positions, scaled_dot_attention, softmax_in_place, LayerNorm};
pub use lora::{layer_param_counts, lora_linear, AdapterGrad, Linear, LoraAdapter};
pub use mel::{hz_to_mel, mel_filterbank, mel_frontend, mel_to_hz, MelFrontend, MelSpec, LOG_FLOOR};
pub use model::{
    linear_shapes, standardize_mel, CrossAttention, DecoderBlock, EncoderBlock, EncoderTrace,
    FeedForward, Model, SelfAttention, TensorRole, TrainSeq,
};
pub use tensor::{dot, matmul, matmul_t, matmul_tn, Mat, Real};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("expected {expected} Hz audio, got {got} Hz")]
    RateMismatch { expected: u32, got: u32 },
    #[error("prompt has {slots} audio slots but the clip encodes to {audio_tokens} audio tokens")]
    SlotMismatch { slots: usize, audio_tokens: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training sequence has no target tokens")]
    EmptyTarget,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    pub mel_bins: usize,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub audio_downsample: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub adapter_init_std: f64,
    /// Seeds the frozen base weights and the adapter `A` matrices.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 128,
            mel_bins: 40,
            frame_ms: 25.0,
            hop_ms: 10.0,
            audio_downsample: 4,
            vocab_size: crate::textcodec::VOCAB_SIZE,
            max_seq: 512,
            lora_rank: 16,
            lora_alpha: 32.0,
            adapter_init_std: 0.02,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Head width for self-attention; also the single cross-attention head's width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.audio_downsample == 0 {
            return bad("audio_downsample must be at least 1");
        }
        if self.ff_dim == 0 || self.mel_bins == 0 {
            return bad("ff_dim and mel_bins must be positive");
        }
        if self.vocab_size < crate::textcodec::VOCAB_SIZE {
            return bad("vocab_size smaller than the tokenizer vocabulary");
        }
        if self.max_seq < 4 {
            return bad("max_seq too small");
        }
        if !(self.frame_ms > 0.0 && self.hop_ms > 0.0) {
            return bad("frame_ms and hop_ms must be positive");
        }
        if !(self.lora_alpha.is_finite() && self.adapter_init_std.is_finite()) {
            return bad("lora_alpha and adapter_init_std must be finite");
        }
        Ok(())
    }
}

/// `(trainable, frozen)` parameter totals for a config. Trainable counts only
/// adapter entries; frozen counts every base weight, embedding and norm gain/bias.
pub fn trainable_param_count(cfg: &ModelConfig) -> (usize, usize) {
    let r = cfg.lora_rank;
    let mut trainable = 0;
    let mut frozen = 0;
    for (_, d, k) in linear_shapes(cfg) {
        let (t, f) = layer_param_counts(d, k, r);
        trainable += t;
        frozen += f;
    }
    let norms = 2 * cfg.encoder_layers + 1 + 3 * cfg.decoder_layers + 1;
    frozen += norms * 2 * cfg.d_model;
    frozen += cfg.vocab_size * cfg.d_model;
    (trainable, frozen)
}
