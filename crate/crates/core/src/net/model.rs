//! Audio encoder and text decoder with LoRA on every linear layer.
//!
//! Encoder: standardized log-mel frames → adapted projection to `d_model` →
//! sinusoidal positions → pre-norm transformer blocks → final norm → mean pool
//! over `audio_downsample` frames. Each pooled row is one audio token.
//!
//! Decoder: token embeddings with AUDIO slots overwritten by audio tokens →
//! positions → pre-norm blocks of causal self-attention, single-head
//! cross-attention onto the audio tokens, and a GELU feed-forward → final norm
//! → adapted vocabulary head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::{
    attention, attention_backward, gelu, gelu_grad, log_softmax, positions, softmax_in_place,
    AttnCache, LayerNorm, LnCache,
};
use super::lora::{AdapterGrad, Linear, LinearCache, LoraAdapter};
use super::mel::MelSpec;
use super::tensor::{Mat, Real};
use super::{ModelConfig, NetError};
use crate::textcodec::{TokenId, AUDIO};

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention<T> {
    /// `d_model → d_k`
    pub q: Linear<T>,
    /// `d_model → d_k`
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub cross: CrossAttention<T>,
    pub ln3: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Frozen base weights plus one adapter per linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub mel_proj: Linear<T>,
    pub encoder: Vec<EncoderBlock<T>>,
    pub enc_norm: LayerNorm<T>,
    /// `vocab × d_model`
    pub tok_embed: Mat<T>,
    pub decoder: Vec<DecoderBlock<T>>,
    pub dec_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

/// Whether a tensor belongs to the frozen base or to an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Base,
    LoraA,
    LoraB,
}

/// `(name, d_out, d_in)` of every adapted linear layer in slot order.
pub fn linear_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let dk = cfg.d_k();
    let mut v = vec![("enc.mel_proj".to_string(), d, cfg.mel_bins)];
    for l in 0..cfg.encoder_layers {
        for p in ["q", "k", "v", "o"] {
            v.push((format!("enc.{l}.attn.{p}"), d, d));
        }
        v.push((format!("enc.{l}.ffn.up"), cfg.ff_dim, d));
        v.push((format!("enc.{l}.ffn.down"), d, cfg.ff_dim));
    }
    for l in 0..cfg.decoder_layers {
        for p in ["q", "k", "v", "o"] {
            v.push((format!("dec.{l}.attn.{p}"), d, d));
        }
        v.push((format!("dec.{l}.cross.q"), dk, d));
        v.push((format!("dec.{l}.cross.k"), dk, d));
        v.push((format!("dec.{l}.cross.v"), d, d));
        v.push((format!("dec.{l}.cross.o"), d, d));
        v.push((format!("dec.{l}.ffn.up"), cfg.ff_dim, d));
        v.push((format!("dec.{l}.ffn.down"), d, cfg.ff_dim));
    }
    v.push(("dec.head".to_string(), cfg.vocab_size, d));
    v
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: ChaCha8Rng,
    slot: usize,
}

impl Builder<'_> {
    fn linear<T: Real>(&mut self, name: String, d_out: usize, d_in: usize) -> Linear<T> {
        let std = 1.0 / (d_in as f64).sqrt();
        let rng = &mut self.rng;
        let w0 = Mat::from_fn(d_out, d_in, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        });
        let lora = Some(LoraAdapter::init(
            self.cfg.lora_rank,
            d_in,
            d_out,
            self.cfg.lora_alpha,
            self.cfg.adapter_init_std,
            &mut self.rng,
        ));
        let slot = self.slot;
        self.slot += 1;
        Linear {
            name,
            w0,
            lora,
            slot,
        }
    }

    fn self_attn<T: Real>(&mut self, prefix: &str) -> SelfAttention<T> {
        let d = self.cfg.d_model;
        SelfAttention {
            q: self.linear(format!("{prefix}.attn.q"), d, d),
            k: self.linear(format!("{prefix}.attn.k"), d, d),
            v: self.linear(format!("{prefix}.attn.v"), d, d),
            o: self.linear(format!("{prefix}.attn.o"), d, d),
        }
    }

    fn ffn<T: Real>(&mut self, prefix: &str) -> FeedForward<T> {
        let (d, f) = (self.cfg.d_model, self.cfg.ff_dim);
        FeedForward {
            up: self.linear(format!("{prefix}.ffn.up"), f, d),
            down: self.linear(format!("{prefix}.ffn.down"), d, f),
        }
    }
}

impl<T: Real> SelfAttention<T> {
    fn cast<U: Real>(&self) -> SelfAttention<U> {
        SelfAttention {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
        }
    }
}

impl<T: Real> CrossAttention<T> {
    fn cast<U: Real>(&self) -> CrossAttention<U> {
        CrossAttention {
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            o: self.o.cast(),
        }
    }
}

impl<T: Real> FeedForward<T> {
    fn cast<U: Real>(&self) -> FeedForward<U> {
        FeedForward {
            up: self.up.cast(),
            down: self.down.cast(),
        }
    }
}

struct SelfAttnCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    cq: LinearCache<T>,
    ck: LinearCache<T>,
    cv: LinearCache<T>,
    co: LinearCache<T>,
    attn: AttnCache<T>,
}

struct CrossCache<T> {
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    cq: LinearCache<T>,
    ck: LinearCache<T>,
    cv: LinearCache<T>,
    co: LinearCache<T>,
    attn: AttnCache<T>,
}

struct FfnCache<T> {
    pre: Mat<T>,
    cu: LinearCache<T>,
    cd: LinearCache<T>,
}

struct EncBlockCache<T> {
    ln1: LnCache<T>,
    attn: SelfAttnCache<T>,
    ln2: LnCache<T>,
    ffn: FfnCache<T>,
}

struct DecBlockCache<T> {
    ln1: LnCache<T>,
    attn: SelfAttnCache<T>,
    ln2: LnCache<T>,
    cross: CrossCache<T>,
    ln3: LnCache<T>,
    ffn: FfnCache<T>,
}

/// Intermediate state of a training forward pass through the encoder.
pub struct EncoderTrace<T> {
    frames: usize,
    proj: LinearCache<T>,
    blocks: Vec<EncBlockCache<T>>,
    norm: LnCache<T>,
}

impl<T: Real> SelfAttention<T> {
    fn forward(&self, x: &Mat<T>, heads: usize, causal: bool) -> Mat<T> {
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let (ctx, _) = attention(&q, &k, &v, heads, causal);
        self.o.forward(&ctx)
    }

    fn forward_train(&self, x: &Mat<T>, heads: usize, causal: bool) -> (Mat<T>, SelfAttnCache<T>) {
        let (q, cq) = self.q.forward_train(x);
        let (k, ck) = self.k.forward_train(x);
        let (v, cv) = self.v.forward_train(x);
        let (ctx, attn) = attention(&q, &k, &v, heads, causal);
        let (out, co) = self.o.forward_train(&ctx);
        (
            out,
            SelfAttnCache {
                q,
                k,
                v,
                cq,
                ck,
                cv,
                co,
                attn,
            },
        )
    }

    fn backward(
        &self,
        c: &SelfAttnCache<T>,
        dout: &Mat<T>,
        heads: usize,
        causal: bool,
        grads: &mut [AdapterGrad<T>],
    ) -> Mat<T> {
        let dctx = self.o.backward(&c.co, dout, grads);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, heads, causal, &c.attn, &dctx);
        let mut dx = self.q.backward(&c.cq, &dq, grads);
        dx.add_assign(&self.k.backward(&c.ck, &dk, grads));
        dx.add_assign(&self.v.backward(&c.cv, &dv, grads));
        dx
    }
}

impl<T: Real> CrossAttention<T> {
    /// Text rows attend to audio rows. Returns `(output, weights)`.
    pub fn forward(&self, text: &Mat<T>, audio: &Mat<T>) -> (Mat<T>, Mat<T>) {
        let q = self.q.forward(text);
        let k = self.k.forward(audio);
        let v = self.v.forward(audio);
        let (ctx, mut cache) = attention(&q, &k, &v, 1, false);
        (self.o.forward(&ctx), cache.probs.remove(0))
    }

    fn forward_train(&self, text: &Mat<T>, audio: &Mat<T>) -> (Mat<T>, CrossCache<T>) {
        let (q, cq) = self.q.forward_train(text);
        let (k, ck) = self.k.forward_train(audio);
        let (v, cv) = self.v.forward_train(audio);
        let (ctx, attn) = attention(&q, &k, &v, 1, false);
        let (out, co) = self.o.forward_train(&ctx);
        (
            out,
            CrossCache {
                q,
                k,
                v,
                cq,
                ck,
                cv,
                co,
                attn,
            },
        )
    }

    /// Returns `(d_text, d_audio)`.
    fn backward(
        &self,
        c: &CrossCache<T>,
        dout: &Mat<T>,
        grads: &mut [AdapterGrad<T>],
    ) -> (Mat<T>, Mat<T>) {
        let dctx = self.o.backward(&c.co, dout, grads);
        let (dq, dk, dv) = attention_backward(&c.q, &c.k, &c.v, 1, false, &c.attn, &dctx);
        let dtext = self.q.backward(&c.cq, &dq, grads);
        let mut daudio = self.k.backward(&c.ck, &dk, grads);
        daudio.add_assign(&self.v.backward(&c.cv, &dv, grads));
        (dtext, daudio)
    }
}

impl<T: Real> FeedForward<T> {
    fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut h = self.up.forward(x);
        for v in h.data.iter_mut() {
            *v = gelu(*v);
        }
        self.down.forward(&h)
    }

    fn forward_train(&self, x: &Mat<T>) -> (Mat<T>, FfnCache<T>) {
        let (pre, cu) = self.up.forward_train(x);
        let mut act = pre.clone();
        for v in act.data.iter_mut() {
            *v = gelu(*v);
        }
        let (out, cd) = self.down.forward_train(&act);
        (out, FfnCache { pre, cu, cd })
    }

    fn backward(&self, c: &FfnCache<T>, dout: &Mat<T>, grads: &mut [AdapterGrad<T>]) -> Mat<T> {
        let mut dact = self.down.backward(&c.cd, dout, grads);
        for (d, &p) in dact.data.iter_mut().zip(&c.pre.data) {
            *d *= gelu_grad(p);
        }
        self.up.backward(&c.cu, &dact, grads)
    }
}

/// Mean-pools consecutive groups of `k` rows; the last group may be short.
fn pool_rows<T: Real>(x: &Mat<T>, k: usize) -> Mat<T> {
    let groups = x.rows.div_ceil(k);
    let mut out = Mat::zeros(groups, x.cols);
    for g in 0..groups {
        let (s, e) = (g * k, ((g + 1) * k).min(x.rows));
        let inv = T::one() / T::lit((e - s) as f64);
        let orow = out.row_mut(g);
        for r in s..e {
            for (o, &v) in orow.iter_mut().zip(x.row(r)) {
                *o += v * inv;
            }
        }
    }
    out
}

fn unpool_rows<T: Real>(d: &Mat<T>, k: usize, rows: usize) -> Mat<T> {
    let mut out = Mat::zeros(rows, d.cols);
    for g in 0..d.rows {
        let (s, e) = (g * k, ((g + 1) * k).min(rows));
        let inv = T::one() / T::lit((e - s) as f64);
        for r in s..e {
            for (o, &v) in out.row_mut(r).iter_mut().zip(d.row(g)) {
                *o = v * inv;
            }
        }
    }
    out
}

/// Per-clip standardization of the log-mel matrix (one mean and std for the clip).
pub fn standardize_mel<T: Real>(mel: &MelSpec) -> Mat<T> {
    let n = mel.data.len() as f64;
    let mean = mel.data.iter().sum::<f64>() / n;
    let var = mel.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let inv = if std > 1e-9 { 1.0 / std } else { 0.0 };
    Mat::from_vec(
        mel.frames,
        mel.bins,
        mel.data.iter().map(|v| T::lit((v - mean) * inv)).collect(),
    )
}

/// One supervised sequence: full token ids (ending in EOS) and the index of
/// the first target token. Loss covers `tokens[target_start..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSeq {
    pub tokens: Vec<TokenId>,
    pub target_start: usize,
}

impl TrainSeq {
    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.target_start
    }
}

impl<T: Real> Model<T> {
    /// Random base weights and fresh adapters, fully determined by `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            slot: 0,
        };
        let d = cfg.d_model;
        let dk = cfg.d_k();
        let mel_proj = b.linear("enc.mel_proj".into(), d, cfg.mel_bins);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                EncoderBlock {
                    ln1: LayerNorm::new(format!("{p}.ln1"), d),
                    attn: b.self_attn(&p),
                    ln2: LayerNorm::new(format!("{p}.ln2"), d),
                    ffn: b.ffn(&p),
                }
            })
            .collect();
        let enc_norm = LayerNorm::new("enc.norm", d);
        let decoder = (0..cfg.decoder_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                let ln1 = LayerNorm::new(format!("{p}.ln1"), d);
                let attn = b.self_attn(&p);
                let ln2 = LayerNorm::new(format!("{p}.ln2"), d);
                let cross = CrossAttention {
                    q: b.linear(format!("{p}.cross.q"), dk, d),
                    k: b.linear(format!("{p}.cross.k"), dk, d),
                    v: b.linear(format!("{p}.cross.v"), d, d),
                    o: b.linear(format!("{p}.cross.o"), d, d),
                };
                let ln3 = LayerNorm::new(format!("{p}.ln3"), d);
                let ffn = b.ffn(&p);
                DecoderBlock {
                    ln1,
                    attn,
                    ln2,
                    cross,
                    ln3,
                    ffn,
                }
            })
            .collect();
        let dec_norm = LayerNorm::new("dec.norm", d);
        let head = b.linear("dec.head".into(), cfg.vocab_size, d);
        let rng = &mut b.rng;
        let tok_embed = Mat::from_fn(cfg.vocab_size, d, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z)
        });
        Ok(Self {
            cfg: cfg.clone(),
            mel_proj,
            encoder,
            enc_norm,
            tok_embed,
            decoder,
            dec_norm,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            mel_proj: self.mel_proj.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|b| EncoderBlock {
                    ln1: b.ln1.cast(),
                    attn: b.attn.cast(),
                    ln2: b.ln2.cast(),
                    ffn: b.ffn.cast(),
                })
                .collect(),
            enc_norm: self.enc_norm.cast(),
            tok_embed: self.tok_embed.cast(),
            decoder: self
                .decoder
                .iter()
                .map(|b| DecoderBlock {
                    ln1: b.ln1.cast(),
                    attn: b.attn.cast(),
                    ln2: b.ln2.cast(),
                    cross: b.cross.cast(),
                    ln3: b.ln3.cast(),
                    ffn: b.ffn.cast(),
                })
                .collect(),
            dec_norm: self.dec_norm.cast(),
            head: self.head.cast(),
        }
    }

    /// Same base weights with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut m = self.clone();
        for l in m.linears_mut() {
            l.lora = None;
        }
        m
    }

    /// Adapted linear layers in slot order.
    pub fn linears(&self) -> Vec<&Linear<T>> {
        let mut v = vec![&self.mel_proj];
        for b in &self.encoder {
            v.extend([&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.up, &b.ffn.down]);
        }
        for b in &self.decoder {
            v.extend([
                &b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.cross.q, &b.cross.k, &b.cross.v,
                &b.cross.o, &b.ffn.up, &b.ffn.down,
            ]);
        }
        v.push(&self.head);
        v
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear<T>> {
        let mut v = vec![&mut self.mel_proj];
        for b in &mut self.encoder {
            v.extend([
                &mut b.attn.q,
                &mut b.attn.k,
                &mut b.attn.v,
                &mut b.attn.o,
                &mut b.ffn.up,
                &mut b.ffn.down,
            ]);
        }
        for b in &mut self.decoder {
            v.extend([
                &mut b.attn.q,
                &mut b.attn.k,
                &mut b.attn.v,
                &mut b.attn.o,
                &mut b.cross.q,
                &mut b.cross.k,
                &mut b.cross.v,
                &mut b.cross.o,
                &mut b.ffn.up,
                &mut b.ffn.down,
            ]);
        }
        v.push(&mut self.head);
        v
    }

    /// Every tensor with a stable name, base tensors and adapters alike.
    pub fn tensors_mut(&mut self) -> Vec<(String, TensorRole, &mut Mat<T>)> {
        fn lin<'a, T>(out: &mut Vec<(String, TensorRole, &'a mut Mat<T>)>, l: &'a mut Linear<T>) {
            out.push((format!("{}.w0", l.name), TensorRole::Base, &mut l.w0));
            if let Some(ad) = l.lora.as_mut() {
                out.push((format!("{}.lora_a", l.name), TensorRole::LoraA, &mut ad.a));
                out.push((format!("{}.lora_b", l.name), TensorRole::LoraB, &mut ad.b));
            }
        }
        fn ln<'a, T>(out: &mut Vec<(String, TensorRole, &'a mut Mat<T>)>, n: &'a mut LayerNorm<T>) {
            out.push((format!("{}.gamma", n.name), TensorRole::Base, &mut n.gamma));
            out.push((format!("{}.beta", n.name), TensorRole::Base, &mut n.beta));
        }
        let Model {
            mel_proj,
            encoder,
            enc_norm,
            tok_embed,
            decoder,
            dec_norm,
            head,
            ..
        } = self;
        let mut out = Vec::new();
        lin(&mut out, mel_proj);
        for b in encoder.iter_mut() {
            ln(&mut out, &mut b.ln1);
            let a = &mut b.attn;
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                lin(&mut out, l);
            }
            ln(&mut out, &mut b.ln2);
            lin(&mut out, &mut b.ffn.up);
            lin(&mut out, &mut b.ffn.down);
        }
        ln(&mut out, enc_norm);
        out.push(("tok_embed".to_string(), TensorRole::Base, tok_embed));
        for b in decoder.iter_mut() {
            ln(&mut out, &mut b.ln1);
            let a = &mut b.attn;
            for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
                lin(&mut out, l);
            }
            ln(&mut out, &mut b.ln2);
            let c = &mut b.cross;
            for l in [&mut c.q, &mut c.k, &mut c.v, &mut c.o] {
                lin(&mut out, l);
            }
            ln(&mut out, &mut b.ln3);
            lin(&mut out, &mut b.ffn.up);
            lin(&mut out, &mut b.ffn.down);
        }
        ln(&mut out, dec_norm);
        lin(&mut out, head);
        out
    }

    /// Immutable view of [`Model::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, TensorRole, Mat<T>)> {
        let mut copy = self.clone();
        copy.tensors_mut()
            .into_iter()
            .map(|(n, r, m)| (n, r, m.clone()))
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<AdapterGrad<T>> {
        self.linears().iter().map(|l| l.zero_grad()).collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.linears()
            .iter()
            .filter_map(|l| l.lora.as_ref())
            .map(|a| a.param_count())
            .sum()
    }

    pub fn audio_token_count(&self, frames: usize) -> usize {
        frames.div_ceil(self.cfg.audio_downsample)
    }

    // ---- encoder ----

    /// `L_a × d_model` audio tokens for a log-mel spectrogram.
    pub fn encode_audio(&self, mel: &MelSpec) -> Result<Mat<T>, NetError> {
        self.check_mel(mel)?;
        let x = standardize_mel::<T>(mel);
        let mut h = self.mel_proj.forward(&x);
        h.add_assign(&positions(h.rows, h.cols));
        for b in &self.encoder {
            let a = b.ln1.forward(&h);
            h.add_assign(&b.attn.forward(&a, self.cfg.n_heads, false));
            let f = b.ln2.forward(&h);
            h.add_assign(&b.ffn.forward(&f));
        }
        let e = self.enc_norm.forward(&h);
        Ok(pool_rows(&e, self.cfg.audio_downsample))
    }

    fn check_mel(&self, mel: &MelSpec) -> Result<(), NetError> {
        if mel.bins != self.cfg.mel_bins {
            return Err(NetError::ShapeMismatch(format!(
                "mel has {} bins, model expects {}",
                mel.bins, self.cfg.mel_bins
            )));
        }
        if mel.frames == 0 {
            return Err(NetError::TooShort {
                samples: 0,
                needed: 1,
            });
        }
        Ok(())
    }

    pub fn encode_audio_train(&self, mel: &MelSpec) -> Result<(Mat<T>, EncoderTrace<T>), NetError> {
        self.check_mel(mel)?;
        let x = standardize_mel::<T>(mel);
        let (mut h, proj) = self.mel_proj.forward_train(&x);
        h.add_assign(&positions(h.rows, h.cols));
        let mut blocks = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            let (a, ln1) = b.ln1.forward_train(&h);
            let (ao, attn) = b.attn.forward_train(&a, self.cfg.n_heads, false);
            h.add_assign(&ao);
            let (f, ln2) = b.ln2.forward_train(&h);
            let (fo, ffn) = b.ffn.forward_train(&f);
            h.add_assign(&fo);
            blocks.push(EncBlockCache { ln1, attn, ln2, ffn });
        }
        let (e, norm) = self.enc_norm.forward_train(&h);
        Ok((
            pool_rows(&e, self.cfg.audio_downsample),
            EncoderTrace {
                frames: mel.frames,
                proj,
                blocks,
                norm,
            },
        ))
    }

    pub fn encode_audio_backward(
        &self,
        trace: &EncoderTrace<T>,
        dz: &Mat<T>,
        grads: &mut [AdapterGrad<T>],
    ) {
        let de = unpool_rows(dz, self.cfg.audio_downsample, trace.frames);
        let mut dh = self.enc_norm.backward(&trace.norm, &de);
        for (b, c) in self.encoder.iter().zip(&trace.blocks).rev() {
            let df = b.ffn.backward(&c.ffn, &dh, grads);
            dh.add_assign(&b.ln2.backward(&c.ln2, &df));
            let da = b.attn.backward(&c.attn, &dh, self.cfg.n_heads, false, grads);
            dh.add_assign(&b.ln1.backward(&c.ln1, &da));
        }
        // gradient w.r.t. the (constant) mel input is not needed
        let _ = self.mel_proj.backward(&trace.proj, &dh, grads);
    }

    // ---- decoder ----

    fn embed(&self, tokens: &[TokenId], audio: &Mat<T>) -> Result<Mat<T>, NetError> {
        let slots = tokens.iter().filter(|&&t| t == AUDIO).count();
        if slots != audio.rows {
            return Err(NetError::SlotMismatch {
                slots,
                audio_tokens: audio.rows,
            });
        }
        if tokens.len() > self.cfg.max_seq {
            return Err(NetError::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq,
            });
        }
        if audio.cols != self.cfg.d_model {
            return Err(NetError::ShapeMismatch(format!(
                "audio width {} vs d_model {}",
                audio.cols, self.cfg.d_model
            )));
        }
        let d = self.cfg.d_model;
        let mut x = positions::<T>(tokens.len(), d);
        let mut a = 0;
        for (i, &t) in tokens.iter().enumerate() {
            let src = if t == AUDIO {
                a += 1;
                audio.row(a - 1)
            } else if (t as usize) < self.cfg.vocab_size {
                self.tok_embed.row(t as usize)
            } else {
                return Err(NetError::ShapeMismatch(format!("token id {t} outside vocabulary")));
            };
            for (o, &s) in x.row_mut(i).iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(x)
    }

    /// Final-norm hidden states for every position.
    fn decode_hidden(&self, tokens: &[TokenId], audio: &Mat<T>) -> Result<Mat<T>, NetError> {
        let mut x = self.embed(tokens, audio)?;
        for b in &self.decoder {
            let a = b.ln1.forward(&x);
            x.add_assign(&b.attn.forward(&a, self.cfg.n_heads, true));
            let c = b.ln2.forward(&x);
            x.add_assign(&b.cross.forward(&c, audio).0);
            let f = b.ln3.forward(&x);
            x.add_assign(&b.ffn.forward(&f));
        }
        Ok(self.dec_norm.forward(&x))
    }

    /// Vocabulary logits at the requested positions.
    pub fn logits_at(
        &self,
        tokens: &[TokenId],
        audio: &Mat<T>,
        at: &[usize],
    ) -> Result<Mat<T>, NetError> {
        if let Some(&bad) = at.iter().find(|&&p| p >= tokens.len()) {
            return Err(NetError::ShapeMismatch(format!(
                "position {bad} beyond sequence of {}",
                tokens.len()
            )));
        }
        let h = self.decode_hidden(tokens, audio)?;
        Ok(self.head.forward(&h.select_rows(at)))
    }

    /// Logits for every position.
    pub fn logits_all(&self, tokens: &[TokenId], audio: &Mat<T>) -> Result<Mat<T>, NetError> {
        let at: Vec<usize> = (0..tokens.len()).collect();
        self.logits_at(tokens, audio, &at)
    }

    /// Next-token distribution after the last prompt token.
    pub fn forward_next_token(&self, prompt: &[TokenId], audio: &Mat<T>) -> Result<Vec<T>, NetError> {
        if prompt.is_empty() {
            return Err(NetError::ShapeMismatch("empty prompt".into()));
        }
        let mut p = self.logits_at(prompt, audio, &[prompt.len() - 1])?.data;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Cross-attention weights of the first decoder layer (`L_t × L_a`).
    pub fn cross_attention_weights(&self, tokens: &[TokenId], audio: &Mat<T>) -> Result<Mat<T>, NetError> {
        let x = self.embed(tokens, audio)?;
        let b = self
            .decoder
            .first()
            .ok_or_else(|| NetError::ShapeMismatch("model has no decoder layers".into()))?;
        let mut x1 = x.clone();
        let a = b.ln1.forward(&x);
        x1.add_assign(&b.attn.forward(&a, self.cfg.n_heads, true));
        let c = b.ln2.forward(&x1);
        Ok(b.cross.forward(&c, audio).1)
    }

    fn check_seq(&self, seq: &TrainSeq) -> Result<(), NetError> {
        if seq.target_start == 0 || seq.target_start >= seq.tokens.len() {
            return Err(NetError::EmptyTarget);
        }
        Ok(())
    }

    /// `−Σ_t ln p(y_t | audio, y_<t)` over the target span.
    pub fn sequence_nll(&self, audio: &Mat<T>, seq: &TrainSeq) -> Result<f64, NetError> {
        self.check_seq(seq)?;
        let n = seq.tokens.len();
        let at: Vec<usize> = (seq.target_start - 1..n - 1).collect();
        let logits = self.logits_at(&seq.tokens[..n - 1], audio, &at)?;
        let mut nll = 0.0;
        for (r, &y) in seq.tokens[seq.target_start..].iter().enumerate() {
            nll -= log_softmax(logits.row(r))[y as usize].f64();
        }
        Ok(nll)
    }

    /// Forward and backward for one sequence. Adds `weight · ∂nll/∂θ` into
    /// `grads`, `weight · ∂nll/∂audio` into `daudio`, returns the nll.
    pub fn sequence_backward(
        &self,
        audio: &Mat<T>,
        seq: &TrainSeq,
        weight: T,
        grads: &mut [AdapterGrad<T>],
        daudio: &mut Mat<T>,
    ) -> Result<f64, NetError> {
        self.check_seq(seq)?;
        let n = seq.tokens.len();
        let tokens = &seq.tokens[..n - 1];
        let mut x = self.embed(tokens, audio)?;
        let mut caches = Vec::with_capacity(self.decoder.len());
        for b in &self.decoder {
            let (a, ln1) = b.ln1.forward_train(&x);
            let (ao, attn) = b.attn.forward_train(&a, self.cfg.n_heads, true);
            x.add_assign(&ao);
            let (c, ln2) = b.ln2.forward_train(&x);
            let (co, cross) = b.cross.forward_train(&c, audio);
            x.add_assign(&co);
            let (f, ln3) = b.ln3.forward_train(&x);
            let (fo, ffn) = b.ffn.forward_train(&f);
            x.add_assign(&fo);
            caches.push(DecBlockCache {
                ln1,
                attn,
                ln2,
                cross,
                ln3,
                ffn,
            });
        }
        let (hf, norm) = self.dec_norm.forward_train(&x);
        let at: Vec<usize> = (seq.target_start - 1..n - 1).collect();
        let (logits, head_cache) = self.head.forward_train(&hf.select_rows(&at));

        let mut nll = 0.0;
        let mut dlogits = Mat::zeros(logits.rows, logits.cols);
        for (r, &y) in seq.tokens[seq.target_start..].iter().enumerate() {
            let lp = log_softmax(logits.row(r));
            nll -= lp[y as usize].f64();
            let drow = dlogits.row_mut(r);
            for (d, l) in drow.iter_mut().zip(&lp) {
                *d = l.exp() * weight;
            }
            drow[y as usize] -= weight;
        }

        let dsel = self.head.backward(&head_cache, &dlogits, grads);
        let mut dhf = Mat::zeros(hf.rows, hf.cols);
        for (r, &p) in at.iter().enumerate() {
            dhf.row_mut(p).copy_from_slice(dsel.row(r));
        }
        let mut dx = self.dec_norm.backward(&norm, &dhf);
        for (b, c) in self.decoder.iter().zip(&caches).rev() {
            let df = b.ffn.backward(&c.ffn, &dx, grads);
            dx.add_assign(&b.ln3.backward(&c.ln3, &df));
            let (dc, da) = b.cross.backward(&c.cross, &dx, grads);
            daudio.add_assign(&da);
            dx.add_assign(&b.ln2.backward(&c.ln2, &dc));
            let dattn = b.attn.backward(&c.attn, &dx, self.cfg.n_heads, true, grads);
            dx.add_assign(&b.ln1.backward(&c.ln1, &dattn));
        }
        let mut a = 0;
        for (i, &t) in tokens.iter().enumerate() {
            if t == AUDIO {
                for (o, &g) in daudio.row_mut(a).iter_mut().zip(dx.row(i)) {
                    *o += g;
                }
                a += 1;
            }
        }
        Ok(nll)
    }

    /// Total nll of several sequences sharing one clip.
    pub fn clip_nll(&self, mel: &MelSpec, seqs: &[TrainSeq]) -> Result<f64, NetError> {
        let z = self.encode_audio(mel)?;
        seqs.iter().map(|s| self.sequence_nll(&z, s)).sum()
    }

    /// Full forward/backward for one clip and its sequences. Returns the summed nll.
    pub fn clip_backward(
        &self,
        mel: &MelSpec,
        seqs: &[TrainSeq],
        weight: T,
        grads: &mut [AdapterGrad<T>],
    ) -> Result<f64, NetError> {
        let (z, trace) = self.encode_audio_train(mel)?;
        let mut dz = Mat::zeros(z.rows, z.cols);
        let mut total = 0.0;
        for s in seqs {
            total += self.sequence_backward(&z, s, weight, grads, &mut dz)?;
        }
        self.encode_audio_backward(&trace, &dz, grads);
        Ok(total)
    }
}
