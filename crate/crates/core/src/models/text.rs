use serde::{Deserialize, Serialize};

use super::layers::{multi_head_attention, LayerNorm, Linear};
use super::{Exec, Init, ParamSource, Params};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;

/// Byte-level tokenization: `BOS, utf-8 bytes.., EOS`, truncated then padded.
///
/// When the text does not fit, bytes are dropped so that EOS still closes the
/// sequence.
pub fn tokenize(text: &str, max_tokens: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(max_tokens);
    ids.push(BOS);
    let room = max_tokens.saturating_sub(2);
    ids.extend(text.bytes().take(room).map(u32::from));
    ids.push(EOS);
    ids.truncate(max_tokens);
    ids.resize(max_tokens, PAD);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 259,
            max_tokens: 32,
            embed_dim: 64,
            layers: 2,
            heads: 4,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.max_tokens < 2 {
            return Err(Error::InvalidArgument("max_tokens must be >= 2".into()));
        }
        if self.vocab_size < 259 {
            return Err(Error::InvalidArgument("vocab_size must cover bytes + BOS/EOS/PAD".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn build(config: TextEncoderConfig, src: &mut dyn ParamSource) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let token_embedding = src.take("token_embedding", &[config.vocab_size, d], Init::Normal)?;
        let position_embedding = src.take("position_embedding", &[config.max_tokens, d], Init::Normal)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            layers.push(EncoderLayer {
                ln1: LayerNorm::build(src, &format!("{p}.ln1"), d)?,
                q: Linear::build(src, &format!("{p}.attn.q"), d, d, true)?,
                k: Linear::build(src, &format!("{p}.attn.k"), d, d, true)?,
                v: Linear::build(src, &format!("{p}.attn.v"), d, d, true)?,
                out: Linear::build(src, &format!("{p}.attn.out"), d, d, true)?,
                ln2: LayerNorm::build(src, &format!("{p}.ln2"), d)?,
                fc1: Linear::build(src, &format!("{p}.ff.fc1"), d, 4 * d, true)?,
                fc2: Linear::build(src, &format!("{p}.ff.fc2"), 4 * d, d, true)?,
            });
        }
        let final_ln = LayerNorm::build(src, "final_ln", d)?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_ln,
        })
    }

    /// `[max_tokens, embed_dim]` embeddings for a full-length token sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<Tensor> {
        let cfg = &self.config;
        if tokens.len() != cfg.max_tokens {
            return Err(Error::Shape(format!(
                "text encoder expects {} tokens, got {}",
                cfg.max_tokens,
                tokens.len()
            )));
        }
        let d = cfg.embed_dim;
        let mut x = Tensor::zeros(&[cfg.max_tokens, d]);
        {
            let (te, pe) = (self.token_embedding.data(), self.position_embedding.data());
            for (i, (&tok, row)) in tokens.iter().zip(x.data_mut().chunks_mut(d)).enumerate() {
                let tok = tok as usize;
                if tok >= cfg.vocab_size {
                    return Err(Error::InvalidArgument(format!("token id {tok} outside vocabulary")));
                }
                for j in 0..d {
                    row[j] = te[tok * d + j] + pe[i * d + j];
                }
            }
        }
        let exec = Exec::default();
        for layer in &self.layers {
            let h = layer.ln1.forward(&x)?;
            let q = layer.q.forward(&h, &exec)?;
            let k = layer.k.forward(&h, &exec)?;
            let v = layer.v.forward(&h, &exec)?;
            let a = multi_head_attention(&q, &k, &v, cfg.heads)?;
            tensor::add_inplace(&mut x, &layer.out.forward(&a, &exec)?)?;
            let h = layer.ln2.forward(&x)?;
            let mut h = layer.fc1.forward(&h, &exec)?;
            tensor::gelu_inplace(&mut h);
            tensor::add_inplace(&mut x, &layer.fc2.forward(&h, &exec)?)?;
        }
        self.final_ln.forward(&x)
    }

    pub fn encode_text(&self, text: &str) -> Result<Tensor> {
        self.encode(&tokenize(text, self.config.max_tokens))
    }
}

impl Params for TextEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("token_embedding", &self.token_embedding);
        f("position_embedding", &self.position_embedding);
        for l in &self.layers {
            l.ln1.visit(f);
            l.q.visit(f);
            l.k.visit(f);
            l.v.visit(f);
            l.out.visit(f);
            l.ln2.visit(f);
            l.fc1.visit(f);
            l.fc2.visit(f);
        }
        self.final_ln.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("token_embedding", &mut self.token_embedding);
        f("position_embedding", &mut self.position_embedding);
        for l in &mut self.layers {
            l.ln1.visit_mut(f);
            l.q.visit_mut(f);
            l.k.visit_mut(f);
            l.v.visit_mut(f);
            l.out.visit_mut(f);
            l.ln2.visit_mut(f);
            l.fc1.visit_mut(f);
            l.fc2.visit_mut(f);
        }
        self.final_ln.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SeededInit;

    #[test]
    fn tokenize_fixtures() {
        let empty = tokenize("", 32);
        assert_eq!(&empty[..3], &[BOS, EOS, PAD]);
        assert_eq!(empty.len(), 32);
        assert_eq!(&tokenize("A", 32)[..4], &[256, 65, 257, 258]);
        assert_eq!(&tokenize("星", 32)[..6], &[256, 230, 152, 159, 257, 258]);
    }

    #[test]
    fn tokenize_truncates_but_keeps_eos() {
        let long = "x".repeat(100);
        let ids = tokenize(&long, 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[7], EOS);
    }

    #[test]
    fn encode_shape_determinism_and_sensitivity() {
        let enc = TextEncoder::build(TextEncoderConfig::default(), &mut SeededInit::new(42)).unwrap();
        let a = enc.encode_text("romantic starry sky").unwrap();
        assert_eq!(a.shape(), &[32, 64]);
        let b = enc.encode_text("romantic starry sky").unwrap();
        assert!(a.bit_eq(&b));
        let c = enc.encode_text("romantic starry skz").unwrap();
        assert!(tensor::sub(&a, &c).unwrap().l2_norm() > 0.0);
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let enc = TextEncoder::build(TextEncoderConfig::default(), &mut SeededInit::new(1)).unwrap();
        assert!(matches!(enc.encode(&[BOS, EOS]), Err(Error::Shape(_))));
    }

    #[test]
    fn config_invariants() {
        let bad = TextEncoderConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
