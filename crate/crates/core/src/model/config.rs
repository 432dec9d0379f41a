use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::Special;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Layers in each of the encoder and the decoder.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Minutes-scale CPU configuration.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 128,
            dropout: 0.0,
        }
    }

    /// Seconds-scale configuration for smoke runs and experiments.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            vocab_size,
            max_seq_len: 64,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < Special::ALL.len() + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer than two ordinary tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        let (d, f, v, l) = (self.d_model, self.d_ff, self.vocab_size, self.n_layers);
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let ln = 2 * d;
        let enc_layer = attn + ffn + 2 * ln;
        let dec_layer = 2 * attn + ffn + 3 * ln;
        v * d + l * (enc_layer + dec_layer) + 2 * ln + v * d + v
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&String> {
            kv.get(k).ok_or_else(|| Error::Config(format!("model config missing {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("model config {k} is not an integer")))
        };
        let cfg = ModelConfig {
            n_layers: int("n_layers")?,
            d_model: int("d_model")?,
            n_heads: int("n_heads")?,
            d_ff: int("d_ff")?,
            vocab_size: int("vocab_size")?,
            max_seq_len: int("max_seq_len")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Config("model config dropout is not a number".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short content hash identifying the architecture.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.to_kv() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(&h.finalize()[..8])
    }
}
