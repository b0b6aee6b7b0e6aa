use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture dimensions. The decoder hidden width equals `d_model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_fc: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    /// Width of the target-language embedding concatenated to decoder tokens.
    pub d_lang: usize,
    /// Number of decoder target-language ids.
    pub n_languages: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Compute only position 0 in the last encoder layer.
    pub lazy_final_layer: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl ModelConfig {
    /// 1024-wide, 16 heads, 4096 feed-forward, 6 encoder layers, 1 decoder layer, 50k vocabulary.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 16,
            d_fc: 4096,
            n_enc_layers: 6,
            n_dec_layers: 1,
            vocab_size: 50_000,
            d_lang: 32,
            n_languages: 5,
            max_positions: 1024,
            dropout: 0.3,
            lazy_final_layer: true,
            ln_eps: 1e-5,
        }
    }

    /// Small configuration for tests and desk-scale runs.
    pub fn toy(vocab_size: usize, n_languages: usize) -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_fc: 32,
            n_enc_layers: 2,
            n_dec_layers: 1,
            vocab_size,
            d_lang: 4,
            n_languages,
            max_positions: 64,
            dropout: 0.0,
            lazy_final_layer: false,
            ln_eps: 1e-5,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder hidden width (equal to the encoder width).
    pub fn d_z(&self) -> usize {
        self.d_model
    }

    pub fn d_dec_token(&self) -> usize {
        self.d_model - self.d_lang
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_lang == 0 || self.d_lang >= self.d_model {
            return bad(format!("d_lang ({}) must be in 1..d_model ({})", self.d_lang, self.d_model));
        }
        if self.d_fc == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("d_fc and layer counts must be positive".into());
        }
        if self.vocab_size <= crate::tokenizer::RESERVED.len() {
            return bad(format!("vocab_size {} leaves no room past reserved ids", self.vocab_size));
        }
        if self.n_languages == 0 || self.max_positions < 3 {
            return bad("n_languages must be positive and max_positions at least 3".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}
