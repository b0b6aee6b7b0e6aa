//! Transformer encoder with first-position pooling and a single-vector decoder.

mod attention;
mod config;
mod forward;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::tokenizer::{TokenId, EOS, PAD, STR_TAG};

pub use attention::{multi_head_attention, AttentionParams};
pub use config::ModelConfig;
pub use forward::{positional_encoding, DropoutRng, EncoderOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("row {row}: length {len} exceeds max_positions {max}")]
    TooLong { row: usize, len: usize, max: usize },
    #[error("row {row}: encoder input must be framed as [STR_TAG, ..., EOS]")]
    MissingFrame { row: usize },
    #[error("row {row}: decoder input must start with EOS")]
    NotEosFronted { row: usize },
    #[error("language id {id} out of range for {n} languages")]
    InvalidLanguage { id: usize, n: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    InvalidToken { id: TokenId, vocab: usize },
    #[error("batch row mismatch: {src} source rows vs {tgt} target rows")]
    RowMismatch { src: usize, tgt: usize },
    #[error("max_len must be at least 1")]
    ZeroLength,
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
}

/// Right-padded batch of token-id rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    rows: usize,
    len: usize,
    ids: Vec<TokenId>,
}

impl TokenBatch {
    pub fn from_rows(seqs: &[Vec<TokenId>]) -> Self {
        Self::padded_to(seqs, 0)
    }

    /// Pads every row to `max(min_len, longest row)`.
    pub fn padded_to(seqs: &[Vec<TokenId>], min_len: usize) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0).max(min_len);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        TokenBatch {
            rows: seqs.len(),
            len,
            ids,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.len == 0
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// Tokens excluding padding.
    pub fn count_tokens(&self) -> usize {
        self.ids.iter().filter(|&&t| t != PAD).count()
    }

    pub(crate) fn key_valid(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }
}

/// `[STR_TAG, ids..., EOS]`.
pub fn frame_encoder_input(ids: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(STR_TAG);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

/// Teacher-forcing views of a target sentence: `G = [EOS, ids...]` and `Y = [ids..., EOS]`.
pub fn decoder_views(ids: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut g = Vec::with_capacity(ids.len() + 1);
    g.push(EOS);
    g.extend_from_slice(ids);
    let mut y = ids.to_vec();
    y.push(EOS);
    (g, y)
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerIds {
    pub ln_attn: LayerNormIds,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerIds {
    pub ln_self: LayerNormIds,
    pub self_attn: AttentionParams,
    pub ln_cross: LayerNormIds,
    pub cross_attn: AttentionParams,
    pub ln_ffn: LayerNormIds,
    pub ffn: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub enc_tok: ParamId,
    pub enc_layers: Vec<EncoderLayerIds>,
    pub enc_ln: LayerNormIds,
    pub dec_tok: ParamId,
    pub dec_lang: ParamId,
    pub dec_layers: Vec<DecoderLayerIds>,
    pub dec_ln: LayerNormIds,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    init: &'a mut dyn FnMut(&[usize], Init) -> Tensor<T>,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, shape: &[usize], kind: Init) -> ParamId {
        let t = (self.init)(shape, kind);
        self.params.add(name, t)
    }

    fn layer_norm(&mut self, pre: &str, d: usize) -> LayerNormIds {
        LayerNormIds {
            gain: self.add(format!("{pre}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{pre}.bias"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, pre: &str, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.add(format!("{pre}.wq"), &[d, d], Init::Linear),
            wk: self.add(format!("{pre}.wk"), &[d, d], Init::Linear),
            wv: self.add(format!("{pre}.wv"), &[d, d], Init::Linear),
            wo: self.add(format!("{pre}.wo"), &[d, d], Init::Linear),
        }
    }

    fn ffn(&mut self, pre: &str, d: usize, d_fc: usize) -> FfnIds {
        FfnIds {
            w1: self.add(format!("{pre}.w1"), &[d, d_fc], Init::Linear),
            b1: self.add(format!("{pre}.b1"), &[d_fc], Init::Zeros),
            w2: self.add(format!("{pre}.w2"), &[d_fc, d], Init::Linear),
            b2: self.add(format!("{pre}.b2"), &[d], Init::Zeros),
        }
    }
}

/// Builds parameters in a fixed order; `init` fills each tensor from its shape.
fn build<T: Scalar>(cfg: &ModelConfig, init: &mut dyn FnMut(&[usize], Init) -> Tensor<T>) -> (ParamStore<T>, Layout) {
    let mut b = Builder {
        params: ParamStore::new(),
        init,
    };
    let d = cfg.d_model;
    let enc_tok = b.add("enc.tok_emb".into(), &[cfg.vocab_size, d], Init::Embedding);
    let enc_layers = (0..cfg.n_enc_layers)
        .map(|l| EncoderLayerIds {
            ln_attn: b.layer_norm(&format!("enc.{l}.ln_attn"), d),
            attn: b.attention(&format!("enc.{l}.attn"), d),
            ln_ffn: b.layer_norm(&format!("enc.{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, cfg.d_fc),
        })
        .collect();
    let enc_ln = b.layer_norm("enc.ln_final", d);
    let dec_tok = b.add("dec.tok_emb".into(), &[cfg.vocab_size, cfg.d_dec_token()], Init::Embedding);
    let dec_lang = b.add("dec.lang_emb".into(), &[cfg.n_languages, cfg.d_lang], Init::Embedding);
    let dec_layers = (0..cfg.n_dec_layers)
        .map(|l| DecoderLayerIds {
            ln_self: b.layer_norm(&format!("dec.{l}.ln_self"), d),
            self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
            ln_cross: b.layer_norm(&format!("dec.{l}.ln_cross"), d),
            cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
            ln_ffn: b.layer_norm(&format!("dec.{l}.ln_ffn"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, cfg.d_fc),
        })
        .collect();
    let dec_ln = b.layer_norm("dec.ln_final", d);
    let out_w = b.add("dec.out.weight".into(), &[d, cfg.vocab_size], Init::Linear);
    let out_b = b.add("dec.out.bias".into(), &[cfg.vocab_size], Init::Zeros);
    let layout = Layout {
        enc_tok,
        enc_layers,
        enc_ln,
        dec_tok,
        dec_lang,
        dec_layers,
        dec_ln,
        out_w,
        out_b,
    };
    (b.params, layout)
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    /// uniform(±1/sqrt(fan_in)), fan_in = rows
    Linear,
    /// normal(0, width^-1/2)
    Embedding,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build(&config, &mut |shape, kind| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match kind {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Linear => {
                    let a = 1.0 / (shape[0] as f64).sqrt();
                    let u = Uniform::new_inclusive(-a, a).expect("finite bound");
                    (0..n).map(|_| u.sample(rng)).collect()
                }
                Init::Embedding => {
                    let sd = 1.0 / (*shape.last().unwrap() as f64).sqrt();
                    let nd = Normal::new(0.0, sd).expect("positive deviation");
                    (0..n).map(|_| nd.sample(rng)).collect()
                }
            };
            Tensor::from_f64(shape, &data).expect("shape matches data")
        });
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, stored: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build::<T>(&config, &mut |shape, _| Tensor::zeros(shape));
        if params.len() != stored.len() {
            return Err(ModelError::Param {
                name: "*".into(),
                reason: format!("expected {} tensors, found {}", params.len(), stored.len()),
            });
        }
        for ((_, want_name, want), (_, name, got)) in params.iter().zip(stored.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ModelError::Param {
                    name: name.to_string(),
                    reason: format!("expected {want_name} with shape {:?}, found {:?}", want.shape(), got.shape()),
                });
            }
        }
        Ok(Model {
            config,
            params: stored,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Ids that only feed cross-attention queries and keys: the query/key
    /// projections and the layer norm in front of the query. Attending over a
    /// single key makes the softmax constant, so these never receive gradient.
    pub fn inert_params(&self) -> Vec<ParamId> {
        self.layout
            .dec_layers
            .iter()
            .flat_map(|l| [l.cross_attn.wq, l.cross_attn.wk, l.ln_cross.gain, l.ln_cross.bias])
            .collect()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }
}
