use rand::RngCore;

use super::attention::attend;
use super::{FfnIds, LayerNormIds, Model, ModelError, TokenBatch};
use crate::autograd::{AttentionLayout, Graph, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenId, EOS, PAD, STR_TAG};

/// Sinusoidal position table, `len × d`.
pub fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, d], data).expect("len and d are positive")
}

/// Encoder result on the tape. `h` is `None` when the last layer ran lazily.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Final hidden states, `(rows * len) × d_model`.
    pub h: Option<Var>,
    /// Sentence embeddings (position 0 of every row), `rows × d_model`.
    pub p: Var,
}

/// Dropout randomness threaded through a forward pass; `None` disables dropout.
pub type DropoutRng<'a> = Option<&'a mut (dyn RngCore + 'static)>;

struct Dropout<'a> {
    p: f64,
    rng: DropoutRng<'a>,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => x,
        }
    }

    fn attn(&mut self) -> Option<(f64, &mut dyn RngCore)> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => Some((self.p, rng)),
            _ => None,
        }
    }
}

impl<T: Scalar> Model<T> {
    fn layer_norm(&self, g: &mut Graph<T>, x: Var, ids: &LayerNormIds) -> Result<Var, ModelError> {
        let gain = g.param(&self.params, ids.gain);
        let bias = g.param(&self.params, ids.bias);
        Ok(g.layer_norm(x, gain, bias, T::of(self.config.ln_eps))?)
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, ids: &FfnIds, drop: &mut Dropout) -> Result<Var, ModelError> {
        let p = &self.params;
        let (w1, b1, w2, b2) = (g.param(p, ids.w1), g.param(p, ids.b1), g.param(p, ids.w2), g.param(p, ids.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        let o = g.matmul(h, w2)?;
        Ok(g.add_bias(o, b2)?)
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<(), ModelError> {
        let vocab = self.config.vocab_size;
        match batch.ids().iter().find(|&&t| t as usize >= vocab) {
            Some(&id) => Err(ModelError::InvalidToken { id, vocab }),
            None => Ok(()),
        }
    }

    fn positions(&self, rows: usize, len: usize, d: usize) -> Result<Tensor<T>, ModelError> {
        let pe = positional_encoding::<T>(len, d);
        let mut data = Vec::with_capacity(rows * len * d);
        for _ in 0..rows {
            data.extend_from_slice(pe.data());
        }
        Ok(Tensor::new(vec![rows * len, d], data)?)
    }

    /// Encodes a batch framed as `[STR_TAG, ..., EOS]` and right-padded with PAD.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        batch: &TokenBatch,
        rng: DropoutRng<'_>,
    ) -> Result<EncoderOutput, ModelError> {
        let cfg = &self.config;
        let (rows, len, d) = (batch.rows(), batch.len(), cfg.d_model);
        for r in 0..rows {
            let row = batch.row(r);
            let used = row.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
            if used > cfg.max_positions {
                return Err(ModelError::TooLong {
                    row: r,
                    len: used,
                    max: cfg.max_positions,
                });
            }
            if used < 2 || row[0] != STR_TAG || row[used - 1] != EOS {
                return Err(ModelError::MissingFrame { row: r });
            }
        }
        self.check_tokens(batch)?;
        let len = len.min(cfg.max_positions);
        let mut drop = Dropout { p: cfg.dropout, rng };
        let ids: Vec<usize> = (0..rows).flat_map(|r| batch.row(r)[..len].iter().map(|&t| t as usize)).collect();
        let key_valid: Vec<bool> = ids.iter().map(|&t| t != PAD as usize).collect();
        let firsts: Vec<usize> = (0..rows).map(|r| r * len).collect();

        let lay = self.layout();
        let table = g.param(&self.params, lay.enc_tok);
        let emb = g.index_rows(table, &ids)?;
        let emb = g.scale(emb, T::of((d as f64).sqrt()));
        let pos = g.constant(self.positions(rows, len, d)?);
        let x0 = g.add(emb, pos)?;
        let mut x = drop.apply(g, x0);

        let n_layers = lay.enc_layers.len();
        let mut pooled_only = None;
        for (l, ids) in lay.enc_layers.iter().enumerate() {
            let lazy = cfg.lazy_final_layer && l + 1 == n_layers;
            let y = self.layer_norm(g, x, &ids.ln_attn)?;
            if lazy {
                // Only the STR_TAG position is needed from the final layer.
                let q_in = g.index_rows(y, &firsts)?;
                let layout = AttentionLayout::with_key_mask(rows, 1, len, cfg.n_heads, &key_valid, false);
                let a = attend(g, &self.params, &ids.attn, q_in, y, layout, drop.attn())?;
                let x_first = g.index_rows(x, &firsts)?;
                let x1 = g.add(x_first, a)?;
                let y1 = self.layer_norm(g, x1, &ids.ln_ffn)?;
                let f = self.ffn(g, y1, &ids.ffn, &mut drop)?;
                pooled_only = Some(g.add(x1, f)?);
            } else {
                let layout = AttentionLayout::with_key_mask(rows, len, len, cfg.n_heads, &key_valid, false);
                let a = attend(g, &self.params, &ids.attn, y, y, layout, drop.attn())?;
                let x1 = g.add(x, a)?;
                let y1 = self.layer_norm(g, x1, &ids.ln_ffn)?;
                let f = self.ffn(g, y1, &ids.ffn, &mut drop)?;
                x = g.add(x1, f)?;
            }
        }
        match pooled_only {
            Some(first) => {
                let p = self.layer_norm(g, first, &lay.enc_ln)?;
                Ok(EncoderOutput { h: None, p })
            }
            None => {
                let h = self.layer_norm(g, x, &lay.enc_ln)?;
                let p = g.index_rows(h, &firsts)?;
                Ok(EncoderOutput { h: Some(h), p })
            }
        }
    }

    /// Teacher-forced decoder logits, `(rows * len) × vocab`.
    ///
    /// `g_in` rows are EOS-fronted previous targets; `p` holds one sentence
    /// embedding per row; `langs[r]` selects the target-language embedding.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        p: Var,
        g_in: &TokenBatch,
        langs: &[usize],
        rng: DropoutRng<'_>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let (rows, len, d) = (g_in.rows(), g_in.len(), cfg.d_model);
        if langs.len() != rows || g.value(p).shape() != [rows, d] {
            return Err(ModelError::RowMismatch {
                src: g.value(p).shape()[0],
                tgt: rows,
            });
        }
        if len > cfg.max_positions {
            return Err(ModelError::TooLong {
                row: 0,
                len,
                max: cfg.max_positions,
            });
        }
        for r in 0..rows {
            if g_in.row(r)[0] != EOS {
                return Err(ModelError::NotEosFronted { row: r });
            }
        }
        if let Some(&id) = langs.iter().find(|&&l| l >= cfg.n_languages) {
            return Err(ModelError::InvalidLanguage {
                id,
                n: cfg.n_languages,
            });
        }
        self.check_tokens(g_in)?;
        let mut drop = Dropout { p: cfg.dropout, rng };
        let lay = self.layout();
        let ids: Vec<usize> = g_in.ids().iter().map(|&t| t as usize).collect();
        let lang_rows: Vec<usize> = langs.iter().flat_map(|&l| std::iter::repeat_n(l, len)).collect();

        let tok_table = g.param(&self.params, lay.dec_tok);
        let tok = g.index_rows(tok_table, &ids)?;
        let tok = g.scale(tok, T::of((d as f64).sqrt()));
        let lang_table = g.param(&self.params, lay.dec_lang);
        let lang = g.index_rows(lang_table, &lang_rows)?;
        let j0 = g.concat_cols(tok, lang)?;
        let pos = g.constant(self.positions(rows, len, d)?);
        let j0 = g.add(j0, pos)?;
        let mut x = drop.apply(g, j0);

        let key_valid = g_in.key_valid();
        for ids in &lay.dec_layers {
            let y = self.layer_norm(g, x, &ids.ln_self)?;
            let layout = AttentionLayout::with_key_mask(rows, len, len, cfg.n_heads, &key_valid, true);
            let b = attend(g, &self.params, &ids.self_attn, y, y, layout, drop.attn())?;
            x = g.add(x, b)?;
            let y = self.layer_norm(g, x, &ids.ln_cross)?;
            let layout = AttentionLayout {
                batch: rows,
                q_len: len,
                kv_len: 1,
                heads: cfg.n_heads,
                mask: None,
            };
            let c = attend(g, &self.params, &ids.cross_attn, y, p, layout, drop.attn())?;
            x = g.add(x, c)?;
            let y = self.layer_norm(g, x, &ids.ln_ffn)?;
            let f = self.ffn(g, y, &ids.ffn, &mut drop)?;
            x = g.add(x, f)?;
        }
        let x = self.layer_norm(g, x, &lay.dec_ln)?;
        let w = g.param(&self.params, lay.out_w);
        let b = g.param(&self.params, lay.out_b);
        let logits = g.matmul(x, w)?;
        Ok(g.add_bias(logits, b)?)
    }

    /// Encode `src`, then decode `tgt_in` with teacher forcing. Returns `(logits, P_src)`.
    pub fn translate_forward(
        &self,
        g: &mut Graph<T>,
        src: &TokenBatch,
        tgt_in: &TokenBatch,
        langs: &[usize],
        mut rng: DropoutRng<'_>,
    ) -> Result<(Var, Var), ModelError> {
        if src.rows() != tgt_in.rows() {
            return Err(ModelError::RowMismatch {
                src: src.rows(),
                tgt: tgt_in.rows(),
            });
        }
        let enc = self.encode(g, src, rng.as_deref_mut())?;
        let logits = self.decode(g, enc.p, tgt_in, langs, rng)?;
        Ok((logits, enc.p))
    }

    /// Sentence embeddings for a framed batch with dropout off, `rows × d_model`.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let out = self.encode(&mut g, batch, None)?;
        Ok(g.value(out.p).clone())
    }

    /// Argmax decoding from one embedding, stopping at EOS or after `max_len` tokens.
    /// The returned ids exclude the leading and trailing EOS.
    pub fn greedy_decode(&self, p: &[T], lang: usize, max_len: usize) -> Result<Vec<TokenId>, ModelError> {
        if max_len < 1 {
            return Err(ModelError::ZeroLength);
        }
        let emb = Tensor::new(vec![1, self.config.d_model], p.to_vec())?;
        let mut seq = vec![EOS];
        let mut out = Vec::new();
        while out.len() < max_len && seq.len() < self.config.max_positions {
            let mut g = Graph::new();
            let pv = g.constant(emb.clone());
            let logits = self.decode(&mut g, pv, &TokenBatch::from_rows(&[seq.clone()]), &[lang], None)?;
            let lv = g.value(logits);
            let last = lv.row(lv.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .skip(crate::tokenizer::RESERVED.len())
                .chain(std::iter::once((EOS as usize, &last[EOS as usize])))
                .fold((EOS as usize, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as TokenId;
            if next == EOS {
                break;
            }
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}
