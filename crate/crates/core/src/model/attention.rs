use rand::RngCore;

use crate::autograd::{AttentionLayout, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Scalar, TensorError};

/// Projection matrices of one multi-head attention block.
///
/// Each of `wq`, `wk`, `wv` is `d_model × d_model`; columns `i*d_k .. (i+1)*d_k`
/// hold head `i`'s projection. `wo` maps the concatenated heads back to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

pub(crate) fn attend<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ap: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    layout: AttentionLayout,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<Var> {
    let wq = g.param(store, ap.wq);
    let wk = g.param(store, ap.wk);
    let wv = g.param(store, ap.wv);
    let wo = g.param(store, ap.wo);
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let heads = g.attention(q, k, v, layout, dropout)?;
    g.matmul(heads, wo)
}

/// Multi-head attention of one query sequence (`Tq × d`) over one key/value
/// sequence (`Tk × d`). `mask` is `Tq × Tk`, `true` = visible.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    n_heads: usize,
    q_seq: Var,
    kv_seq: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let tq = g.value(q_seq).shape()[0];
    let tk = g.value(kv_seq).shape()[0];
    if let Some(m) = mask {
        if m.len() != tq * tk {
            return Err(TensorError::Dimension(format!(
                "mask has {} entries for {tq}×{tk} attention",
                m.len()
            )));
        }
    }
    let layout = AttentionLayout {
        batch: 1,
        q_len: tq,
        kv_len: tk,
        heads: n_heads,
        mask: mask.map(<[bool]>::to_vec),
    };
    attend(g, store, params, q_seq, kv_seq, layout, None)
}
