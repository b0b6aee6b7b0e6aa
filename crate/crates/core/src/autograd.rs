//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to replay its adjoint. `backward` walks the nodes in exact reverse
//! order of execution, so a tape can be consumed only once.

use std::collections::HashMap;

use rand::{Rng, RngCore};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{as_matrix, Result, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head scaled dot-product attention.
///
/// Queries are `batch * q_len` rows and keys/values `batch * kv_len` rows, all
/// `heads * d_k` wide. Head `h` owns columns `h*d_k .. (h+1)*d_k`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
    /// `batch * q_len * kv_len` flags, `true` = key visible. `None` = all visible.
    pub mask: Option<Vec<bool>>,
}

impl AttentionLayout {
    /// Key-padding mask, optionally combined with a causal (lower-triangular) mask.
    pub fn with_key_mask(
        batch: usize,
        q_len: usize,
        kv_len: usize,
        heads: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Self {
        let mut mask = Vec::with_capacity(batch * q_len * kv_len);
        for b in 0..batch {
            for i in 0..q_len {
                for j in 0..kv_len {
                    mask.push(key_valid[b * kv_len + j] && (!causal || j <= i));
                }
            }
        }
        AttentionLayout {
            batch,
            q_len,
            kv_len,
            heads,
            mask: Some(mask),
        }
    }
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    AddBias(Var, Var),
    Relu(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    FrobeniusNorm(Var),
    IndexRows {
        src: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Var, Var),
    DivScalar(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
        drop: Option<Vec<T>>,
    },
    SmoothedNll {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf without gradient tracking (inputs, constants).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with gradient tracking.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map("div", a, b, |x, y| x / y)?;
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Adds `bias` (length = trailing dim of `x`) to every trailing vector of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(out, Op::Sqrt(x), &[x])
    }

    /// Row-wise softmax over the trailing dimension. Masked entries (`false`) are exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.numel() {
                return Err(TensorError::Dimension(format!(
                    "softmax mask has {} entries for shape {:?}",
                    m.len(),
                    xv.shape()
                )));
            }
        }
        let c = xv.last_dim();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let m = mask.map(|m| &m[r * c..(r + 1) * c]);
            softmax_in_place(row, m).map_err(|_| TensorError::DegenerateMask { row: r })?;
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the trailing dimension (biased variance, `eps` inside the root).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(TensorError::Dimension("layer_norm over empty dimension".into()));
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: xv.shape().to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::of(d as f64);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums each trailing vector; output shape `[rows, 1]`.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let data: Vec<T> = xv.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let rows = data.len();
        let out = Tensor::new(vec![rows, 1], data).expect("row count is positive");
        self.push(out, Op::SumLast(x), &[x])
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).frobenius_norm();
        self.push(Tensor::scalar(n), Op::FrobeniusNorm(x), &[x])
    }

    /// Gathers rows of a 2-D tensor: `out[i] = src[idx[i]]`. Serves embedding lookup too.
    pub fn index_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let sv = self.value(src);
        let (rows, cols) = as_matrix(sv, "index_rows")?;
        if idx.is_empty() {
            return Err(TensorError::Dimension("index_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index { index: i, len: rows });
            }
            data.extend_from_slice(sv.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(
            out,
            Op::IndexRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = as_matrix(self.value(a), "concat_cols")?;
        let (rb, cb) = as_matrix(self.value(b), "concat_cols")?;
        if ra != rb {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(self.value(a).row(r));
            data.extend_from_slice(self.value(b).row(r));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Divides every entry of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::Shape {
                op: "div_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x / sv);
        Ok(self.push(out, Op::DivScalar(a, s), &[a, s]))
    }

    /// Inverted dropout; `p == 0` records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut dyn RngCore) -> Var {
        if p <= 0.0 {
            return x;
        }
        let mask = dropout_mask::<T>(self.value(x).numel(), p, rng);
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Batched multi-head scaled dot-product attention on already projected
    /// queries, keys and values. Scores are scaled by `1/sqrt(d_k)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let AttentionLayout {
            batch,
            q_len,
            kv_len,
            heads,
            ..
        } = layout;
        let (qr, d) = as_matrix(self.value(q), "attention")?;
        let (kr, dk_) = as_matrix(self.value(k), "attention")?;
        let (vr, dv_) = as_matrix(self.value(v), "attention")?;
        if qr != batch * q_len || kr != batch * kv_len || vr != kr || dk_ != d || dv_ != d {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Dimension(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        if let Some(m) = &layout.mask {
            if m.len() != batch * q_len * kv_len {
                return Err(TensorError::Dimension("attention mask size".into()));
            }
        }
        let dk = d / heads;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let plane = q_len * kv_len;
        let mut probs = vec![T::zero(); batch * heads * plane];
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * plane..][..plane];
                T::gemm(
                    q_len,
                    dk,
                    kv_len,
                    scale,
                    &qd[b * q_len * d + h * dk..],
                    d as isize,
                    1,
                    &kd[b * kv_len * d + h * dk..],
                    1,
                    d as isize,
                    T::zero(),
                    p,
                    kv_len as isize,
                    1,
                );
                for i in 0..q_len {
                    let m = layout
                        .mask
                        .as_ref()
                        .map(|m| &m[(b * q_len + i) * kv_len..][..kv_len]);
                    softmax_in_place(&mut p[i * kv_len..][..kv_len], m)
                        .map_err(|_| TensorError::DegenerateMask { row: b * q_len + i })?;
                }
            }
        }
        let drop_mask = dropout
            .filter(|(p, _)| *p > 0.0)
            .map(|(p, rng)| dropout_mask::<T>(probs.len(), p, rng));
        let weights: std::borrow::Cow<[T]> = match &drop_mask {
            Some(mask) => probs.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
            None => std::borrow::Cow::Borrowed(&probs),
        };
        let vd = self.value(v).data();
        let mut out = vec![T::zero(); batch * q_len * d];
        for b in 0..batch {
            for h in 0..heads {
                T::gemm(
                    q_len,
                    kv_len,
                    dk,
                    T::one(),
                    &weights[(b * heads + h) * plane..],
                    kv_len as isize,
                    1,
                    &vd[b * kv_len * d + h * dk..],
                    d as isize,
                    1,
                    T::zero(),
                    &mut out[b * q_len * d + h * dk..],
                    d as isize,
                    1,
                );
            }
        }
        std::mem::drop(weights);
        let out = Tensor::new(vec![batch * q_len, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop: drop_mask,
            },
            &[q, k, v],
        ))
    }

    /// Mean label-smoothed cross-entropy over rows whose target is `Some`.
    ///
    /// The smoothed target puts `1 - s + s/V` on the gold id and `s/V` elsewhere.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[Option<usize>], smoothing: T) -> Result<Var> {
        let (rows, vocab) = as_matrix(self.value(logits), "smoothed_nll")?;
        if targets.len() != rows {
            return Err(TensorError::Dimension(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Dimension("no non-padding targets".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::Index {
                index: bad,
                len: vocab,
            });
        }
        let lv = self.value(logits);
        let off = smoothing / T::of(vocab as f64);
        let on = T::one() - smoothing + off;
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(gold) = *tgt else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            let mut loss = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[r * vocab + j] = logp.exp();
                let q = if j == gold { on } else { off };
                loss = loss - q * logp;
            }
            total += loss;
        }
        let value = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(value),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Replays adjoints from a scalar `loss`. The tape cannot be replayed twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.adjoint(i, &g, &mut grads);
        }

        let mut params = HashMap::new();
        for (&pid, &v) in &self.params {
            let g = leaf_grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            params.insert(pid, g);
        }
        Ok(Gradients {
            leaves: leaf_grads,
            params,
        })
    }

    fn adjoint(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = as_matrix(val(*a), "").unwrap();
                let n = val(*b).shape()[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let ga = slot(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b).data(), 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let gb = slot(grads, *b, k * n);
                    T::gemm(k, m, n, T::one(), val(*a).data(), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
                if wants(*b) {
                    axpy(slot(grads, *b, g.len()), g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one());
                }
                if wants(*b) {
                    axpy(slot(grads, *b, g.len()), g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b).data();
                    for ((o, &gi), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    for ((o, &gi), &x) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if wants(*a) {
                    for ((o, &gi), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi / y;
                    }
                }
                if wants(*b) {
                    let av = val(*a).data();
                    for (((o, &gi), &x), &y) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(av).zip(bv) {
                        *o = *o - gi * x / (y * y);
                    }
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, *a, g.len()), g, *c),
            Op::AddConst(a) => axpy(slot(grads, *a, g.len()), g, T::one()),
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    axpy(slot(grads, *x, g.len()), g, T::one());
                }
                if wants(*bias) {
                    let d = val(*bias).numel();
                    let gb = slot(grads, *bias, d);
                    for row in g.chunks(d) {
                        axpy(gb, row, T::one());
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                for ((o, &gi), &xi) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *o += gi;
                    }
                }
            }
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                for ((o, &gi), &y) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(out.data()) {
                    if y > T::zero() {
                        *o += gi / (two * y);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let gx = slot(grads, *x, g.len());
                for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &y) in or.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gi - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gv = val(*gain).data();
                if wants(*gain) {
                    let gg = slot(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, d);
                    for gr in g.chunks(d) {
                        axpy(gb, gr, T::one());
                    }
                }
                if wants(*x) {
                    let n = T::of(d as f64);
                    let gx = slot(grads, *x, g.len());
                    for (r, ((gr, hr), or)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh = mean_dh / n;
                        mean_dh_h = mean_dh_h / n;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            or[j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = val(*x).numel();
                for o in slot(grads, *x, n) {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let s = g[0] / T::of(n as f64);
                for o in slot(grads, *x, n) {
                    *o += s;
                }
            }
            Op::SumLast(x) => {
                let xv = val(*x);
                let d = xv.last_dim();
                let gx = slot(grads, *x, xv.numel());
                for (or, &gi) in gx.chunks_mut(d).zip(g) {
                    for o in or {
                        *o += gi;
                    }
                }
            }
            Op::FrobeniusNorm(x) => {
                let y = out.item();
                if y > T::zero() {
                    let xv = val(*x).data();
                    for (o, &xi) in slot(grads, *x, xv.len()).iter_mut().zip(xv) {
                        *o += g[0] * xi / y;
                    }
                }
            }
            Op::IndexRows { src, idx } => {
                let sv = val(*src);
                let cols = sv.last_dim();
                let gs = slot(grads, *src, sv.numel());
                for (r, &s) in idx.iter().enumerate() {
                    axpy(&mut gs[s * cols..(s + 1) * cols], &g[r * cols..(r + 1) * cols], T::one());
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).shape()[1];
                let cb = val(*b).shape()[1];
                let rows = val(*a).shape()[0];
                if wants(*a) {
                    let ga = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        axpy(&mut ga[r * ca..(r + 1) * ca], &g[r * (ca + cb)..][..ca], T::one());
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        axpy(&mut gb[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..][..cb], T::one());
                    }
                }
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).item();
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, T::one() / sv);
                }
                if wants(*s) {
                    let dot: T = g.iter().zip(val(*a).data()).map(|(&gi, &x)| gi * x).sum();
                    slot(grads, *s, 1)[0] = slot(grads, *s, 1)[0] - dot / (sv * sv);
                }
            }
            Op::Dropout { x, mask } => {
                for ((o, &gi), &m) in slot(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                drop,
            } => self.attention_adjoint(g, (*q, *k, *v), layout, probs, drop.as_deref(), grads),
            Op::SmoothedNll {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                let vocab = val(*logits).shape()[1];
                let off = *smoothing / T::of(vocab as f64);
                let on = T::one() - *smoothing + off;
                let s = g[0] / T::of(*count as f64);
                let gl = slot(grads, *logits, probs.len());
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(gold) = *tgt else { continue };
                    for j in 0..vocab {
                        let q = if j == gold { on } else { off };
                        gl[r * vocab + j] += s * (probs[r * vocab + j] - q);
                    }
                }
            }
        }
    }

    fn attention_adjoint(
        &self,
        g: &[T],
        (q, k, v): (Var, Var, Var),
        layout: &AttentionLayout,
        probs: &[T],
        drop: Option<&[T]>,
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionLayout {
            batch,
            q_len,
            kv_len,
            heads,
            ..
        } = *layout;
        let d = self.value(q).shape()[1];
        let dk = d / heads;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let plane = q_len * kv_len;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dw = vec![T::zero(); plane];
        let mut ds = vec![T::zero(); plane];
        let mut gq = vec![T::zero(); batch * q_len * d];
        let mut gk = vec![T::zero(); batch * kv_len * d];
        let mut gv = vec![T::zero(); batch * kv_len * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * plane;
                let p = &probs[base..base + plane];
                let go = &g[b * q_len * d + h * dk..];
                // dW = dO · Vᵀ
                T::gemm(q_len, dk, kv_len, T::one(), go, d as isize, 1, &vd[b * kv_len * d + h * dk..], 1, d as isize, T::zero(), &mut dw, kv_len as isize, 1);
                // dV += Wᵀ · dO, where W are the (possibly dropped) weights
                let w: std::borrow::Cow<[T]> = match drop {
                    Some(m) => p.iter().zip(&m[base..base + plane]).map(|(&a, &mm)| a * mm).collect(),
                    None => std::borrow::Cow::Borrowed(p),
                };
                T::gemm(kv_len, q_len, dk, T::one(), &w, 1, kv_len as isize, go, d as isize, 1, T::one(), &mut gv[b * kv_len * d + h * dk..], d as isize, 1);
                if let Some(m) = drop {
                    for (x, &mm) in dw.iter_mut().zip(&m[base..base + plane]) {
                        *x = *x * mm;
                    }
                }
                for i in 0..q_len {
                    let pr = &p[i * kv_len..][..kv_len];
                    let dr = &dw[i * kv_len..][..kv_len];
                    let dot: T = pr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                    for j in 0..kv_len {
                        ds[i * kv_len + j] = pr[j] * (dr[j] - dot);
                    }
                }
                // dQ = dS · K · scale ; dK = dSᵀ · Q · scale
                T::gemm(q_len, kv_len, dk, scale, &ds, kv_len as isize, 1, &kd[b * kv_len * d + h * dk..], d as isize, 1, T::one(), &mut gq[b * q_len * d + h * dk..], d as isize, 1);
                T::gemm(kv_len, q_len, dk, scale, &ds, 1, kv_len as isize, &qd[b * q_len * d + h * dk..], d as isize, 1, T::one(), &mut gk[b * kv_len * d + h * dk..], d as isize, 1);
            }
        }
        for (var, acc) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                axpy(slot(grads, var, acc.len()), &acc, T::one());
            }
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a bound parameter; zeros when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() >= p { keep } else { T::zero() })
        .collect()
}

pub(crate) struct FullyMasked;

/// Stable softmax of one row with an optional visibility mask.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) -> std::result::Result<(), FullyMasked> {
    let visible = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if visible(j) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(FullyMasked);
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if visible(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3, 2], &[0.0, 0.0, 3f64.ln(), 0.0, 7.0, -1.0]));
        let y = g.softmax_rows(x, Some(&[true, true, true, true, true, false])).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.5).abs() < 1e-12);
        assert!((out[2] - 0.75).abs() < 1e-12 && (out[3] - 0.25).abs() < 1e-12);
        assert_eq!(&out[4..], &[1.0, 0.0]);

        let single = g.constant(t(&[1, 1], &[42.0]));
        let s = g.softmax_rows(single, None).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.softmax_rows(x, Some(&[true, false, false, false])).unwrap_err();
        assert_eq!(err, TensorError::DegenerateMask { row: 1 });
    }

    #[test]
    fn layer_norm_hand_cases() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.0, 0.0]));
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let out = g.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] - 1.0).abs() < 1e-9 && (out[3] + 1.0).abs() < 1e-9);

        let zero_gain = g.constant(t(&[2], &[0.0, 0.0]));
        let b2 = g.constant(t(&[2], &[0.5, -2.0]));
        let y = g.layer_norm(x, zero_gain, b2, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn layer_norm_rejects_empty_trailing_dim() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn backward_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let n = g.frobenius_norm(x);
        let n2 = g.mul(n, n).unwrap();
        let grads = g.backward(n2).unwrap();
        let gx = grads.wrt(x).unwrap().data();
        assert!((gx[0] - 6.0).abs() < 1e-12 && (gx[1] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_stale_tape() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::StaleTape);
    }

    #[test]
    fn dropout_is_reproducible_and_scaled() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::full(&[64], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let y = g.dropout(x, 0.5, &mut rng);
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn causal_mask_layout() {
        let l = AttentionLayout::with_key_mask(1, 3, 3, 1, &[true, true, false], true);
        let m = l.mask.unwrap();
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, false]);
    }
}
