//! Translation loss and the norm-balanced distance constraint.
//!
//! For a batch of paired embeddings `pa[i] ↔ pb[i]`:
//!
//! ```text
//! v_norm = mean Frobenius norm over all 2N embeddings
//! d_p(i)  = |pa_i - pb_i|² / (v_norm + ε)
//! d_n     = |pa_i - pb_j|² / (v_norm + ε)            (j a sampled negative)
//! δ       = max(0, α - (d_n - d_p))
//! total   = β·mean d_p + (λ/N_s)·mean_i Σ_j (δ^{a→b} + δ^{b→a}) + 0.5·l_mt
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::tensor::{Scalar, TensorError};
use crate::tokenizer::{TokenId, PAD};

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("row {row} lists itself as a negative")]
    SelfNegative { row: usize },
    #[error("{n_neg} negatives requested but a batch of {rows} offers at most {}", rows.saturating_sub(1))]
    TooManyNegatives { n_neg: usize, rows: usize },
    #[error("negative matrix is {got_rows}×{got_k}, expected {rows}×{k}")]
    NegativeShape {
        got_rows: usize,
        got_k: usize,
        rows: usize,
        k: usize,
    },
    #[error("negative index {index} out of range for {rows} rows")]
    NegativeIndex { index: usize, rows: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin α.
    pub alpha: f64,
    /// Weight β of the paired distance term.
    pub beta: f64,
    /// Weight λ of the margin terms.
    pub lambda: f64,
    /// Negatives per sentence, N_s.
    pub n_neg: usize,
    pub epsilon: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            beta: 0.25,
            lambda: 0.125,
            n_neg: 20,
            epsilon: 1e-6,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    /// Translation loss only (β = λ = 0).
    pub fn translation_only() -> Self {
        LossConfig {
            beta: 0.0,
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn constrained(&self) -> bool {
        self.beta > 0.0 || self.lambda > 0.0
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 {
            return bad("alpha must be positive");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Per-batch loss parts. Distance fields are 0 when the constraint is off.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Token-mean translation loss of the trained direction.
    pub l_mt: f64,
    pub l_mt_ab: f64,
    pub l_mt_ba: Option<f64>,
    pub d_p_mean: f64,
    pub delta_mean_ab: f64,
    pub delta_mean_ba: f64,
    pub v_norm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn recompose(&self, cfg: &LossConfig) -> f64 {
        cfg.beta * self.d_p_mean + cfg.lambda * (self.delta_mean_ab + self.delta_mean_ba) + 0.5 * self.l_mt
    }
}

/// `rows × k` matrix of in-batch negative row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeMatrix {
    rows: usize,
    k: usize,
    idx: Vec<usize>,
}

impl NegativeMatrix {
    pub fn new(rows: usize, k: usize, idx: Vec<usize>) -> Self {
        assert_eq!(idx.len(), rows * k, "negative matrix size");
        NegativeMatrix { rows, k, idx }
    }

    pub fn empty(rows: usize) -> Self {
        NegativeMatrix {
            rows,
            k: 0,
            idx: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.idx[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.idx
    }

    pub fn validate(&self, rows: usize, k: usize) -> Result<(), LossError> {
        if self.rows != rows || self.k != k {
            return Err(LossError::NegativeShape {
                got_rows: self.rows,
                got_k: self.k,
                rows,
                k,
            });
        }
        for i in 0..rows {
            for &j in self.row(i) {
                if j >= rows {
                    return Err(LossError::NegativeIndex { index: j, rows });
                }
                if j == i {
                    return Err(LossError::SelfNegative { row: i });
                }
            }
        }
        Ok(())
    }
}

/// Mean label-smoothed cross-entropy over non-PAD targets.
pub fn label_smoothed_nll<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[TokenId],
    smoothing: f64,
) -> Result<Var, LossError> {
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&id| (id != PAD).then_some(id as usize))
        .collect();
    Ok(g.smoothed_nll(logits, &t, T::of(smoothing))?)
}

/// Mean Frobenius norm of the rows of `emb` (`N × d`).
pub fn batch_norm_average<T: Scalar>(g: &mut Graph<T>, emb: Var) -> Result<Var, LossError> {
    let sq = g.mul(emb, emb)?;
    let row_sq = g.sum_last(sq);
    let norms = g.sqrt(row_sq);
    Ok(g.mean(norms))
}

/// Row-wise `|a - b|² / (v_norm + eps)`, shape `[N, 1]`.
pub fn paired_distance<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, v_norm: Var, eps: f64) -> Result<Var, LossError> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let dist = g.sum_last(sq);
    let denom = g.add_const(v_norm, T::of(eps));
    Ok(g.div_scalar(dist, denom)?)
}

/// Elementwise `max(0, alpha - (d_n - d_p))`.
pub fn margin_delta<T: Scalar>(g: &mut Graph<T>, d_n: Var, d_p: Var, alpha: f64) -> Result<Var, LossError> {
    let gap = g.sub(d_n, d_p)?;
    let neg = g.scale(gap, -T::one());
    let shifted = g.add_const(neg, T::of(alpha));
    Ok(g.relu(shifted))
}

/// Scalar form of [`paired_distance`].
pub fn paired_distance_value(a: &[f64], b: &[f64], v_norm: f64, eps: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq / (v_norm + eps)
}

/// Scalar form of [`margin_delta`].
pub fn margin_delta_value(d_n: f64, d_p: f64, alpha: f64) -> f64 {
    (alpha - (d_n - d_p)).max(0.0)
}

/// Scalar form of [`batch_norm_average`].
pub fn batch_norm_average_value(rows: &[Vec<f64>]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).sum();
    Some(total / rows.len() as f64)
}

/// Combines the translation loss of direction a→b with the distance constraint.
///
/// `pa`/`pb` are `N × d` embeddings of the paired sentences; `neg_ab` indexes
/// rows of `pb`, `neg_ba` rows of `pa`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_mt_ab: Var,
    pa: Var,
    pb: Var,
    neg_ab: &NegativeMatrix,
    neg_ba: &NegativeMatrix,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown), LossError> {
    cfg.validate()?;
    let n = g.value(pa).shape()[0];
    if g.value(pb).shape() != g.value(pa).shape() {
        return Err(TensorError::Shape {
            op: "total_loss",
            lhs: g.value(pa).shape().to_vec(),
            rhs: g.value(pb).shape().to_vec(),
        }
        .into());
    }
    let k = cfg.n_neg;
    if k > 0 && k > n - 1 {
        return Err(LossError::TooManyNegatives { n_neg: k, rows: n });
    }
    neg_ab.validate(n, k)?;
    neg_ba.validate(n, k)?;

    let na = batch_norm_average(g, pa)?;
    let nb = batch_norm_average(g, pb)?;
    let both = g.add(na, nb)?;
    // Equal halves, so this is the mean over all 2N embeddings.
    let v_norm = g.scale(both, T::of(0.5));
    let d_p = paired_distance(g, pa, pb, v_norm, cfg.epsilon)?;
    let d_p_mean = g.mean(d_p);
    let dp_term = g.scale(d_p_mean, T::of(cfg.beta));
    let mt_term = g.scale(l_mt_ab, T::of(0.5));
    let mut total = g.add(dp_term, mt_term)?;

    let mut breakdown = LossBreakdown {
        l_mt: g.value(l_mt_ab).item().to_f64_lossy(),
        l_mt_ab: g.value(l_mt_ab).item().to_f64_lossy(),
        l_mt_ba: None,
        d_p_mean: g.value(d_p_mean).item().to_f64_lossy(),
        v_norm: g.value(v_norm).item().to_f64_lossy(),
        ..Default::default()
    };

    if k > 0 {
        let rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let dp_rep = g.index_rows(d_p, &rep)?;
        let mut deltas = [None, None];
        for (slot, (anchor, other, negs)) in [(pa, pb, neg_ab), (pb, pa, neg_ba)].into_iter().enumerate() {
            let anchors = g.index_rows(anchor, &rep)?;
            let negatives = g.index_rows(other, negs.flat())?;
            let d_n = paired_distance(g, anchors, negatives, v_norm, cfg.epsilon)?;
            let delta = margin_delta(g, d_n, dp_rep, cfg.alpha)?;
            deltas[slot] = Some(g.mean(delta));
        }
        let (dab, dba) = (deltas[0].unwrap(), deltas[1].unwrap());
        breakdown.delta_mean_ab = g.value(dab).item().to_f64_lossy();
        breakdown.delta_mean_ba = g.value(dba).item().to_f64_lossy();
        let sum = g.add(dab, dba)?;
        let delta_term = g.scale(sum, T::of(cfg.lambda));
        total = g.add(total, delta_term)?;
    }
    breakdown.total = g.value(total).item().to_f64_lossy();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rows(g: &mut Graph<f64>, r: &[&[f64]]) -> Var {
        let v: Vec<Vec<f64>> = r.iter().map(|x| x.to_vec()).collect();
        g.leaf(Tensor::from_rows(&v).unwrap())
    }

    #[test]
    fn smoothed_nll_hand_cases() {
        // logits (ln 3, 0): p = (0.75, 0.25).
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[2, 2], &[3f64.ln(), 0.0, 3f64.ln(), 0.0]).unwrap());
        let v = label_smoothed_nll(&mut g, l, &[1 + PAD, PAD], 0.0).unwrap();
        // target id 1 on the first row, second row is padding
        assert!((g.value(v).item() - 4f64.ln()).abs() < 1e-12);
        let v = g.smoothed_nll(l, &[Some(0), None], 0.0).unwrap();
        assert!((g.value(v).item() - 0.2877).abs() < 5e-5);
        let v = g.smoothed_nll(l, &[Some(0), None], 0.1).unwrap();
        let want = -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln());
        assert!((g.value(v).item() - want).abs() < 1e-12);
        assert!((want - 0.3426).abs() < 5e-5);

        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_f64(&[1, 2], &[3f64.ln(), 0.0]).unwrap());
        assert!(label_smoothed_nll(&mut g, l, &[4], 0.0).is_err());
    }

    #[test]
    fn uniform_logits_give_log_v() {
        for s in [0.0, 0.1, 0.5] {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::zeros(&[3, 7]));
            let v = label_smoothed_nll(&mut g, l, &[4, 5, PAD], s).unwrap();
            assert!((g.value(v).item() - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn all_pad_targets_are_an_error() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 7]));
        assert!(label_smoothed_nll(&mut g, l, &[PAD, PAD], 0.1).is_err());
    }

    #[test]
    fn norm_average_and_distance_hand_cases() {
        let mut g = Graph::<f64>::new();
        let e = rows(&mut g, &[&[3.0, 4.0], &[0.0, 0.0]]);
        let v = batch_norm_average(&mut g, e).unwrap();
        assert_eq!(g.value(v).item(), 2.5);

        let a = rows(&mut g, &[&[3.0, 4.0]]);
        let b = rows(&mut g, &[&[0.0, 0.0]]);
        let d = paired_distance(&mut g, a, b, v, 0.0).unwrap();
        assert_eq!(g.value(d).item(), 10.0);
        let same = paired_distance(&mut g, a, a, v, 1e-6).unwrap();
        assert_eq!(g.value(same).item(), 0.0);

        assert_eq!(batch_norm_average_value(&[]), None);
        assert_eq!(batch_norm_average_value(&[vec![0.6, 0.8], vec![1.0, 0.0]]), Some(1.0));
    }

    #[test]
    fn margin_delta_hand_cases() {
        assert!((margin_delta_value(0.4, 0.2, 0.5) - 0.3).abs() < 1e-12);
        assert_eq!(margin_delta_value(0.75, 0.25, 0.5), 0.0);
        assert_eq!(margin_delta_value(0.9, 0.2, 0.5), 0.0);
        assert_eq!(margin_delta_value(0.3, 0.3, 0.5), 0.5);
        let mut g = Graph::<f64>::new();
        let dn = g.leaf(Tensor::scalar(0.4));
        let dp = g.leaf(Tensor::scalar(0.2));
        let d = margin_delta(&mut g, dn, dp, 0.5).unwrap();
        assert!((g.value(d).item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn weights_zero_leaves_half_translation_loss() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::scalar(2.7));
        let pa = rows(&mut g, &[&[1.0, 2.0], &[0.5, -1.0]]);
        let pb = rows(&mut g, &[&[0.0, 1.0], &[2.0, 2.0]]);
        let neg = NegativeMatrix::new(2, 1, vec![1, 0]);
        let cfg = LossConfig {
            n_neg: 1,
            ..LossConfig::translation_only()
        };
        let (t, b) = total_loss(&mut g, l, pa, pb, &neg, &neg, &cfg).unwrap();
        assert_eq!(g.value(t).item(), 0.5 * 2.7);
        assert_eq!(b.total, 0.5 * 2.7);
    }

    #[test]
    fn rejects_bad_negatives() {
        let mut g = Graph::<f64>::new();
        let l = g.leaf(Tensor::scalar(1.0));
        let pa = rows(&mut g, &[&[1.0, 2.0], &[0.5, -1.0]]);
        let pb = rows(&mut g, &[&[0.0, 1.0], &[2.0, 2.0]]);
        let cfg = LossConfig {
            n_neg: 1,
            ..LossConfig::default()
        };
        let selfneg = NegativeMatrix::new(2, 1, vec![0, 0]);
        let ok = NegativeMatrix::new(2, 1, vec![1, 0]);
        assert!(matches!(
            total_loss(&mut g, l, pa, pb, &selfneg, &ok, &cfg),
            Err(LossError::SelfNegative { row: 0 })
        ));
        let cfg2 = LossConfig {
            n_neg: 2,
            ..LossConfig::default()
        };
        assert!(matches!(
            total_loss(&mut g, l, pa, pb, &ok, &ok, &cfg2),
            Err(LossError::TooManyNegatives { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { beta: 1.5, ..Default::default() },
            LossConfig { lambda: -0.1, ..Default::default() },
            LossConfig { alpha: 0.0, ..Default::default() },
            LossConfig { epsilon: 0.0, ..Default::default() },
            LossConfig { label_smoothing: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
