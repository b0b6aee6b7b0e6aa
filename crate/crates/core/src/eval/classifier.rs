use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::{adam_step, AdamHyper, AdamState};

use super::{EmbeddingMatrix, EvalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierHyper {
    pub hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        ClassifierHyper {
            hidden: 64,
            lr: 1e-3,
            max_epochs: 50,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// One-hidden-layer ReLU network with a softmax output, over features
/// standardized with the training split's per-dimension mean and deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub labels: Vec<String>,
    params: ParamStore<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
    pub best_epoch: usize,
    pub dev_accuracy: f64,
}

const W1: ParamId = ParamId(0);
const B1: ParamId = ParamId(1);
const W2: ParamId = ParamId(2);
const B2: ParamId = ParamId(3);

fn labels_of(m: &EmbeddingMatrix, what: &str) -> Result<Vec<String>, EvalError> {
    m.labels
        .clone()
        .ok_or_else(|| EvalError::Invalid(format!("{what} embeddings carry no labels")))
}

fn forward(g: &mut Graph<f64>, params: &ParamStore<f64>, x: Tensor<f64>) -> Result<crate::autograd::Var, EvalError> {
    let x = g.constant(x);
    let w1 = g.param(params, W1);
    let b1 = g.param(params, B1);
    let w2 = g.param(params, W2);
    let b2 = g.param(params, B2);
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    Ok(g.add_bias(o, b2)?)
}

/// Floor on a feature's deviation before it is used as a divisor.
const MIN_STD: f64 = 1e-6;

fn standardizer(m: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (m.rows() as f64, m.dim());
    let mut mean = vec![0.0; d];
    for i in 0..m.rows() {
        for (s, &x) in mean.iter_mut().zip(m.row(i)) {
            *s += x as f64 / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..m.rows() {
        for ((v, &x), mu) in var.iter_mut().zip(m.row(i)).zip(&mean) {
            *v += (x as f64 - mu).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| 1.0 / v.sqrt().max(MIN_STD)).collect();
    (mean, scale)
}

fn rows_tensor(m: &EmbeddingMatrix, idx: &[usize], shift: &[f64], scale: &[f64]) -> Tensor<f64> {
    let mut data = Vec::with_capacity(idx.len() * m.dim());
    for &i in idx {
        data.extend(m.row(i).iter().zip(shift).zip(scale).map(|((&x, mu), s)| (x as f64 - mu) * s));
    }
    Tensor::new(vec![idx.len(), m.dim()], data).expect("non-empty batch")
}

impl Classifier {
    /// Class probabilities per row; each row sums to 1.
    pub fn predict_proba(&self, m: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>, EvalError> {
        let idx: Vec<usize> = (0..m.rows()).collect();
        let mut g = Graph::new();
        if m.dim() != self.shift.len() {
            return Err(EvalError::Invalid(format!("classifier expects dim {}, got {}", self.shift.len(), m.dim())));
        }
        let logits = forward(&mut g, &self.params, rows_tensor(m, &idx, &self.shift, &self.scale))?;
        let c = self.labels.len();
        Ok(g.value(logits)
            .data()
            .chunks(c)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|x| x / z).collect()
            })
            .collect())
    }

    pub fn predict(&self, m: &EmbeddingMatrix) -> Result<Vec<usize>, EvalError> {
        Ok(self
            .predict_proba(m)?
            .iter()
            .map(|p| p.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect())
    }

    /// Fraction of rows whose predicted label matches; unseen labels count as wrong.
    pub fn accuracy(&self, m: &EmbeddingMatrix) -> Result<f64, EvalError> {
        let gold = labels_of(m, "evaluation")?;
        let pred = self.predict(m)?;
        let hits = pred.iter().zip(&gold).filter(|(&p, g)| &self.labels[p] == *g).count();
        Ok(hits as f64 / gold.len().max(1) as f64)
    }
}

/// Trains on `train`, keeping the epoch with the best `dev` accuracy (earliest on ties).
pub fn train_classifier(
    train: &EmbeddingMatrix,
    dev: &EmbeddingMatrix,
    hyper: &ClassifierHyper,
) -> Result<Classifier, EvalError> {
    if train.dim() != dev.dim() {
        return Err(EvalError::Invalid(format!("train dim {} vs dev dim {}", train.dim(), dev.dim())));
    }
    if train.language != dev.language {
        return Err(EvalError::Invalid("train and dev embeddings come from different languages".into()));
    }
    let gold = labels_of(train, "training")?;
    let mut labels = gold.clone();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(EvalError::SingleClass(labels.first().cloned().unwrap_or_default()));
    }
    let y: Vec<Option<usize>> = gold.iter().map(|l| labels.binary_search(l).ok()).collect();
    let (shift, scale) = standardizer(train);
    let (d, h, c) = (train.dim(), hyper.hidden, labels.len());

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut init = |rows: usize, cols: usize| {
        let a = 1.0 / (rows as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a).expect("finite bound");
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| u.sample(&mut rng)).collect()).expect("shape")
    };
    let mut params = ParamStore::new();
    params.add("w1", init(d, h));
    params.add("b1", Tensor::zeros(&[h]));
    params.add("w2", init(h, c));
    params.add("b2", Tensor::zeros(&[c]));
    let mut state = AdamState::new(&params);
    let adam = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    let mut best = Classifier {
        labels: labels.clone(),
        params: params.clone(),
        shift: shift.clone(),
        scale: scale.clone(),
        best_epoch: 0,
        dev_accuracy: f64::NEG_INFINITY,
    };
    let mut order: Vec<usize> = (0..train.rows()).collect();
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let mut g = Graph::new();
            let logits = forward(&mut g, &params, rows_tensor(train, chunk, &shift, &scale))?;
            let t: Vec<Option<usize>> = chunk.iter().map(|&i| y[i]).collect();
            let loss = g.smoothed_nll(logits, &t, 0.0)?;
            let grads = g.backward(loss)?;
            adam_step(&mut params, &grads, &mut state, hyper.lr, &adam, 1.0)?;
        }
        let current = Classifier {
            labels: labels.clone(),
            params: params.clone(),
            shift: shift.clone(),
            scale: scale.clone(),
            best_epoch: epoch,
            dev_accuracy: 0.0,
        };
        let acc = current.accuracy(dev)?;
        if acc > best.dev_accuracy {
            best = Classifier {
                dev_accuracy: acc,
                ..current
            };
        }
    }
    Ok(best)
}
