//! Central finite-difference verification of tape gradients (64-bit only).

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError};

/// Entries whose analytic/numeric difference is below this pass regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-8;
/// Gradients at least this large count toward `max_rel_err` even when within `ABS_FLOOR`.
pub const REPORT_MIN_GRAD: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error("objective is non-finite at a probe point of {param}[{index}]")]
    NonFinite { param: String, index: usize },
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures == 0)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<6} {:<32} n={:<6} max_rel={:.3e} max_abs={:.3e}",
                if p.failures == 0 { "ok" } else { "FAIL" },
                p.name,
                p.checked,
                p.max_rel_err,
                p.max_abs_err
            )?;
        }
        write!(
            f,
            "{} (rel_tol {:.0e}, step {:.0e}, worst {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.rel_tol,
            self.step,
            self.max_rel_err()
        )
    }
}

/// Runs `objective` once with the tape to get analytic gradients, then compares
/// them elementwise against `(f(θ+h) - f(θ-h)) / 2h` for every parameter.
pub fn grad_check<F, E>(
    params: &mut ParamStore<f64>,
    mut objective: F,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: Into<GradCheckError>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, params).map_err(Into::into)?;
    let grads = g.backward(loss)?;
    let analytic: HashMap<ParamId, Tensor<f64>> = params
        .ids()
        .map(|id| {
            let t = grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
            (id, t)
        })
        .collect();
    compare_gradients(params, objective, &analytic, step, rel_tol)
}

/// Finite-difference comparison against externally supplied analytic gradients.
pub fn compare_gradients<F, E>(
    params: &mut ParamStore<f64>,
    mut objective: F,
    analytic: &HashMap<ParamId, Tensor<f64>>,
    step: f64,
    rel_tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: Into<GradCheckError>,
{
    let mut eval = |params: &ParamStore<f64>, id: ParamId, index: usize| {
        let mut g = Graph::new();
        let loss = objective(&mut g, params).map_err(Into::into)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(GradCheckError::NonFinite {
                param: params.name(id).to_string(),
                index,
            });
        }
        Ok(v)
    };

    let mut report = Vec::new();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let mut check = ParamCheck {
            name: params.name(id).to_string(),
            checked: n,
            failures: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..n {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(params, id, i);
            params.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(params, id, i);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let a = analytic.get(&id).map_or(0.0, |t| t.data()[i]);
            let abs = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            let rel = if denom > 0.0 { abs / denom } else { 0.0 };
            let failed = abs > ABS_FLOOR && rel > rel_tol;
            if failed {
                check.failures += 1;
            }
            let score = if abs > ABS_FLOOR || denom >= REPORT_MIN_GRAD { rel } else { 0.0 };
            if score > check.max_rel_err {
                check.max_rel_err = score;
                check.worst_index = i;
            }
            check.max_abs_err = check.max_abs_err.max(abs);
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        rel_tol,
        step,
        params: report,
    })
}

/// Synthetic batch and loss settings for checking the full training objective.
#[derive(Clone, Debug)]
pub struct ObjectiveCheck {
    pub model: crate::model::ModelConfig,
    pub loss: crate::losses::LossConfig,
    pub pairs: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
}

/// Outcome of [`check_objective`]: the report plus the loss parts at the probe point.
#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub report: GradCheckReport,
    pub breakdown: crate::losses::LossBreakdown,
}

/// Gradient-checks translation loss plus distance constraint through the
/// encoder (both sides) and decoder on a random model and batch, with dropout off.
pub fn check_objective(spec: &ObjectiveCheck) -> Result<ObjectiveReport, GradCheckError> {
    use rand::{Rng, SeedableRng};

    use crate::data::sample_negatives;
    use crate::losses::{label_smoothed_nll, total_loss};
    use crate::model::{decoder_views, frame_encoder_input, Model, TokenBatch};
    use crate::tokenizer::RESERVED;

    let mut cfg = spec.model.clone();
    cfg.dropout = 0.0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let model = Model::<f64>::new(cfg.clone(), &mut rng)?;
    let v = cfg.vocab_size as u32;
    let sentence = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
        let len = rng.random_range(2..=5);
        (0..len).map(|_| rng.random_range(RESERVED.len() as u32..v)).collect()
    };
    let a: Vec<Vec<u32>> = (0..spec.pairs).map(|_| sentence(&mut rng)).collect();
    let b: Vec<Vec<u32>> = (0..spec.pairs).map(|_| sentence(&mut rng)).collect();
    let src = TokenBatch::from_rows(&a.iter().map(|s| frame_encoder_input(s)).collect::<Vec<_>>());
    let tgt_framed = TokenBatch::from_rows(&b.iter().map(|s| frame_encoder_input(s)).collect::<Vec<_>>());
    let (gs, ys): (Vec<_>, Vec<_>) = b.iter().map(|s| decoder_views(s)).unzip();
    let tgt_in = TokenBatch::from_rows(&gs);
    let tgt_out = TokenBatch::padded_to(&ys, tgt_in.len()).ids().to_vec();
    let langs: Vec<usize> = (0..spec.pairs).map(|_| rng.random_range(0..cfg.n_languages)).collect();
    let (neg_ab, neg_ba) =
        sample_negatives(spec.pairs, spec.loss.n_neg, &mut rng).map_err(|e| TensorError::Dimension(e.to_string()))?;

    let mut breakdown = None;
    let mut objective = |g: &mut Graph<f64>, p: &ParamStore<f64>| -> Result<Var, GradCheckError> {
        let m = Model::from_params(cfg.clone(), p.clone())?;
        let (logits, pa) = m.translate_forward(g, &src, &tgt_in, &langs, None)?;
        let l_mt = label_smoothed_nll(g, logits, &tgt_out, spec.loss.label_smoothing)?;
        let pb = m.encode(g, &tgt_framed, None)?.p;
        let (total, bd) = total_loss(g, l_mt, pa, pb, &neg_ab, &neg_ba, &spec.loss)?;
        breakdown.get_or_insert(bd);
        Ok(total)
    };
    let mut params = model.into_params();
    let report = grad_check(&mut params, &mut objective, spec.step, spec.rel_tol)?;
    Ok(ObjectiveReport {
        report,
        breakdown: breakdown.expect("objective ran"),
    })
}
