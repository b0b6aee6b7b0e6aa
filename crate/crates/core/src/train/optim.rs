use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::TrainError;

/// Linear warmup from zero, then inverse square-root decay.
pub fn lr_at(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    let step = step.max(1) as f64;
    let w = warmup_steps as f64;
    if warmup_steps == 0 {
        return base_lr / step.sqrt();
    }
    if step <= w {
        base_lr * step / w
    } else {
        base_lr * (w / step).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamState {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads.params().map(|(_, g)| g.sum_squares().to_f64_lossy()).sum::<f64>().sqrt()
}

/// One Adam update with decoupled weight decay. Parameters without a gradient
/// see a zero gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hyper: &AdamHyper,
    grad_scale: f64,
) -> Result<(), TrainError> {
    for (id, g) in grads.params() {
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: params.name(id).to_string(),
                index: i,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let decay = T::of(1.0 - lr * hyper.weight_decay);
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(hyper.eps);
    let gs = T::of(grad_scale);
    for i in 0..params.len() {
        let id = ParamId(i);
        let g = grads.param(id);
        let p = params.get_mut(id).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g.data()[j] * gs);
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let v_hat = v[j] * inv_bc2;
            p[j] = p[j] * decay - step * m[j] / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_hand_values() {
        assert!((lr_at(4000, 5e-4, 4000) - 5e-4).abs() < 1e-18);
        assert!((lr_at(2000, 5e-4, 4000) - 2.5e-4).abs() < 1e-18);
        assert!((lr_at(16000, 5e-4, 4000) - 2.5e-4).abs() < 1e-18);
        let below = lr_at(3999, 1.0, 4000);
        let above = lr_at(4001, 1.0, 4000);
        assert!((below - 1.0).abs() < 1e-3 && (above - 1.0).abs() < 1e-3);
    }

    fn one_param(x: f64, grad: f64) -> (ParamStore<f64>, Gradients<f64>) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::scalar(x));
        let mut g = Graph::new();
        let v = g.param(&s, id);
        let loss = g.scale(v, grad);
        let grads = g.backward(loss).unwrap();
        (s, grads)
    }

    const HYPER: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, grads) = one_param(1.5, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grads, &mut st, 0.1, &HYPER, 1.0).unwrap();
        assert_eq!(s.get(ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, grads) = one_param(1.0, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grads, &mut st, 0.01, &HYPER, 1.0).unwrap();
        assert!((s.get(ParamId(0)).item() - 0.99).abs() < 1e-8);
    }

    #[test]
    fn decay_only_shrinks() {
        let (mut s, grads) = one_param(2.0, 0.0);
        let mut st = AdamState::new(&s);
        let h = AdamHyper {
            weight_decay: 0.5,
            ..HYPER
        };
        adam_step(&mut s, &grads, &mut st, 0.1, &h, 1.0).unwrap();
        assert!((s.get(ParamId(0)).item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let (mut s, grads) = one_param(1.0, f64::NAN);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &grads, &mut st, 0.1, &HYPER, 1.0).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { .. }));
        assert_eq!(s.get(ParamId(0)).item(), 1.0);
        assert_eq!(st.t, 0);
    }
}
