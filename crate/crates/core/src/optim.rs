//! AdamW with decoupled weight decay.

use thiserror::Error;

use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {index}; step aborted")]
    NonFiniteGradient { index: usize },
    #[error("parameter {index}: shape {param} does not match {other}")]
    ShapeMismatch { index: usize, param: Shape, other: Shape },
    #[error("expected {expected} tensors, got {got}")]
    CountMismatch { expected: usize, got: usize },
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 1e-5, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// Checks that the moments mirror `params`.
    pub fn matches(&self, params: &[Tensor<T>]) -> Result<(), OptimError> {
        for moments in [&self.m, &self.v] {
            if moments.len() != params.len() {
                return Err(OptimError::CountMismatch { expected: params.len(), got: moments.len() });
            }
            for (index, (p, m)) in params.iter().zip(moments).enumerate() {
                if p.shape() != m.shape() {
                    return Err(OptimError::ShapeMismatch { index, param: p.shape(), other: m.shape() });
                }
            }
        }
        Ok(())
    }
}

/// One AdamW update. Gradients are validated before anything is modified,
/// so a rejected step leaves both `params` and `state` untouched.
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
    cfg: &AdamW,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::CountMismatch { expected: params.len(), got: grads.len() });
    }
    state.matches(params)?;
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch { index, param: p.shape(), other: g.shape() });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient { index });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
    let step_size = T::lit(cfg.lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);

    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + one_b1 * gi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + one_b2 * gi * gi;
            let denom = (*vi * inv_bc2).sqrt() + eps;
            pd[i] = pd[i] * decay - step_size * *mi / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_step(p: f64, g: f64, cfg: &AdamW, steps: usize) -> f64 {
        let mut params = vec![Tensor::<f64>::scalar(p)];
        let mut st = AdamWState::new(&params);
        for _ in 0..steps {
            adamw_step(&mut params, &[Tensor::scalar(g)], &mut st, cfg).unwrap();
        }
        params[0].item()
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamW { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let p = scalar_step(1.0, 1.0, &cfg, 1);
        // Bias-corrected m̂ = 1, v̂ = 1: p − 0.1·1/(1 + 1e-8).
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let cfg = AdamW { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        assert_eq!(scalar_step(0.7, 0.0, &cfg, 5), 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamW { lr: 0.1, weight_decay: 0.1, ..Default::default() };
        let p = scalar_step(2.0, 0.0, &cfg, 3);
        assert!((p - 2.0 * 0.99f64.powi(3)).abs() < 1e-14);
    }

    #[test]
    fn matches_hand_rolled_second_step() {
        let cfg = AdamW { lr: 0.05, weight_decay: 0.01, beta1: 0.8, beta2: 0.9, eps: 1e-6 };
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = AdamWState::new(&params);
        adamw_step(&mut params, &[Tensor::scalar(0.5)], &mut st, &cfg).unwrap();
        adamw_step(&mut params, &[Tensor::scalar(-1.0)], &mut st, &cfg).unwrap();

        let (mut p, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in [(1, 0.5), (2, -1.0)] {
            p -= cfg.lr * cfg.weight_decay * p;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((params[0].item() - p).abs() < 1e-14);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let cfg = AdamW::default();
        let mut params = vec![Tensor::<f32>::full([2, 1, 1, 1], 1.0), Tensor::full([1, 1, 1, 1], 1.0)];
        let mut st = AdamWState::new(&params);
        let before = (params.clone(), st.clone());
        let grads = vec![Tensor::full([2, 1, 1, 1], 1.0), Tensor::full([1, 1, 1, 1], f32::NAN)];
        assert_eq!(adamw_step(&mut params, &grads, &mut st, &cfg), Err(OptimError::NonFiniteGradient { index: 1 }));
        assert_eq!((params, st), before);
    }

    #[test]
    fn shape_errors() {
        let cfg = AdamW::default();
        let mut params = vec![Tensor::<f32>::zeros([2, 1, 1, 1])];
        let mut st = AdamWState::new(&params);
        assert!(adamw_step(&mut params, &[Tensor::zeros([3, 1, 1, 1])], &mut st, &cfg).is_err());
        assert!(adamw_step(&mut params, &[], &mut st, &cfg).is_err());
    }
}
