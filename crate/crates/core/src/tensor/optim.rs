//! AdamW with bias correction.

use super::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed: it turns the update into a
        // no-op, which the training loop relies on for dry runs.
        let ok = self.learning_rate >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::Contract(format!(
                "invalid optimizer hyperparameters: {self:?}"
            )))
        }
    }
}

/// One decoupled-weight-decay Adam update for a single parameter tensor.
///
/// `step` is 1-based and drives bias correction. First/second moment
/// buffers `m`/`v` are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    name: &str,
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    debug_assert!(step >= 1);
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adamw_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFiniteGradient { name: name.into() });
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    let wd = T::from_f64(cfg.weight_decay);
    let bias1 = T::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bias2 = T::from_f64(1.0 - cfg.beta2.powi(step as i32));
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (one - b1) * grad[i];
        v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] = param[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * param[i]);
    }
    Ok(())
}

/// Optimizer state for a fixed, ordered set of parameter tensors.
#[derive(Debug)]
pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    /// Advance the shared step counter; call once per batch.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn update(&mut self, slot: usize, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        adamw_step(
            name,
            param,
            grad,
            &mut self.m[slot],
            &mut self.v[slot],
            self.step,
            &self.config,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut p = vec![1.5f64, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adamw_step("p", &mut p, &[0.0, 0.0], &mut m, &mut v, 1, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut p = vec![1.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adamw_step("p", &mut p, &[1.0], &mut m, &mut v, 1, &cfg(0.1, 0.0)).unwrap();
        assert!(p[0] < 1.0);
    }

    #[test]
    fn converges_toward_quadratic_minimum() {
        // Scalar objective (p - 3)^2, gradient 2(p - 3), minimum at 3.
        let mut p = vec![0.0f64];
        let mut opt = AdamW::new(cfg(0.1, 0.0), &[1]);
        let mut last_gap = (p[0] - 3.0f64).abs();
        for _ in 0..10 {
            let grad = vec![2.0 * (p[0] - 3.0)];
            opt.begin_step();
            opt.update(0, "p", &mut p, &grad).unwrap();
            let gap = (p[0] - 3.0f64).abs();
            assert!(gap < last_gap, "gap {gap} did not shrink from {last_gap}");
            last_gap = gap;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_param_name() {
        let mut p = vec![1.0f32];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let err = adamw_step(
            "layer0.w_q",
            &mut p,
            &[f32::NAN],
            &mut m,
            &mut v,
            1,
            &cfg(0.1, 0.0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer0.w_q"));
    }

    #[test]
    fn weight_decay_shrinks_parameter_even_without_gradient() {
        let mut p = vec![2.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adamw_step("p", &mut p, &[0.0], &mut m, &mut v, 1, &cfg(0.1, 0.01)).unwrap();
        assert!(p[0] < 2.0 && p[0] > 1.9);
    }
}
