//! Adam parameter updates with bias correction.

use super::nn::Param;
use crate::error::{Error, Result};

/// Adam hyper-parameters; defaults lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// One Adam step over the given parameters.
///
/// Every parameter must have an accumulated gradient; gradients are left
/// untouched so the caller decides when to zero them.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Param>,
    cfg: &AdamConfig,
) -> Result<()> {
    for p in params {
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGradient {
                name: p.name.clone(),
            })?
            .data()
            .to_vec();
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i];
            p.moment1[i] = cfg.beta1 * p.moment1[i] + (1.0 - cfg.beta1) * g;
            p.moment2[i] = cfg.beta2 * p.moment2[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.moment1[i] / bc1;
            let v_hat = p.moment2[i] / bc2;
            p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_means_no_move() {
        let mut p = Param::new("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        p.zero_grad();
        adam_step([&mut p], &AdamConfig::default()).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step with constant gradient 1 moves by ~lr
        let mut p = Param::new("p", Tensor::scalar(0.0));
        p.accumulate_grad(&[1.0]);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step([&mut p], &cfg).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-12);
        assert!((p.value.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Param::new("w13", Tensor::scalar(0.0));
        let err = adam_step([&mut p], &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w13"));
    }

    #[test]
    fn identical_params_track_identical_trajectories() {
        let mut a = Param::new("a", Tensor::scalar(0.5));
        let mut b = Param::new("b", Tensor::scalar(0.5));
        let cfg = AdamConfig::default();
        for step in 0..100u32 {
            let g = (step as f64 * 0.37).sin();
            a.clear_grad();
            b.clear_grad();
            a.accumulate_grad(&[g]);
            b.accumulate_grad(&[g]);
            adam_step([&mut a, &mut b], &cfg).unwrap();
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn lr_zero_is_identity() {
        let mut p = Param::new("p", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        p.accumulate_grad(&[1.0, -1.0, 2.0]);
        adam_step([&mut p], &AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(p.value.data(), &[0.1, 0.2, 0.3]);
    }
}
