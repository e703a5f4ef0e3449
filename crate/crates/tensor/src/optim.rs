use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Adam(lr 2e-4, β₁ 0.5, β₂ 0.999), the usual small-GAN setting.
    pub fn gan_default() -> Self {
        Self::Adam {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: default_eps(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer state over an ordered parameter list. The same parameters must
/// be passed, in the same order, on every step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the parameters' gradients, then clears them.
    ///
    /// Nothing is modified when a gradient is missing or the parameter list
    /// does not match the moment buffers. A non-finite parameter after the
    /// update is reported as [`TensorError::NonFinite`].
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(TensorError::MissingGrad { index });
        }
        if let OptimizerConfig::Adam { .. } = self.config {
            if self.first_moment.is_empty() {
                self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
                self.second_moment = self.first_moment.clone();
            }
            if self.first_moment.len() != params.len() {
                return Err(TensorError::ParamCount {
                    expected: self.first_moment.len(),
                    found: params.len(),
                });
            }
            for (i, p) in params.iter().enumerate() {
                if self.first_moment[i].len() != p.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "optimizer moments",
                        left: vec![self.first_moment[i].len()],
                        right: p.shape().to_vec(),
                    });
                }
            }
        }

        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for p in params.iter_mut() {
                    let grad = p.take_grad().expect("checked above");
                    for (w, g) in p.data_mut().iter_mut().zip(grad) {
                        *w = (f64::from(*w) - lr * f64::from(g)) as f32;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                for (i, p) in params.iter_mut().enumerate() {
                    let grad = p.take_grad().expect("checked above");
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, (w, g)) in p.data_mut().iter_mut().zip(grad).enumerate() {
                        let g = f64::from(g);
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        *w = (f64::from(*w) - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
                    }
                }
            }
        }

        for (param, p) in params.iter().enumerate() {
            if let Some(index) = p.data().iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite {
                    context: format!("parameter {param} after optimizer step {}", self.steps),
                    index,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: f32, grad: f32) -> Tensor {
        let mut t = Tensor::param([1], vec![value]).unwrap();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn sgd_step() {
        let mut p = with_grad(1.0, 2.0);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1 });
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-7);
        assert!(p.grad().is_none());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut opt = Optimizer::new(OptimizerConfig::adam(lr));
        let mut params: Vec<Tensor> = [0.0f32, 0.25, -1.0].iter().map(|&v| with_grad(v, 1.0)).collect();
        let before: Vec<f32> = params.iter().map(|p| p.data()[0]).collect();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        opt.step(&mut refs).unwrap();
        for (p, b) in params.iter().zip(before) {
            let moved = f64::from(b) - f64::from(p.data()[0]);
            // f32 storage of the parameter bounds the achievable agreement.
            let tolerance = 1e-9 + f64::from(f32::EPSILON) * f64::from(b.abs());
            assert!((moved - lr).abs() <= tolerance, "moved {moved}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        for config in [OptimizerConfig::Sgd { lr: 0.5 }, OptimizerConfig::adam(0.1)] {
            let mut p = with_grad(0.3, 0.0);
            Optimizer::new(config).step(&mut [&mut p]).unwrap();
            assert_eq!(p.data(), &[0.3]);
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut a = with_grad(1.0, 1.0);
        let mut b = Tensor::param([1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        assert_eq!(
            opt.step(&mut [&mut a, &mut b]),
            Err(TensorError::MissingGrad { index: 1 })
        );
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut p = with_grad(f32::MAX, -f32::MAX);
        let err = Optimizer::new(OptimizerConfig::Sgd { lr: 10.0 })
            .step(&mut [&mut p])
            .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }
}
