use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

/// Global L2 clipping threshold used by every training loop.
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and weight decay non-negative (lr={}, wd={})",
                self.learning_rate, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// SGD or Adam (decoupled weight decay) over a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Changes the step size for subsequent steps (schedules).
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` and clears their gradients. The list
    /// must hold the same tensors in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Optimizer(format!("parameter {i} has no gradient")));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
        {
            return Err(Error::Optimizer("parameter set changed between steps".into()));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.learning_rate;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            let data = p.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(&g) {
                        *x -= lr * (gi + c.weight_decay * *x);
                    }
                }
                OptimizerKind::Adam => {
                    for j in 0..data.len() {
                        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        data[j] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * data[j]);
                    }
                }
            }
            p.clear_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                p.clear_grad();
                p.accumulate_grad(&scaled).expect("same shape");
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Tensor {
        let mut t = Tensor::scalar(v).with_requires_grad(true);
        if let Some(g) = g {
            t.accumulate_grad(&[g]).unwrap();
        }
        t
    }

    #[test]
    fn sgd_direct_formula() {
        let mut p = param(1.0, Some(2.0));
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(0.5, Some(1.0));
        let mut cfg = OptimizerConfig::adam(1e-3);
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((0.5 - p.data()[0] - 1e-3).abs() < 1e-10);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = param(0.7, Some(0.0));
            let cfg = OptimizerConfig {
                kind,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            };
            let mut opt = Optimizer::new(cfg).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.data()[0], 0.7);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = param(1.0, None);
        let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
        assert!(opt.step(&mut [&mut p]).is_err());
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = param(0.0, Some(3.0));
        let mut b = param(0.0, Some(4.0));
        let n = clip_grad_norm(&mut [&mut a, &mut b], 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-12);
    }
}
