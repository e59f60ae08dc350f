use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Halve every `every` steps, never below `lr_min`.
    StepHalving { lr: f64, every: u64, lr_min: f64 },
    /// Cosine decay from `lr_max` to `lr_min` over `total_steps`.
    Cosine { lr_max: f64, lr_min: f64, total_steps: u64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::StepHalving { lr, every, lr_min } => {
                let k = if every == 0 { 0 } else { step / every };
                (lr * 0.5f64.powi(k.min(1000) as i32)).max(lr_min)
            }
            LrSchedule::Cosine {
                lr_max,
                lr_min,
                total_steps,
            } => {
                let frac = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// `(low, high)` bounds of the schedule.
    pub fn range(&self) -> (f64, f64) {
        match *self {
            LrSchedule::Constant { lr } => (lr, lr),
            LrSchedule::StepHalving { lr, lr_min, .. } => (lr_min.min(lr), lr),
            LrSchedule::Cosine { lr_max, lr_min, .. } => (lr_min, lr_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Adam / AdamW state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Learning rate the next step will use.
    pub fn lr(&self) -> f64 {
        self.cfg.schedule.at(self.step)
    }

    /// Apply one update in place. Rejects non-finite gradients without
    /// touching the parameters or moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepInfo> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grads.len())?;
        if !all_finite(grads) {
            return Err(Error::NonFiniteLoss { step: self.step as usize });
        }
        let grad_norm = norm(grads);
        let scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.lr();
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - b2.powi(self.step.min(i32::MAX as u64) as i32);
        let wd = self.cfg.weight_decay;
        for i in 0..params.len() {
            let mut g = grads[i] * scale;
            if self.cfg.kind == OptimizerKind::Adam && wd != 0.0 {
                g += wd * params[i];
            }
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.cfg.kind == OptimizerKind::Adamw && wd != 0.0 {
                params[i] -= lr * wd * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
        }
        Ok(StepInfo { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine {
            lr_max: 1e-4,
            lr_min: 1e-8,
            total_steps: 100,
        };
        assert_eq!(s.at(0), 1e-4);
        assert!((s.at(100) - 1e-8).abs() < 1e-20);
        assert!((s.at(50) - (1e-8 + 0.5 * (1e-4 - 1e-8))).abs() < 1e-18);
        for k in 0..200 {
            let lr = s.at(k);
            assert!(lr >= 1e-8 - 1e-20 && lr <= 1e-4);
        }
    }

    #[test]
    fn step_halving() {
        let s = LrSchedule::StepHalving {
            lr: 1.0,
            every: 10,
            lr_min: 0.1,
        };
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 0.5);
        assert_eq!(s.at(25), 0.25);
        assert_eq!(s.at(1000), 0.1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let cfg = OptimizerConfig {
            schedule: LrSchedule::Constant { lr: 0.05 },
            clip_norm: None,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, 2);
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        let mut p = vec![0.0];
        let mut opt = Optimizer::new(
            OptimizerConfig {
                schedule: LrSchedule::Constant { lr: 0.1 },
                ..Default::default()
            },
            1,
        );
        let info = opt.step(&mut p, &[5.0]).unwrap();
        assert_eq!(info.grad_norm, 5.0);
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_leaves_state() {
        let mut p = vec![1.0];
        let mut opt = Optimizer::new(OptimizerConfig::default(), 1);
        assert!(opt.step(&mut p, &[f64::NAN]).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
