use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::nn::Param;
use crate::Scalar;

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update from the gradients held by `params`. A parameter
/// without a gradient is treated as having a zero gradient. Nothing is
/// modified if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [Param<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(
        params.len(),
        state.m.len(),
        "optimizer state built for a different model"
    );
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = lr * cfg.weight_decay;
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().map(<[T]>::to_vec);
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64().unwrap_or(f64::NAN));
            let mi = b1 * m[i].to_f64().unwrap_or(0.0) + (1.0 - b1) * g;
            let vi = b2 * v[i].to_f64().unwrap_or(0.0) + (1.0 - b2) * g * g;
            m[i] = T::lit(mi);
            v[i] = T::lit(vi);
            let w = data[i].to_f64().unwrap_or(f64::NAN);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            data[i] = T::lit(w - update - decay * w);
        }
    }
    Ok(())
}

/// Reduce-on-plateau settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Absolute improvement a loss must beat to count.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 3,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    cfg: SchedulerConfig,
    lr: f64,
    best: f64,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, cfg: SchedulerConfig) -> Self {
        Self {
            cfg,
            lr,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records a validation loss and returns the learning rate to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.cfg.threshold {
            self.best = val_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
        }
        if self.counter > self.cfg.patience {
            self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr).min(self.lr);
            self.counter = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn param(value: f32, grad: f32) -> Vec<Param<f32>> {
        let mut t = Tensor::new(&[1], vec![value], true).unwrap();
        t.accumulate_grad(&[grad]);
        vec![Param {
            name: "w".into(),
            tensor: t,
        }]
    }

    fn one_step(value: f32, grad: f32, lr: f64, wd: f64) -> f32 {
        let mut p = param(value, grad);
        let mut s = OptimizerState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &mut s, &cfg, lr).unwrap();
        assert_eq!(s.step, 1);
        p[0].tensor.data()[0]
    }

    #[test]
    fn single_step_without_decay() {
        assert!((one_step(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn single_step_with_decay() {
        assert!((one_step(1.0, 1.0, 0.1, 0.01) - 0.899).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        assert_eq!(one_step(0.37, 0.0, 0.1, 0.0), 0.37);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut p = param(1.0, f32::NAN);
        let mut s = OptimizerState::new(&p);
        let err = adamw_step(&mut p, &mut s, &AdamWConfig::default(), 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient(n) if n == "w"));
        assert_eq!(p[0].tensor.data()[0], 1.0);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn monotone_losses_keep_lr() {
        let mut s = PlateauScheduler::new(
            0.1,
            SchedulerConfig {
                patience: 2,
                ..SchedulerConfig::default()
            },
        );
        for l in [1.0, 0.9, 0.8] {
            assert_eq!(s.step(l), 0.1);
        }
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut s = PlateauScheduler::new(
            0.1,
            SchedulerConfig {
                factor: 0.1,
                patience: 2,
                ..SchedulerConfig::default()
            },
        );
        let trace: Vec<f64> = [1.0; 4].iter().map(|&l| s.step(l)).collect();
        assert_eq!(trace, vec![0.1, 0.1, 0.1, 0.1 * 0.1]);
    }

    #[test]
    fn floor_holds() {
        let mut s = PlateauScheduler::new(1e-6, SchedulerConfig::default());
        for _ in 0..20 {
            assert_eq!(s.step(5.0), 1e-6);
        }
    }

    proptest! {
        #[test]
        fn lr_never_rises_or_drops_below_floor(losses in prop::collection::vec(0.0f64..10.0, 1..60), patience in 0usize..4) {
            let cfg = SchedulerConfig { patience, min_lr: 1e-4, ..SchedulerConfig::default() };
            let mut s = PlateauScheduler::new(0.1, cfg);
            let mut prev = s.lr();
            for l in losses {
                let lr = s.step(l);
                prop_assert!(lr <= prev && lr >= 1e-4);
                prev = lr;
            }
        }

        #[test]
        fn update_is_independent_of_parameter_order(
            values in prop::collection::vec(-2.0f32..2.0, 3),
            grads in prop::collection::vec(-2.0f32..2.0, 3),
        ) {
            let build = |order: &[usize]| -> Vec<Param<f32>> {
                order.iter().map(|&i| {
                    let mut t = Tensor::new(&[1], vec![values[i]], true).unwrap();
                    t.accumulate_grad(&[grads[i]]);
                    Param { name: format!("p{i}"), tensor: t }
                }).collect()
            };
            let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
            let mut a = build(&[0, 1, 2]);
            let mut b = build(&[2, 0, 1]);
            let (mut sa, mut sb) = (OptimizerState::new(&a), OptimizerState::new(&b));
            for _ in 0..3 {
                adamw_step(&mut a, &mut sa, &cfg, 0.01).unwrap();
                adamw_step(&mut b, &mut sb, &cfg, 0.01).unwrap();
            }
            for p in &a {
                let q = b.iter().find(|q| q.name == p.name).unwrap();
                prop_assert_eq!(p.tensor.data(), q.tensor.data());
            }
        }
    }
}
