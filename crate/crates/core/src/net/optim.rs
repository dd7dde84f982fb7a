use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams, Part};
use crate::error::{bad_config, invalid, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            total_steps: 2000,
            power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad_config("optim.base_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad_config("optim.momentum", "must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad_config("optim.weight_decay", "must be non-negative");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad_config("optim.power", "must be positive");
        }
        Ok(())
    }
}

/// `base_lr * (1 - step / total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return invalid("total_steps must be positive");
    }
    if step > total_steps {
        return invalid(format!("step {step} is past total_steps {total_steps}"));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// SGD with momentum, weight decay and polynomial learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T = f32> {
    pub config: OptimConfig,
    pub step: usize,
    momentum: Vec<Vec<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> OptimState<T> {
    pub fn new(config: OptimConfig, params: &ModelParams<T>) -> Self {
        OptimState {
            config,
            step: 0,
            momentum: (0..params.tensor_count()).map(|i| vec![T::zero(); params.tensor(i).len()]).collect(),
            frozen: vec![false; params.tensor_count()],
        }
    }

    /// Restores buffers read from a checkpoint.
    pub fn restore(config: OptimConfig, params: &ModelParams<T>, step: usize, momentum: Vec<Vec<T>>) -> Result<Self> {
        let mut s = Self::new(config, params);
        if momentum.len() != s.momentum.len() || momentum.iter().zip(&s.momentum).any(|(a, b)| a.len() != b.len()) {
            return invalid("momentum buffers do not match the parameters");
        }
        s.momentum = momentum;
        s.step = step;
        Ok(s)
    }

    pub fn momentum(&self, i: usize) -> &[T] {
        &self.momentum[i]
    }

    /// Excludes every tensor of `part` from updates.
    pub fn freeze(&mut self, params: &ModelParams<T>, part: Part) {
        for i in 0..params.tensor_count() {
            if params.part_of(i) == part {
                self.frozen[i] = true;
            }
        }
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn current_lr(&self) -> f64 {
        let total = self.config.total_steps.max(1);
        poly_lr(self.step.min(total), total, self.config.base_lr, self.config.power).unwrap_or(0.0)
    }

    /// `v = mu*v + g + wd*w; w -= lr*v` on every tensor that has a gradient
    /// and is not frozen. Returns the learning rate used.
    pub fn apply(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>) -> Result<f64> {
        if grads.tensors.len() != params.tensor_count() {
            return invalid("gradient count does not match the parameters");
        }
        let lr = self.current_lr();
        let (mu, wd, lr_t) = (T::of(self.config.momentum), T::of(self.config.weight_decay), T::of(lr));
        for (i, g) in grads.tensors.iter().enumerate() {
            let Some(g) = g else { continue };
            if self.frozen[i] {
                continue;
            }
            let w = params.tensor_mut(i);
            if g.len() != w.len() {
                return invalid(format!("gradient {i} has the wrong length"));
            }
            for ((wj, vj), &gj) in w.iter_mut().zip(&mut self.momentum[i]).zip(g) {
                *vj = mu * *vj + gj + wd * *wj;
                *wj -= lr_t * *vj;
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0, 100, 1e-2, 0.9).unwrap(), 1e-2);
        assert_eq!(poly_lr(100, 100, 1e-2, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1e-2, 0.9).unwrap();
        assert!((half - 1e-2 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((half - 5.359e-3).abs() < 1e-6);
        assert!(poly_lr(0, 0, 1e-2, 0.9).is_err());
        assert!(poly_lr(101, 100, 1e-2, 0.9).is_err());
    }

    #[test]
    fn sgd_update_by_hand() {
        let cfg = NetConfig::default();
        let mut p = ModelParams::<f64>::zeros(&cfg).unwrap();
        p.tensor_mut(1)[0] = 2.0;
        let mut opt = OptimState::new(
            OptimConfig {
                base_lr: 0.1,
                momentum: 0.5,
                weight_decay: 0.01,
                total_steps: 10,
                power: 1.0,
            },
            &p,
        );
        let mut grads = Gradients {
            tensors: vec![None; p.tensor_count()],
        };
        let mut g = vec![0.0; p.tensor(1).len()];
        g[0] = 1.0;
        grads.tensors[1] = Some(g);
        opt.apply(&mut p, &grads).unwrap();
        // v = 1 + 0.02 = 1.02; w = 2 - 0.1 * 1.02
        assert!((p.tensor(1)[0] - 1.898).abs() < 1e-12);
        opt.apply(&mut p, &grads).unwrap();
        // lr = 0.09; v = 0.51 + 1 + 0.01898
        let v = 0.5 * 1.02 + 1.0 + 0.01 * 1.898;
        assert!((p.tensor(1)[0] - (1.898 - 0.09 * v)).abs() < 1e-12);
        assert_eq!(opt.step, 2);
    }

    #[test]
    fn frozen_and_gradless_tensors_are_untouched() {
        let cfg = NetConfig::default();
        let mut p = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let before = p.clone();
        let mut opt = OptimState::new(OptimConfig::default(), &p);
        opt.freeze(&p, Part::ClassAware);
        let grads = Gradients {
            tensors: (0..p.tensor_count())
                .map(|i| (p.part_of(i) != Part::ClassAgnostic).then(|| vec![1.0; p.tensor(i).len()]))
                .collect(),
        };
        opt.apply(&mut p, &grads).unwrap();
        for i in 0..p.tensor_count() {
            let same = p.tensor(i) == before.tensor(i);
            assert_eq!(same, p.part_of(i) != Part::Backbone, "{}", p.tensor_name(i));
        }
    }
}
