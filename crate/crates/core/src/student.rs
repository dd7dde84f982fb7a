//! Fully supervised retraining on hard pseudo labels.
//!
//! The student is a fresh copy of the same network. Only the class-aware
//! branch receives a loss; inference reads `b_aw`.

use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::imaging::{BoundaryLabelMap, MultiScoreMap};
use crate::net::{ModelParams, NetConfig, Objective, ObjectiveValue, OptimState, Outputs, StepLog, TrainConfig, Trainer};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelLossConfig {
    pub eps: f64,
}

impl Default for PixelLossConfig {
    fn default() -> Self {
        PixelLossConfig { eps: 1e-7 }
    }
}

impl PixelLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad_config("student.loss.eps", "must be in (0, 0.5)");
        }
        Ok(())
    }
}

/// Class-balanced cross entropy, averaged over pixels then classes.
///
/// Per class the positive term is weighted by the fraction of negative
/// pixels in that channel and the negative term by the fraction of positive
/// ones. Predictions are clamped to `[eps, 1 - eps]`; clamped pixels get a
/// zero gradient.
pub fn balanced_bce<T: Real>(pred: &MultiScoreMap<T>, target: &BoundaryLabelMap, cfg: &PixelLossConfig) -> Result<(f64, MultiScoreMap<T>)> {
    cfg.validate()?;
    let (w, h, c) = (pred.width(), pred.height(), pred.channels());
    if (w, h, c) != (target.width(), target.height(), target.channels()) {
        return invalid("prediction and target shapes differ");
    }
    if c == 0 || w * h == 0 {
        return invalid("empty prediction");
    }
    let n = (w * h) as f64;
    let scale = 1.0 / (n * c as f64);
    let (lo, hi) = (cfg.eps, 1.0 - cfg.eps);
    let mut grad = MultiScoreMap::zeros(w, h, c);
    let mut value = 0.0;
    for k in 0..c {
        let t = target.channel(k);
        let positives = t.iter().filter(|&&b| b).count() as f64;
        let beta = (n - positives) / n;
        let mut sum = 0.0;
        for ((g, &p), &pos) in grad.channel_mut(k).iter_mut().zip(pred.channel(k)).zip(t) {
            let raw = p.as_f64();
            let q = raw.clamp(lo, hi);
            let inside = raw > lo && raw < hi;
            let d = if pos {
                sum -= beta * q.ln();
                -beta / q
            } else {
                sum -= (1.0 - beta) * (1.0 - q).ln();
                (1.0 - beta) / (1.0 - q)
            };
            *g = T::of(if inside { d * scale } else { 0.0 });
        }
        value += sum * scale;
    }
    Ok((value, grad))
}

/// Balanced BCE on the class-aware output against hard labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StudentObjective {
    pub loss: PixelLossConfig,
}

impl Objective for StudentObjective {
    type Target = BoundaryLabelMap;

    fn flip(&self, target: &BoundaryLabelMap) -> BoundaryLabelMap {
        target.flip_horizontal()
    }

    fn evaluate(&self, out: &Outputs<f32>, target: &BoundaryLabelMap) -> Result<ObjectiveValue> {
        let (value, grad) = balanced_bce(&out.b_aw, target, &self.loss)?;
        Ok(ObjectiveValue {
            total: value,
            l_ag: None,
            l_aw: value,
            d_ag: None,
            d_aw: Some(grad),
        })
    }
}

/// Trains a freshly initialized network on `(image, hard label)` pairs.
pub fn train_student(
    items: &[(MultiScoreMap<f32>, BoundaryLabelMap)],
    net: &NetConfig,
    train: &TrainConfig,
    loss: &PixelLossConfig,
    init_seed: u64,
    on_step: impl FnMut(&StepLog),
) -> Result<ModelParams<f32>> {
    net.validate()?;
    loss.validate()?;
    if let Some((i, _)) = items.iter().enumerate().find(|(_, (_, t))| t.channels() != net.num_classes) {
        return invalid(format!("pseudo label {i} has the wrong number of classes"));
    }
    let params = ModelParams::<f32>::init(net, init_seed)?;
    let opt = OptimState::new(train.optim.clone(), &params);
    let objective = StudentObjective { loss: *loss };
    let mut trainer = Trainer::new(params, opt, &objective, items, train)?;
    trainer.run(on_step)?;
    Ok(trainer.into_parts().0)
}

/// Student prediction: the class-aware branch.
pub fn student_predict(params: &ModelParams<f32>, image: &MultiScoreMap<f32>) -> Result<MultiScoreMap<f32>> {
    Ok(params.forward_any(image)?.b_aw)
}
