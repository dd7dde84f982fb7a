//! Training loop shared by the MIL network and the student.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelParams, OptimConfig, OptimState, Outputs};
use crate::error::{invalid, Error, Result};
use crate::imaging::{MultiScoreMap, ScoreMap};
use crate::mil::{total_loss, LossBreakdown};
use crate::real::Real;
use crate::seeds::ConfidentLabelMap;
use crate::segments::{build_segment_sets, SegmentConfig, SegmentSets};

/// Forward, MIL loss, backward and one SGD update on a single image.
/// Returns the loss measured before the update.
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    opt: &mut OptimState<T>,
    image: &MultiScoreMap<T>,
    sets: &SegmentSets,
    lambda: f64,
    eps: f64,
) -> Result<LossBreakdown<T>> {
    let (out, cache) = params.forward_cached(image)?;
    let loss = total_loss(&out.b_ag, &out.b_aw, sets, lambda, eps)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            step: opt.step,
            detail: format!("l_ag={} l_aw={}", loss.l_ag, loss.l_aw),
        });
    }
    let d_ag = (lambda > 0.0).then_some(&loss.grad_ag);
    let grads = params.backward(&cache, d_ag, Some(&loss.grad_aw))?;
    opt.apply(params, &grads)?;
    Ok(loss)
}

/// Loss value and gradients on the two branch outputs.
#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub total: f64,
    pub l_ag: Option<f64>,
    pub l_aw: f64,
    pub d_ag: Option<ScoreMap<f32>>,
    pub d_aw: Option<MultiScoreMap<f32>>,
}

/// A per-image training objective over the network outputs.
pub trait Objective: Sync {
    type Target: Clone + Sync;

    fn flip(&self, target: &Self::Target) -> Self::Target;

    fn evaluate(&self, out: &Outputs<f32>, target: &Self::Target) -> Result<ObjectiveValue>;
}

/// MIL losses on segments rebuilt from the confident labels at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct MilObjective {
    pub lambda: f64,
    pub eps: f64,
    pub segments: SegmentConfig,
    pub num_classes: usize,
}

impl Objective for MilObjective {
    type Target = ConfidentLabelMap;

    fn flip(&self, target: &ConfidentLabelMap) -> ConfidentLabelMap {
        target.flip_horizontal()
    }

    fn evaluate(&self, out: &Outputs<f32>, target: &ConfidentLabelMap) -> Result<ObjectiveValue> {
        let sets = build_segment_sets(target, self.num_classes, &self.segments)?;
        let loss = total_loss(&out.b_ag, &out.b_aw, &sets, self.lambda, self.eps)?;
        Ok(ObjectiveValue {
            total: loss.total,
            l_ag: Some(loss.l_ag),
            l_aw: loss.l_aw,
            d_ag: (self.lambda > 0.0).then_some(loss.grad_ag),
            d_aw: Some(loss.grad_aw),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    /// Random horizontal flips.
    pub flip: bool,
    /// Seeds the sample order and flips.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: OptimConfig::default(),
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub sample: usize,
    pub flipped: bool,
    pub lr: f64,
    pub total: f64,
    pub l_ag: Option<f64>,
    pub l_aw: f64,
}

/// Batch-1 SGD over a fixed list of `(input, target)` pairs, visiting them
/// in a fresh seeded order every epoch.
pub struct Trainer<'a, O: Objective> {
    params: ModelParams<f32>,
    opt: OptimState<f32>,
    objective: &'a O,
    items: &'a [(MultiScoreMap<f32>, O::Target)],
    flip: bool,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl<'a, O: Objective> Trainer<'a, O> {
    pub fn new(
        params: ModelParams<f32>,
        opt: OptimState<f32>,
        objective: &'a O,
        items: &'a [(MultiScoreMap<f32>, O::Target)],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.optim.validate()?;
        if items.is_empty() {
            return invalid("no training items");
        }
        Ok(Trainer {
            params,
            opt,
            objective,
            items,
            flip: cfg.flip,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            order: Vec::new(),
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn optim(&self) -> &OptimState<f32> {
        &self.opt
    }

    pub fn optim_mut(&mut self) -> &mut OptimState<f32> {
        &mut self.opt
    }

    pub fn into_parts(self) -> (ModelParams<f32>, OptimState<f32>) {
        (self.params, self.opt)
    }

    pub fn is_done(&self) -> bool {
        self.opt.step >= self.opt.config.total_steps
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.opt.step;
        let pos = step % self.items.len();
        if pos == 0 || self.order.is_empty() {
            self.order = (0..self.items.len()).collect();
            self.order.shuffle(&mut self.rng);
        }
        let sample = self.order[pos];
        let flipped = self.flip && self.rng.gen_bool(0.5);
        let (image, target) = &self.items[sample];
        let (out, cache, value) = if flipped {
            let img = image.flip_horizontal();
            let (out, cache) = self.params.forward_cached(&img)?;
            let value = self.objective.evaluate(&out, &self.objective.flip(target))?;
            (out, cache, value)
        } else {
            let (out, cache) = self.params.forward_cached(image)?;
            let value = self.objective.evaluate(&out, target)?;
            (out, cache, value)
        };
        drop(out);
        if !value.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("sample {sample}: l_ag={:?} l_aw={}", value.l_ag, value.l_aw),
            });
        }
        let grads = self.params.backward(&cache, value.d_ag.as_ref(), value.d_aw.as_ref())?;
        let lr = self.opt.apply(&mut self.params, &grads)?;
        if !self.params.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        Ok(StepLog {
            step,
            sample,
            flipped,
            lr,
            total: value.total,
            l_ag: value.l_ag,
            l_aw: value.l_aw,
        })
    }

    /// Runs until `total_steps`, calling `on_step` after each update.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}
