//! A small two-branch boundary network with a hand-written backward pass.
//!
//! Backbone: four 3x3 conv + ReLU stages. The class-agnostic branch projects
//! the first three stages to a few channels each, upsamples them to input
//! resolution, concatenates and applies two 1x1 convs (ReLU between) and a
//! sigmoid. The class-aware branch is a 1x1 conv on the last stage,
//! upsampled, then a sigmoid. Their product is the final per-class output.

mod checkpoint;
mod layers;
mod optim;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::imaging::resample::Resampler;
use crate::imaging::{MultiScoreMap, ScoreMap};
use crate::real::Real;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{poly_lr, OptimConfig, OptimState};
pub use train::{train_step, MilObjective, Objective, ObjectiveValue, StepLog, Trainer, TrainConfig};

use layers::{col2im, conv_forward, conv_input_grad, conv_param_grads, im2col, relu_in_place, relu_mask, sigmoid, Geom};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub stage_channels: [usize; 4],
    pub stage_strides: [usize; 4],
    /// Channels each early stage is projected to in the class-agnostic branch.
    pub proj_width: usize,
    /// Hidden width between the two 1x1 convs of the class-agnostic branch.
    pub fuse_width: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_width: 64,
            input_height: 64,
            stage_channels: [16, 32, 64, 64],
            stage_strides: [1, 2, 2, 1],
            proj_width: 8,
            fuse_width: 16,
            num_classes: 3,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.input_height == 0 {
            return bad_config("net.input_width", "input size must be positive");
        }
        if self.stage_channels.contains(&0) {
            return bad_config("net.stage_channels", "channel counts must be positive");
        }
        if self.stage_strides.iter().any(|s| !(1..=2).contains(s)) {
            return bad_config("net.stage_strides", "strides must be 1 or 2");
        }
        if self.proj_width == 0 || self.fuse_width == 0 {
            return bad_config("net.proj_width", "branch widths must be positive");
        }
        if !(1..=64).contains(&self.num_classes) {
            return bad_config("net.num_classes", "must be in 1..=64");
        }
        Ok(())
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Part {
    Backbone,
    ClassAgnostic,
    ClassAware,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// `[cout, cin, k, k]`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    fn zeros(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.to_string(),
            cin,
            cout,
            k,
            stride,
            weight: vec![T::zero(); cout * cin * k * k],
            bias: vec![T::zero(); cout],
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

const STAGES: [usize; 4] = [0, 1, 2, 3];
const PROJ: [usize; 3] = [4, 5, 6];
const FUSE: usize = 7;
const AG_OUT: usize = 8;
const AW_OUT: usize = 9;
const LAYERS: usize = 10;

/// Named tensors of the network. Tensor `2l` is layer `l`'s weight and
/// `2l + 1` its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    config: NetConfig,
    layers: Vec<Conv<T>>,
}

/// Per-tensor gradients; `None` where no loss term reaches the tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Option<Vec<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outputs<T = f32> {
    pub b_ag: ScoreMap<T>,
    pub b_aw: MultiScoreMap<T>,
    pub b_final: MultiScoreMap<T>,
}

/// Pointwise product of the class-aware map with the class-agnostic map.
pub fn combine<T: Real>(b_ag: &ScoreMap<T>, b_aw: &MultiScoreMap<T>) -> MultiScoreMap<T> {
    let mut out = b_aw.clone();
    for c in 0..out.channels() {
        for (v, &a) in out.channel_mut(c).iter_mut().zip(b_ag.as_slice()) {
            *v *= a;
        }
    }
    out
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    width: usize,
    height: usize,
    stage_geom: [Geom; 4],
    stage_cols: Vec<Vec<T>>,
    feats: Vec<Vec<T>>,
    concat: Vec<T>,
    hidden: Vec<T>,
    b_ag: Vec<T>,
    b_aw: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// All-zero parameters.
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.stage_channels;
        let mut layers = Vec::with_capacity(LAYERS);
        let mut cin = 3;
        for s in STAGES {
            layers.push(Conv::zeros(&format!("s{}", s + 1), cin, ch[s], 3, config.stage_strides[s]));
            cin = ch[s];
        }
        for (i, &s) in [0, 1, 2].iter().enumerate() {
            layers.push(Conv::zeros(&format!("ag_proj{}", i + 1), ch[s], config.proj_width, 1, 1));
        }
        layers.push(Conv::zeros("ag_fuse", 3 * config.proj_width, config.fuse_width, 1, 1));
        layers.push(Conv::zeros("ag_out", config.fuse_width, 1, 1, 1));
        layers.push(Conv::zeros("aw_out", ch[3], config.num_classes, 1, 1));
        Ok(ModelParams {
            config: config.clone(),
            layers,
        })
    }

    /// Fan-in scaled uniform kernels `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut p.layers {
            let bound = (6.0 / layer.rows() as f64).sqrt();
            for w in &mut layer.weight {
                *w = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Conv<T>] {
        &self.layers
    }

    pub fn tensor_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn tensor_name(&self, i: usize) -> String {
        let l = &self.layers[i / 2];
        format!("{}.{}", l.name, if i % 2 == 0 { "weight" } else { "bias" })
    }

    pub fn tensor_dims(&self, i: usize) -> Vec<usize> {
        let l = &self.layers[i / 2];
        if i % 2 == 0 {
            vec![l.cout, l.cin, l.k, l.k]
        } else {
            vec![l.cout]
        }
    }

    pub fn tensor(&self, i: usize) -> &[T] {
        let l = &self.layers[i / 2];
        if i % 2 == 0 {
            &l.weight
        } else {
            &l.bias
        }
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [T] {
        let l = &mut self.layers[i / 2];
        if i % 2 == 0 {
            &mut l.weight
        } else {
            &mut l.bias
        }
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        (0..self.tensor_count()).find(|&i| self.tensor_name(i) == name)
    }

    pub fn part_of(&self, i: usize) -> Part {
        match i / 2 {
            l if STAGES.contains(&l) => Part::Backbone,
            AW_OUT => Part::ClassAware,
            _ => Part::ClassAgnostic,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.as_f64())).collect();
        ModelParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Conv {
                    name: l.name.clone(),
                    cin: l.cin,
                    cout: l.cout,
                    k: l.k,
                    stride: l.stride,
                    weight: conv(&l.weight),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Forward pass on an input of exactly the configured size.
    pub fn forward(&self, image: &MultiScoreMap<T>) -> Result<Outputs<T>> {
        if (image.width(), image.height()) != (self.config.input_width, self.config.input_height) {
            return invalid(format!(
                "input is {}x{} but the network expects {}x{}",
                image.width(),
                image.height(),
                self.config.input_width,
                self.config.input_height
            ));
        }
        self.forward_any(image)
    }

    /// Forward pass at any input size (used for multi-scale inference).
    pub fn forward_any(&self, image: &MultiScoreMap<T>) -> Result<Outputs<T>> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Forward pass keeping the activations needed by [`ModelParams::backward`].
    pub fn forward_cached(&self, image: &MultiScoreMap<T>) -> Result<(Outputs<T>, Cache<T>)> {
        if image.channels() != 3 {
            return invalid(format!("expected a 3-channel input, got {}", image.channels()));
        }
        let (w, h) = (image.width(), image.height());
        if w == 0 || h == 0 {
            return invalid("empty input");
        }
        let n = w * h;
        let mut x = image.as_slice().to_vec();
        let (mut cw, mut chh, mut cin) = (w, h, 3);
        let mut stage_geom = [Geom::new(1, 1, 1, 1, 1); 4];
        let mut stage_cols = Vec::with_capacity(4);
        let mut feats = Vec::with_capacity(4);
        for s in STAGES {
            let l = &self.layers[s];
            let g = Geom::new(cin, chh, cw, l.k, l.stride);
            let cols = im2col(&x, &g);
            let mut z = conv_forward(&l.weight, &l.bias, &cols, g.rows(), g.out_len());
            relu_in_place(&mut z);
            stage_geom[s] = g;
            stage_cols.push(cols);
            feats.push(z.clone());
            x = z;
            (cw, chh, cin) = (g.wo, g.ho, l.cout);
        }

        // Class-agnostic branch.
        let pw = self.config.proj_width;
        let mut concat = vec![T::zero(); 3 * pw * n];
        for (i, &li) in PROJ.iter().enumerate() {
            let l = &self.layers[li];
            let g = &stage_geom[i];
            let sn = g.out_len();
            let proj = conv_forward(&l.weight, &l.bias, &feats[i], l.cin, sn);
            let r = Resampler::new(g.wo, g.ho, w, h);
            for c in 0..pw {
                let dst = &mut concat[(i * pw + c) * n..(i * pw + c + 1) * n];
                r.apply(&proj[c * sn..(c + 1) * sn], dst);
            }
        }
        let fuse = &self.layers[FUSE];
        let mut hidden = conv_forward(&fuse.weight, &fuse.bias, &concat, fuse.cin, n);
        relu_in_place(&mut hidden);
        let out = &self.layers[AG_OUT];
        let mut b_ag = conv_forward(&out.weight, &out.bias, &hidden, out.cin, n);
        b_ag.iter_mut().for_each(|v| *v = sigmoid(*v));

        // Class-aware branch.
        let g4 = &stage_geom[3];
        let aw = &self.layers[AW_OUT];
        let sn = g4.out_len();
        let logits = conv_forward(&aw.weight, &aw.bias, &feats[3], aw.cin, sn);
        let r = Resampler::new(g4.wo, g4.ho, w, h);
        let classes = self.config.num_classes;
        let mut b_aw = vec![T::zero(); classes * n];
        for c in 0..classes {
            r.apply(&logits[c * sn..(c + 1) * sn], &mut b_aw[c * n..(c + 1) * n]);
        }
        b_aw.iter_mut().for_each(|v| *v = sigmoid(*v));

        let b_ag_map = ScoreMap::from_vec(w, h, b_ag.clone())?;
        let b_aw_map = MultiScoreMap::from_vec(w, h, classes, b_aw.clone())?;
        let b_final = combine(&b_ag_map, &b_aw_map);
        let cache = Cache {
            width: w,
            height: h,
            stage_geom,
            stage_cols,
            feats,
            concat,
            hidden,
            b_ag,
            b_aw,
        };
        Ok((
            Outputs {
                b_ag: b_ag_map,
                b_aw: b_aw_map,
                b_final,
            },
            cache,
        ))
    }

    /// Reverse pass from gradients on the branch outputs.
    ///
    /// A branch whose gradient is `None` contributes nothing, and its head
    /// tensors get no gradient at all. With both `None` every entry is `None`.
    pub fn backward(&self, cache: &Cache<T>, d_ag: Option<&ScoreMap<T>>, d_aw: Option<&MultiScoreMap<T>>) -> Result<Gradients<T>> {
        let (w, h) = (cache.width, cache.height);
        let n = w * h;
        if let Some(d) = d_ag {
            if (d.width(), d.height()) != (w, h) {
                return invalid("class-agnostic gradient has the wrong size");
            }
        }
        if let Some(d) = d_aw {
            if (d.width(), d.height(), d.channels()) != (w, h, self.config.num_classes) {
                return invalid("class-aware gradient has the wrong shape");
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.tensor_count()];
        if d_ag.is_none() && d_aw.is_none() {
            return Ok(Gradients { tensors: grads });
        }
        let mut dfeats: Vec<Vec<T>> = cache.feats.iter().map(|f| vec![T::zero(); f.len()]).collect();
        let set = |grads: &mut Vec<Option<Vec<T>>>, layer: usize, (dw, db): (Vec<T>, Vec<T>)| {
            grads[2 * layer] = Some(dw);
            grads[2 * layer + 1] = Some(db);
        };

        if let Some(d_aw) = d_aw {
            let g4 = &cache.stage_geom[3];
            let sn = g4.out_len();
            let classes = self.config.num_classes;
            let r = Resampler::new(g4.wo, g4.ho, w, h);
            let mut dlogits = vec![T::zero(); classes * sn];
            let mut dz = vec![T::zero(); n];
            for c in 0..classes {
                let s = &cache.b_aw[c * n..(c + 1) * n];
                for ((o, &g), &p) in dz.iter_mut().zip(d_aw.channel(c)).zip(s) {
                    *o = g * p * (T::one() - p);
                }
                r.apply_adjoint(&dz, &mut dlogits[c * sn..(c + 1) * sn]);
            }
            let l = &self.layers[AW_OUT];
            set(&mut grads, AW_OUT, conv_param_grads(&dlogits, &cache.feats[3], l.cout, l.cin, sn));
            let dx = conv_input_grad(&l.weight, &dlogits, l.cout, l.cin, sn);
            add_into(&mut dfeats[3], &dx);
        }

        if let Some(d_ag) = d_ag {
            let dout: Vec<T> = d_ag
                .as_slice()
                .iter()
                .zip(&cache.b_ag)
                .map(|(&g, &p)| g * p * (T::one() - p))
                .collect();
            let l = &self.layers[AG_OUT];
            set(&mut grads, AG_OUT, conv_param_grads(&dout, &cache.hidden, l.cout, l.cin, n));
            let mut dhidden = conv_input_grad(&l.weight, &dout, l.cout, l.cin, n);
            relu_mask(&mut dhidden, &cache.hidden);
            let l = &self.layers[FUSE];
            set(&mut grads, FUSE, conv_param_grads(&dhidden, &cache.concat, l.cout, l.cin, n));
            let dconcat = conv_input_grad(&l.weight, &dhidden, l.cout, l.cin, n);
            let pw = self.config.proj_width;
            for (i, &li) in PROJ.iter().enumerate() {
                let g = &cache.stage_geom[i];
                let sn = g.out_len();
                let r = Resampler::new(g.wo, g.ho, w, h);
                let mut dproj = vec![T::zero(); pw * sn];
                for c in 0..pw {
                    r.apply_adjoint(&dconcat[(i * pw + c) * n..(i * pw + c + 1) * n], &mut dproj[c * sn..(c + 1) * sn]);
                }
                let l = &self.layers[li];
                set(&mut grads, li, conv_param_grads(&dproj, &cache.feats[i], l.cout, l.cin, sn));
                let dx = conv_input_grad(&l.weight, &dproj, l.cout, l.cin, sn);
                add_into(&mut dfeats[i], &dx);
            }
        }

        for s in STAGES.into_iter().rev() {
            let g = cache.stage_geom[s];
            let mut dz = std::mem::take(&mut dfeats[s]);
            relu_mask(&mut dz, &cache.feats[s]);
            let l = &self.layers[s];
            set(&mut grads, s, conv_param_grads(&dz, &cache.stage_cols[s], l.cout, g.rows(), g.out_len()));
            if s > 0 {
                let dcols = conv_input_grad(&l.weight, &dz, l.cout, g.rows(), g.out_len());
                col2im(&dcols, &g, &mut dfeats[s - 1]);
            }
        }
        Ok(Gradients { tensors: grads })
    }
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}
