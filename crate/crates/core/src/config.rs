//! One JSON document configuring every stage of a run.

use serde::{Deserialize, Serialize};

use crate::error::{bad_config, Error, Result};
use crate::eval::Tolerance;
use crate::net::{NetConfig, OptimConfig, TrainConfig};
use crate::pseudolabel::{MsfConfig, NmsConfig};
use crate::seeds::{RefinerConfig, SeedThresholds};
use crate::segments::SegmentConfig;
use crate::student::PixelLossConfig;
use crate::synthgen::{CamDegradation, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub scene: SceneConfig,
    pub cam: CamDegradation,
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            scene: SceneConfig::default(),
            cam: CamDegradation::default(),
            size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub thresholds: SeedThresholds,
    pub refiner: RefinerConfig,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        SeedsConfig {
            thresholds: SeedThresholds::default(),
            refiner: RefinerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WsbdnConfig {
    /// Weight of the class-agnostic loss.
    pub lambda: f64,
    pub eps: f64,
    pub optim: OptimConfig,
    pub flip: bool,
}

impl Default for WsbdnConfig {
    fn default() -> Self {
        WsbdnConfig {
            lambda: crate::mil::DEFAULT_LAMBDA,
            eps: crate::mil::DEFAULT_EPS,
            optim: OptimConfig::default(),
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub msf: MsfConfig,
    pub nms: NmsConfig,
    pub use_nms: bool,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            msf: MsfConfig::default(),
            nms: NmsConfig::default(),
            use_nms: true,
        }
    }
}

impl PseudoConfig {
    pub fn nms(&self) -> Option<&NmsConfig> {
        self.use_nms.then_some(&self.nms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub loss: PixelLossConfig,
    pub optim: OptimConfig,
    pub flip: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            loss: PixelLossConfig::default(),
            // The pixel-averaged loss has small gradients; 1e-2 barely moves
            // a network trained from scratch.
            optim: OptimConfig {
                base_lr: 0.5,
                ..OptimConfig::default()
            },
            flip: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerance: Tolerance,
    pub thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance: Tolerance::default(),
            thresholds: crate::eval::DEFAULT_THRESHOLDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub seeds: SeedsConfig,
    pub segments: SegmentConfig,
    pub net: NetConfig,
    pub wsbdn: WsbdnConfig,
    pub pseudo: PseudoConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
    /// Seeds initialization, sample order and flips of both trainings.
    pub seed: u64,
    /// Recorded for provenance; every reduction is ordered regardless.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            seeds: SeedsConfig::default(),
            segments: SegmentConfig::default(),
            net: NetConfig::default(),
            wsbdn: WsbdnConfig::default(),
            pseudo: PseudoConfig::default(),
            student: StudentConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            deterministic: false,
        }
    }
}

fn prefixed(prefix: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::InvalidConfig { key, msg } => {
            let tail = key.split_once('.').map_or(key.as_str(), |(_, t)| t);
            Error::InvalidConfig {
                key: format!("{prefix}.{tail}"),
                msg,
            }
        }
        other => other,
    })
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys, then validates. Errors name the
    /// offending key by its dotted path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::InvalidConfig {
                key,
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        prefixed("corpus.scene", self.corpus.scene.validate())?;
        prefixed("corpus.cam", self.corpus.cam.validate())?;
        if self.corpus.size == 0 {
            return bad_config("corpus.size", "must be positive");
        }
        prefixed("seeds.thresholds", self.seeds.thresholds.validate())?;
        self.seeds.refiner.validate()?;
        self.segments.validate()?;
        self.net.validate()?;
        if self.net.num_classes != self.corpus.scene.num_classes {
            return bad_config("net.num_classes", "must equal corpus.scene.num_classes");
        }
        let size = self.corpus.scene.image_size;
        if (self.net.input_width, self.net.input_height) != (size, size) {
            return bad_config("net.input_width", "input size must equal corpus.scene.image_size");
        }
        if !(self.wsbdn.lambda >= 0.0 && self.wsbdn.lambda.is_finite()) {
            return bad_config("wsbdn.lambda", "must be finite and non-negative");
        }
        if !(self.wsbdn.eps > 0.0 && self.wsbdn.eps < 0.5) {
            return bad_config("wsbdn.eps", "must be in (0, 0.5)");
        }
        prefixed("wsbdn.optim", self.wsbdn.optim.validate())?;
        prefixed("pseudo.msf", self.pseudo.msf.validate())?;
        prefixed("pseudo.nms", self.pseudo.nms.validate())?;
        self.student.loss.validate()?;
        prefixed("student.optim", self.student.optim.validate())?;
        self.eval.tolerance.validate()?;
        if self.eval.thresholds == 0 {
            return bad_config("eval.thresholds", "must be positive");
        }
        Ok(())
    }

    pub fn wsbdn_train(&self) -> TrainConfig {
        TrainConfig {
            optim: self.wsbdn.optim.clone(),
            flip: self.wsbdn.flip,
            seed: self.seed,
        }
    }

    pub fn student_train(&self) -> TrainConfig {
        TrainConfig {
            optim: self.student.optim.clone(),
            flip: self.student.flip,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn wsbdn_init_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(1)
    }

    pub fn student_init_seed(&self) -> u64 {
        self.seed.wrapping_mul(2).wrapping_add(2)
    }
}
