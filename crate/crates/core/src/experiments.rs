//! In-memory pipeline and the ablation studies built on it: branch
//! combination, CAM quality ladder, MSF/NMS toggles and hyper-parameter
//! grids.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, PseudoConfig, RunConfig, SeedsConfig};
use crate::error::{bad_config, invalid, Result};
use crate::eval::{evaluate_class_agnostic, evaluate_class_aware, ClassMetrics, EvalReport};
use crate::imaging::{BoundaryLabelMap, MultiScoreMap};
use crate::net::{MilObjective, ModelParams, OptimState, Outputs, StepLog, Trainer};
use crate::pseudolabel::{filter_irrelevant_classes, msf_predict, pseudo_labels_from_outputs, MsfConfig, PseudoLabel};
use crate::seeds::{confident_regions, refine_labels, ConfidentLabelMap};
use crate::synthgen::{corpus_cam_quality, generate_corpus, CamDegradation, Sample};

/// CAM score above which a pixel counts as class support when measuring
/// CAM IoU.
pub const CAM_IOU_THRESHOLD: f32 = 0.5;

pub fn generate(cfg: &RunConfig) -> Result<Vec<Sample>> {
    generate_corpus(&cfg.corpus.scene, &cfg.corpus.cam, cfg.corpus.size)
}

pub fn confident_maps(cfg: &SeedsConfig, samples: &[Sample]) -> Result<Vec<ConfidentLabelMap>> {
    cfg.thresholds.validate()?;
    cfg.refiner.validate()?;
    let refiner = cfg.refiner.build();
    samples
        .par_iter()
        .map(|s| {
            let seeds = confident_regions(&s.cams, &s.image_labels, &cfg.thresholds)?;
            refine_labels(&seeds, &s.image, refiner.as_ref())
        })
        .collect()
}

/// Confident maps taken straight from the ground-truth masks (no ignore).
pub fn ground_truth_maps(samples: &[Sample]) -> Vec<ConfidentLabelMap> {
    samples.iter().map(|s| ConfidentLabelMap::from_mask(&s.gt_mask)).collect()
}

pub fn image_tensors(samples: &[Sample]) -> Vec<MultiScoreMap<f32>> {
    samples.iter().map(|s| s.image.to_tensor()).collect()
}

/// Trains a fresh network with the MIL losses.
pub fn train_wsbdn(
    cfg: &RunConfig,
    samples: &[Sample],
    maps: Vec<ConfidentLabelMap>,
    on_step: impl FnMut(&StepLog),
) -> Result<(ModelParams<f32>, OptimState<f32>)> {
    if samples.len() != maps.len() {
        return invalid("one confident map per sample is required");
    }
    let items: Vec<_> = image_tensors(samples).into_iter().zip(maps).collect();
    let objective = MilObjective {
        lambda: cfg.wsbdn.lambda,
        eps: cfg.wsbdn.eps,
        segments: cfg.segments,
        num_classes: cfg.net.num_classes,
    };
    let params = ModelParams::init(&cfg.net, cfg.wsbdn_init_seed())?;
    let train = cfg.wsbdn_train();
    let opt = OptimState::new(train.optim.clone(), &params);
    let mut trainer = Trainer::new(params, opt, &objective, &items, &train)?;
    trainer.run(on_step)?;
    Ok(trainer.into_parts())
}

pub fn predict_all(params: &ModelParams<f32>, samples: &[Sample], msf: &MsfConfig) -> Result<Vec<Outputs<f32>>> {
    samples.par_iter().map(|s| msf_predict(params, &s.image.to_tensor(), msf)).collect()
}

pub fn pseudo_labels(cfg: &PseudoConfig, outputs: &[Outputs<f32>], samples: &[Sample]) -> Result<Vec<PseudoLabel>> {
    outputs
        .par_iter()
        .zip(samples)
        .map(|(o, s)| pseudo_labels_from_outputs(o, &s.image_labels, cfg.nms()))
        .collect()
}

pub fn ground_truth(samples: &[Sample]) -> Vec<BoundaryLabelMap> {
    samples.iter().map(|s| s.gt_boundaries.clone()).collect()
}

/// Soft and hard pseudo-label metrics against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoQuality {
    pub soft: EvalReport,
    pub hard: EvalReport,
    pub soft_agnostic: ClassMetrics,
    pub hard_agnostic: ClassMetrics,
}

pub fn pseudo_quality(cfg: &EvalConfig, labels: &[PseudoLabel], samples: &[Sample]) -> Result<PseudoQuality> {
    let gts = ground_truth(samples);
    let soft: Vec<_> = labels.iter().map(|p| p.soft.clone()).collect();
    let hard: Vec<_> = labels.iter().map(|p| p.hard.to_scores::<f32>()).collect();
    Ok(PseudoQuality {
        soft: evaluate_class_aware(&soft, &gts, cfg.tolerance, cfg.thresholds)?,
        hard: evaluate_class_aware(&hard, &gts, cfg.tolerance, cfg.thresholds)?,
        soft_agnostic: evaluate_class_agnostic(&soft, &gts, cfg.tolerance, cfg.thresholds)?,
        hard_agnostic: evaluate_class_agnostic(&hard, &gts, cfg.tolerance, cfg.thresholds)?,
    })
}

/// Everything produced by one run of the weakly supervised stage.
#[derive(Debug, Clone)]
pub struct StageOne {
    pub samples: Vec<Sample>,
    pub params: ModelParams<f32>,
    pub outputs: Vec<Outputs<f32>>,
    pub labels: Vec<PseudoLabel>,
    pub quality: PseudoQuality,
}

/// Corpus, confident maps (or ground-truth masks), training and pseudo labels.
pub fn run_stage_one(cfg: &RunConfig, use_ground_truth: bool, on_step: impl FnMut(&StepLog)) -> Result<StageOne> {
    cfg.validate()?;
    let samples = generate(cfg)?;
    let maps = if use_ground_truth {
        ground_truth_maps(&samples)
    } else {
        confident_maps(&cfg.seeds, &samples)?
    };
    let (params, _) = train_wsbdn(cfg, &samples, maps, on_step)?;
    let outputs = predict_all(&params, &samples, &cfg.pseudo.msf)?;
    let labels = pseudo_labels(&cfg.pseudo, &outputs, &samples)?;
    let quality = pseudo_quality(&cfg.eval, &labels, &samples)?;
    Ok(StageOne {
        samples,
        params,
        outputs,
        labels,
        quality,
    })
}

fn write_opt<W: Write>(w: &mut W, v: Option<f64>) -> std::io::Result<()> {
    match v {
        Some(v) => write!(w, ",{v:.6}"),
        None => write!(w, ","),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchRow {
    pub name: String,
    /// Empty for the class-agnostic branch.
    pub aware_ap: Option<f64>,
    pub aware_mf: Option<f64>,
    pub agnostic_ap: f64,
    pub agnostic_mf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchTable {
    pub rows: Vec<BranchRow>,
}

impl BranchTable {
    pub fn row(&self, name: &str) -> Option<&BranchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "output,aware_mAP,aware_MF,agnostic_AP,agnostic_MF")?;
        for r in &self.rows {
            write!(w, "{}", r.name)?;
            write_opt(&mut w, r.aware_ap)?;
            write_opt(&mut w, r.aware_mf)?;
            writeln!(w, ",{:.6},{:.6}", r.agnostic_ap, r.agnostic_mf)?;
        }
        Ok(())
    }
}

pub const ROW_AW: &str = "B_aw";
pub const ROW_AG: &str = "B_ag";
pub const ROW_FINAL: &str = "B_aw*B_ag";

/// Soft metrics of each branch and of their product, after MSF and class
/// filtering (the class-agnostic branch has no channels to filter).
pub fn run_branch_ablation(cfg: &EvalConfig, outputs: &[Outputs<f32>], samples: &[Sample]) -> Result<BranchTable> {
    if outputs.len() != samples.len() {
        return invalid("one output per sample is required");
    }
    let gts = ground_truth(samples);
    let (tol, n) = (cfg.tolerance, cfg.thresholds);
    let filtered = |pick: fn(&Outputs<f32>) -> &MultiScoreMap<f32>| -> Result<Vec<MultiScoreMap<f32>>> {
        outputs.iter().zip(samples).map(|(o, s)| filter_irrelevant_classes(pick(o), &s.image_labels)).collect()
    };
    let aw = filtered(|o| &o.b_aw)?;
    let fin = filtered(|o| &o.b_final)?;
    let ag: Vec<_> = outputs
        .iter()
        .map(|o| MultiScoreMap::from_channels(std::slice::from_ref(&o.b_ag)))
        .collect::<Result<_>>()?;
    let unions: Vec<_> = gts
        .iter()
        .map(|g| BoundaryLabelMap::from_bits(g.width(), g.height(), 1, g.union()))
        .collect::<Result<_>>()?;
    let row = |name: &str, maps: &[MultiScoreMap<f32>]| -> Result<BranchRow> {
        let aware = evaluate_class_aware(maps, &gts, tol, n)?;
        let agn = evaluate_class_agnostic(maps, &gts, tol, n)?;
        Ok(BranchRow {
            name: name.to_string(),
            aware_ap: Some(aware.mean_ap),
            aware_mf: Some(aware.mean_mf),
            agnostic_ap: agn.ap,
            agnostic_mf: agn.mf,
        })
    };
    let ag_metrics = evaluate_class_agnostic(&ag, &unions, tol, n)?;
    Ok(BranchTable {
        rows: vec![
            row(ROW_AW, &aw)?,
            BranchRow {
                name: ROW_AG.to_string(),
                aware_ap: None,
                aware_mf: None,
                agnostic_ap: ag_metrics.ap,
                agnostic_mf: ag_metrics.mf,
            },
            row(ROW_FINAL, &fin)?,
        ],
    })
}

/// Four CAM degradation levels of increasing strength; the second is the
/// default simulator setting.
pub fn default_ladder() -> Vec<CamDegradation> {
    let level = |blur_sigma, erosion_radius, part_bias, noise_amplitude| CamDegradation {
        blur_sigma,
        erosion_radius,
        part_bias,
        noise_amplitude,
    };
    vec![
        level(1.0, 0.0, 0.1, 0.03),
        CamDegradation::default(),
        level(3.0, 2.0, 0.35, 0.08),
        level(4.0, 3.0, 0.5, 0.1),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderPoint {
    pub level: String,
    pub cam_iou: f64,
    pub soft_mf: f64,
    pub hard_mf: f64,
    pub hard_agnostic_mf: f64,
}

pub fn write_ladder_csv<W: Write>(points: &[LadderPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "level,cam_iou,soft_MF,hard_MF,hard_agnostic_MF")?;
    for p in points {
        writeln!(w, "{},{:.6},{:.6},{:.6},{:.6}", p.level, p.cam_iou, p.soft_mf, p.hard_mf, p.hard_agnostic_mf)?;
    }
    Ok(())
}

/// Retrains on CAMs of each ladder level, then on ground-truth masks, with
/// `steps` SGD steps per level. Ground truth is the last point.
pub fn run_cam_robustness(base: &RunConfig, ladder: &[CamDegradation], steps: usize) -> Result<Vec<LadderPoint>> {
    if ladder.len() < 3 {
        return invalid("the ladder needs at least three levels");
    }
    let mut levels: Vec<(String, Option<&CamDegradation>)> = ladder.iter().enumerate().map(|(i, d)| (format!("cam{i}"), Some(d))).collect();
    levels.push(("ground_truth".to_string(), None));
    levels
        .into_par_iter()
        .map(|(name, deg)| {
            let mut cfg = base.clone();
            cfg.wsbdn.optim.total_steps = steps;
            if let Some(d) = deg {
                cfg.corpus.cam = d.clone();
            }
            let run = run_stage_one(&cfg, deg.is_none(), |_| {})?;
            let cam_iou = match deg {
                Some(_) => corpus_cam_quality(&run.samples, CAM_IOU_THRESHOLD),
                None => 1.0,
            };
            Ok(LadderPoint {
                level: name,
                cam_iou,
                soft_mf: run.quality.soft.mean_mf,
                hard_mf: run.quality.hard.mean_mf,
                hard_agnostic_mf: run.quality.hard_agnostic.mf,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToggleRow {
    pub msf: bool,
    pub nms: bool,
    pub soft_map: f64,
    pub soft_mf: f64,
    pub hard_map: f64,
    pub hard_mf: f64,
}

pub fn write_toggle_csv<W: Write>(rows: &[ToggleRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "msf,nms,soft_mAP,soft_MF,hard_mAP,hard_MF")?;
    for r in rows {
        writeln!(w, "{},{},{:.6},{:.6},{:.6},{:.6}", r.msf, r.nms, r.soft_map, r.soft_mf, r.hard_map, r.hard_mf)?;
    }
    Ok(())
}

/// The 2x2 MSF/NMS table on one trained model. MSF off means a single
/// unflipped pass at scale 1.
pub fn run_msf_nms_ablation(cfg: &RunConfig, params: &ModelParams<f32>, samples: &[Sample]) -> Result<Vec<ToggleRow>> {
    let mut rows = Vec::new();
    for msf_on in [false, true] {
        let msf = if msf_on { cfg.pseudo.msf.clone() } else { MsfConfig::off() };
        let outputs = predict_all(params, samples, &msf)?;
        for nms_on in [false, true] {
            let pcfg = PseudoConfig {
                msf: msf.clone(),
                nms: cfg.pseudo.nms.clone(),
                use_nms: nms_on,
            };
            let labels = pseudo_labels(&pcfg, &outputs, samples)?;
            let q = pseudo_quality(&cfg.eval, &labels, samples)?;
            rows.push(ToggleRow {
                msf: msf_on,
                nms: nms_on,
                soft_map: q.soft.mean_ap,
                soft_mf: q.soft.mean_mf,
                hard_map: q.hard.mean_ap,
                hard_mf: q.hard.mean_mf,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Lambda,
    /// Index into [`default_ladder`].
    CamDegradation,
    MsfOn,
    NmsOn,
    /// 0: class-aware branch, 1: class-agnostic branch broadcast to every
    /// class, 2: their product.
    BranchCombo,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Lambda => "lambda",
            SweepParam::CamDegradation => "cam_degradation",
            SweepParam::MsfOn => "msf_on",
            SweepParam::NmsOn => "nms_on",
            SweepParam::BranchCombo => "branch_combo",
        }
    }

    fn check(self, v: f64) -> Result<()> {
        let ok = match self {
            SweepParam::Gamma => v >= 2.0 && v.is_finite(),
            SweepParam::Lambda => v >= 0.0 && v.is_finite(),
            SweepParam::CamDegradation => v.fract() == 0.0 && v >= 0.0 && (v as usize) < default_ladder().len(),
            SweepParam::MsfOn | SweepParam::NmsOn => v == 0.0 || v == 1.0,
            SweepParam::BranchCombo => v == 0.0 || v == 1.0 || v == 2.0,
        };
        if ok {
            Ok(())
        } else {
            bad_config(&format!("sweep.axes.{}", self.key()), format!("value {v} outside the parameter domain"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axes: Vec<SweepAxis>,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.axes.is_empty() {
            return bad_config("sweep.axes", "needs at least one axis");
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return bad_config(&format!("sweep.axes.{}", a.parameter.key()), "needs at least one value");
            }
            if self.axes[..i].iter().any(|b| b.parameter == a.parameter) {
                return bad_config(&format!("sweep.axes.{}", a.parameter.key()), "parameter listed twice");
            }
            for &v in &a.values {
                a.parameter.check(v)?;
            }
        }
        Ok(())
    }

    /// Every combination of axis values, first axis varying slowest.
    pub fn cells(&self) -> Vec<Vec<f64>> {
        let mut cells = vec![Vec::new()];
        for a in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    a.values.iter().map(move |&v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub values: Vec<f64>,
    pub soft_mf: f64,
    pub hard_mf: f64,
    pub soft_agnostic_mf: f64,
    pub hard_agnostic_mf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub parameters: Vec<SweepParam>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.parameters {
            write!(w, "{},", p.key())?;
        }
        writeln!(w, "soft_MF,hard_MF,soft_agnostic_MF,hard_agnostic_MF")?;
        for c in &self.cells {
            for v in &c.values {
                write!(w, "{v},")?;
            }
            writeln!(w, "{:.6},{:.6},{:.6},{:.6}", c.soft_mf, c.hard_mf, c.soft_agnostic_mf, c.hard_agnostic_mf)?;
        }
        Ok(())
    }
}

struct CellPlan {
    train: RunConfig,
    pseudo: PseudoConfig,
    combo: usize,
}

fn plan_cell(spec: &SweepSpec, values: &[f64]) -> CellPlan {
    let mut train = spec.base.clone();
    train.seed = spec.seed;
    let mut pseudo = spec.base.pseudo.clone();
    let mut combo = 2;
    for (a, &v) in spec.axes.iter().zip(values) {
        match a.parameter {
            SweepParam::Gamma => train.segments.gamma = v,
            SweepParam::Lambda => train.wsbdn.lambda = v,
            SweepParam::CamDegradation => train.corpus.cam = default_ladder()[v as usize].clone(),
            SweepParam::MsfOn => {
                pseudo.msf = if v == 1.0 { spec.base.pseudo.msf.clone() } else { MsfConfig::off() };
            }
            SweepParam::NmsOn => pseudo.use_nms = v == 1.0,
            SweepParam::BranchCombo => combo = v as usize,
        }
    }
    // Only training-relevant fields key the model cache.
    train.pseudo = spec.base.pseudo.clone();
    CellPlan { train, pseudo, combo }
}

fn select_branch(o: &Outputs<f32>, combo: usize) -> Outputs<f32> {
    let mut o = o.clone();
    match combo {
        0 => o.b_final = o.b_aw.clone(),
        1 => {
            let c = o.b_aw.channels();
            let maps = vec![o.b_ag.clone(); c];
            o.b_final = MultiScoreMap::from_channels(&maps).expect("equal shapes");
        }
        _ => {}
    }
    o
}

/// Trains once per distinct training configuration and evaluates pseudo
/// labels for every cell of the grid.
pub fn run_hyper_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let cells = spec.cells();
    let plans: Vec<CellPlan> = cells.iter().map(|v| plan_cell(spec, v)).collect();
    let mut keys: BTreeMap<String, usize> = BTreeMap::new();
    let mut configs: Vec<RunConfig> = Vec::new();
    let cell_model: Vec<usize> = plans
        .iter()
        .map(|p| {
            *keys.entry(p.train.to_json()).or_insert_with(|| {
                configs.push(p.train.clone());
                configs.len() - 1
            })
        })
        .collect();
    let models: Vec<(Vec<Sample>, ModelParams<f32>)> = configs
        .par_iter()
        .map(|cfg| {
            let samples = generate(cfg)?;
            let maps = confident_maps(&cfg.seeds, &samples)?;
            let (params, _) = train_wsbdn(cfg, &samples, maps, |_| {})?;
            Ok((samples, params))
        })
        .collect::<Result<_>>()?;
    let out = plans
        .par_iter()
        .zip(&cells)
        .zip(&cell_model)
        .map(|((plan, values), &m)| {
            let (samples, params) = &models[m];
            let outputs: Vec<_> = predict_all(params, samples, &plan.pseudo.msf)?
                .iter()
                .map(|o| select_branch(o, plan.combo))
                .collect();
            let labels = pseudo_labels(&plan.pseudo, &outputs, samples)?;
            let q = pseudo_quality(&spec.base.eval, &labels, samples)?;
            Ok(SweepCell {
                values: values.clone(),
                soft_mf: q.soft.mean_mf,
                hard_mf: q.hard.mean_mf,
                soft_agnostic_mf: q.soft_agnostic.mf,
                hard_agnostic_mf: q.hard_agnostic.mf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        parameters: spec.axes.iter().map(|a| a.parameter).collect(),
        cells: out,
    })
}
