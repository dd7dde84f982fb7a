//! Command-line driver: one subcommand per pipeline stage, each reading the
//! previous stage's directory and writing a fresh one.

pub mod store;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use milboundary::config::RunConfig;
use milboundary::error::{Error, Result};
use milboundary::eval::{evaluate_class_agnostic, evaluate_class_aware, ClassMetrics, PrCurve, Tolerance};
use milboundary::experiments::{
    confident_maps, default_ladder, generate, predict_all, pseudo_labels, pseudo_quality, run_branch_ablation, run_cam_robustness,
    run_hyper_sweep, run_msf_nms_ablation, run_stage_one, write_ladder_csv, write_toggle_csv, SweepAxis, SweepSpec,
};
use milboundary::imaging::{BoundaryLabelMap, MultiScoreMap};
use milboundary::net::{load_checkpoint, save_checkpoint, MilObjective, ModelParams, Objective, OptimState, StepLog, TrainConfig, Trainer};
use milboundary::segments::build_segment_sets;
use milboundary::student::StudentObjective;
use serde::{Deserialize, Serialize};

use store::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

pub const THREADS_ENV: &str = "MILBOUNDARY_THREADS";

#[derive(Parser, Debug)]
#[command(name = "milboundary", version, about = "Weakly supervised semantic boundary detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; omitted keys keep their defaults. Stages that
    /// read a data directory default to the configuration it was made with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `seed` and `corpus.scene.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to MILBOUNDARY_THREADS). Results do not
    /// depend on the thread count.
    #[arg(long)]
    threads: Option<usize>,
    /// Records determinism mode in the echoed config. All reductions are
    /// ordered, so output is reproducible either way.
    #[arg(long)]
    deterministic: bool,
    /// Matching tolerance in pixels; overrides `eval.tolerance`.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Branch {
    Aw,
    Ag,
    Final,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus with masks, boundaries and CAMs.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Threshold and refine CAMs into confident label maps.
    Seeds {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dump the labeled line segments of one sample as CSV.
    SegmentsDebug {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long)]
        sample: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train the two-branch network with the MIL losses.
    TrainWsbdn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seeds: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Produce soft and hard pseudo labels from a trained network.
    Pseudo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a fresh network on hard pseudo labels.
    TrainStudent {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions (a map directory or a checkpoint) against ground truth.
    Eval {
        /// Data directory holding the ground truth.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of per-sample maps.
        #[arg(long, conflicts_with = "model", required_unless_present = "model")]
        pred: Option<PathBuf>,
        /// Which maps to read from --pred; the first kind present wins when omitted.
        #[arg(long, value_enum, requires = "pred")]
        maps: Option<MapKind>,
        /// Checkpoint to run on every sample.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Network output scored with --model.
        #[arg(long, value_enum, default_value = "aw")]
        branch: Branch,
        #[command(flatten)]
        common: Common,
    },
    /// Run an ablation or hyper-parameter grid described by a JSON file.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Collate metrics.csv files of several runs into one table.
    Report {
        /// Directories containing metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gen { common }
            | Command::Seeds { common, .. }
            | Command::SegmentsDebug { common, .. }
            | Command::TrainWsbdn { common, .. }
            | Command::Pseudo { common, .. }
            | Command::TrainStudent { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    /// Data directory whose manifest supplies the default configuration.
    fn data_dir(&self) -> Option<&Path> {
        match self {
            Command::Seeds { data, .. }
            | Command::SegmentsDebug { data, .. }
            | Command::TrainWsbdn { data, .. }
            | Command::Pseudo { data, .. }
            | Command::TrainStudent { data, .. } => Some(data),
            Command::Eval { gt, .. } => Some(gt),
            _ => None,
        }
    }
}

/// A sweep file: which experiment to run on the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Grid over the listed parameters.
    Grid { axes: Vec<SweepAxis> },
    /// Branch combination table on one trained model.
    Branch,
    /// CAM quality ladder plus the ground-truth level, `steps` each.
    CamRobustness { steps: usize },
    /// MSF x NMS table on one trained model.
    MsfNms,
}

fn help_epilogue() -> String {
    format!(
        "Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid configuration.\n\nDefault configuration (every key optional):\n{}",
        RunConfig::default().to_json()
    )
}

fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::InvalidInput(_) => "input",
        Error::InvalidConfig { .. } => "config",
        Error::Decode(_) => "decode",
        Error::Shape { .. } => "shape",
        Error::Contract(_) => "contract",
        Error::NonFinite { .. } => "non-finite",
        Error::MissingSample { .. } => "missing-sample",
        Error::Io(_) => "io",
    };
    let msg = e.to_string().replace('\n', " ");
    match e {
        Error::InvalidConfig { key, .. } => format!("error: {kind}: key={key}: {msg}"),
        _ => format!("error: {kind}: {msg}"),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Failures print one `error: <kind>: <message>` line.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().after_long_help(help_epilogue()).try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            match e {
                Error::InvalidConfig { .. } => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn thread_count(common: &Common) -> Result<Option<usize>> {
    if let Some(n) = common.threads {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Error::InvalidConfig {
            key: THREADS_ENV.to_string(),
            msg: format!("`{v}` is not a thread count"),
        }),
        Err(_) => Ok(None),
    }
}

fn run(command: Command) -> Result<()> {
    let threads = thread_count(command.common())?;
    if threads == Some(0) {
        return Err(Error::InvalidConfig {
            key: "threads".to_string(),
            msg: "must be positive".to_string(),
        });
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::InvalidInput(e.to_string()))?;
    pool.install(|| {
        let cfg = resolve_config(&command)?;
        execute(command, cfg)
    })
}

fn resolve_config(command: &Command) -> Result<RunConfig> {
    let common = command.common();
    let mut cfg = match (&common.config, command.data_dir()) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
                key: "config".to_string(),
                msg: format!("cannot read {}: {e}", path.display()),
            })?;
            RunConfig::from_json(&text)?
        }
        (None, Some(data)) if data.join(MANIFEST).is_file() => read_manifest(data)?.config,
        _ => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.corpus.scene.seed = seed;
    }
    if let Some(t) = common.tol {
        cfg.eval.tolerance = Tolerance::Pixels(t);
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(out.join(CONFIG_ECHO), cfg.to_json() + "\n")?;
    Ok(())
}

fn execute(command: Command, cfg: RunConfig) -> Result<()> {
    let out = command.common().out.clone();
    fresh_dir(&out)?;
    echo_config(&out, &cfg)?;
    match command {
        Command::Gen { .. } => cmd_gen(&cfg, &out),
        Command::Seeds { data, .. } => cmd_seeds(&cfg, &data, &out),
        Command::SegmentsDebug { data, seeds, sample, .. } => cmd_segments_debug(&cfg, &data, &seeds, &sample, &out),
        Command::TrainWsbdn { data, seeds, .. } => cmd_train_wsbdn(&cfg, &data, &seeds, &out),
        Command::Pseudo { data, model, .. } => cmd_pseudo(&cfg, &data, &model, &out),
        Command::TrainStudent { data, pseudo, .. } => cmd_train_student(&cfg, &data, &pseudo, &out),
        Command::Eval {
            gt, pred, maps, model, branch, ..
        } => cmd_eval(&cfg, &gt, pred.as_deref(), maps, model.as_deref(), branch, &out),
        Command::Sweep { spec, .. } => cmd_sweep(&cfg, &spec, &out),
        Command::Report { runs, .. } => cmd_report(&runs, &out),
    }
}

fn check_classes(cfg: &RunConfig, m: &Manifest) -> Result<()> {
    if cfg.net.num_classes != m.num_classes {
        return Err(Error::InvalidConfig {
            key: "net.num_classes".to_string(),
            msg: format!("data has {} classes", m.num_classes),
        });
    }
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let samples = generate(cfg)?;
    let entries = samples.iter().map(|s| write_sample(out, s)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        width: cfg.corpus.scene.image_size,
        height: cfg.corpus.scene.image_size,
        num_classes: cfg.corpus.scene.num_classes,
        seed: cfg.corpus.scene.seed,
        config: cfg.clone(),
        samples: entries,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_seeds(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (m, samples) = read_corpus(data)?;
    let maps = confident_maps(&cfg.seeds, &samples)?;
    for (e, map) in m.samples.iter().zip(&maps) {
        milboundary::imaging::codec::write_pgm(&seeds_file(out, &e.name), map.width(), map.height(), &labels_to_palette(map))?;
    }
    println!("wrote {} confident maps to {}", maps.len(), out.display());
    Ok(())
}

fn cmd_segments_debug(cfg: &RunConfig, data: &Path, seeds: &Path, sample: &str, out: &Path) -> Result<()> {
    let m = read_manifest(data)?;
    if !m.samples.iter().any(|e| e.name == sample) {
        return Err(Error::InvalidInput(format!("no sample named {sample}")));
    }
    let map = read_seeds(seeds, sample)?;
    let sets = build_segment_sets(&map, m.num_classes, &cfg.segments)?;
    let file = fs::File::create(out.join(format!("segments_{sample}.csv")))?;
    sets.write_csv(std::io::BufWriter::new(file))?;
    println!("{sample}: {} segments", sets.len());
    Ok(())
}

fn write_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "step,sample,flipped,lr,total,l_ag,l_aw")?;
    for l in logs {
        let l_ag = l.l_ag.map_or(String::new(), |v| v.to_string());
        writeln!(w, "{},{},{},{},{},{},{}", l.step, l.sample, l.flipped, l.lr, l.total, l_ag, l.l_aw)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a trainer to completion; on divergence the current parameters are
/// dumped to `diverged.ckpt` before the error is returned.
fn train_to_end<O: Objective>(
    params: ModelParams<f32>,
    train: &TrainConfig,
    objective: &O,
    items: &[(MultiScoreMap<f32>, O::Target)],
    out: &Path,
    name: &str,
) -> Result<()> {
    let opt = OptimState::new(train.optim.clone(), &params);
    let mut trainer = Trainer::new(params, opt, objective, items, train)?;
    let mut logs = Vec::new();
    while !trainer.is_done() {
        match trainer.step() {
            Ok(l) => logs.push(l),
            Err(e) => {
                write_log(&out.join("train_log.csv"), &logs)?;
                save_checkpoint(&out.join("diverged.ckpt"), trainer.params(), Some(trainer.optim()))?;
                return Err(e);
            }
        }
    }
    write_log(&out.join("train_log.csv"), &logs)?;
    save_checkpoint(&out.join(name), trainer.params(), Some(trainer.optim()))?;
    if let Some(l) = logs.last() {
        println!("{name}: {} steps, last loss {:.5}", logs.len(), l.total);
    }
    Ok(())
}

fn cmd_train_wsbdn(cfg: &RunConfig, data: &Path, seeds: &Path, out: &Path) -> Result<()> {
    let (m, samples) = read_corpus(data)?;
    check_classes(cfg, &m)?;
    let items = m
        .samples
        .iter()
        .zip(&samples)
        .map(|(e, s)| Ok((s.image.to_tensor(), read_seeds(seeds, &e.name)?)))
        .collect::<Result<Vec<_>>>()?;
    let objective = MilObjective {
        lambda: cfg.wsbdn.lambda,
        eps: cfg.wsbdn.eps,
        segments: cfg.segments,
        num_classes: cfg.net.num_classes,
    };
    let params = ModelParams::init(&cfg.net, cfg.wsbdn_init_seed())?;
    train_to_end(params, &cfg.wsbdn_train(), &objective, &items, out, "wsbdn.ckpt")
}

#[derive(Serialize)]
struct PseudoSummary {
    soft_mean_mf: f64,
    hard_mean_mf: f64,
    soft_agnostic_mf: f64,
    hard_agnostic_mf: f64,
    degenerate: usize,
}

fn cmd_pseudo(cfg: &RunConfig, data: &Path, model: &Path, out: &Path) -> Result<()> {
    let (m, samples) = read_corpus(data)?;
    check_classes(cfg, &m)?;
    let params = load_checkpoint(model, &cfg.net)?.params;
    let outputs = predict_all(&params, &samples, &cfg.pseudo.msf)?;
    let labels = pseudo_labels(&cfg.pseudo, &outputs, &samples)?;
    let entries = m
        .samples
        .iter()
        .zip(&labels)
        .map(|(e, p)| write_pseudo(out, &e.name, p))
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &out.join(PSEUDO_MANIFEST),
        &PseudoManifest {
            num_classes: m.num_classes,
            samples: entries,
        },
    )?;
    let q = pseudo_quality(&cfg.eval, &labels, &samples)?;
    let summary = PseudoSummary {
        soft_mean_mf: q.soft.mean_mf,
        hard_mean_mf: q.hard.mean_mf,
        soft_agnostic_mf: q.soft_agnostic.mf,
        hard_agnostic_mf: q.hard_agnostic.mf,
        degenerate: labels.iter().filter(|l| l.degenerate).count(),
    };
    write_json(&out.join("quality.json"), &summary)?;
    println!(
        "pseudo labels: class-agnostic MF soft {:.4} hard {:.4}; mean MF soft {:.4} hard {:.4}",
        summary.soft_agnostic_mf, summary.hard_agnostic_mf, summary.soft_mean_mf, summary.hard_mean_mf
    );
    Ok(())
}

fn cmd_train_student(cfg: &RunConfig, data: &Path, pseudo: &Path, out: &Path) -> Result<()> {
    let (m, samples) = read_corpus(data)?;
    check_classes(cfg, &m)?;
    let pm_path = pseudo.join(PSEUDO_MANIFEST);
    if !pm_path.is_file() {
        return Err(Error::InvalidInput(format!("no {PSEUDO_MANIFEST} in {}", pseudo.display())));
    }
    let pm: PseudoManifest = read_json(&pm_path)?;
    let items = m
        .samples
        .iter()
        .zip(&samples)
        .map(|(e, s)| {
            let entry = pm.samples.iter().find(|p| p.name == e.name).ok_or_else(|| Error::MissingSample {
                sample: e.name.clone(),
                path: pm_path.clone(),
            })?;
            Ok((s.image.to_tensor(), read_hard(pseudo, entry, m.num_classes)?))
        })
        .collect::<Result<Vec<(MultiScoreMap<f32>, BoundaryLabelMap)>>>()?;
    let objective = StudentObjective { loss: cfg.student.loss };
    let params = ModelParams::init(&cfg.net, cfg.student_init_seed())?;
    train_to_end(params, &cfg.student_train(), &objective, &items, out, "student.ckpt")
}

fn write_curve(out: &Path, name: &str, curve: &PrCurve) -> Result<()> {
    curve.write_csv(std::io::BufWriter::new(fs::File::create(out.join(format!("pr_{name}.csv")))?))?;
    let points = curve.recall().into_iter().zip(curve.precision()).collect();
    let plot = svg::line_plot(
        &format!("PR curve: {name}"),
        "recall",
        "precision",
        (0.0, 1.0),
        (0.0, 1.0),
        &[svg::Series { label: name, points }],
    );
    fs::write(out.join(format!("pr_{name}.svg")), plot)?;
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    gt: &Path,
    pred: Option<&Path>,
    maps: Option<MapKind>,
    model: Option<&Path>,
    branch: Branch,
    out: &Path,
) -> Result<()> {
    let (m, samples) = read_corpus(gt)?;
    let classes = m.num_classes;
    let gts: Vec<BoundaryLabelMap> = samples.iter().map(|s| s.gt_boundaries.clone()).collect();
    let preds: Vec<MultiScoreMap<f32>> = match (pred, model) {
        (_, Some(model)) => {
            check_classes(cfg, &m)?;
            let params = load_checkpoint(model, &cfg.net)?.params;
            samples
                .iter()
                .map(|s| {
                    let o = params.forward_any(&s.image.to_tensor())?;
                    Ok(match branch {
                        Branch::Aw => o.b_aw,
                        Branch::Final => o.b_final,
                        Branch::Ag => MultiScoreMap::from_channels(&vec![o.b_ag; classes])?,
                    })
                })
                .collect::<Result<_>>()?
        }
        (Some(dir), None) => {
            let first = &m.samples.first().ok_or_else(|| Error::InvalidInput("empty corpus".into()))?.name;
            let kind = match maps {
                Some(k) => k,
                None => *MapKind::SEARCH_ORDER
                    .iter()
                    .find(|k| k.exists(dir, first))
                    .ok_or_else(|| Error::InvalidInput(format!("no prediction maps for {first} in {}", dir.display())))?,
            };
            m.samples.iter().map(|e| kind.read(dir, &e.name, classes)).collect::<Result<_>>()?
        }
        (None, None) => return Err(Error::InvalidInput("either --pred or --model is required".into())),
    };
    let (tol, n) = (cfg.eval.tolerance, cfg.eval.thresholds);
    let mut report = evaluate_class_aware(&preds, &gts, tol, n)?;
    let agnostic: ClassMetrics = evaluate_class_agnostic(&preds, &gts, tol, n)?;
    for c in &report.classes {
        write_curve(out, &c.class.expect("class row").to_string(), &c.curve)?;
    }
    write_curve(out, "agnostic", &agnostic.curve)?;
    let summary = format!(
        "mean MF {:.4} mean AP {:.4} class-agnostic MF {:.4} AP {:.4}",
        report.mean_mf, report.mean_ap, agnostic.mf, agnostic.ap
    );
    report.classes.push(agnostic);
    report.write_csv(std::io::BufWriter::new(fs::File::create(out.join("metrics.csv"))?))?;
    println!("{summary}");
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let experiment: Experiment = serde_path_to_error::deserialize(de).map_err(|e| Error::InvalidConfig {
        key: format!("sweep.{}", e.path()),
        msg: e.into_inner().to_string(),
    })?;
    write_json(&out.join("spec.json"), &experiment)?;
    let csv_path = |name: &str| out.join(name);
    match experiment {
        Experiment::Grid { axes } => {
            let spec = SweepSpec {
                axes,
                base: cfg.clone(),
                seed: cfg.seed,
            };
            let table = run_hyper_sweep(&spec)?;
            table.write_csv(fs::File::create(csv_path("grid.csv"))?)?;
        }
        Experiment::Branch => {
            let run = run_stage_one(cfg, false, |_| {})?;
            let table = run_branch_ablation(&cfg.eval, &run.outputs, &run.samples)?;
            table.write_csv(fs::File::create(csv_path("branch.csv"))?)?;
        }
        Experiment::MsfNms => {
            let run = run_stage_one(cfg, false, |_| {})?;
            let rows = run_msf_nms_ablation(cfg, &run.params, &run.samples)?;
            write_toggle_csv(&rows, fs::File::create(csv_path("msf_nms.csv"))?)?;
        }
        Experiment::CamRobustness { steps } => {
            let points = run_cam_robustness(cfg, &default_ladder(), steps)?;
            write_ladder_csv(&points, fs::File::create(csv_path("cam_robustness.csv"))?)?;
            let cams: Vec<_> = points.iter().filter(|p| p.level != "ground_truth").map(|p| (p.cam_iou, p.hard_mf)).collect();
            let plot = svg::line_plot(
                "pseudo-label MF vs CAM IoU",
                "CAM IoU",
                "mean MF",
                (0.0, 1.0),
                (0.0, 1.0),
                &[svg::Series {
                    label: "hard pseudo labels",
                    points: cams,
                }],
            );
            fs::write(out.join("cam_robustness.svg"), plot)?;
        }
    }
    println!("sweep written to {}", out.display());
    Ok(())
}

/// Rows of a metrics.csv keyed by their first column.
fn read_metrics(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut cols = l.split(',').map(str::to_string);
            let key = cols.next().unwrap_or_default();
            (key, cols.collect())
        })
        .collect())
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut table = String::from("run,mean_MF,mean_AP,agnostic_MF,agnostic_AP\n");
    for run in runs {
        let rows = read_metrics(&run.join("metrics.csv"))?;
        let get = |key: &str, col: usize| -> Result<String> {
            rows.iter()
                .find(|(k, _)| k == key)
                .and_then(|(_, c)| c.get(col).cloned())
                .ok_or_else(|| Error::Decode(format!("{}: no `{key}` row", run.join("metrics.csv").display())))
        };
        // metrics columns after the key: MF, best_threshold, AP, ...
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            run.display(),
            get("mean", 0)?,
            get("mean", 2)?,
            get("agnostic", 0)?,
            get("agnostic", 2)?
        ));
    }
    fs::write(out.join("summary.csv"), &table)?;
    print!("{table}");
    Ok(())
}
