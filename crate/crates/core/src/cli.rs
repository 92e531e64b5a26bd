//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 for invalid input, 2 for numerical failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codecs::{PointRecord, TaskKind};
use crate::decoder::checkpoint::Checkpoint;
use crate::decoder::{self, toy, DecoderConfig, DecoderError, DecoderParams};
use crate::demo::{self, DemoShape};
use crate::episodes::{self, Dataset, Episode, EpisodeConfig, Split};
use crate::gradcheck::{self, CheckLine, GradientMode};
use crate::metrics::{self, BoxIou, Detection, GroundTruth, KeypointOks, MaskIou, MetricRecord, Similarity};
use crate::sapl::SaplConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

pub const THREADS_ENV: &str = "POINTPERC_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => EXIT_NUMERICAL,
            _ => EXIT_INVALID,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Parser)]
#[command(name = "pointperc", version, about = "Point-based instance perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode every annotated instance as a canonical point record.
    Encode(EncodeArgs),
    /// Finite-difference checks of the loss and decoder gradients.
    Gradcheck(GradcheckArgs),
    /// Fit points directly with and without the structure term.
    Fitdemo(FitdemoArgs),
    /// Train the small decoder on a synthetic episode.
    Traintoy(TraintoyArgs),
    /// Score predictions over few-shot episodes.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    task: TaskKind,
    /// Box or contour size; defaults to 16 for boxes and 32 for masks.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random pairs per loss configuration.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_wrong_gradient: bool,
}

#[derive(Debug, Args)]
struct FitdemoArgs {
    #[arg(long)]
    shape: DemoShape,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, default_value_t = demo::DEFAULT_FIT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = demo::DEFAULT_FIT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Displacement used by the diamond construction.
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TraintoyArgs {
    #[arg(long, default_value_t = toy::TOY_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = toy::TOY_LR)]
    lr: f64,
    #[arg(long, default_value_t = toy::TOY_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    hops: usize,
    #[arg(long, default_value_t = toy::TOY_POINTS)]
    points: usize,
    /// Adds a skip connection around every decoder block.
    #[arg(long)]
    residual: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Output directory for `checkpoint.json` and `loss.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    annotations: PathBuf,
    /// Prediction lines `{"image_id", "score", "record"}`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long = "task", required = true, value_delimiter = ',')]
    tasks: Vec<TaskKind>,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// First episode seed; seeds run `seed..seed + seeds`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Novel class list; defaults to the bundled config restricted to the
    /// dataset's categories.
    #[arg(long)]
    novel_classes: Option<PathBuf>,
    /// Output directory for `episodes.jsonl`, `records.jsonl` and
    /// `aggregate.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Encode(a) => cmd_encode(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Fitdemo(a) => cmd_fitdemo(&a),
        Command::Traintoy(a) => cmd_traintoy(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| invalid(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // the global pool can only be built once per process
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already configured");
    }
    Ok(())
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(&item).expect("records serialise"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).map_err(invalid)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodedInstance {
    pub annotation_id: u64,
    pub image_id: u64,
    pub record: PointRecord,
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let cfg = EpisodeConfig::default();
    let points = a.points.unwrap_or_else(|| cfg.points_for(a.task));
    if matches!(a.task, TaskKind::Detect | TaskKind::Segment) && !a.task.accepts_count(points) {
        return Err(invalid(format!("{points} points is not a valid size for {}", a.task)));
    }
    let ds = load_dataset(&a.annotations)?;
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for ann in ds.annotations() {
        if !ann.has_task(a.task) {
            skipped += 1;
            continue;
        }
        let set = ann.encode(a.task, points).map_err(|e| invalid(format!("annotation {}: {e}", ann.id)))?;
        out.push(EncodedInstance {
            annotation_id: ann.id,
            image_id: ann.image_id,
            record: PointRecord::from_point_set(ann.category_id, &set),
        });
    }
    if skipped > 0 {
        log::warn!("{skipped} annotations carry no {} annotation and were skipped", a.task);
    }
    write_lines(&a.out, &out)?;
    println!("encoded {} instances as {}", out.len(), a.task);
    Ok(())
}

fn format_check(line: &CheckLine) -> String {
    format!(
        "{}: cases {} max rel err {:.3e} {}",
        line.name,
        line.cases,
        line.max_rel_err,
        if line.passed { "PASS" } else { "FAIL" }
    )
}

/// All gradient checks run by the `gradcheck` command.
pub fn gradcheck_report(seed: u64, cases: usize, mode: GradientMode) -> Vec<CheckLine> {
    let mut lines = gradcheck::point_loss_suite(seed, cases, mode);
    for residual in [false, true] {
        lines.push(gradcheck::check_decoder(seed, residual, mode));
    }
    lines
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.cases == 0 {
        return Err(invalid("--cases must be at least 1"));
    }
    let mode = if a.inject_wrong_gradient { GradientMode::Perturbed } else { GradientMode::Analytic };
    let lines = gradcheck_report(a.seed, a.cases, mode);
    let text: String = lines.iter().map(|l| format_check(l) + "\n").collect();
    print!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(io_err(path))?;
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks above {:e}", gradcheck::MAX_REL_ERR)));
    }
    Ok(())
}

fn cmd_fitdemo(a: &FitdemoArgs) -> Result<()> {
    if a.hops == 0 {
        return Err(invalid("--hops must be at least 1"));
    }
    if !a.lr.is_finite() || a.lr < 0.0 {
        return Err(invalid("--lr must be finite and non-negative"));
    }
    let json = match a.shape {
        DemoShape::DiamondAmbiguity => {
            if !a.radius.is_finite() || a.radius <= 0.0 {
                return Err(invalid("--radius must be positive"));
            }
            let r = demo::diamond_ambiguity(a.hops, a.radius).map_err(|e| CliError::Numerical(e.to_string()))?;
            for c in &r.candidates {
                println!(
                    "offset ({}, {}): l1 {:.12} sapl {:.12} total {:.12}",
                    c.offset.x, c.offset.y, c.l1_term, c.sapl_term, c.total
                );
            }
            serde_json::to_string(&r)
        }
        shape => {
            let target = if shape == DemoShape::Star { demo::star_target() } else { demo::square_target() };
            let r = demo::fit_demo(shape, &target, a.hops, a.steps, a.lr, a.seed)
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            for arm in &r.arms {
                println!("{}: final loss {:.6} mean point error {:.6}", arm.name, arm.trace.last().unwrap_or(&0.0), arm.mean_error);
            }
            serde_json::to_string(&r)
        }
    }
    .expect("report serialises");
    if let Some(path) = &a.out {
        fs::write(path, json + "\n").map_err(io_err(path))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLine {
    pub step: u64,
    pub total: f64,
    pub l1: f64,
    pub sapl: f64,
}

fn cmd_traintoy(a: &TraintoyArgs) -> Result<()> {
    if a.hops == 0 {
        return Err(invalid("--hops must be at least 1"));
    }
    if !a.lr.is_finite() || a.lr < 0.0 {
        return Err(invalid("--lr must be finite and non-negative"));
    }
    let (mut params, start) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            if a.residual && !ckpt.config.residual {
                return Err(invalid("--residual conflicts with the checkpoint's configuration"));
            }
            (ckpt.to_params().map_err(invalid)?, ckpt.step)
        }
        None => {
            let config = DecoderConfig { residual: a.residual, ..DecoderConfig::default() };
            (DecoderParams::init(config, a.seed).map_err(invalid)?, 0)
        }
    };
    let batch = toy::toy_batch(&params.config, a.points, a.seed).map_err(invalid)?;
    let cfg = SaplConfig::with_hops(a.hops);
    // shapes are fixed by the validated batch, so any failure from here on
    // is the optimisation diverging
    let numerical = |step: u64, e: DecoderError| CliError::Numerical(format!("training diverged at step {step}: {e}"));
    let mut curve = Vec::with_capacity(a.steps + 1);
    for i in 0..a.steps as u64 {
        let step = start + i;
        let loss = decoder::train_step(&mut params, &batch, &cfg, a.lr).map_err(|e| numerical(step, e))?;
        curve.push(LossLine { step, total: loss.total, l1: loss.l1_term, sapl: loss.sapl_term });
    }
    let end = start + a.steps as u64;
    let last = decoder::batch_loss(&params, &batch, &cfg).map_err(|e| numerical(end, e))?;
    if params.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical(format!("non-finite parameters at step {end}")));
    }
    curve.push(LossLine { step: end, total: last.total, l1: last.l1_term, sapl: last.sapl_term });
    create_dir(&a.out)?;
    let ckpt_path = a.out.join("checkpoint.json");
    Checkpoint::from_params(&params, end).save(&ckpt_path).map_err(|e| invalid(format!("{}: {e}", ckpt_path.display())))?;
    write_lines(&a.out.join("loss.jsonl"), &curve)?;
    let first = curve[0].total;
    println!("steps {start}..{end}: loss {first:.6} -> {:.6} (ratio {:.4})", last.total, last.total / first);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: u64,
    pub score: f64,
    pub record: PointRecord,
}

/// Reads prediction lines, keeping those whose task is in `tasks`. Any
/// other task is an error naming the line.
pub fn read_predictions(path: &Path, tasks: &[TaskKind]) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| invalid(format!("{} line {}: {msg}", path.display(), i + 1));
        let p: PredictionLine = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if !tasks.contains(&p.record.task) {
            return Err(at(format!("task {} was not requested", p.record.task)));
        }
        let set = p.record.to_point_set().map_err(|e| at(e.to_string()))?;
        out.push(Detection::new(p.record.category_id, p.image_id, p.score, set).map_err(|e| at(e.to_string()))?);
    }
    Ok(out)
}

/// The novel classes actually present in `ds`.
fn resolve_split(ds: &Dataset, novel: Option<&Path>) -> Result<Split> {
    let ids = match novel {
        Some(path) => episodes::load_novel_ids(path).map_err(invalid)?,
        None => {
            let present = ds.category_ids();
            let ids: BTreeSet<u64> = episodes::default_novel_ids().intersection(&present).copied().collect();
            if ids.is_empty() {
                return Err(invalid("no category of the annotation file is a novel class; pass --novel-classes"));
            }
            ids
        }
    };
    episodes::make_split(ds, &ids).map_err(invalid)
}

fn ground_truth(ds: &Dataset, class: u64, images: &BTreeSet<u64>, task: TaskKind, cfg: &EpisodeConfig) -> Result<Vec<GroundTruth>> {
    ds.annotations_of(class)
        .filter(|a| images.contains(&a.image_id) && a.has_task(task))
        .map(|a| {
            let points = a.encode(task, cfg.points_for(task)).map_err(|e| invalid(format!("annotation {}: {e}", a.id)))?;
            Ok(GroundTruth { category_id: class, image_id: a.image_id, points, area: a.area_or_box() })
        })
        .collect()
}

fn support_visibility(episode: &Episode) -> Vec<bool> {
    let mut union: Vec<bool> = Vec::new();
    for rec in episode.support.iter().flat_map(|s| &s.points).filter(|r| r.task == TaskKind::Pose) {
        let vis = rec.visibility.clone().unwrap_or_else(|| vec![true; rec.points.len()]);
        if union.len() < vis.len() {
            union.resize(vis.len(), false);
        }
        for (u, v) in union.iter_mut().zip(vis) {
            *u |= v;
        }
    }
    union
}

/// `(task, metric, value)` for one class in one episode.
type EpisodeScores = Vec<(TaskKind, &'static str, f64)>;

fn score_episode(
    ds: &Dataset,
    episode: &Episode,
    dets: &[Detection],
    cfg: &EpisodeConfig,
) -> Result<EpisodeScores> {
    let class = episode.class_id;
    let images: BTreeSet<u64> = episode.query_image_ids.iter().copied().collect();
    if images.is_empty() {
        return Err(invalid(format!("class {class} has no query images left at K = {}", episode.k)));
    }
    let thresholds = metrics::coco_thresholds();
    let mut out = Vec::new();
    for &task in &episode.tasks {
        let gts = ground_truth(ds, class, &images, task, cfg)?;
        let d: Vec<Detection> = dets
            .iter()
            .filter(|d| d.points.task() == task && d.category_id == class && images.contains(&d.image_id))
            .cloned()
            .collect();
        let fail = |e: metrics::MetricsError| invalid(format!("class {class} {task}: {e}"));
        if task == TaskKind::Count {
            let pairs = metrics::count_pairs(&d, &gts, metrics::COUNT_SCORE_THRESHOLD);
            out.push((task, "mse", metrics::counting_mse(&pairs).map_err(fail)?));
            continue;
        }
        let oks;
        let (sim, gts): (&dyn Similarity, Vec<GroundTruth>) = match task {
            TaskKind::Detect => (&BoxIou, gts),
            TaskKind::Segment => (&MaskIou, gts),
            _ => {
                oks = KeypointOks { kappa: metrics::DEFAULT_KAPPA, support_visible: support_visibility(episode) };
                let kept = oks.evaluable(&gts).map_err(fail)?;
                (&oks, kept)
            }
        };
        let s = metrics::average_precision(&d, &gts, sim, &thresholds).map_err(fail)?;
        out.push((task, "ap", s.mean_ap));
        out.push((task, "ap50", s.at(0.5).expect("threshold present")));
        out.push((task, "ap75", s.at(0.75).expect("threshold present")));
    }
    Ok(out)
}

/// Per-class and class-mean records for every seed, plus the manifest of
/// sampled episodes.
pub fn evaluate_episodes(
    ds: &Dataset,
    split: &Split,
    dets: &[Detection],
    tasks: &[TaskKind],
    k: usize,
    seeds: &[u64],
) -> Result<(Vec<Episode>, Vec<MetricRecord>)> {
    let cfg = EpisodeConfig::default();
    let jobs: Vec<(u64, u64)> = seeds.iter().flat_map(|&s| split.novel_class_ids.iter().map(move |&c| (s, c))).collect();
    let results: Vec<(Episode, EpisodeScores)> = jobs
        .par_iter()
        .map(|&(seed, class)| {
            let ep = episodes::sample_episode(ds, split, class, k, seed, tasks, &cfg).map_err(invalid)?;
            let scores = score_episode(ds, &ep, dets, &cfg)?;
            Ok((ep, scores))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    let mut means: BTreeMap<(u64, TaskKind, &'static str), Vec<f64>> = BTreeMap::new();
    for (ep, scores) in &results {
        for &(task, metric, value) in scores {
            records.push(MetricRecord {
                scenario: episodes::scenario_of(task),
                task,
                class: Some(ep.class_id),
                k,
                seed: ep.seed,
                metric: metric.into(),
                value,
            });
            means.entry((ep.seed, task, metric)).or_default().push(value);
        }
    }
    for ((seed, task, metric), values) in means {
        records.push(MetricRecord {
            scenario: episodes::scenario_of(task),
            task,
            class: None,
            k,
            seed,
            metric: metric.into(),
            value: values.iter().sum::<f64>() / values.len() as f64,
        });
    }
    Ok((results.into_iter().map(|(ep, _)| ep).collect(), records))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.shots == 0 || a.seeds == 0 {
        return Err(invalid("--shots and --seeds must be at least 1"));
    }
    let ds = load_dataset(&a.annotations)?;
    let split = resolve_split(&ds, a.novel_classes.as_deref())?;
    let tasks: Vec<TaskKind> = a.tasks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let dets = read_predictions(&a.predictions, &tasks)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| a.seed + i).collect();
    let (episodes, records) = evaluate_episodes(&ds, &split, &dets, &tasks, a.shots, &seeds)?;
    let aggregate = episodes::aggregate_over_seeds(&records).map_err(invalid)?;
    create_dir(&a.out)?;
    let manifest: String = episodes.iter().map(|e| e.to_json_line() + "\n").collect();
    let path = a.out.join("episodes.jsonl");
    fs::write(&path, manifest).map_err(io_err(&path))?;
    let path = a.out.join("records.jsonl");
    let mut buf = Vec::new();
    metrics::write_records(&mut buf, &records).map_err(invalid)?;
    fs::write(&path, buf).map_err(io_err(&path))?;
    write_lines(&a.out.join("aggregate.jsonl"), &aggregate)?;
    let mut stdout = std::io::stdout().lock();
    for r in aggregate.iter().filter(|r| r.class.is_none()) {
        let scenario = serde_json::to_string(&r.scenario).expect("scenario serialises");
        let _ = writeln!(
            stdout,
            "{} {} K={} {}: {:.4} ± {:.4} over {} seeds",
            scenario.trim_matches('"'),
            r.task,
            r.k,
            r.metric,
            r.mean,
            r.stddev,
            r.seeds
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["pointperc", "encode", "--task", "bogus"]), EXIT_INVALID);
        assert_eq!(run(["pointperc", "frobnicate"]), EXIT_INVALID);
        assert_eq!(run(["pointperc", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), EXIT_INVALID);
        assert_eq!(CliError::Numerical("x".into()).exit_code(), EXIT_NUMERICAL);
    }

    #[test]
    fn support_visibility_is_a_union() {
        let ds = episodes::toy::toy_dataset(&episodes::toy::ToyConfig::default(), 3);
        let split = episodes::make_split(&ds, &ds.category_ids()).unwrap();
        let ep = episodes::sample_episode(&ds, &split, 1, 3, 0, &[TaskKind::Pose], &EpisodeConfig::default()).unwrap();
        let union = support_visibility(&ep);
        assert_eq!(union.len(), 4);
        for s in &ep.support {
            for (i, v) in s.points[0].visibility.as_ref().unwrap().iter().enumerate() {
                assert!(!v || union[i]);
            }
        }
    }
}
