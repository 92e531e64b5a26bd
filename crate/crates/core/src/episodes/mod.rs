//! Base/novel splits, K-shot episode sampling, and multi-seed aggregation.
//!
//! Sampling is a pure function of the dataset, class, shot count, seed and
//! task set: the generator is seeded from a SHA-256 digest of
//! `(class, K, seed)`.

pub mod dataset;
pub mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codecs::{CodecError, PointRecord, TaskKind, DEFAULT_BOX_POINTS, DEFAULT_MASK_POINTS};
use crate::geometry::{BBox, Point2};
use crate::metrics::{MetricRecord, Scenario};

pub use dataset::{CategoryInfo, Dataset, DatasetFile, ImageInfo, InstanceAnnotation, Keypoint};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("{location}: {msg}")]
    Invalid { location: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown category ids {0:?}")]
    UnknownClasses(Vec<u64>),
    #[error("class {0} is not a novel class")]
    NotNovel(u64),
    #[error("class {class} has {available} instances annotated for {tasks:?}, need K = {k}")]
    Insufficient { class: u64, k: usize, available: usize, tasks: Vec<TaskKind> },
    #[error("annotation {id}: {source}")]
    Codec { id: u64, source: CodecError },
    #[error("annotation {id}: crop transform does not round-trip")]
    CropRoundTrip { id: u64 },
    #[error("no results to aggregate")]
    NoResults,
    #[error("seed {seed} is missing metric {key}")]
    InconsistentKeys { seed: u64, key: String },
    #[error("duplicate result {key} for seed {seed}")]
    DuplicateResult { seed: u64, key: String },
}

pub type Result<T> = std::result::Result<T, EpisodeError>;

/// Ships with the crate; edit or replace via [`load_novel_ids`].
pub const DEFAULT_NOVEL_CONFIG: &str = include_str!("../../config/novel_classes.json");

#[derive(Debug, Deserialize)]
struct NovelConfig {
    novel_class_ids: Vec<u64>,
}

fn parse_novel_config(text: &str, location: &str) -> Result<BTreeSet<u64>> {
    let cfg: NovelConfig =
        serde_json::from_str(text).map_err(|e| EpisodeError::Invalid { location: location.into(), msg: e.to_string() })?;
    Ok(cfg.novel_class_ids.into_iter().collect())
}

pub fn default_novel_ids() -> BTreeSet<u64> {
    parse_novel_config(DEFAULT_NOVEL_CONFIG, "bundled novel class config").expect("bundled config parses")
}

pub fn load_novel_ids(path: &Path) -> Result<BTreeSet<u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| EpisodeError::Io { path: path.display().to_string(), source: e })?;
    parse_novel_config(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub base_class_ids: BTreeSet<u64>,
    pub novel_class_ids: BTreeSet<u64>,
}

pub fn make_split(ds: &Dataset, novel_ids: &BTreeSet<u64>) -> Result<Split> {
    let all = ds.category_ids();
    let unknown: Vec<u64> = novel_ids.difference(&all).copied().collect();
    if !unknown.is_empty() {
        return Err(EpisodeError::UnknownClasses(unknown));
    }
    Ok(Split { base_class_ids: all.difference(novel_ids).copied().collect(), novel_class_ids: novel_ids.clone() })
}

/// Translation from image to crop coordinates. The origin is integral, so
/// for points at or beyond the origin both directions are exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub origin: Point2,
    pub width: f64,
    pub height: f64,
}

impl CropTransform {
    /// The instance box grown by `margin` of its size on every side, clamped
    /// to the image, with the origin floored to whole pixels.
    pub fn around(bbox: &BBox, margin: f64, image: &ImageInfo) -> Self {
        let (iw, ih) = (image.width as f64, image.height as f64);
        let x0 = (bbox.x - margin * bbox.w).floor().clamp(0.0, iw);
        let y0 = (bbox.y - margin * bbox.h).floor().clamp(0.0, ih);
        let x1 = (bbox.max_x() + margin * bbox.w).ceil().clamp(x0, iw.max(x0));
        let y1 = (bbox.max_y() + margin * bbox.h).ceil().clamp(y0, ih.max(y0));
        Self { origin: Point2::new(x0, y0), width: x1 - x0, height: y1 - y0 }
    }

    pub fn to_crop(&self, p: Point2) -> Point2 {
        p.sub(self.origin)
    }

    pub fn to_image(&self, p: Point2) -> Point2 {
        p.add(self.origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub box_points: usize,
    pub mask_points: usize,
    /// Support crop margin as a fraction of the instance size.
    pub margin: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { box_points: DEFAULT_BOX_POINTS, mask_points: DEFAULT_MASK_POINTS, margin: 0.1 }
    }
}

impl EpisodeConfig {
    pub fn points_for(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::Segment => self.mask_points,
            _ => self.box_points,
        }
    }
}

/// Counting is the task held out of training.
pub fn scenario_of(task: TaskKind) -> Scenario {
    if task == TaskKind::Count {
        Scenario::Unseen
    } else {
        Scenario::Seen
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportInstance {
    pub annotation_id: u64,
    pub image_id: u64,
    pub crop: CropTransform,
    /// One record per requested task, in crop coordinates.
    pub points: Vec<PointRecord>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub class_id: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    pub scenarios: Vec<Scenario>,
    pub support: Vec<SupportInstance>,
    pub query_image_ids: Vec<u64>,
}

impl Episode {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("episode serialises")
    }
}

/// Generator for one `(class, K, seed)` draw.
pub fn episode_rng(class_id: u64, k: usize, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"episode");
    h.update(class_id.to_le_bytes());
    h.update((k as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Draws `k` support instances of a novel class annotated for every task;
/// the queries are all other images containing the class.
pub fn sample_episode(
    ds: &Dataset,
    split: &Split,
    class_id: u64,
    k: usize,
    seed: u64,
    tasks: &[TaskKind],
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    if !split.novel_class_ids.contains(&class_id) {
        return Err(EpisodeError::NotNovel(class_id));
    }
    let tasks: Vec<TaskKind> = tasks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut candidates: Vec<&InstanceAnnotation> =
        ds.annotations_of(class_id).filter(|a| tasks.iter().all(|&t| a.has_task(t))).collect();
    candidates.sort_by_key(|a| a.id);
    if k == 0 || candidates.len() < k {
        return Err(EpisodeError::Insufficient { class: class_id, k, available: candidates.len(), tasks });
    }
    let mut rng = episode_rng(class_id, k, seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), k);
    let mut support = Vec::with_capacity(k);
    for i in picked.iter() {
        let ann = candidates[i];
        let image = ds.image(ann.image_id).expect("validated image reference");
        let crop = CropTransform::around(&ann.bbox, cfg.margin, image);
        let mut points = Vec::with_capacity(tasks.len());
        for &task in &tasks {
            let set = ann.encode(task, cfg.points_for(task)).map_err(|source| EpisodeError::Codec { id: ann.id, source })?;
            let local = set.map_points(|p| crop.to_crop(p)).map_err(|source| EpisodeError::Codec { id: ann.id, source })?;
            let exact = set.points().points().iter().zip(local.points().points()).all(|(&p, &q)| crop.to_image(q) == p);
            if !exact {
                return Err(EpisodeError::CropRoundTrip { id: ann.id });
            }
            points.push(PointRecord::from_point_set(class_id, &local));
        }
        support.push(SupportInstance { annotation_id: ann.id, image_id: ann.image_id, crop, points });
    }
    let support_images: BTreeSet<u64> = support.iter().map(|s| s.image_id).collect();
    let query_image_ids: Vec<u64> = ds
        .annotations_of(class_id)
        .map(|a| a.image_id)
        .filter(|id| !support_images.contains(id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let scenarios = tasks.iter().map(|&t| scenario_of(t)).collect();
    Ok(Episode { class_id, k, seed, tasks, scenarios, support, query_image_ids })
}

/// Key shared by the per-seed records of one metric.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MetricKey {
    pub scenario: Scenario,
    pub task: TaskKind,
    pub class: Option<u64>,
    pub k: usize,
    pub metric: String,
}

impl MetricKey {
    fn of(r: &MetricRecord) -> Self {
        Self { scenario: r.scenario, task: r.task, class: r.class, k: r.k, metric: r.metric.clone() }
    }
}

impl std::fmt::Display for MetricKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let class = self.class.map_or("all".to_string(), |c| c.to_string());
        write!(f, "{}/{}/class {class}/K={}/{}", serde_json::to_string(&self.scenario).unwrap().trim_matches('"'), self.task, self.k, self.metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub scenario: Scenario,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<u64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub stddev: f64,
}

/// Mean and sample standard deviation per metric key. Every seed must
/// report the same keys; output is sorted by key and independent of input
/// order.
pub fn aggregate_over_seeds(records: &[MetricRecord]) -> Result<Vec<AggregateRecord>> {
    if records.is_empty() {
        return Err(EpisodeError::NoResults);
    }
    let mut table: BTreeMap<MetricKey, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        let key = MetricKey::of(r);
        if table.entry(key.clone()).or_default().insert(r.seed, r.value).is_some() {
            return Err(EpisodeError::DuplicateResult { seed: r.seed, key: key.to_string() });
        }
    }
    let seeds: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
    for (key, per_seed) in &table {
        if let Some(&seed) = seeds.iter().find(|s| !per_seed.contains_key(s)) {
            return Err(EpisodeError::InconsistentKeys { seed, key: key.to_string() });
        }
    }
    Ok(table
        .into_iter()
        .map(|(key, per_seed)| {
            let n = per_seed.len() as f64;
            let mean = per_seed.values().sum::<f64>() / n;
            let stddev = if per_seed.len() < 2 {
                0.0
            } else {
                (per_seed.values().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            AggregateRecord {
                scenario: key.scenario,
                task: key.task,
                class: key.class,
                k: key.k,
                metric: key.metric,
                seeds: per_seed.len(),
                mean,
                stddev,
            }
        })
        .collect())
}
