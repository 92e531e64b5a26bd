//! COCO-style annotation files: parsing, validation, and saving.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpisodeError, Result};
use crate::codecs::{self, CanonicalPointSet, TaskKind};
use crate::geometry::{BBox, Point2, PointSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryInfo {
    pub id: u64,
    pub name: String,
    /// Keypoint names in semantic order.
    #[serde(rename = "keypoints", default, skip_serializing_if = "Option::is_none")]
    pub keypoint_names: Option<Vec<String>>,
    /// Left/right keypoint index pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetry_pairs: Option<Vec<[usize; 2]>>,
}

/// One keypoint; `v > 0` means labelled and visible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn visible(&self) -> bool {
        self.v > 0
    }
}

/// A validated instance annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub segmentation: Option<Vec<PointSequence>>,
    pub keypoints: Option<Vec<Keypoint>>,
    pub area: Option<f64>,
}

impl InstanceAnnotation {
    pub fn center(&self) -> Point2 {
        self.bbox.center()
    }

    pub fn has_task(&self, task: TaskKind) -> bool {
        match task {
            TaskKind::Detect | TaskKind::Count => self.bbox.w > 0.0 && self.bbox.h > 0.0,
            TaskKind::Segment => self.segmentation.as_ref().is_some_and(|s| !s.is_empty()),
            TaskKind::Pose => self.keypoints.as_ref().is_some_and(|k| !k.is_empty()),
        }
    }

    /// Instance area: the stored value, else the box area.
    pub fn area_or_box(&self) -> f64 {
        self.area.unwrap_or_else(|| self.bbox.area())
    }

    /// Canonical point set of this instance for `task`, in image
    /// coordinates. `points` sets the box or contour size and is ignored for
    /// pose and counting.
    pub fn encode(&self, task: TaskKind, points: usize) -> codecs::Result<CanonicalPointSet> {
        match task {
            TaskKind::Detect => codecs::encode_box(&self.bbox, points),
            TaskKind::Count => codecs::encode_center(&self.bbox),
            TaskKind::Segment => {
                let parts = self.segmentation.as_deref().unwrap_or(&[]);
                let poly = codecs::largest_polygon(parts).ok_or(codecs::CodecError::EmptyMask)?;
                codecs::encode_mask(poly, points)
            }
            TaskKind::Pose => {
                let kp = self.keypoints.as_deref().unwrap_or(&[]);
                codecs::encode_pose(&kp.iter().map(|k| (k.x, k.y, k.visible())).collect::<Vec<_>>())
            }
        }
    }
}

/// On-disk annotation layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<RawAnnotation>,
    pub categories: Vec<CategoryInfo>,
}

/// Immutable, validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: BTreeMap<u64, ImageInfo>,
    categories: BTreeMap<u64, CategoryInfo>,
    annotations: Vec<InstanceAnnotation>,
}

fn invalid(location: String, msg: impl Into<String>) -> EpisodeError {
    EpisodeError::Invalid { location, msg: msg.into() }
}

fn validate_annotation(
    raw: &RawAnnotation,
    location: &str,
    images: &BTreeMap<u64, ImageInfo>,
    categories: &BTreeMap<u64, CategoryInfo>,
) -> Result<InstanceAnnotation> {
    let loc = || location.to_string();
    if !images.contains_key(&raw.image_id) {
        return Err(invalid(loc(), format!("references missing image {}", raw.image_id)));
    }
    let Some(cat) = categories.get(&raw.category_id) else {
        return Err(invalid(loc(), format!("references missing category {}", raw.category_id)));
    };
    let [x, y, w, h] = raw.bbox;
    let bbox = BBox::new(x, y, w, h);
    if !bbox.is_valid() {
        return Err(invalid(loc(), format!("bbox {:?} must be finite with non-negative size", raw.bbox)));
    }
    let segmentation = match &raw.segmentation {
        None => None,
        Some(parts) => {
            let mut polys = Vec::with_capacity(parts.len());
            for (j, flat) in parts.iter().enumerate() {
                if flat.len() < 6 || flat.len() % 2 != 0 {
                    return Err(invalid(
                        format!("{location}.segmentation[{j}]"),
                        format!("polygon needs an even number (>= 6) of coordinates, got {}", flat.len()),
                    ));
                }
                let poly = PointSequence::from_flat(flat, true)
                    .map_err(|e| invalid(format!("{location}.segmentation[{j}]"), e.to_string()))?;
                polys.push(poly);
            }
            Some(polys)
        }
    };
    let keypoints = match &raw.keypoints {
        None => None,
        Some(flat) => {
            let Some(names) = &cat.keypoint_names else {
                return Err(invalid(loc(), format!("keypoints given but category {} declares none", cat.id)));
            };
            if flat.len() != 3 * names.len() {
                return Err(invalid(
                    format!("{location}.keypoints"),
                    format!("expected {} values for {} keypoints, got {}", 3 * names.len(), names.len(), flat.len()),
                ));
            }
            let mut kps = Vec::with_capacity(names.len());
            for (j, t) in flat.chunks_exact(3).enumerate() {
                let v = t[2];
                if !(t[0].is_finite() && t[1].is_finite()) || !matches!(v, 0.0 | 1.0 | 2.0) {
                    return Err(invalid(format!("{location}.keypoints[{j}]"), format!("bad keypoint {t:?}")));
                }
                kps.push(Keypoint { x: t[0], y: t[1], v: v as u8 });
            }
            Some(kps)
        }
    };
    if let Some(a) = raw.area {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(invalid(loc(), format!("area {a} must be finite and non-negative")));
        }
    }
    Ok(InstanceAnnotation {
        id: raw.id,
        image_id: raw.image_id,
        category_id: raw.category_id,
        bbox,
        segmentation,
        keypoints,
        area: raw.area,
    })
}

impl Dataset {
    pub fn from_file(file: DatasetFile) -> Result<Self> {
        let mut images = BTreeMap::new();
        for (i, img) in file.images.into_iter().enumerate() {
            let id = img.id;
            if images.insert(id, img).is_some() {
                return Err(invalid(format!("images[{i}]"), format!("duplicate image id {id}")));
            }
        }
        let mut categories = BTreeMap::new();
        for (i, cat) in file.categories.into_iter().enumerate() {
            let id = cat.id;
            if let Some(pairs) = &cat.symmetry_pairs {
                let n = cat.keypoint_names.as_ref().map_or(0, Vec::len);
                if pairs.iter().flatten().any(|&k| k >= n) {
                    return Err(invalid(format!("categories[{i}] (id {id})"), "symmetry pair index out of range"));
                }
            }
            if categories.insert(id, cat).is_some() {
                return Err(invalid(format!("categories[{i}]"), format!("duplicate category id {id}")));
            }
        }
        let mut seen = BTreeSet::new();
        let mut annotations = Vec::with_capacity(file.annotations.len());
        for (i, raw) in file.annotations.iter().enumerate() {
            let location = format!("annotations[{i}] (id {})", raw.id);
            if !seen.insert(raw.id) {
                return Err(invalid(location, "duplicate annotation id"));
            }
            annotations.push(validate_annotation(raw, &location, &images, &categories)?);
        }
        Ok(Self { images, categories, annotations })
    }

    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            images: self.images.values().cloned().collect(),
            categories: self.categories.values().cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .map(|a| RawAnnotation {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: [a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h],
                    segmentation: a.segmentation.as_ref().map(|ps| ps.iter().map(PointSequence::to_flat).collect()),
                    keypoints: a
                        .keypoints
                        .as_ref()
                        .map(|ks| ks.iter().flat_map(|k| [k.x, k.y, k.v as f64]).collect()),
                    area: a.area,
                })
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile =
            serde_json::from_str(text).map_err(|e| invalid(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        Self::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("dataset serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EpisodeError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| EpisodeError::Io { path: path.display().to_string(), source: e })
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageInfo> {
        self.images.values()
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.get(&id)
    }

    pub fn categories(&self) -> impl Iterator<Item = &CategoryInfo> {
        self.categories.values()
    }

    pub fn category(&self, id: u64) -> Option<&CategoryInfo> {
        self.categories.get(&id)
    }

    pub fn category_ids(&self) -> BTreeSet<u64> {
        self.categories.keys().copied().collect()
    }

    /// Annotations in file order.
    pub fn annotations(&self) -> &[InstanceAnnotation] {
        &self.annotations
    }

    pub fn annotations_of(&self, category_id: u64) -> impl Iterator<Item = &InstanceAnnotation> {
        self.annotations.iter().filter(move |a| a.category_id == category_id)
    }

    pub fn annotations_in(&self, image_id: u64) -> impl Iterator<Item = &InstanceAnnotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }
}
