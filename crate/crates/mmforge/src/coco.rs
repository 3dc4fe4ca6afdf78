//! COCO instances-annotation ingest: parse the standard
//! images/annotations/categories document into an indexed dataset, derive
//! per-image object-count labels, and report invariant violations.
//!
//! Ingest is tolerant by design: real annotation files carry noise, so
//! out-of-bounds boxes are clamped and unresolvable records dropped, with
//! every repair recorded as a [`Violation`] diagnostic rather than an error.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::mask::{rle_decode, BinaryMask, RleMask};

#[derive(Debug, thiserror::Error)]
pub enum CocoError {
    #[error("annotation document is not parseable: {0}")]
    MalformedDocument(String),
    #[error("annotation document has no `{0}` section")]
    MissingSection(&'static str),
    #[error("image id {0} is not in the dataset index")]
    UnknownImage(u64),
}

/// One image entry. `file_name` is an opaque reference; images are never
/// decoded here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// A category with its name normalized (lowercase, whitespace collapsed) so
/// downstream surface-string matching behaves predictably.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: u64,
    pub name: String,
}

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_category_name(name: &str) -> String {
    name.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    fn clamped(&self, width: u32, height: u32) -> Bbox {
        let x = self.x.clamp(0.0, width as f64);
        let y = self.y.clamp(0.0, height as f64);
        let w = self.w.clamp(0.0, width as f64 - x);
        let h = self.h.clamp(0.0, height as f64 - y);
        Bbox { x, y, w, h }
    }

    fn within(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.w >= 0.0
            && self.h >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }
}

/// Instance outline: polygons are kept as vertex lists and rasterized only
/// when a [`BinaryMask`] is requested, keeping ingest memory bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segmentation {
    Polygons(Vec<Vec<f64>>),
    Rle(RleMask),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: Bbox,
    pub segmentation: Segmentation,
    pub iscrowd: bool,
    pub area: f64,
}

impl InstanceAnnotation {
    /// Rasterize the segmentation onto the image grid. Returns `None` when no
    /// usable segmentation is attached or the stored RLE grid does not match.
    pub fn binary_mask(&self, width: u32, height: u32) -> Option<BinaryMask> {
        match &self.segmentation {
            Segmentation::None => None,
            Segmentation::Rle(rle) => {
                if rle.width() == width && rle.height() == height {
                    Some(rle_decode(rle))
                } else {
                    None
                }
            }
            Segmentation::Polygons(polygons) => {
                Some(rasterize_polygons(polygons, width, height))
            }
        }
    }
}

/// Even-odd scanline fill of one or more flat `[x0, y0, x1, y1, ...]` rings.
fn rasterize_polygons(polygons: &[Vec<f64>], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for y in 0..height {
        let yc = y as f64 + 0.5;
        let mut crossings: Vec<f64> = Vec::new();
        for ring in polygons {
            let n = ring.len() / 2;
            if n < 3 {
                continue;
            }
            for i in 0..n {
                let (x1, y1) = (ring[2 * i], ring[2 * i + 1]);
                let j = (i + 1) % n;
                let (x2, y2) = (ring[2 * j], ring[2 * j + 1]);
                if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                    crossings.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
                }
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).expect("finite crossings"));
        for x in 0..width {
            let xc = x as f64 + 0.5;
            let left = crossings.partition_point(|&c| c <= xc);
            if left % 2 == 1 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Per-image object counts aggregated from instance annotations. Crowd
/// regions count as a single instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountLabel {
    pub image_id: u64,
    /// Category name to count; never holds zero entries.
    pub per_category: BTreeMap<String, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    OutOfBounds,
    DuplicateId,
    DanglingReference,
    DuplicateName,
    InvalidField,
}

/// One invariant breach, suitable for a JSONL diagnostics sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Which record kind the violation is about: "image", "category", "annotation".
    pub entity: String,
    pub id: u64,
    pub detail: String,
}

impl Violation {
    fn new(kind: ViolationKind, entity: &str, id: u64, detail: impl Into<String>) -> Self {
        Violation {
            kind,
            entity: entity.to_string(),
            id,
            detail: detail.into(),
        }
    }
}

/// Indexed dataset: read-only after construction, safe for concurrent readers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    images: BTreeMap<u64, ImageRecord>,
    categories: BTreeMap<u64, CategoryDef>,
    annotations_by_image: BTreeMap<u64, Vec<InstanceAnnotation>>,
}

impl DatasetIndex {
    /// Build an index from raw maps without validation; use
    /// [`validate_dataset`] to report breaches in hand-built indexes.
    pub fn from_maps(
        images: BTreeMap<u64, ImageRecord>,
        categories: BTreeMap<u64, CategoryDef>,
        annotations_by_image: BTreeMap<u64, Vec<InstanceAnnotation>>,
    ) -> Self {
        DatasetIndex {
            images,
            categories,
            annotations_by_image,
        }
    }

    pub fn images(&self) -> &BTreeMap<u64, ImageRecord> {
        &self.images
    }

    pub fn categories(&self) -> &BTreeMap<u64, CategoryDef> {
        &self.categories
    }

    pub fn annotations_by_image(&self) -> &BTreeMap<u64, Vec<InstanceAnnotation>> {
        &self.annotations_by_image
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.get(&id)
    }

    pub fn category_name(&self, id: u64) -> Option<&str> {
        self.categories.get(&id).map(|c| c.name.as_str())
    }

    pub fn annotations_for(&self, image_id: u64) -> &[InstanceAnnotation] {
        self.annotations_by_image
            .get(&image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Image ids in canonical (ascending) order.
    pub fn image_ids(&self) -> Vec<u64> {
        self.images.keys().copied().collect()
    }

    /// Sorted unique category names present on one image.
    pub fn category_names_for_image(&self, image_id: u64) -> Vec<String> {
        let mut names: BTreeSet<String> = BTreeSet::new();
        for ann in self.annotations_for(image_id) {
            if let Some(name) = self.category_name(ann.category_id) {
                names.insert(name.to_string());
            }
        }
        names.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// The result of ingesting one annotation document.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub index: DatasetIndex,
    pub diagnostics: Vec<Violation>,
}

// Raw wire shapes for the COCO document. Unknown fields are ignored.

#[derive(Deserialize)]
struct RawDocument {
    images: Option<Vec<RawImage>>,
    annotations: Option<Vec<RawAnnotation>>,
    categories: Option<Vec<RawCategory>>,
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: i64,
    height: i64,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    segmentation: Option<RawSegmentation>,
    #[serde(default, deserialize_with = "deserialize_iscrowd")]
    iscrowd: bool,
    #[serde(default)]
    area: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawSegmentation {
    Polygons(Vec<Vec<f64>>),
    Rle { size: [u32; 2], counts: RawCounts },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCounts {
    Ints(Vec<u32>),
    Packed(String),
}

fn deserialize_iscrowd<'de, D>(deserializer: D) -> Result<bool, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum IsCrowd {
        Bool(bool),
        Int(u8),
    }
    Ok(match IsCrowd::deserialize(deserializer)? {
        IsCrowd::Bool(b) => b,
        IsCrowd::Int(i) => i != 0,
    })
}

/// Parse a COCO "instances" annotation document into an indexed dataset.
///
/// Unresolvable annotations are dropped and counted in the diagnostics;
/// out-of-bounds boxes are clamped and recorded. The returned index always
/// satisfies its own invariants.
pub fn parse_dataset(bytes: &[u8]) -> Result<ParsedDataset, CocoError> {
    let doc: RawDocument = serde_json::from_slice(bytes)
        .map_err(|e| CocoError::MalformedDocument(e.to_string()))?;
    let raw_images = doc.images.ok_or(CocoError::MissingSection("images"))?;
    let raw_annotations = doc
        .annotations
        .ok_or(CocoError::MissingSection("annotations"))?;
    let raw_categories = doc
        .categories
        .ok_or(CocoError::MissingSection("categories"))?;

    let mut diagnostics: Vec<Violation> = Vec::new();

    let mut images: BTreeMap<u64, ImageRecord> = BTreeMap::new();
    for raw in raw_images {
        if images.contains_key(&raw.id) {
            diagnostics.push(Violation::new(
                ViolationKind::DuplicateId,
                "image",
                raw.id,
                "duplicate image id; keeping the first occurrence",
            ));
            continue;
        }
        if raw.width <= 0 || raw.height <= 0 {
            diagnostics.push(Violation::new(
                ViolationKind::InvalidField,
                "image",
                raw.id,
                format!("non-positive dimensions {}x{}; image dropped", raw.width, raw.height),
            ));
            continue;
        }
        images.insert(
            raw.id,
            ImageRecord {
                id: raw.id,
                file_name: raw.file_name,
                width: raw.width as u32,
                height: raw.height as u32,
            },
        );
    }

    let mut categories: BTreeMap<u64, CategoryDef> = BTreeMap::new();
    let mut seen_names: BTreeSet<String> = BTreeSet::new();
    for raw in raw_categories {
        if categories.contains_key(&raw.id) {
            diagnostics.push(Violation::new(
                ViolationKind::DuplicateId,
                "category",
                raw.id,
                "duplicate category id; keeping the first occurrence",
            ));
            continue;
        }
        let name = normalize_category_name(&raw.name);
        if name.is_empty() {
            diagnostics.push(Violation::new(
                ViolationKind::InvalidField,
                "category",
                raw.id,
                "empty category name; category dropped",
            ));
            continue;
        }
        if !seen_names.insert(name.clone()) {
            diagnostics.push(Violation::new(
                ViolationKind::DuplicateName,
                "category",
                raw.id,
                format!("category name {name:?} duplicates an earlier category; dropped"),
            ));
            continue;
        }
        categories.insert(raw.id, CategoryDef { id: raw.id, name });
    }

    let mut annotations_by_image: BTreeMap<u64, Vec<InstanceAnnotation>> = BTreeMap::new();
    let mut seen_annotation_ids: BTreeSet<u64> = BTreeSet::new();
    for raw in raw_annotations {
        if !seen_annotation_ids.insert(raw.id) {
            diagnostics.push(Violation::new(
                ViolationKind::DuplicateId,
                "annotation",
                raw.id,
                "duplicate annotation id; keeping the first occurrence",
            ));
            continue;
        }
        let Some(image) = images.get(&raw.image_id) else {
            diagnostics.push(Violation::new(
                ViolationKind::DanglingReference,
                "annotation",
                raw.id,
                format!("image_id {} does not resolve; annotation dropped", raw.image_id),
            ));
            continue;
        };
        if !categories.contains_key(&raw.category_id) {
            diagnostics.push(Violation::new(
                ViolationKind::DanglingReference,
                "annotation",
                raw.id,
                format!(
                    "category_id {} does not resolve; annotation dropped",
                    raw.category_id
                ),
            ));
            continue;
        }

        let bbox = raw
            .bbox
            .map(|[x, y, w, h]| Bbox { x, y, w, h })
            .unwrap_or(Bbox { x: 0.0, y: 0.0, w: 0.0, h: 0.0 });
        let bbox = if bbox.within(image.width, image.height) {
            bbox
        } else {
            let clamped = bbox.clamped(image.width, image.height);
            diagnostics.push(Violation::new(
                ViolationKind::OutOfBounds,
                "annotation",
                raw.id,
                format!(
                    "bbox ({}, {}, {}, {}) exceeds {}x{} image bounds; clamped",
                    bbox.x, bbox.y, bbox.w, bbox.h, image.width, image.height
                ),
            ));
            clamped
        };

        let segmentation = match raw.segmentation {
            None => Segmentation::None,
            Some(RawSegmentation::Polygons(polygons)) => Segmentation::Polygons(polygons),
            Some(RawSegmentation::Rle { size, counts }) => match counts {
                RawCounts::Ints(counts) => match RleMask::new(size[1], size[0], counts) {
                    Ok(rle) => Segmentation::Rle(rle),
                    Err(err) => {
                        diagnostics.push(Violation::new(
                            ViolationKind::InvalidField,
                            "annotation",
                            raw.id,
                            format!("invalid RLE segmentation ({err}); segmentation dropped"),
                        ));
                        Segmentation::None
                    }
                },
                RawCounts::Packed(packed) => {
                    diagnostics.push(Violation::new(
                        ViolationKind::InvalidField,
                        "annotation",
                        raw.id,
                        format!(
                            "packed RLE strings are unsupported ({} bytes); segmentation dropped",
                            packed.len()
                        ),
                    ));
                    Segmentation::None
                }
            },
        };

        let area = match raw.area {
            Some(a) if a < 0.0 => {
                diagnostics.push(Violation::new(
                    ViolationKind::InvalidField,
                    "annotation",
                    raw.id,
                    format!("negative area {a}; clamped to 0"),
                ));
                0.0
            }
            Some(a) => a,
            None => bbox.w * bbox.h,
        };

        annotations_by_image
            .entry(raw.image_id)
            .or_default()
            .push(InstanceAnnotation {
                id: raw.id,
                image_id: raw.image_id,
                category_id: raw.category_id,
                bbox,
                segmentation,
                iscrowd: raw.iscrowd,
                area,
            });
    }

    Ok(ParsedDataset {
        index: DatasetIndex {
            images,
            categories,
            annotations_by_image,
        },
        diagnostics,
    })
}

/// Aggregate the instance annotations on one image into per-category counts.
/// Crowd annotations count as one instance: a crowd region carries no
/// instance count, so one is the defensible floor.
pub fn count_labels(image_id: u64, index: &DatasetIndex) -> Result<CountLabel, CocoError> {
    if !index.images.contains_key(&image_id) {
        return Err(CocoError::UnknownImage(image_id));
    }
    let mut per_category: BTreeMap<String, u64> = BTreeMap::new();
    for ann in index.annotations_for(image_id) {
        let name = index
            .category_name(ann.category_id)
            .map(str::to_string)
            .unwrap_or_else(|| format!("category-{}", ann.category_id));
        *per_category.entry(name).or_insert(0) += 1;
    }
    let total = per_category.values().sum();
    Ok(CountLabel {
        image_id,
        per_category,
        total,
    })
}

/// Report every invariant breach in an index: duplicate ids, dangling
/// references, out-of-bounds boxes, duplicate normalized category names.
/// Reports, never throws; an empty list means the index is clean.
pub fn validate_dataset(index: &DatasetIndex) -> Vec<Violation> {
    let mut violations = Vec::new();

    let mut seen_image_ids: BTreeSet<u64> = BTreeSet::new();
    for record in index.images.values() {
        if !seen_image_ids.insert(record.id) {
            violations.push(Violation::new(
                ViolationKind::DuplicateId,
                "image",
                record.id,
                "image id appears on more than one record",
            ));
        }
        if record.width == 0 || record.height == 0 {
            violations.push(Violation::new(
                ViolationKind::InvalidField,
                "image",
                record.id,
                format!("non-positive dimensions {}x{}", record.width, record.height),
            ));
        }
    }

    let mut seen_category_ids: BTreeSet<u64> = BTreeSet::new();
    let mut seen_names: BTreeMap<String, u64> = BTreeMap::new();
    for record in index.categories.values() {
        if !seen_category_ids.insert(record.id) {
            violations.push(Violation::new(
                ViolationKind::DuplicateId,
                "category",
                record.id,
                "category id appears on more than one record",
            ));
        }
        let normalized = normalize_category_name(&record.name);
        if let Some(&other) = seen_names.get(&normalized) {
            violations.push(Violation::new(
                ViolationKind::DuplicateName,
                "category",
                record.id,
                format!("name {normalized:?} duplicates category {other}"),
            ));
        } else {
            seen_names.insert(normalized, record.id);
        }
    }

    let mut seen_annotation_ids: BTreeSet<u64> = BTreeSet::new();
    for (&image_id, annotations) in &index.annotations_by_image {
        let image = index.images.get(&image_id);
        if image.is_none() {
            violations.push(Violation::new(
                ViolationKind::DanglingReference,
                "annotation",
                image_id,
                "annotation list keyed by an image id that is not in the index",
            ));
        }
        for ann in annotations {
            if !seen_annotation_ids.insert(ann.id) {
                violations.push(Violation::new(
                    ViolationKind::DuplicateId,
                    "annotation",
                    ann.id,
                    "annotation id appears on more than one record",
                ));
            }
            if ann.image_id != image_id {
                violations.push(Violation::new(
                    ViolationKind::DanglingReference,
                    "annotation",
                    ann.id,
                    format!("annotation image_id {} filed under image {image_id}", ann.image_id),
                ));
            }
            if !index.categories.contains_key(&ann.category_id) {
                violations.push(Violation::new(
                    ViolationKind::DanglingReference,
                    "annotation",
                    ann.id,
                    format!("category_id {} does not resolve", ann.category_id),
                ));
            }
            if let Some(image) = image {
                if !ann.bbox.within(image.width, image.height) {
                    violations.push(Violation::new(
                        ViolationKind::OutOfBounds,
                        "annotation",
                        ann.id,
                        format!(
                            "bbox ({}, {}, {}, {}) exceeds {}x{} image bounds",
                            ann.bbox.x, ann.bbox.y, ann.bbox.w, ann.bbox.h, image.width, image.height
                        ),
                    ));
                }
            }
        }
    }

    violations
}
