//! Base datasets in three task layouts, annotation propagation through a
//! paste, and the augmented-dataset writer.
//!
//! Layouts under a dataset root:
//!
//! * classification: `<class>/<image>`
//! * detection: `images/<image>` plus COCO-style `annotations.json`
//! * segmentation: `images/<image>`, `masks/<stem>.png` (single-channel class
//!   indices) and `classes.json` (`{"<index>": "<name>"}`)

mod coco;
mod load;
mod propagate;
mod record;
mod writer;

pub use coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
pub(crate) use load::{coco_boxes, parse_coco, read_class_map};
pub use load::{load_dataset, open_dataset, DatasetReader};
pub use propagate::{propagate_annotations, visible_fraction, DEFAULT_KEEP_THRESHOLD};
pub use record::{AugmentationRecord, MatchSummary};
pub use writer::{
    write_dataset, DatasetWriter, Manifest, ManifestRow, MANIFEST_FILE, PROVENANCE_FILE,
};

use std::collections::BTreeMap;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::types::{BBox, IndexMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Detection,
    Segmentation,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "detection" => Ok(Task::Detection),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!(
                "task must be classification, detection or segmentation; got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        })
    }
}

/// Index 0 of a segmentation class map is background and never an object.
pub const BACKGROUND_INDEX: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub task: Task,
    pub class_tag: Option<String>,
    pub boxes: Vec<BBox>,
    pub index_mask: Option<IndexMask>,
    pub class_map: BTreeMap<u8, String>,
}

impl AnnotationSet {
    pub fn classification(tag: impl Into<String>) -> Self {
        AnnotationSet {
            task: Task::Classification,
            class_tag: Some(tag.into()),
            boxes: Vec::new(),
            index_mask: None,
            class_map: BTreeMap::new(),
        }
    }

    pub fn detection(boxes: Vec<BBox>) -> Self {
        AnnotationSet {
            task: Task::Detection,
            class_tag: None,
            boxes,
            index_mask: None,
            class_map: BTreeMap::new(),
        }
    }

    pub fn segmentation(mask: IndexMask, class_map: BTreeMap<u8, String>) -> Self {
        AnnotationSet {
            task: Task::Segmentation,
            class_tag: None,
            boxes: Vec::new(),
            index_mask: Some(mask),
            class_map,
        }
    }

    /// Empty annotations of the given task for an image of `dims`.
    pub fn empty(task: Task, dims: (u32, u32)) -> Self {
        match task {
            Task::Classification => AnnotationSet {
                class_tag: None,
                ..AnnotationSet::classification("")
            },
            Task::Detection => AnnotationSet::detection(Vec::new()),
            Task::Segmentation => AnnotationSet::segmentation(
                IndexMask::filled(dims.0, dims.1, BACKGROUND_INDEX),
                BTreeMap::from([(BACKGROUND_INDEX, "background".to_string())]),
            ),
        }
    }

    /// Checks that exactly the task's fields are populated and that all
    /// geometry fits an image of `dims`.
    pub fn validate(&self, dims: (u32, u32)) -> std::result::Result<(), String> {
        match self.task {
            Task::Classification => {
                if self.class_tag.as_deref().is_none_or(str::is_empty) {
                    return Err("classification item without class tag".into());
                }
                if !self.boxes.is_empty() || self.index_mask.is_some() {
                    return Err("classification item carries boxes or a mask".into());
                }
            }
            Task::Detection => {
                if self.class_tag.is_some() || self.index_mask.is_some() {
                    return Err("detection item carries a class tag or a mask".into());
                }
                if let Some(b) = self.boxes.iter().find(|b| !b.is_valid_in(dims.0, dims.1)) {
                    return Err(format!(
                        "box ({}, {}, {}, {}) `{}` is outside a {}x{} image",
                        b.x_min, b.y_min, b.x_max, b.y_max, b.label, dims.0, dims.1
                    ));
                }
            }
            Task::Segmentation => {
                if self.class_tag.is_some() || !self.boxes.is_empty() {
                    return Err("segmentation item carries a class tag or boxes".into());
                }
                let mask = self
                    .index_mask
                    .as_ref()
                    .ok_or("segmentation item without mask")?;
                if mask.dims() != dims {
                    return Err(format!("mask is {:?}, image is {:?}", mask.dims(), dims));
                }
                let hist = mask.histogram();
                if let Some(idx) =
                    (0..=255u8).find(|&i| hist[i as usize] > 0 && !self.class_map.contains_key(&i))
                {
                    return Err(format!("mask index {idx} missing from class map"));
                }
            }
        }
        Ok(())
    }

    /// Annotated objects as `(category, pixel area)`.
    pub fn reference_objects(&self) -> Vec<(String, u64)> {
        match self.task {
            Task::Classification => Vec::new(),
            Task::Detection => self
                .boxes
                .iter()
                .map(|b| (b.label.clone(), b.area()))
                .collect(),
            Task::Segmentation => {
                let Some(mask) = &self.index_mask else {
                    return Vec::new();
                };
                let hist = mask.histogram();
                self.class_map
                    .iter()
                    .filter(|(&idx, _)| idx != BACKGROUND_INDEX && hist[idx as usize] > 0)
                    .map(|(&idx, name)| (name.clone(), hist[idx as usize]))
                    .collect()
            }
        }
    }

    /// Boxes a paste should avoid: detection boxes, or the extent of every
    /// non-background class for segmentation.
    pub fn occupied_boxes(&self) -> Vec<BBox> {
        match self.task {
            Task::Classification => Vec::new(),
            Task::Detection => self.boxes.clone(),
            Task::Segmentation => {
                let Some(mask) = &self.index_mask else {
                    return Vec::new();
                };
                let mut extents: BTreeMap<u8, (u32, u32, u32, u32)> = BTreeMap::new();
                for y in 0..mask.height() {
                    for x in 0..mask.width() {
                        let v = mask.get(x, y);
                        if v == BACKGROUND_INDEX {
                            continue;
                        }
                        let e = extents.entry(v).or_insert((x, y, x + 1, y + 1));
                        *e = (e.0.min(x), e.1.min(y), e.2.max(x + 1), e.3.max(y + 1));
                    }
                }
                extents
                    .into_iter()
                    .map(|(idx, (x0, y0, x1, y1))| {
                        let label = self.class_map.get(&idx).cloned().unwrap_or_default();
                        BBox::new(x0, y0, x1, y1, label)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    /// Path relative to the layout's image directory (`<class>/<file>` for
    /// classification, `<file>` otherwise), `/`-separated.
    pub name: String,
    pub image: RgbImage,
    pub annotations: AnnotationSet,
    pub provenance: Option<AugmentationRecord>,
}

impl DatasetItem {
    pub fn new(name: impl Into<String>, image: RgbImage, annotations: AnnotationSet) -> Self {
        DatasetItem {
            name: name.into(),
            image,
            annotations,
            provenance: None,
        }
    }
}

/// Share `1/n` of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    denominator: u32,
}

impl Fraction {
    pub fn new(denominator: u32) -> Result<Self> {
        if denominator == 0 {
            return Err(Error::Config("fraction denominator must be >= 1".into()));
        }
        Ok(Fraction { denominator })
    }

    pub fn denominator(self) -> u32 {
        self.denominator
    }

    /// `round(len / n)`, halves rounded up.
    pub fn share_of(self, len: usize) -> usize {
        let n = self.denominator as usize;
        (2 * len + n) / (2 * n)
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Fraction { denominator: 1 }
    }
}

impl std::str::FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let denominator = s
            .trim()
            .strip_prefix("1/")
            .and_then(|d| d.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Config(format!("fraction must look like 1/N, got `{s}`")))?;
        Fraction::new(denominator)
    }
}

impl std::fmt::Display for Fraction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1/{}", self.denominator)
    }
}

/// Marks which of `len` items get augmented: a seeded shuffle picks
/// `round(len / n)` of them.
pub fn partition_mask(len: usize, fraction: Fraction, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut mask = vec![false; len];
    for &i in &order[..fraction.share_of(len)] {
        mask[i] = true;
    }
    mask
}

/// Splits items into `(augment, passthrough)`, both in input order.
pub fn select_partition<T>(items: Vec<T>, fraction: Fraction, seed: u64) -> (Vec<T>, Vec<T>) {
    let mask = partition_mask(items.len(), fraction, seed);
    let mut augment = Vec::new();
    let mut passthrough = Vec::new();
    for (item, chosen) in items.into_iter().zip(mask) {
        if chosen {
            augment.push(item);
        } else {
            passthrough.push(item);
        }
    }
    (augment, passthrough)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fraction_parsing() {
        assert_eq!("1/4".parse::<Fraction>().unwrap().denominator(), 4);
        assert!("1/0".parse::<Fraction>().is_err());
        assert!("2/3".parse::<Fraction>().is_err());
        assert_eq!(Fraction::new(4).unwrap().to_string(), "1/4");
    }

    #[test]
    fn partition_sizes() {
        let items: Vec<u32> = (0..100).collect();
        let (a, p) = select_partition(items.clone(), Fraction::new(1).unwrap(), 3);
        assert_eq!((a.len(), p.len()), (100, 0));
        let (a, p) = select_partition(items.clone(), Fraction::new(4).unwrap(), 3);
        assert_eq!((a.len(), p.len()), (25, 75));
        let (a2, _) = select_partition(items, Fraction::new(4).unwrap(), 3);
        assert_eq!(a, a2);
        assert_eq!(Fraction::new(2).unwrap().share_of(5), 3);
        assert_eq!(Fraction::new(8).unwrap().share_of(3), 0);
    }

    #[test]
    fn segmentation_reference_objects_skip_background() {
        let mut mask = IndexMask::filled(4, 4, 0);
        mask.set(0, 0, 1);
        mask.set(1, 0, 1);
        mask.set(3, 3, 2);
        let ann = AnnotationSet::segmentation(
            mask,
            BTreeMap::from([(0, "bg".into()), (1, "car".into()), (2, "tree".into())]),
        );
        assert_eq!(
            ann.reference_objects(),
            vec![("car".into(), 2), ("tree".into(), 1)]
        );
        let boxes = ann.occupied_boxes();
        assert_eq!(
            (boxes[0].x_min, boxes[0].x_max, boxes[0].label.as_str()),
            (0, 2, "car")
        );
        assert!(ann.validate((4, 4)).is_ok());
        assert!(ann.validate((5, 4)).is_err());
    }
}
