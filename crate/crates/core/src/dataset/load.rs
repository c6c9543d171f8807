use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use super::coco::CocoDataset;
use super::{AnnotationSet, DatasetItem, Task};
use crate::error::{Error, Result};
use crate::gallery::{is_image_file, load_rgb};
use crate::types::{BBox, IndexMask};

enum Pending {
    Classification { tag: String },
    Detection { boxes: Vec<BBox>, dims: (u32, u32) },
    Segmentation { mask_path: PathBuf },
}

/// Lazily decodes images in a deterministic order; annotation files are
/// parsed up front so layout errors surface when the reader is opened.
pub struct DatasetReader {
    task: Task,
    root: PathBuf,
    class_map: BTreeMap<u8, String>,
    pending: VecDeque<(String, PathBuf, Pending)>,
}

impl DatasetReader {
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Segmentation class map; empty for other tasks.
    pub fn class_map(&self) -> &BTreeMap<u8, String> {
        &self.class_map
    }

    /// Item names in iteration order.
    pub fn names(&self) -> Vec<String> {
        self.pending
            .iter()
            .map(|(name, _, _)| name.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Drops the next `n` items without decoding them.
    pub fn skip_items(&mut self, n: usize) {
        let n = n.min(self.pending.len());
        self.pending.drain(..n);
    }

    fn load(&self, name: String, image_path: PathBuf, pending: Pending) -> Result<DatasetItem> {
        let image = load_rgb(&image_path)?;
        let dims = image.dimensions();
        let annotations = match pending {
            Pending::Classification { tag } => AnnotationSet::classification(tag),
            Pending::Detection {
                boxes,
                dims: declared,
            } => {
                if declared != dims {
                    return Err(Error::malformed(
                        self.root.join("annotations.json"),
                        format!("`{name}` declared {declared:?} but image is {dims:?}"),
                    ));
                }
                AnnotationSet::detection(boxes)
            }
            Pending::Segmentation { mask_path } => {
                let mask = image::open(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
                let mask = mask.to_luma8();
                let (w, h) = mask.dimensions();
                let mask = IndexMask::new(w, h, mask.into_raw()).expect("luma buffer matches dims");
                AnnotationSet::segmentation(mask, self.class_map.clone())
            }
        };
        let context = match self.task {
            Task::Classification => image_path.clone(),
            Task::Detection => self.root.join("annotations.json"),
            Task::Segmentation => self.root.join("masks"),
        };
        annotations
            .validate(dims)
            .map_err(|msg| Error::malformed(context, format!("`{name}`: {msg}")))?;
        Ok(DatasetItem::new(name, image, annotations))
    }
}

impl Iterator for DatasetReader {
    type Item = Result<DatasetItem>;

    fn next(&mut self) -> Option<Self::Item> {
        let (name, path, pending) = self.pending.pop_front()?;
        Some(self.load(name, path, pending))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.pending.len(), Some(self.pending.len()))
    }
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let item = item.map_err(|e| Error::io(dir, e))?;
        out.push(item.path());
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn is_hidden(path: &Path) -> bool {
    file_name(path).starts_with('.')
}

pub(crate) fn stem(name: &str) -> &str {
    let base = name.rsplit('/').next().unwrap_or(name);
    match base.rfind('.') {
        Some(i) if i > 0 => &base[..i],
        _ => base,
    }
}

pub(crate) fn read_class_map(path: &Path) -> Result<BTreeMap<u8, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    raw.into_iter()
        .map(|(k, v)| {
            let idx: u8 = k.parse().map_err(|_| {
                Error::malformed(path, format!("class index `{k}` is not in 0..=255"))
            })?;
            Ok((idx, v))
        })
        .collect()
}

pub(crate) fn parse_coco(path: &Path) -> Result<CocoDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Converts COCO annotations to per-file-name box lists.
pub(crate) fn coco_boxes(
    coco: &CocoDataset,
    path: &Path,
) -> Result<BTreeMap<String, ((u32, u32), Vec<BBox>)>> {
    let categories: HashMap<u64, &str> = coco
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut by_id: HashMap<u64, String> = HashMap::new();
    let mut out: BTreeMap<String, ((u32, u32), Vec<BBox>)> = BTreeMap::new();
    for image in &coco.images {
        if by_id.insert(image.id, image.file_name.clone()).is_some() {
            return Err(Error::malformed(
                path,
                format!("duplicate image id {}", image.id),
            ));
        }
        if out
            .insert(
                image.file_name.clone(),
                ((image.width, image.height), Vec::new()),
            )
            .is_some()
        {
            return Err(Error::malformed(
                path,
                format!("duplicate file name `{}`", image.file_name),
            ));
        }
    }
    for ann in &coco.annotations {
        let bad = |msg: String| Error::malformed(path, format!("annotation {}: {msg}", ann.id));
        let file = by_id
            .get(&ann.image_id)
            .ok_or_else(|| bad(format!("unknown image_id {}", ann.image_id)))?;
        let label = categories
            .get(&ann.category_id)
            .ok_or_else(|| bad(format!("unknown category_id {}", ann.category_id)))?;
        let [x, y, w, h] = ann.bbox;
        if !(x.is_finite() && y.is_finite() && w > 0.0 && h > 0.0 && x >= 0.0 && y >= 0.0) {
            return Err(bad(format!("invalid bbox {:?}", ann.bbox)));
        }
        let score = ann.score.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&score) {
            return Err(bad(format!("score {score} outside [0, 1]")));
        }
        let entry = out.get_mut(file).expect("registered above");
        let bbox = BBox::new(
            x.round() as u32,
            y.round() as u32,
            (x + w).round() as u32,
            (y + h).round() as u32,
            *label,
        )
        .with_score(score);
        if !bbox.is_valid_in(entry.0 .0, entry.0 .1) {
            return Err(bad(format!(
                "bbox {:?} leaves the {}x{} image",
                ann.bbox, entry.0 .0, entry.0 .1
            )));
        }
        entry.1.push(bbox);
    }
    Ok(out)
}

/// Opens a dataset root for streaming.
pub fn open_dataset(root: &Path, task: Task) -> Result<DatasetReader> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "dataset root is not a directory",
            ),
        ));
    }
    let mut pending = VecDeque::new();
    let mut class_map = BTreeMap::new();
    match task {
        Task::Classification => {
            for dir in sorted_children(root)? {
                if !dir.is_dir() || is_hidden(&dir) {
                    continue;
                }
                let tag = file_name(&dir);
                for file in sorted_children(&dir)? {
                    if file.is_file() && is_image_file(&file) {
                        let name = format!("{tag}/{}", file_name(&file));
                        pending.push_back((
                            name,
                            file,
                            Pending::Classification { tag: tag.clone() },
                        ));
                    }
                }
            }
        }
        Task::Detection => {
            let ann_path = root.join("annotations.json");
            let coco = parse_coco(&ann_path)?;
            for (name, (dims, boxes)) in coco_boxes(&coco, &ann_path)? {
                let image_path = root.join("images").join(&name);
                if !image_path.is_file() {
                    return Err(Error::malformed(
                        &ann_path,
                        format!("image `{name}` not found under images/"),
                    ));
                }
                pending.push_back((name, image_path, Pending::Detection { boxes, dims }));
            }
        }
        Task::Segmentation => {
            class_map = read_class_map(&root.join("classes.json"))?;
            let images = root.join("images");
            for file in sorted_children(&images)? {
                if !(file.is_file() && is_image_file(&file)) {
                    continue;
                }
                let name = file_name(&file);
                let mask_path = root.join("masks").join(format!("{}.png", stem(&name)));
                if !mask_path.is_file() {
                    return Err(Error::malformed(
                        &mask_path,
                        format!("mask for `{name}` is missing"),
                    ));
                }
                pending.push_back((name, file, Pending::Segmentation { mask_path }));
            }
        }
    }
    Ok(DatasetReader {
        task,
        root: root.to_path_buf(),
        class_map,
        pending,
    })
}

pub fn load_dataset(root: &Path, task: Task) -> Result<Vec<DatasetItem>> {
    open_dataset(root, task)?.collect()
}

#[cfg(test)]
mod tests {
    use image::{GrayImage, Luma, RgbImage};

    use super::*;

    #[test]
    fn classification_tag_from_folder() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("cat")).unwrap();
        RgbImage::new(3, 3)
            .save(dir.path().join("cat/1.png"))
            .unwrap();
        fs::write(dir.path().join("cat/notes.txt"), "x").unwrap();
        let items = load_dataset(dir.path(), Task::Classification).unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].name, "cat/1.png");
        assert_eq!(items[0].annotations.class_tag.as_deref(), Some("cat"));
    }

    #[test]
    fn detection_box_parse() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        RgbImage::new(32, 32)
            .save(dir.path().join("images/a.png"))
            .unwrap();
        fs::write(
            dir.path().join("annotations.json"),
            r#"{"images":[{"id":1,"file_name":"a.png","width":32,"height":32}],
                "annotations":[{"id":1,"image_id":1,"category_id":3,"bbox":[10,10,10,10]}],
                "categories":[{"id":3,"name":"person"}]}"#,
        )
        .unwrap();
        let items = load_dataset(dir.path(), Task::Detection).unwrap();
        assert_eq!(
            items[0].annotations.boxes,
            vec![BBox::new(10, 10, 20, 20, "person")]
        );
    }

    #[test]
    fn detection_out_of_bounds_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        RgbImage::new(8, 8)
            .save(dir.path().join("images/a.png"))
            .unwrap();
        fs::write(
            dir.path().join("annotations.json"),
            r#"{"images":[{"id":1,"file_name":"a.png","width":8,"height":8}],
                "annotations":[{"id":7,"image_id":1,"category_id":1,"bbox":[4,4,10,2]}],
                "categories":[{"id":1,"name":"person"}]}"#,
        )
        .unwrap();
        let err = open_dataset(dir.path(), Task::Detection).err().unwrap();
        assert!(err.to_string().contains("annotation 7"), "{err}");
    }

    #[test]
    fn broken_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("annotations.json"), "{\n\"images\": [\n}").unwrap();
        let err = open_dataset(dir.path(), Task::Detection).err().unwrap();
        assert!(matches!(err, Error::MalformedAnnotation { .. }));
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn segmentation_histogram_matches_pixel_count() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        RgbImage::new(6, 5)
            .save(dir.path().join("images/x.png"))
            .unwrap();
        let mask = GrayImage::from_fn(6, 5, |x, y| Luma([u8::from(x > y)]));
        mask.save(dir.path().join("masks/x.png")).unwrap();
        fs::write(dir.path().join("classes.json"), r#"{"0":"bg","1":"car"}"#).unwrap();
        let items = load_dataset(dir.path(), Task::Segmentation).unwrap();
        let hist = items[0]
            .annotations
            .index_mask
            .as_ref()
            .unwrap()
            .histogram();
        let ones = (0..5u32)
            .flat_map(|y| (0..6u32).map(move |x| (x, y)))
            .filter(|(x, y)| x > y)
            .count() as u64;
        assert_eq!(hist[1], ones);
        assert_eq!(hist[0], 30 - ones);
        assert_eq!(items[0].annotations.class_map[&1], "car");
    }

    #[test]
    fn stems() {
        assert_eq!(stem("a/b.c.png"), "b.c");
        assert_eq!(stem("noext"), "noext");
    }
}
