use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::dataset::{coco_boxes, open_dataset, parse_coco, read_class_map, Task};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy, confusion, detection_classes, per_class_ap, ConfusionCounts, DetectionMatch,
    EvaluationReport,
};
use crate::types::IndexMask;

fn evaluate_classification(pred_dir: &Path, truth_dir: &Path) -> Result<EvaluationReport> {
    // Keyed by file name; the folder is the label.
    let labels = |dir: &Path| -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for name in open_dataset(dir, Task::Classification)?.names() {
            let (tag, file) = name
                .split_once('/')
                .expect("classification names carry a folder");
            if out.insert(file.to_string(), tag.to_string()).is_some() {
                return Err(Error::LayoutMismatch(format!(
                    "`{file}` appears in two classes under {}",
                    dir.display()
                )));
            }
        }
        Ok(out)
    };
    let pred = labels(pred_dir)?;
    let truth = labels(truth_dir)?;
    if pred.keys().ne(truth.keys()) {
        return Err(Error::LayoutMismatch(
            "prediction and truth list different images".into(),
        ));
    }
    let p: Vec<&str> = pred.values().map(String::as_str).collect();
    let t: Vec<&str> = truth.values().map(String::as_str).collect();
    let mut report = EvaluationReport::default();
    let classes: BTreeSet<&str> = t.iter().copied().collect();
    for class in classes {
        let (cp, ct): (Vec<&str>, Vec<&str>) = p
            .iter()
            .zip(&t)
            .filter(|(_, tt)| **tt == class)
            .map(|(a, b)| (*a, *b))
            .unzip();
        report.push("accuracy", class, accuracy(&cp, &ct)?);
    }
    report.push("accuracy", "all", accuracy(&p, &t)?);
    Ok(report)
}

fn evaluate_detection(pred_dir: &Path, truth_dir: &Path) -> Result<EvaluationReport> {
    let truth_path = truth_dir.join("annotations.json");
    let pred_path = pred_dir.join("annotations.json");
    let truth = coco_boxes(&parse_coco(&truth_path)?, &truth_path)?;
    let pred = coco_boxes(&parse_coco(&pred_path)?, &pred_path)?;
    if let Some(extra) = pred.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::LayoutMismatch(format!(
            "prediction for unknown image `{extra}`"
        )));
    }
    let images: Vec<DetectionMatch> = truth
        .iter()
        .map(|(name, (_, gt))| {
            let predictions = pred.get(name).map(|(_, p)| p.clone()).unwrap_or_default();
            DetectionMatch::new(predictions, gt.clone())
        })
        .collect();
    let classes = detection_classes(&images);
    let aps = per_class_ap(&images, &classes)?;
    if aps.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let mut report = EvaluationReport::default();
    for (class, ap) in &aps {
        report.push("ap50", class, *ap);
    }
    report.push(
        "map50",
        "all",
        aps.iter().map(|(_, ap)| ap).sum::<f64>() / aps.len() as f64,
    );
    Ok(report)
}

fn mask_files(dir: &Path) -> Result<BTreeSet<String>> {
    let masks = dir.join("masks");
    let mut out = BTreeSet::new();
    for item in fs::read_dir(&masks).map_err(|e| Error::io(&masks, e))? {
        let path = item.map_err(|e| Error::io(&masks, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string());
            }
        }
    }
    Ok(out)
}

fn read_mask(path: &Path) -> Result<IndexMask> {
    let gray = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma8();
    let (w, h) = gray.dimensions();
    IndexMask::new(w, h, gray.into_raw())
}

fn evaluate_segmentation(pred_dir: &Path, truth_dir: &Path) -> Result<EvaluationReport> {
    let names = mask_files(truth_dir)?;
    if mask_files(pred_dir)? != names {
        return Err(Error::LayoutMismatch(
            "prediction and truth list different masks".into(),
        ));
    }
    let classes_path = truth_dir.join("classes.json");
    let mut class_map = if classes_path.is_file() {
        read_class_map(&classes_path)?
    } else {
        BTreeMap::new()
    };
    let mut totals: BTreeMap<u8, ConfusionCounts> = BTreeMap::new();
    for name in &names {
        let pred = read_mask(&pred_dir.join("masks").join(name))?;
        let truth = read_mask(&truth_dir.join("masks").join(name))?;
        if pred.dims() != truth.dims() {
            return Err(Error::LayoutMismatch(format!(
                "mask `{name}` is {:?} in predictions and {:?} in truth",
                pred.dims(),
                truth.dims()
            )));
        }
        let (th, ph) = (truth.histogram(), pred.histogram());
        for idx in 0..=255u8 {
            if th[idx as usize] > 0 || ph[idx as usize] > 0 {
                let c = confusion(&pred, &truth, idx)?;
                let t = totals.entry(idx).or_default();
                t.tp += c.tp;
                t.fp += c.fp;
                t.fn_ += c.fn_;
            }
        }
    }
    // Indices present in the truth but missing from classes.json are reported by number.
    for (&idx, t) in &totals {
        if t.tp + t.fn_ > 0 {
            class_map.entry(idx).or_insert_with(|| idx.to_string());
        }
    }
    if class_map.is_empty() {
        return Err(Error::InvalidInput("no classes to evaluate".into()));
    }
    let mut report = EvaluationReport::default();
    let mut sum = 0.0;
    for (idx, name) in &class_map {
        let iou = totals
            .get(idx)
            .copied()
            .unwrap_or_default()
            .iou()
            .unwrap_or(1.0);
        report.push("iou", name, iou);
        sum += iou;
    }
    report.push("miou", "all", sum / class_map.len() as f64);
    Ok(report)
}

/// Compares a prediction tree against a truth tree in the same task layout.
///
/// * classification: accuracy per truth class and overall, images matched by
///   file name
/// * detection: AP at IoU 0.5 per class and their mean, from the two
///   `annotations.json` files; truth images without predictions count as
///   empty
/// * segmentation: dataset-level IoU per class of `classes.json` and their
///   mean, over `masks/`
pub fn run_evaluate(pred_dir: &Path, truth_dir: &Path, task: Task) -> Result<EvaluationReport> {
    match task {
        Task::Classification => evaluate_classification(pred_dir, truth_dir),
        Task::Detection => evaluate_detection(pred_dir, truth_dir),
        Task::Segmentation => evaluate_segmentation(pred_dir, truth_dir),
    }
}
