//! Accuracy, mask IoU / mIoU and box mAP at a single IoU threshold.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{BBox, IndexMask};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Recall levels used for interpolated AP.
const RECALL_POINTS: u64 = 101;

pub fn accuracy<S: AsRef<str>>(predictions: &[S], truth: &[S]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput(
            "accuracy needs at least one item".into(),
        ));
    }
    let correct = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(correct as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// `None` when the class appears in neither mask.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

pub fn confusion(pred: &IndexMask, truth: &IndexMask, class: u8) -> Result<ConfusionCounts> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            left: pred.dims(),
            right: truth.dims(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (&p, &t) in pred.as_raw().iter().zip(truth.as_raw()) {
        match (p == class, t == class) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(counts)
}

/// What a class missing from both masks contributes to mIoU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum AbsentClassPolicy {
    #[default]
    One,
    Skip,
}

/// IoU of one class; 1.0 when the class is absent from both masks.
pub fn iou_mask(pred: &IndexMask, truth: &IndexMask, class: u8) -> Result<f64> {
    Ok(confusion(pred, truth, class)?.iou().unwrap_or(1.0))
}

pub fn miou(pred: &IndexMask, truth: &IndexMask, classes: &[u8]) -> Result<f64> {
    miou_with(pred, truth, classes, AbsentClassPolicy::One)
}

pub fn miou_with(
    pred: &IndexMask,
    truth: &IndexMask,
    classes: &[u8],
    policy: AbsentClassPolicy,
) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::InvalidInput(
            "mIoU needs a non-empty class set".into(),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in classes {
        match (confusion(pred, truth, c)?.iou(), policy) {
            (Some(v), _) => {
                sum += v;
                n += 1;
            }
            (None, AbsentClassPolicy::One) => {
                sum += 1.0;
                n += 1;
            }
            (None, AbsentClassPolicy::Skip) => {}
        }
    }
    if n == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(sum / n as f64)
}

/// Predictions and ground truth of one image. Prediction confidence is the
/// box `score`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMatch {
    pub predictions: Vec<BBox>,
    pub ground_truth: Vec<BBox>,
    pub iou_threshold: f64,
}

impl DetectionMatch {
    pub fn new(predictions: Vec<BBox>, ground_truth: Vec<BBox>) -> Self {
        DetectionMatch {
            predictions,
            ground_truth,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Marks each prediction of `class` (in descending score order) as a true or
/// false positive. Returns the flags and the number of ground-truth boxes.
pub fn match_class(images: &[DetectionMatch], class: &str) -> Result<(Vec<bool>, usize)> {
    let mut ranked: Vec<(f64, usize, &BBox)> = Vec::new();
    let mut n_gt = 0;
    for (i, m) in images.iter().enumerate() {
        if !(m.iou_threshold > 0.0 && m.iou_threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "IoU threshold {} outside (0, 1)",
                m.iou_threshold
            )));
        }
        n_gt += m.ground_truth.iter().filter(|g| g.label == class).count();
        for p in m.predictions.iter().filter(|p| p.label == class) {
            if !p.score.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite score on a `{class}` prediction"
                )));
            }
            ranked.push((p.score, i, p));
        }
    }
    // Stable: equal scores keep image order, then in-image order.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut used: Vec<Vec<bool>> = images
        .iter()
        .map(|m| vec![false; m.ground_truth.len()])
        .collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for (_, i, pred) in ranked {
        let m = &images[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in m.ground_truth.iter().enumerate() {
            if gt.label != class || used[i][j] {
                continue;
            }
            let iou = pred.iou(gt);
            if iou >= m.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[i][j] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    Ok((flags, n_gt))
}

/// 101-point interpolated AP from ranked TP/FP flags.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let n_gt = n_gt as u64;
    // (true positives so far, precision) after each ranked prediction.
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0u64;
    for (k, &hit) in flags.iter().enumerate() {
        tp += u64::from(hit);
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope: best precision at this recall or beyond.
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for level in 0..RECALL_POINTS {
        // recall >= level / 100, compared exactly in integers
        while k < curve.len() && curve[k].0 * (RECALL_POINTS - 1) < level * n_gt {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].1;
        }
    }
    sum / RECALL_POINTS as f64
}

/// Per-class AP for classes with ground truth, in `classes` order.
pub fn per_class_ap<S: AsRef<str>>(
    images: &[DetectionMatch],
    classes: &[S],
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for class in classes {
        let (flags, n_gt) = match_class(images, class.as_ref())?;
        if n_gt > 0 {
            out.push((class.as_ref().to_string(), average_precision(&flags, n_gt)));
        }
    }
    Ok(out)
}

/// Mean AP over the classes that have at least one ground-truth box.
pub fn map50<S: AsRef<str>>(images: &[DetectionMatch], classes: &[S]) -> Result<f64> {
    let aps = per_class_ap(images, classes)?;
    if aps.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(aps.iter().map(|(_, ap)| ap).sum::<f64>() / aps.len() as f64)
}

/// Classes named by any ground-truth box, sorted.
pub fn detection_classes(images: &[DetectionMatch]) -> Vec<String> {
    let set: BTreeSet<&str> = images
        .iter()
        .flat_map(|m| m.ground_truth.iter().map(|b| b.label.as_str()))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    /// `all` for aggregate rows.
    pub class: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
}

impl EvaluationReport {
    pub fn push(&mut self, metric: &str, class: &str, value: f64) {
        self.rows.push(ReportRow {
            metric: metric.into(),
            class: class.into(),
            value,
        });
    }

    pub fn get(&self, metric: &str, class: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.class == class)
            .map(|r| r.value)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tclass\tvalue\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}", r.metric, r.class, r.value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn square_mask(w: u32, h: u32, x0: u32, y0: u32, size: u32) -> IndexMask {
        let mut m = IndexMask::filled(w, h, 0);
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                m.set(x, y, 1);
            }
        }
        m
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(accuracy(&["a", "b"], &["a", "c"]).unwrap(), 0.5);
        assert!(matches!(
            accuracy(&["a"], &["a", "b"]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(accuracy::<&str>(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes = ["a", "b", "c", "d"];
        let pred: Vec<&str> = (0..1000).map(|_| classes[rng.random_range(0..4)]).collect();
        let truth: Vec<&str> = (0..1000).map(|_| classes[rng.random_range(0..4)]).collect();
        let mut correct = 0;
        for i in 0..1000 {
            if pred[i] == truth[i] {
                correct += 1;
            }
        }
        assert_eq!(accuracy(&pred, &truth).unwrap(), correct as f64 / 1000.0);
    }

    #[test]
    fn iou_hand_counts() {
        let a = square_mask(4, 4, 0, 0, 2);
        assert_eq!(iou_mask(&a, &a, 1).unwrap(), 1.0);
        let b = square_mask(4, 4, 2, 2, 2);
        assert_eq!(iou_mask(&a, &b, 1).unwrap(), 0.0);
        let c = square_mask(4, 4, 1, 0, 2);
        assert_eq!(
            confusion(&a, &c, 1).unwrap(),
            ConfusionCounts {
                tp: 2,
                fp: 2,
                fn_: 2
            }
        );
        assert!((iou_mask(&a, &c, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Absent from both.
        assert_eq!(iou_mask(&a, &a, 7).unwrap(), 1.0);
        assert!(matches!(
            iou_mask(&a, &IndexMask::filled(3, 3, 0), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn miou_mean_and_policy() {
        let a = square_mask(4, 4, 0, 0, 2);
        let b = square_mask(4, 4, 2, 2, 2);
        // class 1 disjoint (0.0), class 0 overlaps 8 of 16 (8 / (8 + 4 + 4)).
        let expected = (0.0 + 8.0 / 16.0) / 2.0;
        assert!((miou(&a, &b, &[0, 1]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(miou(&a, &a, &[0, 1, 5]).unwrap(), 1.0);
        let skip = miou_with(&a, &b, &[1, 5], AbsentClassPolicy::Skip).unwrap();
        assert_eq!(skip, 0.0);
        assert!(miou(&a, &a, &[]).is_err());
    }

    #[test]
    fn miou_matches_per_class_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let p =
                IndexMask::new(8, 8, (0..64).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let t =
                IndexMask::new(8, 8, (0..64).map(|_| rng.random_range(0..3)).collect()).unwrap();
            let mut total = 0.0;
            for c in 0..3u8 {
                let (mut inter, mut union) = (0, 0);
                for i in 0..64 {
                    let (a, b) = (p.as_raw()[i] == c, t.as_raw()[i] == c);
                    inter += (a && b) as u32;
                    union += (a || b) as u32;
                }
                total += if union == 0 {
                    1.0
                } else {
                    inter as f64 / union as f64
                };
            }
            assert!((miou(&p, &t, &[0, 1, 2]).unwrap() - total / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ap_trivial_cases() {
        let gt = BBox::new(0, 0, 10, 10, "car");
        let exact = DetectionMatch::new(vec![gt.clone().with_score(0.9)], vec![gt.clone()]);
        assert_eq!(map50(&[exact], &["car"]).unwrap(), 1.0);
        // Nested box covering 40% of the truth.
        let low = BBox::new(0, 0, 10, 4, "car").with_score(0.9);
        assert!((low.iou(&gt) - 0.4).abs() < 1e-12);
        assert_eq!(
            map50(&[DetectionMatch::new(vec![low], vec![gt])], &["car"]).unwrap(),
            0.0
        );
        assert!(matches!(map50::<&str>(&[], &[]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn ap_hand_fixture() {
        // Ranked TP, FP, TP against two ground-truth boxes.
        let gts = vec![BBox::new(0, 0, 10, 10, "a"), BBox::new(20, 20, 30, 30, "a")];
        let preds = vec![
            BBox::new(0, 0, 10, 10, "a").with_score(0.9),
            BBox::new(40, 40, 50, 50, "a").with_score(0.8),
            BBox::new(20, 20, 30, 30, "a").with_score(0.7),
        ];
        let ap = map50(&[DetectionMatch::new(preds, gts)], &["a"]).unwrap();
        assert!((ap - 253.0 / 303.0).abs() < 1e-12, "{ap}");
    }

    #[test]
    fn duplicate_prediction_is_false_positive() {
        let gt = BBox::new(0, 0, 10, 10, "a");
        let preds = vec![gt.clone().with_score(0.9), gt.clone().with_score(0.8)];
        let (flags, n) = match_class(&[DetectionMatch::new(preds, vec![gt])], "a").unwrap();
        assert_eq!((flags, n), (vec![true, false], 1));
    }

    #[test]
    fn report_tsv() {
        let mut r = EvaluationReport::default();
        r.push("miou", "all", 0.5);
        assert_eq!(r.to_tsv(), "metric\tclass\tvalue\nmiou\tall\t0.500000\n");
        assert_eq!(r.get("miou", "all"), Some(0.5));
    }
}
