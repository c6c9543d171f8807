//! Hybrid segmentation prompts: a detector box plus foreground points taken
//! from a saliency heatmap (or drawn at random, for comparison).

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{Detector, SaliencyMapper};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::types::{BBox, Heatmap};

pub const MAX_POINTS: usize = 16;
pub const DEFAULT_POINTS: usize = 3;
/// Minimum point separation as a fraction of the box diagonal.
pub const DEFAULT_MIN_SEP: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    BoxOnly,
    BoxPlusRandom,
    #[default]
    BoxPlusCam,
}

impl PromptMode {
    /// Short command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            PromptMode::BoxOnly => "box",
            PromptMode::BoxPlusRandom => "box+rand",
            PromptMode::BoxPlusCam => "box+cam",
        }
    }
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box" | "box_only" => Ok(PromptMode::BoxOnly),
            "box+rand" | "box_plus_random" => Ok(PromptMode::BoxPlusRandom),
            "box+cam" | "box_plus_cam" => Ok(PromptMode::BoxPlusCam),
            other => Err(Error::Config(format!(
                "prompt mode must be one of box, box+rand, box+cam; got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.flag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: u32,
    pub y: u32,
    pub positive: bool,
}

impl PromptPoint {
    pub fn positive(x: u32, y: u32) -> Self {
        PromptPoint {
            x,
            y,
            positive: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub points: Vec<PromptPoint>,
    pub mode: PromptMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptSettings {
    pub mode: PromptMode,
    pub n_points: usize,
    pub min_sep: f64,
}

impl Default for PromptSettings {
    fn default() -> Self {
        PromptSettings {
            mode: PromptMode::BoxPlusCam,
            n_points: DEFAULT_POINTS,
            min_sep: DEFAULT_MIN_SEP,
        }
    }
}

/// Highest-scoring box labelled `category`.
pub fn pick_object_box(
    donor_image: &RgbImage,
    category: &str,
    detector: &dyn Detector,
) -> Result<BBox> {
    detector
        .detect(donor_image, Some(category))?
        .into_iter()
        .find(|b| b.label == category)
        .ok_or_else(|| Error::NoObjectFound {
            category: category.to_string(),
            image: format!(
                "{}x{} donor image",
                donor_image.width(),
                donor_image.height()
            ),
        })
}

/// Greedy top-value selection over the in-box heatmap cells: cells are
/// visited by descending value (ties by row, then column) and kept when they
/// are at least `min_sep * diag(box)` away from every kept cell.
pub fn sample_cam_points(
    heatmap: &Heatmap,
    bbox: &BBox,
    n: usize,
    min_sep: f64,
) -> Vec<PromptPoint> {
    if n == 0 {
        return Vec::new();
    }
    let x_max = bbox.x_max.min(heatmap.width());
    let y_max = bbox.y_max.min(heatmap.height());
    let mut cells: Vec<(u32, u32, f32)> = (bbox.y_min..y_max)
        .flat_map(|y| (bbox.x_min..x_max).map(move |x| (x, y)))
        .map(|(x, y)| (x, y, heatmap.get(x, y)))
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));

    let sep = min_sep * bbox.diagonal();
    let mut picked: Vec<PromptPoint> = Vec::with_capacity(n);
    for (x, y, _) in cells {
        let far_enough = picked.iter().all(|p| {
            let dx = f64::from(p.x) - f64::from(x);
            let dy = f64::from(p.y) - f64::from(y);
            dx.hypot(dy) >= sep
        });
        if far_enough {
            picked.push(PromptPoint::positive(x, y));
            if picked.len() == n {
                break;
            }
        }
    }
    picked
}

/// `n` i.i.d. uniform pixels inside the box.
pub fn sample_random_points(bbox: &BBox, n: usize, seed: u64) -> Vec<PromptPoint> {
    if n == 0 || bbox.width() == 0 || bbox.height() == 0 {
        return Vec::new();
    }
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            PromptPoint::positive(
                rng.random_range(bbox.x_min..bbox.x_max),
                rng.random_range(bbox.y_min..bbox.y_max),
            )
        })
        .collect()
}

/// Builds the prompt for a known object box.
pub fn build_prompt_for_box(
    donor_image: &RgbImage,
    bbox: BBox,
    settings: &PromptSettings,
    seed: u64,
    saliency: &dyn SaliencyMapper,
) -> Result<PromptBundle> {
    if settings.n_points > MAX_POINTS {
        return Err(Error::InvalidInput(format!(
            "n_points must be in [0, {MAX_POINTS}], got {}",
            settings.n_points
        )));
    }
    let points = match settings.mode {
        PromptMode::BoxOnly => Vec::new(),
        PromptMode::BoxPlusRandom => sample_random_points(&bbox, settings.n_points, seed),
        PromptMode::BoxPlusCam => {
            if settings.n_points == 0 {
                Vec::new()
            } else {
                let heatmap = saliency.saliency_map(donor_image, &bbox.label)?;
                sample_cam_points(&heatmap, &bbox, settings.n_points, settings.min_sep)
            }
        }
    };
    Ok(PromptBundle {
        bbox,
        points,
        mode: settings.mode,
    })
}

/// Detects the donor object and composes the prompt for it.
pub fn build_prompt(
    donor_image: &RgbImage,
    category: &str,
    settings: &PromptSettings,
    seed: u64,
    detector: &dyn Detector,
    saliency: &dyn SaliencyMapper,
) -> Result<PromptBundle> {
    let bbox = pick_object_box(donor_image, category, detector)?;
    build_prompt_for_box(donor_image, bbox, settings, seed, saliency)
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use image::Rgb;
    use rand::Rng;

    use super::*;
    use crate::backends::{category_color, FakeDetector, FakeSaliency};

    /// Independent greedy oracle: every step rescans all cells for the best
    /// admissible one.
    fn brute_greedy(map: &Heatmap, bbox: &BBox, n: usize, min_sep: f64) -> Vec<(u32, u32)> {
        let sep = min_sep * bbox.diagonal();
        let mut chosen: Vec<(u32, u32)> = Vec::new();
        while chosen.len() < n {
            let mut best: Option<(u32, u32, f32)> = None;
            for y in 0..map.height() {
                for x in 0..map.width() {
                    if !bbox.contains(x, y) || chosen.contains(&(x, y)) {
                        continue;
                    }
                    let ok = chosen.iter().all(|&(cx, cy)| {
                        ((cx as f64 - x as f64).powi(2) + (cy as f64 - y as f64).powi(2)).sqrt()
                            >= sep
                    });
                    if !ok {
                        continue;
                    }
                    let v = map.get(x, y);
                    // Row-major scan keeps the first of equal values.
                    if best.is_none_or(|(_, _, bv)| v > bv) {
                        best = Some((x, y, v));
                    }
                }
            }
            match best {
                Some((x, y, _)) => chosen.push((x, y)),
                None => break,
            }
        }
        chosen
    }

    struct CountingSaliency {
        inner: FakeSaliency,
        calls: AtomicUsize,
    }

    impl SaliencyMapper for CountingSaliency {
        fn saliency_map(&self, image: &RgbImage, label: &str) -> Result<Heatmap> {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.saliency_map(image, label)
        }
    }

    fn donor() -> (RgbImage, FakeDetector) {
        let color = category_color("dog");
        let image = RgbImage::from_fn(24, 20, |x, y| {
            if (5..17).contains(&x) && (4..14).contains(&y) {
                color
            } else {
                Rgb([0, 0, 0])
            }
        });
        (image, FakeDetector::for_categories(&["dog"]))
    }

    #[test]
    fn zero_points_is_empty() {
        let map = Heatmap::from_fn(4, 4, "x", |_, _| 0.5);
        assert!(sample_cam_points(&map, &BBox::new(0, 0, 4, 4, "x"), 0, 0.15).is_empty());
        assert!(sample_random_points(&BBox::new(0, 0, 4, 4, "x"), 0, 1).is_empty());
    }

    #[test]
    fn single_cam_point_is_the_peak() {
        let (image, detector) = donor();
        let saliency = FakeSaliency::new(detector.clone());
        let bbox = pick_object_box(&image, "dog", &detector).unwrap();
        let map = saliency.saliency_map(&image, "dog").unwrap();
        let points = sample_cam_points(&map, &bbox, 1, DEFAULT_MIN_SEP);
        assert_eq!(
            points,
            vec![PromptPoint::positive(bbox.center().0, bbox.center().1)]
        );
    }

    #[test]
    fn cam_points_match_brute_force_on_random_maps() {
        let mut rng = rng_from_seed(11);
        for _ in 0..50 {
            let map = Heatmap::from_fn(16, 16, "x", |_, _| (rng.random_range(0..8) as f32) / 8.0);
            let x0 = rng.random_range(0..12);
            let y0 = rng.random_range(0..12);
            let bbox = BBox::new(
                x0,
                y0,
                rng.random_range(x0 + 1..=16),
                rng.random_range(y0 + 1..=16),
                "x",
            );
            let got: Vec<_> = sample_cam_points(&map, &bbox, 3, DEFAULT_MIN_SEP)
                .into_iter()
                .map(|p| (p.x, p.y))
                .collect();
            assert_eq!(got, brute_greedy(&map, &bbox, 3, DEFAULT_MIN_SEP));
        }
    }

    #[test]
    fn pick_prefers_higher_score() {
        let image = RgbImage::new(16, 16);
        let detector = FakeDetector::new().with_planted(
            &image,
            vec![
                BBox::new(0, 0, 4, 4, "dog").with_score(0.7),
                BBox::new(8, 8, 12, 12, "dog").with_score(0.9),
            ],
        );
        let picked = pick_object_box(&image, "dog", &detector).unwrap();
        assert_eq!(picked.score, 0.9);
        assert!(matches!(
            pick_object_box(&image, "cat", &detector),
            Err(Error::NoObjectFound { .. })
        ));
    }

    #[test]
    fn random_points_stay_in_box_and_are_reproducible() {
        let bbox = BBox::new(3, 5, 9, 7, "x");
        let a = sample_random_points(&bbox, 16, 99);
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|p| bbox.contains(p.x, p.y)));
        assert_eq!(a, sample_random_points(&bbox, 16, 99));
    }

    #[test]
    fn build_prompt_modes() {
        let (image, detector) = donor();
        let saliency = CountingSaliency {
            inner: FakeSaliency::new(detector.clone()),
            calls: AtomicUsize::new(0),
        };
        let mut settings = PromptSettings {
            mode: PromptMode::BoxOnly,
            ..PromptSettings::default()
        };
        let bundle = build_prompt(&image, "dog", &settings, 1, &detector, &saliency).unwrap();
        assert!(bundle.points.is_empty());
        assert_eq!(saliency.calls.load(Ordering::Relaxed), 0);

        settings.mode = PromptMode::BoxPlusCam;
        let bundle = build_prompt(&image, "dog", &settings, 1, &detector, &saliency).unwrap();
        assert_eq!(bundle.points.len(), 3);
        assert!(bundle.points.iter().all(|p| bundle.bbox.contains(p.x, p.y)));
        assert_eq!(saliency.calls.load(Ordering::Relaxed), 1);

        settings.mode = PromptMode::BoxPlusRandom;
        settings.n_points = 1;
        let bundle = build_prompt(&image, "dog", &settings, 1, &detector, &saliency).unwrap();
        assert_eq!(bundle.points.len(), 1);

        settings.n_points = 17;
        assert!(build_prompt(&image, "dog", &settings, 1, &detector, &saliency).is_err());
    }

    #[test]
    fn mode_parsing() {
        for mode in [
            PromptMode::BoxOnly,
            PromptMode::BoxPlusRandom,
            PromptMode::BoxPlusCam,
        ] {
            assert_eq!(mode.flag().parse::<PromptMode>().unwrap(), mode);
        }
        assert!("lasso".parse::<PromptMode>().is_err());
    }
}
