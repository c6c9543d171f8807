//! Deterministic stand-ins for every model role.
//!
//! Geometry is kept auditable: the detector reports same-colour connected
//! components, the segmenter fills the prompt box (or the ellipse inscribed in
//! it when points are given), and the saliency map is a Gaussian bump at the
//! detected object's centre.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::{
    sort_detections, validate_prompt, Captioner, Detector, SaliencyMapper, Segmenter, TextEmbedder,
};
use crate::error::{Error, Result};
use crate::prompt::PromptBundle;
use crate::seed::{image_digest, rng_from_seed};
use crate::types::{BBox, BinaryMask, Caption, EmbeddingVector, Heatmap};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Caption returned for an image whose pixels are all zero.
pub const BLANK_CAPTION: &str = "a blank image";

/// Label given to components whose colour is not in the palette.
pub const UNKNOWN_LABEL: &str = "object";

const PHRASES: &[&str] = &[
    "Two teams are playing football games",
    "A boy is dancing with a girl in the garden",
    "A boy is standing near a red car",
    "a street with cars parked along the road",
    "a dog lying on the grass in a park",
    "a cat sitting on a wooden table",
    "people walking on a sidewalk in the city",
    "a kitchen with a table and some chairs",
    "a field with trees under a cloudy sky",
    "a living room with a sofa and a lamp",
    "a bird perched on a branch",
    "a beach with waves and a blue sky",
];

/// Colour the fake detector associates with `category`. Never black, so it is
/// always foreground.
pub fn category_color(category: &str) -> Rgb<u8> {
    let digest = Sha256::digest(category.as_bytes());
    Rgb([
        64 + digest[0] % 192,
        64 + digest[1] % 192,
        64 + digest[2] % 192,
    ])
}

#[derive(Debug, Default)]
pub struct FakeCaptioner {
    planted: HashMap<[u8; 32], Caption>,
}

impl FakeCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forces the caption for one exact image.
    pub fn with_caption(mut self, image: &RgbImage, caption: Caption) -> Self {
        self.planted.insert(image_digest(image), caption);
        self
    }
}

impl Captioner for FakeCaptioner {
    fn caption(&self, image: &RgbImage) -> Result<Caption> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidInput("cannot caption an empty image".into()));
        }
        let digest = image_digest(image);
        if let Some(caption) = self.planted.get(&digest) {
            return Ok(caption.clone());
        }
        if image.as_raw().iter().all(|&v| v == 0) {
            return Caption::new(BLANK_CAPTION);
        }
        let index = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
            % PHRASES.len() as u64;
        Caption::new(PHRASES[index as usize])
    }
}

/// Maps every string to a reproducible pseudo-random unit vector seeded by the
/// string's bytes. Specific strings may be overridden with planted vectors.
#[derive(Debug)]
pub struct FakeEmbedder {
    dim: usize,
    planted: HashMap<String, EmbeddingVector>,
    calls: AtomicUsize,
}

impl FakeEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        FakeEmbedder {
            dim,
            planted: HashMap::new(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_vector(mut self, text: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != self.dim {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.dim,
            });
        }
        self.planted
            .insert(text.into(), EmbeddingVector::new(values)?);
        Ok(self)
    }

    /// Number of `embed` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl TextEmbedder for FakeEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        if let Some(v) = self.planted.get(text) {
            return Ok(v.clone());
        }
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
        let mut rng = rng_from_seed(seed);
        let mut raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            raw[0] = 1.0;
        } else {
            raw.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(raw.into_iter().map(|v| v as f32).collect())
    }
}

/// Connected components of identically coloured, non-black pixels (4-neighbourhood).
#[derive(Debug, Clone, Default)]
pub struct FakeDetector {
    palette: BTreeMap<[u8; 3], String>,
    planted: HashMap<[u8; 32], Vec<BBox>>,
}

impl FakeDetector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_categories<S: AsRef<str>>(categories: &[S]) -> Self {
        let mut detector = FakeDetector::new();
        for category in categories {
            let category = category.as_ref();
            detector = detector.with_color(category_color(category), category);
        }
        detector
    }

    pub fn with_color(mut self, color: Rgb<u8>, label: impl Into<String>) -> Self {
        self.palette.insert(color.0, label.into());
        self
    }

    /// Replaces component analysis with a fixed box list for one exact image.
    pub fn with_planted(mut self, image: &RgbImage, boxes: Vec<BBox>) -> Self {
        self.planted.insert(image_digest(image), boxes);
        self
    }

    fn components(&self, image: &RgbImage) -> Vec<BBox> {
        let (width, height) = image.dimensions();
        let mut seen = vec![false; width as usize * height as usize];
        let mut boxes = Vec::new();
        let mut stack = Vec::new();
        for y in 0..height {
            for x in 0..width {
                let idx = (y * width + x) as usize;
                let color = image.get_pixel(x, y).0;
                if seen[idx] || color == [0, 0, 0] {
                    continue;
                }
                seen[idx] = true;
                stack.push((x, y));
                let (mut x0, mut y0, mut x1, mut y1) = (x, y, x + 1, y + 1);
                while let Some((cx, cy)) = stack.pop() {
                    x0 = x0.min(cx);
                    y0 = y0.min(cy);
                    x1 = x1.max(cx + 1);
                    y1 = y1.max(cy + 1);
                    let mut visit = |nx: u32, ny: u32| {
                        let nidx = (ny * width + nx) as usize;
                        if !seen[nidx] && image.get_pixel(nx, ny).0 == color {
                            seen[nidx] = true;
                            stack.push((nx, ny));
                        }
                    };
                    if cx > 0 {
                        visit(cx - 1, cy);
                    }
                    if cx + 1 < width {
                        visit(cx + 1, cy);
                    }
                    if cy > 0 {
                        visit(cx, cy - 1);
                    }
                    if cy + 1 < height {
                        visit(cx, cy + 1);
                    }
                }
                let label = self
                    .palette
                    .get(&color)
                    .cloned()
                    .unwrap_or_else(|| UNKNOWN_LABEL.to_string());
                boxes.push(BBox::new(x0, y0, x1, y1, label));
            }
        }
        boxes
    }
}

impl Detector for FakeDetector {
    fn detect(&self, image: &RgbImage, category_hint: Option<&str>) -> Result<Vec<BBox>> {
        let mut boxes = match self.planted.get(&image_digest(image)) {
            Some(planted) => planted.clone(),
            None => self.components(image),
        };
        if let Some(hint) = category_hint {
            boxes.retain(|b| b.label == hint);
        }
        sort_detections(&mut boxes);
        Ok(boxes)
    }
}

/// Box fill without points, inscribed ellipse with points.
#[derive(Debug, Clone, Copy, Default)]
pub struct FakeSegmenter;

impl Segmenter for FakeSegmenter {
    fn segment(&self, image: &RgbImage, prompt: &PromptBundle) -> Result<BinaryMask> {
        validate_prompt(image.dimensions(), prompt)?;
        let (width, height) = image.dimensions();
        let b = &prompt.bbox;
        if prompt.points.is_empty() {
            return Ok(BinaryMask::from_fn(width, height, |x, y| b.contains(x, y)));
        }
        let cx = f64::from(b.x_min + b.x_max) / 2.0;
        let cy = f64::from(b.y_min + b.y_max) / 2.0;
        let rx = f64::from(b.width()) / 2.0;
        let ry = f64::from(b.height()) / 2.0;
        Ok(BinaryMask::from_fn(width, height, |x, y| {
            if !b.contains(x, y) {
                return false;
            }
            let dx = (f64::from(x) + 0.5 - cx) / rx;
            let dy = (f64::from(y) + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        }))
    }
}

/// Gaussian bump centred on the top detection for the label; falls back to
/// the image centre when nothing is detected.
#[derive(Debug, Clone, Default)]
pub struct FakeSaliency {
    detector: FakeDetector,
}

impl FakeSaliency {
    pub fn new(detector: FakeDetector) -> Self {
        FakeSaliency { detector }
    }
}

impl SaliencyMapper for FakeSaliency {
    fn saliency_map(&self, image: &RgbImage, label: &str) -> Result<Heatmap> {
        let (width, height) = image.dimensions();
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(
                "cannot compute saliency of an empty image".into(),
            ));
        }
        let anchor = self
            .detector
            .detect(image, Some(label))?
            .into_iter()
            .next()
            .unwrap_or_else(|| BBox::new(0, 0, width, height, label));
        let (px, py) = anchor.center();
        let sigma = (anchor.diagonal() / 2.0).max(1.0);
        let denom = 2.0 * sigma * sigma;
        Ok(Heatmap::from_fn(width, height, label, |x, y| {
            let dx = f64::from(x) - f64::from(px);
            let dy = f64::from(y) - f64::from(py);
            (-(dx * dx + dy * dy) / denom).exp() as f32
        }))
    }
}
