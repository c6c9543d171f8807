//! Model-role interfaces consumed by the pipeline.
//!
//! Five roles are used: a captioner, a text embedder, an object detector, a
//! promptable segmenter and a saliency mapper. Each role has a deterministic
//! fake (see [`fake`]) so the rest of the crate can be exercised without
//! weights, and a `real` variant that delegates to an external program
//! (see [`external`]).

pub mod external;
pub mod fake;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::prompt::PromptBundle;
use crate::types::{BBox, BinaryMask, Caption, EmbeddingVector, Heatmap};

pub use external::ExternalBackend;
pub use fake::{
    category_color, FakeCaptioner, FakeDetector, FakeEmbedder, FakeSaliency, FakeSegmenter,
};

/// Environment variable naming the directory that holds real-backend programs.
pub const MODEL_DIR_ENV: &str = "CACP_MODEL_DIR";

pub trait Captioner: Send + Sync {
    fn caption(&self, image: &RgbImage) -> Result<Caption>;
}

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

pub trait Detector: Send + Sync {
    /// Boxes ordered by descending score. With a hint, only boxes with that
    /// label are returned.
    fn detect(&self, image: &RgbImage, category_hint: Option<&str>) -> Result<Vec<BBox>>;
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, image: &RgbImage, prompt: &PromptBundle) -> Result<BinaryMask>;
}

pub trait SaliencyMapper: Send + Sync {
    fn saliency_map(&self, image: &RgbImage, label: &str) -> Result<Heatmap>;
}

/// Orders detections by descending score; ties go to the smaller `(y_min, x_min)`.
pub fn sort_detections(boxes: &mut [BBox]) {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y_min.cmp(&b.y_min))
            .then(a.x_min.cmp(&b.x_min))
            .then(a.y_max.cmp(&b.y_max))
            .then(a.x_max.cmp(&b.x_max))
            .then_with(|| a.label.cmp(&b.label))
    });
}

/// Rejects prompts whose box leaves the image or whose points leave the box.
pub fn validate_prompt(image_dims: (u32, u32), prompt: &PromptBundle) -> Result<()> {
    let (width, height) = image_dims;
    let bbox = &prompt.bbox;
    if !(bbox.x_min < bbox.x_max
        && bbox.y_min < bbox.y_max
        && bbox.x_max <= width
        && bbox.y_max <= height)
    {
        return Err(Error::InvalidPrompt(format!(
            "box ({}, {}, {}, {}) is not inside a {width}x{height} image",
            bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max
        )));
    }
    if let Some(p) = prompt.points.iter().find(|p| !bbox.contains(p.x, p.y)) {
        return Err(Error::InvalidPrompt(format!(
            "point ({}, {}) lies outside the prompt box",
            p.x, p.y
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Captioner,
    Embedder,
    Detector,
    Segmenter,
    Saliency,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Captioner,
        Role::Embedder,
        Role::Detector,
        Role::Segmenter,
        Role::Saliency,
    ];

    /// Name used in config keys (`backends.<name>`) and on the external-program command line.
    pub fn name(self) -> &'static str {
        match self {
            Role::Captioner => "captioner",
            Role::Embedder => "embedder",
            Role::Detector => "detector",
            Role::Segmenter => "segmenter",
            Role::Saliency => "saliency",
        }
    }

    pub fn from_name(name: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    Real,
    #[default]
    Fake,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(BackendKind::Real),
            "fake" => Ok(BackendKind::Fake),
            other => Err(Error::Config(format!(
                "backend kind must be `real` or `fake`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BackendKind::Real => "real",
            BackendKind::Fake => "fake",
        })
    }
}

/// Per-role backend selection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackendConfig {
    pub kinds: BTreeMap<Role, BackendKind>,
    pub model_paths: BTreeMap<Role, PathBuf>,
}

impl BackendConfig {
    pub fn all(kind: BackendKind) -> Self {
        BackendConfig {
            kinds: Role::ALL.into_iter().map(|r| (r, kind)).collect(),
            model_paths: BTreeMap::new(),
        }
    }

    pub fn kind(&self, role: Role) -> BackendKind {
        self.kinds.get(&role).copied().unwrap_or_default()
    }

    /// Explicit model path, else `$CACP_MODEL_DIR/<role>`.
    pub fn model_path(&self, role: Role) -> Option<PathBuf> {
        self.model_paths.get(&role).cloned().or_else(|| {
            std::env::var_os(MODEL_DIR_ENV).map(|dir| PathBuf::from(dir).join(role.name()))
        })
    }
}

/// One instance per role.
#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn Captioner>,
    pub embedder: Arc<dyn TextEmbedder>,
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
    pub saliency: Arc<dyn SaliencyMapper>,
}

impl Backends {
    /// All-fake registry. `categories` seeds the fake detector's colour palette.
    pub fn fake<S: AsRef<str>>(categories: &[S]) -> Self {
        let detector = FakeDetector::for_categories(categories);
        Backends {
            captioner: Arc::new(FakeCaptioner::new()),
            embedder: Arc::new(FakeEmbedder::new(fake::DEFAULT_EMBEDDING_DIM)),
            saliency: Arc::new(FakeSaliency::new(detector.clone())),
            detector: Arc::new(detector),
            segmenter: Arc::new(FakeSegmenter),
        }
    }

    pub fn from_config<S: AsRef<str>>(config: &BackendConfig, categories: &[S]) -> Result<Self> {
        let mut backends = Backends::fake(categories);
        for role in Role::ALL {
            if config.kind(role) == BackendKind::Fake {
                continue;
            }
            let path = config.model_path(role).ok_or_else(|| {
                Error::BackendUnavailable(format!(
                    "no model path for real {} (set backends.{}.model_path or {MODEL_DIR_ENV})",
                    role.name(),
                    role.name()
                ))
            })?;
            let external = Arc::new(ExternalBackend::open(role, path)?);
            match role {
                Role::Captioner => backends.captioner = external,
                Role::Embedder => backends.embedder = external,
                Role::Detector => backends.detector = external,
                Role::Segmenter => backends.segmenter = external,
                Role::Saliency => backends.saliency = external,
            }
        }
        Ok(backends)
    }
}
