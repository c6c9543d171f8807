//! Context-aware copy-paste augmentation for classification, detection and
//! segmentation datasets.

pub mod backends;
pub mod compositor;
pub mod context;
pub mod dataset;
pub mod error;
pub mod gallery;
pub mod metrics;
pub mod pipeline;
pub mod prompt;
pub mod seed;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::{BBox, BinaryMask, Caption, EmbeddingVector, Heatmap, IndexMask};
