use serde::{Deserialize, Serialize};

use crate::compositor::Placement;
use crate::context::{MatchResult, SimilarityScore};
use crate::prompt::{PromptBundle, PromptMode};
use crate::types::Caption;

/// How many ranked categories a provenance record keeps.
pub const SUMMARY_TOP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub chosen: String,
    pub top: Vec<SimilarityScore>,
}

impl MatchSummary {
    pub fn from_result(result: &MatchResult, chosen: &str) -> Self {
        MatchSummary {
            chosen: chosen.to_string(),
            top: result.ranking.iter().take(SUMMARY_TOP).cloned().collect(),
        }
    }
}

/// Everything needed to regenerate one synthetic image with fake backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// Output file, relative to the output root.
    pub output_path: String,
    /// Base item name within the source dataset.
    pub base_path: String,
    /// Donor image relative to the gallery root.
    pub donor_path: String,
    pub donor_category: String,
    pub caption: Caption,
    pub chosen_by: MatchSummary,
    pub placement: Placement,
    pub prompt_mode: PromptMode,
    pub prompt: PromptBundle,
    /// Sampled area ratio behind `placement.scale`.
    pub target_ratio: f64,
    pub ratio_fallback: bool,
    pub variant: u32,
    /// Run seed; per-stage seeds are derived from it.
    pub seed: u64,
}
