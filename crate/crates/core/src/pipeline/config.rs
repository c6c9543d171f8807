//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! ```text
//! # comment
//! task = detection
//! source_dir = data/train
//! gallery_dir = gallery
//! output_dir = out
//! fraction = 1/2
//! prompt.mode = box+cam
//! backends = fake
//! backends.captioner = real
//! backends.captioner.model_path = /models/captioner
//! ```
//!
//! | key | default |
//! |-----|---------|
//! | `task` | `detection` |
//! | `source_dir`, `gallery_dir`, `output_dir` | none |
//! | `ratio_table_path` | `<gallery_dir>/ratios.tsv` |
//! | `index_path` | `<gallery_dir>/gallery.index` |
//! | `fraction` | `1/1` |
//! | `variants_per_image` | `1` |
//! | `prompt.mode` | `box+cam` |
//! | `prompt.n_points` | `3` |
//! | `prompt.min_sep` | `0.15` |
//! | `composite.feather_px` | `0` |
//! | `composite.max_overlap_iou` | `0.3` |
//! | `composite.max_attempts` | `20` |
//! | `composite.keep_threshold` | `0.2` |
//! | `match.top_k` | `1` |
//! | `backends`, `backends.<role>` | `fake` |
//! | `backends.<role>.model_path` | `$CACP_MODEL_DIR/<role>` |
//! | `seed` | `0` |
//! | `stop_after` | unset |

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backends::{BackendConfig, BackendKind, Role};
use crate::compositor::CompositeSettings;
use crate::dataset::{Fraction, Task, DEFAULT_KEEP_THRESHOLD};
use crate::error::{Error, Result};
use crate::prompt::{PromptSettings, MAX_POINTS};

pub const DEFAULT_INDEX_FILE: &str = "gallery.index";
pub const DEFAULT_RATIO_FILE: &str = "ratios.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub source_dir: Option<PathBuf>,
    pub gallery_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub ratio_table_path: Option<PathBuf>,
    pub index_path: Option<PathBuf>,
    pub fraction: Fraction,
    pub variants_per_image: u32,
    pub prompt: PromptSettings,
    pub composite: CompositeSettings,
    pub keep_threshold: f64,
    pub backends: BackendConfig,
    pub top_k: usize,
    pub seed: u64,
    pub resume: bool,
    /// Stop after this many base images, leaving a partial run for `resume`.
    pub stop_after: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Detection,
            source_dir: None,
            gallery_dir: None,
            output_dir: None,
            ratio_table_path: None,
            index_path: None,
            fraction: Fraction::default(),
            variants_per_image: 1,
            prompt: PromptSettings::default(),
            composite: CompositeSettings::default(),
            keep_threshold: DEFAULT_KEEP_THRESHOLD,
            backends: BackendConfig::all(BackendKind::Fake),
            top_k: 1,
            seed: 0,
            resume: false,
            stop_after: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
}

impl RunConfig {
    pub fn new(task: Task, source_dir: &Path, gallery_dir: &Path, output_dir: &Path) -> Self {
        RunConfig {
            task,
            source_dir: Some(source_dir.to_path_buf()),
            gallery_dir: Some(gallery_dir.to_path_buf()),
            output_dir: Some(output_dir.to_path_buf()),
            ..RunConfig::default()
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "task" => self.task = parse(key, value)?,
            "source_dir" => self.source_dir = Some(PathBuf::from(value)),
            "gallery_dir" => self.gallery_dir = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "ratio_table_path" => self.ratio_table_path = Some(PathBuf::from(value)),
            "index_path" => self.index_path = Some(PathBuf::from(value)),
            "fraction" => self.fraction = value.parse()?,
            "variants_per_image" => self.variants_per_image = parse(key, value)?,
            "prompt.mode" => self.prompt.mode = parse(key, value)?,
            "prompt.n_points" => self.prompt.n_points = parse(key, value)?,
            "prompt.min_sep" => self.prompt.min_sep = parse(key, value)?,
            "composite.feather_px" => self.composite.feather_px = parse(key, value)?,
            "composite.max_overlap_iou" => self.composite.max_overlap_iou = parse(key, value)?,
            "composite.max_attempts" => self.composite.max_attempts = parse(key, value)?,
            "composite.keep_threshold" => self.keep_threshold = parse(key, value)?,
            "match.top_k" => self.top_k = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "resume" => self.resume = parse(key, value)?,
            "stop_after" => self.stop_after = Some(parse(key, value)?),
            "backends" => {
                let kind: BackendKind = parse(key, value)?;
                for role in Role::ALL {
                    self.backends.kinds.insert(role, kind);
                }
            }
            _ => {
                let rest = key
                    .strip_prefix("backends.")
                    .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                let (role_name, field) = match rest.split_once('.') {
                    Some((r, f)) => (r, Some(f)),
                    None => (rest, None),
                };
                let role = Role::from_name(role_name)
                    .ok_or_else(|| Error::Config(format!("unknown backend role `{role_name}`")))?;
                match field {
                    None => {
                        self.backends.kinds.insert(role, parse(key, value)?);
                    }
                    Some("model_path") => {
                        self.backends.model_paths.insert(role, PathBuf::from(value));
                    }
                    Some(other) => {
                        return Err(Error::Config(format!("unknown backend field `{other}`")))
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses a config file body. Later keys override earlier ones.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn source_dir(&self) -> Result<&Path> {
        required(&self.source_dir, "source_dir")
    }

    pub fn gallery_dir(&self) -> Result<&Path> {
        required(&self.gallery_dir, "gallery_dir")
    }

    pub fn output_dir(&self) -> Result<&Path> {
        required(&self.output_dir, "output_dir")
    }

    pub fn index_path(&self) -> Result<PathBuf> {
        match &self.index_path {
            Some(p) => Ok(p.clone()),
            None => Ok(self.gallery_dir()?.join(DEFAULT_INDEX_FILE)),
        }
    }

    pub fn ratio_table_path(&self) -> Result<PathBuf> {
        match &self.ratio_table_path {
            Some(p) => Ok(p.clone()),
            None => Ok(self.gallery_dir()?.join(DEFAULT_RATIO_FILE)),
        }
    }

    /// Checks value ranges; directories are checked by the operations that need them.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.variants_per_image == 0 {
            return bad("variants_per_image must be >= 1".into());
        }
        if self.prompt.n_points > MAX_POINTS {
            return bad(format!("prompt.n_points must be in [0, {MAX_POINTS}]"));
        }
        if !(self.prompt.min_sep.is_finite() && self.prompt.min_sep >= 0.0) {
            return bad("prompt.min_sep must be a non-negative number".into());
        }
        if !(0.0..=1.0).contains(&self.composite.max_overlap_iou) {
            return bad("composite.max_overlap_iou must be in [0, 1]".into());
        }
        if self.composite.max_attempts == 0 {
            return bad("composite.max_attempts must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.keep_threshold) {
            return bad("composite.keep_threshold must be in [0, 1]".into());
        }
        if self.top_k == 0 {
            return bad("match.top_k must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptMode;

    #[test]
    fn parses_dotted_keys() {
        let text = "# run\ntask = segmentation\nsource_dir = a\ngallery_dir=g\noutput_dir = o\n\
                    fraction = 1/4\nprompt.mode = box+rand\nprompt.n_points = 5\nbackends = fake\n\
                    backends.embedder = real\nbackends.embedder.model_path = /m/e\nseed = 7\n";
        let c = RunConfig::parse_text(text).unwrap();
        assert_eq!(c.task, Task::Segmentation);
        assert_eq!(c.fraction.denominator(), 4);
        assert_eq!(c.prompt.mode, PromptMode::BoxPlusRandom);
        assert_eq!(c.prompt.n_points, 5);
        assert_eq!(c.backends.kind(Role::Embedder), BackendKind::Real);
        assert_eq!(c.backends.kind(Role::Captioner), BackendKind::Fake);
        assert_eq!(
            c.backends.model_paths[&Role::Embedder],
            PathBuf::from("/m/e")
        );
        assert_eq!(c.seed, 7);
        assert_eq!(c.ratio_table_path().unwrap(), PathBuf::from("g/ratios.tsv"));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        assert!(matches!(
            RunConfig::parse_text("colour = red"),
            Err(Error::Config(_))
        ));
        let err = RunConfig::parse_text("\nfraction = 2/3").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let mut c = RunConfig::default();
        c.variants_per_image = 0;
        assert!(c.validate().is_err());
        assert!(c.source_dir().is_err());
    }
}
