//! Donor-image catalog laid out folder-per-class: `root/<category>/<images>`.
//!
//! Images may carry an optional sidecar `<image file name>.json` holding a JSON
//! array of boxes (`x_min`, `y_min`, `x_max`, `y_max`, `label`, `score`); when
//! present it replaces detection for that image.

mod ratio;

pub use ratio::{
    build_ratio_table, ratio_interval, records_for_image, RatioInterval, RatioRecord, RatioStats,
    RatioTable, FALLBACK_INTERVAL,
};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::types::BBox;

pub const INDEX_HEADER: &str = "CACP-INDEX v1";
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| e.eq_ignore_ascii_case(x)))
}

pub fn sidecar_path(image_path: &Path) -> PathBuf {
    let mut name = image_path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    image_path.with_file_name(name)
}

/// Reads the sidecar next to `image_path`, if any.
pub fn read_sidecar(image_path: &Path) -> Result<Option<Vec<BBox>>> {
    let path = sidecar_path(image_path);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let boxes: Vec<BBox> =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
    Ok(Some(boxes))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_rgb8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub image_path: PathBuf,
    /// Path relative to the gallery root, `/`-separated.
    pub relative_path: String,
    pub category: String,
    /// Best sidecar box labelled with the entry's category.
    pub cached_bbox: Option<BBox>,
}

impl GalleryEntry {
    fn new(root: &Path, relative_path: String, category: String) -> Result<Self> {
        let image_path = root.join(&relative_path);
        if !image_path.is_file() {
            return Err(Error::io(
                &image_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "gallery image missing"),
            ));
        }
        let cached_bbox = read_sidecar(&image_path)?.and_then(|boxes| {
            boxes
                .into_iter()
                .filter(|b| b.label == category)
                .max_by(|a, b| {
                    a.score
                        .total_cmp(&b.score)
                        .then(b.y_min.cmp(&a.y_min))
                        .then(b.x_min.cmp(&a.x_min))
                })
        });
        Ok(GalleryEntry {
            image_path,
            relative_path,
            category,
            cached_bbox,
        })
    }

    pub fn load_image(&self) -> Result<RgbImage> {
        load_rgb(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    root: PathBuf,
    categories: Vec<String>,
    entries: BTreeMap<String, Vec<GalleryEntry>>,
}

impl GalleryIndex {
    /// Scans `root`; every subdirectory holding at least one image file
    /// (searched recursively) becomes a category.
    pub fn build(root: &Path) -> Result<Self> {
        let mut dirs: Vec<(String, PathBuf)> = Vec::new();
        for item in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let item = item.map_err(|e| Error::io(root, e))?;
            let path = item.path();
            if path.is_dir() {
                if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                    dirs.push((name.to_string(), path));
                }
            }
        }
        dirs.sort();

        let mut entries = BTreeMap::new();
        for (category, dir) in dirs {
            let mut files = Vec::new();
            for item in WalkDir::new(&dir).sort_by_file_name() {
                let item = item.map_err(|e| {
                    let path = e.path().unwrap_or(&dir).to_path_buf();
                    Error::io(path, e.into())
                })?;
                if item.file_type().is_file() && is_image_file(item.path()) {
                    files.push(relative_slash_path(root, item.path()));
                }
            }
            files.sort();
            if files.is_empty() {
                continue;
            }
            let list = files
                .into_iter()
                .map(|rel| GalleryEntry::new(root, rel, category.clone()))
                .collect::<Result<Vec<_>>>()?;
            entries.insert(category, list);
        }
        Self::from_entries(root, entries)
    }

    fn from_entries(root: &Path, entries: BTreeMap<String, Vec<GalleryEntry>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyGallery(root.to_path_buf()));
        }
        Ok(GalleryIndex {
            root: root.to_path_buf(),
            categories: entries.keys().cloned().collect(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn entries(&self, category: &str) -> Option<&[GalleryEntry]> {
        self.entries.get(category).map(Vec::as_slice)
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &GalleryEntry> {
        self.entries.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform draw from one category.
    pub fn sample_donor(&self, category: &str, seed: u64) -> Result<&GalleryEntry> {
        let list = self
            .entries
            .get(category)
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
        let mut rng = rng_from_seed(seed);
        Ok(&list[rng.random_range(0..list.len())])
    }

    pub fn to_cache_string(&self) -> String {
        let mut out = String::new();
        out.push_str(INDEX_HEADER);
        out.push('\n');
        for entry in self.all_entries() {
            let _ = writeln!(out, "{}\t{}", entry.category, entry.relative_path);
        }
        out
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cache_string()).map_err(|e| Error::io(path, e))
    }

    /// Restores an index from a cache file; `root` resolves the relative paths.
    pub fn read_cache(path: &Path, root: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(Error::malformed(
                path,
                format!("missing `{INDEX_HEADER}` header"),
            ));
        }
        let mut entries: BTreeMap<String, Vec<GalleryEntry>> = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (category, rel) = line.split_once('\t').ok_or_else(|| {
                Error::malformed(
                    path,
                    format!("line {}: expected `category<TAB>path`", lineno + 2),
                )
            })?;
            if category.is_empty() {
                return Err(Error::malformed(
                    path,
                    format!("line {}: empty category", lineno + 2),
                ));
            }
            entries
                .entry(category.to_string())
                .or_default()
                .push(GalleryEntry::new(
                    root,
                    rel.to_string(),
                    category.to_string(),
                )?);
        }
        for list in entries.values_mut() {
            list.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
        }
        Self::from_entries(root, entries)
    }
}

pub(crate) fn relative_slash_path(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
