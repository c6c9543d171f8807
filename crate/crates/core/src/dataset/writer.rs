//! Augmented-dataset writer.
//!
//! Items are written in groups (one group per base image). After each group
//! the image files, `manifest.tsv` rows, provenance records and staged
//! annotations are on disk, and a progress line is appended. An interrupted
//! run therefore leaves a manifest that is a valid prefix, and
//! [`DatasetWriter::resume`] truncates everything back to the last complete
//! group. [`DatasetWriter::finish`] writes the task's annotation file and
//! removes the bookkeeping files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::coco::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use super::load::stem;
use super::{DatasetItem, Task};
use crate::error::{Error, Result};
use crate::seed::sha256_hex;
use crate::types::BBox;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const PROVENANCE_FILE: &str = "augmentations.jsonl";
const PROGRESS_FILE: &str = ".cacp-progress";
const STAGING_FILE: &str = ".cacp-staging.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub relative_path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(i, line)| {
                let (rel, digest) = line.split_once('\t').ok_or_else(|| {
                    Error::malformed(path, format!("line {}: expected `path<TAB>sha256`", i + 1))
                })?;
                Ok(ManifestRow {
                    relative_path: rel.to_string(),
                    sha256: digest.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Manifest { rows })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StagedItem {
    name: String,
    width: u32,
    height: u32,
    #[serde(default)]
    boxes: Vec<BBox>,
    #[serde(default)]
    class_map: BTreeMap<u8, String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Progress {
    manifest_rows: usize,
    provenance_rows: usize,
    staged_rows: usize,
}

pub struct DatasetWriter {
    out_dir: PathBuf,
    task: Task,
    manifest: Manifest,
    progress: Progress,
    groups_done: usize,
    complete: bool,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut body = String::new();
    for line in lines {
        body.push_str(line);
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and rename so a crash never leaves a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Deletes `*.tmp` files left by a write that never reached its rename.
fn remove_temporaries(out_dir: &Path) -> Result<()> {
    for entry in walkdir::WalkDir::new(out_dir) {
        let entry = entry.map_err(|e| Error::io(out_dir, e.into()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == "tmp") {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

fn encode(image: &image::DynamicImage, path: &Path) -> Result<Vec<u8>> {
    let format = ImageFormat::from_path(path).unwrap_or(ImageFormat::Png);
    let mut bytes = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut bytes), format)
        .map_err(|e| Error::image(path, e))?;
    Ok(bytes)
}

impl DatasetWriter {
    /// Starts a fresh output tree. `out_dir` must be missing or empty.
    pub fn create(out_dir: &Path, task: Task) -> Result<Self> {
        if out_dir.exists() {
            let mut listing = fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
            if listing.next().is_some() {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --resume to continue a run)",
                    out_dir.display()
                )));
            }
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let writer = DatasetWriter {
            out_dir: out_dir.to_path_buf(),
            task,
            manifest: Manifest::default(),
            progress: Progress::default(),
            groups_done: 0,
            complete: false,
        };
        for file in [MANIFEST_FILE, PROVENANCE_FILE, PROGRESS_FILE, STAGING_FILE] {
            write_lines(&out_dir.join(file), &[])?;
        }
        Ok(writer)
    }

    /// Reopens an interrupted run, dropping any group that was not fully
    /// recorded or whose files no longer match their digests.
    pub fn resume(out_dir: &Path, task: Task) -> Result<Self> {
        let progress_path = out_dir.join(PROGRESS_FILE);
        let manifest_path = out_dir.join(MANIFEST_FILE);
        if !out_dir.exists() || (!progress_path.exists() && !manifest_path.exists()) {
            return Self::create(out_dir, task);
        }
        if !progress_path.exists() {
            // Finished run.
            return Ok(DatasetWriter {
                out_dir: out_dir.to_path_buf(),
                task,
                manifest: Manifest::read(&manifest_path)?,
                progress: Progress::default(),
                groups_done: usize::MAX,
                complete: true,
            });
        }

        remove_temporaries(out_dir)?;
        let progress_lines = read_lines(&progress_path)?;
        let mut checkpoints = Vec::new();
        for (i, line) in progress_lines.iter().enumerate() {
            let parts: Vec<usize> = line.split('\t').filter_map(|p| p.parse().ok()).collect();
            match parts.as_slice() {
                [m, p, s] => checkpoints.push(Progress {
                    manifest_rows: *m,
                    provenance_rows: *p,
                    staged_rows: *s,
                }),
                // A torn final line is expected after a crash.
                _ if i + 1 == progress_lines.len() => break,
                _ => return Err(Error::malformed(&progress_path, format!("line {}", i + 1))),
            }
        }

        let manifest_lines = read_lines(&manifest_path)?;
        let provenance_lines = read_lines(&out_dir.join(PROVENANCE_FILE))?;
        let staged_lines = read_lines(&out_dir.join(STAGING_FILE))?;

        // Longest prefix of rows whose files exist with the recorded digest.
        let mut verified = 0;
        for line in &manifest_lines {
            let Some((rel, digest)) = line.split_once('\t') else {
                break;
            };
            match fs::read(out_dir.join(rel)) {
                Ok(bytes) if sha256_hex(&bytes) == digest => verified += 1,
                _ => break,
            }
        }

        let mut keep = Progress::default();
        let mut groups_done = 0;
        for cp in checkpoints {
            if cp.manifest_rows <= verified
                && cp.provenance_rows <= provenance_lines.len()
                && cp.staged_rows <= staged_lines.len()
            {
                keep = cp;
                groups_done += 1;
            } else {
                break;
            }
        }

        let manifest_lines = &manifest_lines[..keep.manifest_rows];
        write_lines(&manifest_path, manifest_lines)?;
        write_lines(
            &out_dir.join(PROVENANCE_FILE),
            &provenance_lines[..keep.provenance_rows],
        )?;
        write_lines(
            &out_dir.join(STAGING_FILE),
            &staged_lines[..keep.staged_rows],
        )?;
        write_lines(&progress_path, &progress_lines[..groups_done])?;

        let manifest = Manifest {
            rows: manifest_lines
                .iter()
                .map(|l| {
                    let (rel, digest) = l.split_once('\t').expect("verified above");
                    ManifestRow {
                        relative_path: rel.to_string(),
                        sha256: digest.to_string(),
                    }
                })
                .collect(),
        };
        Ok(DatasetWriter {
            out_dir: out_dir.to_path_buf(),
            task,
            manifest,
            progress: keep,
            groups_done,
            complete: false,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    /// Number of groups already on disk.
    pub fn groups_done(&self) -> usize {
        self.groups_done
    }

    /// True when resuming a run that already finished.
    pub fn is_complete(&self) -> bool {
        self.complete
    }

    fn image_rel_path(&self, name: &str) -> String {
        match self.task {
            Task::Classification => name.to_string(),
            Task::Detection | Task::Segmentation => format!("images/{name}"),
        }
    }

    pub fn write_group(&mut self, items: &[DatasetItem]) -> Result<()> {
        if self.complete {
            return Err(Error::InvalidInput("writer already finished".into()));
        }
        let mut manifest_text = String::new();
        let mut provenance_text = String::new();
        let mut staged_text = String::new();
        let mut rows = Vec::new();
        let mut provenance_rows = 0;
        let mut staged_rows = 0;

        for item in items {
            if item.annotations.task != self.task {
                return Err(Error::InvalidInput(format!(
                    "`{}` has {} annotations in a {} dataset",
                    item.name, item.annotations.task, self.task
                )));
            }
            if self.task == Task::Classification {
                let tag = item.annotations.class_tag.as_deref().unwrap_or_default();
                if item.name.split('/').next() != Some(tag) || !item.name.contains('/') {
                    return Err(Error::InvalidInput(format!(
                        "classification item `{}` must live under `{tag}/`",
                        item.name
                    )));
                }
            } else if item.name.contains('/') {
                return Err(Error::InvalidInput(format!(
                    "item name `{}` must be a plain file name",
                    item.name
                )));
            }
            item.annotations
                .validate(item.image.dimensions())
                .map_err(|msg| Error::InvalidInput(format!("`{}`: {msg}", item.name)))?;

            let rel = self.image_rel_path(&item.name);
            let path = self.out_dir.join(&rel);
            let bytes = encode(&image::DynamicImage::ImageRgb8(item.image.clone()), &path)?;
            write_atomic(&path, &bytes)?;
            let digest = sha256_hex(&bytes);
            manifest_text.push_str(&format!("{rel}\t{digest}\n"));
            rows.push(ManifestRow {
                relative_path: rel,
                sha256: digest,
            });

            match self.task {
                Task::Classification => {}
                Task::Detection | Task::Segmentation => {
                    if let Some(mask) = &item.annotations.index_mask {
                        let mask_path = self
                            .out_dir
                            .join("masks")
                            .join(format!("{}.png", stem(&item.name)));
                        let gray = GrayImage::from_raw(
                            mask.width(),
                            mask.height(),
                            mask.as_raw().to_vec(),
                        )
                        .expect("mask buffer matches dims");
                        let bytes = encode(&image::DynamicImage::ImageLuma8(gray), &mask_path)?;
                        write_atomic(&mask_path, &bytes)?;
                    }
                    let staged = StagedItem {
                        name: item.name.clone(),
                        width: item.image.width(),
                        height: item.image.height(),
                        boxes: item.annotations.boxes.clone(),
                        class_map: item.annotations.class_map.clone(),
                    };
                    staged_text.push_str(&serde_json::to_string(&staged).expect("serializable"));
                    staged_text.push('\n');
                    staged_rows += 1;
                }
            }
            if let Some(record) = &item.provenance {
                provenance_text.push_str(&serde_json::to_string(record).expect("serializable"));
                provenance_text.push('\n');
                provenance_rows += 1;
            }
        }

        append(&self.out_dir.join(MANIFEST_FILE), &manifest_text)?;
        append(&self.out_dir.join(PROVENANCE_FILE), &provenance_text)?;
        append(&self.out_dir.join(STAGING_FILE), &staged_text)?;
        self.progress.manifest_rows += rows.len();
        self.progress.provenance_rows += provenance_rows;
        self.progress.staged_rows += staged_rows;
        append(
            &self.out_dir.join(PROGRESS_FILE),
            &format!(
                "{}\t{}\t{}\n",
                self.progress.manifest_rows,
                self.progress.provenance_rows,
                self.progress.staged_rows
            ),
        )?;
        self.manifest.rows.extend(rows);
        self.groups_done += 1;
        Ok(())
    }

    /// Writes the task's annotation file and removes bookkeeping files.
    pub fn finish(self) -> Result<Manifest> {
        if self.complete {
            return Ok(self.manifest);
        }
        let staging_path = self.out_dir.join(STAGING_FILE);
        let staged: Vec<StagedItem> = read_lines(&staging_path)?
            .iter()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::malformed(&staging_path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<_>>()?;

        match self.task {
            Task::Classification => {}
            Task::Detection => {
                let names: BTreeSet<&str> = staged
                    .iter()
                    .flat_map(|s| s.boxes.iter().map(|b| b.label.as_str()))
                    .collect();
                let categories: Vec<CocoCategory> = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| CocoCategory {
                        id: i as u64 + 1,
                        name: n.to_string(),
                    })
                    .collect();
                let ids: BTreeMap<&str, u64> =
                    categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
                let mut coco = CocoDataset {
                    categories: categories.clone(),
                    ..CocoDataset::default()
                };
                for (i, item) in staged.iter().enumerate() {
                    let image_id = i as u64 + 1;
                    coco.images.push(CocoImage {
                        id: image_id,
                        file_name: item.name.clone(),
                        width: item.width,
                        height: item.height,
                    });
                    for b in &item.boxes {
                        coco.annotations.push(CocoAnnotation {
                            id: coco.annotations.len() as u64 + 1,
                            image_id,
                            category_id: ids[b.label.as_str()],
                            bbox: [
                                f64::from(b.x_min),
                                f64::from(b.y_min),
                                f64::from(b.width()),
                                f64::from(b.height()),
                            ],
                            area: b.area() as f64,
                            iscrowd: 0,
                            score: (b.score < 1.0).then_some(b.score),
                        });
                    }
                }
                let path = self.out_dir.join("annotations.json");
                let body = serde_json::to_string_pretty(&coco).expect("serializable");
                write_atomic(&path, body.as_bytes())?;
            }
            Task::Segmentation => {
                let mut merged: BTreeMap<u8, String> = BTreeMap::new();
                for item in &staged {
                    for (idx, name) in &item.class_map {
                        match merged.get(idx) {
                            Some(existing) if existing != name => {
                                return Err(Error::InvalidInput(format!(
                                    "class index {idx} is both `{existing}` and `{name}`"
                                )));
                            }
                            _ => {
                                merged.insert(*idx, name.clone());
                            }
                        }
                    }
                }
                let as_json: BTreeMap<String, String> = merged
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect();
                let path = self.out_dir.join("classes.json");
                let body = serde_json::to_string_pretty(&as_json).expect("serializable");
                write_atomic(&path, body.as_bytes())?;
            }
        }
        for file in [STAGING_FILE, PROGRESS_FILE] {
            let path = self.out_dir.join(file);
            if path.exists() {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(self.manifest)
    }
}

/// Writes a whole dataset, one item per group.
pub fn write_dataset(items: &[DatasetItem], out_dir: &Path, task: Task) -> Result<Manifest> {
    let mut writer = DatasetWriter::create(out_dir, task)?;
    for item in items {
        writer.write_group(std::slice::from_ref(item))?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use image::{Rgb, RgbImage};

    use super::*;
    use crate::dataset::{load_dataset, AnnotationSet};

    fn items() -> Vec<DatasetItem> {
        (0..3)
            .map(|i| {
                DatasetItem::new(
                    format!("img{i}.png"),
                    RgbImage::from_fn(8, 6, |x, y| Rgb([x as u8 * 20, y as u8 * 30, i as u8])),
                    AnnotationSet::detection(
                        vec![BBox::new(1, 1, 4 + i, 5, "car").with_score(0.5)],
                    ),
                )
            })
            .collect()
    }

    #[test]
    fn manifest_counts_and_digest_sensitivity() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let mut data = items();
        let manifest = write_dataset(&data, &out, Task::Detection).unwrap();
        assert_eq!(manifest.len(), data.len());
        assert_eq!(Manifest::read(&out.join(MANIFEST_FILE)).unwrap(), manifest);
        assert!(!out.join(PROGRESS_FILE).exists());
        assert_eq!(load_dataset(&out, Task::Detection).unwrap(), data);

        // One flipped pixel changes exactly that row's digest.
        data[1].image.put_pixel(0, 0, Rgb([255, 255, 255]));
        let out2 = dir.path().join("out2");
        let manifest2 = write_dataset(&data, &out2, Task::Detection).unwrap();
        let changed: Vec<bool> = manifest
            .rows
            .iter()
            .zip(&manifest2.rows)
            .map(|(a, b)| a.sha256 != b.sha256)
            .collect();
        assert_eq!(changed, vec![false, true, false]);
    }

    #[test]
    fn refuses_non_empty_output() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("junk"), "x").unwrap();
        assert!(matches!(
            DatasetWriter::create(dir.path(), Task::Detection),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn resume_truncates_to_last_complete_group() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let data = items();
        let mut writer = DatasetWriter::create(&out, Task::Detection).unwrap();
        writer.write_group(&data[..1]).unwrap();
        writer.write_group(&data[1..2]).unwrap();
        // Simulate a crash after a group's image landed but before its rows did.
        drop(writer);
        append(&out.join(MANIFEST_FILE), "images/img2.png\tdeadbeef\n").unwrap();

        let mut writer = DatasetWriter::resume(&out, Task::Detection).unwrap();
        assert_eq!(writer.groups_done(), 2);
        writer.write_group(&data[2..]).unwrap();
        writer.finish().unwrap();

        let fresh = dir.path().join("fresh");
        write_dataset(&data, &fresh, Task::Detection).unwrap();
        for file in [MANIFEST_FILE, PROVENANCE_FILE, "annotations.json"] {
            assert_eq!(
                fs::read(out.join(file)).unwrap(),
                fs::read(fresh.join(file)).unwrap(),
                "{file}"
            );
        }
        assert!(DatasetWriter::resume(&out, Task::Detection)
            .unwrap()
            .is_complete());
    }
}
