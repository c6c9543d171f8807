//! End-to-end runs: gallery preparation, dataset augmentation, evaluation
//! and single-image previews.

mod config;
mod evaluate;
mod preview;

pub use config::{RunConfig, DEFAULT_INDEX_FILE, DEFAULT_RATIO_FILE};
pub use evaluate::run_evaluate;
pub use preview::{run_preview, run_preview_with, PreviewOutput, MARKER_COLOR, OVERLAY_BOX_COLOR};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use image::{imageops, RgbImage};
use rayon::prelude::*;

use crate::backends::Backends;
use crate::compositor::{
    base_reference, blend, choose_position, choose_scale, fit_scale, rescale_object,
    CompositeResult, ScaleChoice,
};
use crate::context::{match_with_cache, CategoryEmbeddings, MatchResult};
use crate::dataset::{
    open_dataset, partition_mask, propagate_annotations, AugmentationRecord, DatasetItem,
    DatasetWriter, MatchSummary, Task,
};
use crate::error::{Error, Result};
use crate::gallery::{build_ratio_table, GalleryIndex, RatioTable};
use crate::prompt::{build_prompt_for_box, pick_object_box, PromptBundle};
use crate::seed::derive_seed;
use crate::types::{BBox, BinaryMask};

/// Donor draws per category before moving on.
pub const DONOR_RETRIES: usize = 5;

/// Read-only state shared by all workers.
pub struct RunContext {
    pub config: RunConfig,
    pub index: GalleryIndex,
    pub ratios: RatioTable,
    pub backends: Backends,
    pub embeddings: CategoryEmbeddings,
}

impl RunContext {
    /// Loads (or builds in memory) the gallery index and ratio table and
    /// instantiates the configured backends.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let index = load_or_build_index(config)?;
        let backends = Backends::from_config(&config.backends, index.categories())?;
        Self::with_backends(config, index, backends)
    }

    pub fn with_backends(
        config: &RunConfig,
        index: GalleryIndex,
        backends: Backends,
    ) -> Result<Self> {
        config.validate()?;
        let ratio_path = config.ratio_table_path()?;
        let ratios = if ratio_path.is_file() {
            RatioTable::read_tsv(&ratio_path)?
        } else {
            build_ratio_table(&index, backends.detector.as_ref())
        };
        let embeddings = CategoryEmbeddings::build(index.categories(), backends.embedder.as_ref())?;
        Ok(RunContext {
            config: config.clone(),
            index,
            ratios,
            backends,
            embeddings,
        })
    }
}

pub fn load_or_build_index(config: &RunConfig) -> Result<GalleryIndex> {
    let gallery_dir = config.gallery_dir()?;
    let index_path = config.index_path()?;
    if index_path.is_file() {
        GalleryIndex::read_cache(&index_path, gallery_dir)
    } else {
        GalleryIndex::build(gallery_dir)
    }
}

/// Builds the gallery index and ratio table and writes both.
/// Returns `(index_path, ratio_table_path)`.
pub fn run_build_gallery(config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    config.validate()?;
    let index = GalleryIndex::build(config.gallery_dir()?)?;
    let backends = Backends::from_config(&config.backends, index.categories())?;
    run_build_gallery_with(config, &index, &backends)
}

pub fn run_build_gallery_with(
    config: &RunConfig,
    index: &GalleryIndex,
    backends: &Backends,
) -> Result<(PathBuf, PathBuf)> {
    let table = build_ratio_table(index, backends.detector.as_ref());
    let index_path = config.index_path()?;
    let ratio_path = config.ratio_table_path()?;
    index.write_cache(&index_path)?;
    table.write_tsv(&ratio_path)?;
    Ok((index_path, ratio_path))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    /// Base images handled by this invocation.
    pub images_processed: usize,
    /// Base images that received at least one paste.
    pub images_augmented: usize,
    pub images_passed_through: usize,
    /// Base images already on disk from an earlier interrupted run.
    pub images_resumed: usize,
    /// Augmentation candidates passed through because no donor object was found.
    pub donors_skipped: usize,
    pub outputs_written: usize,
    pub wall_time: Duration,
    pub stage_timings: BTreeMap<String, Duration>,
}

impl RunReport {
    fn add_time(&mut self, stage: &str, elapsed: Duration) {
        *self.stage_timings.entry(stage.to_string()).or_default() += elapsed;
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "images_processed\t{}", self.images_processed);
        let _ = writeln!(out, "images_augmented\t{}", self.images_augmented);
        let _ = writeln!(out, "images_passed_through\t{}", self.images_passed_through);
        let _ = writeln!(out, "images_resumed\t{}", self.images_resumed);
        let _ = writeln!(out, "donors_skipped\t{}", self.donors_skipped);
        let _ = writeln!(out, "outputs_written\t{}", self.outputs_written);
        let _ = writeln!(out, "wall_time_s\t{:.3}", self.wall_time.as_secs_f64());
        for (stage, t) in &self.stage_timings {
            let _ = writeln!(out, "time_{stage}_s\t{:.3}", t.as_secs_f64());
        }
        out
    }
}

/// Donor object after segmentation, cropped to its prompt box.
#[derive(Debug, Clone)]
pub struct DonorObject {
    pub relative_path: String,
    pub category: String,
    pub bbox: BBox,
    pub prompt: PromptBundle,
    pub crop: RgbImage,
    pub mask: BinaryMask,
}

/// Per-base-image decisions shared by all its variants.
#[derive(Debug, Clone)]
pub struct ItemPlan {
    pub matched: MatchResult,
    pub chosen: String,
    pub donor: Option<DonorObject>,
}

/// One rendered variant.
#[derive(Debug, Clone)]
pub struct Variant {
    pub composite: CompositeResult,
    pub scale: ScaleChoice,
}

pub fn item_seed(run_seed: u64, name: &str) -> u64 {
    derive_seed(run_seed, &[b"item", name.as_bytes()])
}

pub fn variant_seed(run_seed: u64, name: &str, variant: u32) -> u64 {
    derive_seed(
        run_seed,
        &[b"variant", name.as_bytes(), &variant.to_le_bytes()],
    )
}

fn split_name(name: &str) -> (&str, &str) {
    let (dir, file) = match name.rfind('/') {
        Some(i) => (&name[..=i], &name[i + 1..]),
        None => ("", name),
    };
    let stem = match file.rfind('.') {
        Some(i) if i > 0 => &file[..i],
        _ => file,
    };
    (dir, stem)
}

/// Output name of an unmodified base image.
pub fn passthrough_name(name: &str) -> String {
    let (dir, stem) = split_name(name);
    format!("{dir}{stem}.png")
}

/// Output name of the `k`-th augmented variant.
pub fn variant_name(name: &str, k: u32) -> String {
    let (dir, stem) = split_name(name);
    format!("{dir}{stem}_aug{k}.png")
}

/// Path of an output item relative to the output root.
pub fn output_rel_path(task: Task, name: &str) -> String {
    match task {
        Task::Classification => name.to_string(),
        Task::Detection | Task::Segmentation => format!("images/{name}"),
    }
}

impl RunContext {
    fn try_donor(&self, category: &str, seed: u64) -> Result<Option<DonorObject>> {
        let entry = self.index.sample_donor(category, seed)?;
        let image = entry.load_image()?;
        let bbox = match &entry.cached_bbox {
            Some(b) if b.is_valid_in(image.width(), image.height()) => b.clone(),
            _ => match pick_object_box(&image, category, self.backends.detector.as_ref()) {
                Ok(b) => b,
                Err(Error::NoObjectFound { .. }) => return Ok(None),
                Err(e) => return Err(e),
            },
        };
        let prompt = build_prompt_for_box(
            &image,
            bbox.clone(),
            &self.config.prompt,
            derive_seed(seed, &[b"prompt"]),
            self.backends.saliency.as_ref(),
        )?;
        let full_mask = self.backends.segmenter.segment(&image, &prompt)?;
        let mask = full_mask.crop(bbox.x_min, bbox.y_min, bbox.width(), bbox.height());
        if mask.is_empty() {
            return Ok(None);
        }
        let crop = imageops::crop_imm(&image, bbox.x_min, bbox.y_min, bbox.width(), bbox.height())
            .to_image();
        Ok(Some(DonorObject {
            relative_path: entry.relative_path.clone(),
            category: category.to_string(),
            bbox,
            prompt,
            crop,
            mask,
        }))
    }

    /// Resamples up to [`DONOR_RETRIES`] donors from each candidate category.
    fn find_donor(&self, categories: &[&str], seed: u64) -> Result<Option<DonorObject>> {
        for category in categories {
            for attempt in 0..DONOR_RETRIES {
                let s = derive_seed(
                    seed,
                    &[
                        b"donor",
                        category.as_bytes(),
                        &(attempt as u64).to_le_bytes(),
                    ],
                );
                if let Some(donor) = self.try_donor(category, s)? {
                    return Ok(Some(donor));
                }
            }
        }
        Ok(None)
    }

    /// Captions and matches the base image, then picks a donor object: the
    /// chosen category first, then the runner-up.
    pub fn plan(&self, base: &RgbImage, name: &str) -> Result<ItemPlan> {
        let seed = item_seed(self.config.seed, name);
        let matched = match_with_cache(
            base,
            &self.embeddings,
            self.backends.captioner.as_ref(),
            self.backends.embedder.as_ref(),
        )?;
        let chosen = matched
            .choose_top_k(self.config.top_k, derive_seed(seed, &[b"top_k"]))
            .to_string();
        let mut candidates = vec![chosen.as_str()];
        if let Some(next) = matched
            .ranking
            .iter()
            .map(|s| s.category.as_str())
            .find(|c| *c != chosen)
        {
            candidates.push(next);
        }
        let donor = self.find_donor(&candidates, seed)?;
        Ok(ItemPlan {
            chosen: chosen.clone(),
            matched,
            donor,
        })
    }

    /// Scales, places and pastes the donor object for one variant.
    pub fn render(&self, item: &DatasetItem, donor: &DonorObject, variant: u32) -> Result<Variant> {
        let seed = variant_seed(self.config.seed, &item.name, variant);
        let base_dims = item.image.dimensions();
        let image_area = u64::from(base_dims.0) * u64::from(base_dims.1);
        let reference = base_reference(&item.annotations.reference_objects(), image_area);
        let scale = choose_scale(
            &self.ratios,
            &donor.category,
            reference.category.as_deref(),
            donor.bbox.area() as f64,
            reference.area,
            image_area as f64,
            derive_seed(seed, &[b"scale"]),
        )?;
        let (cw, ch) = donor.crop.dimensions();
        let smallest = 2.0 / f64::from(cw.min(ch).max(1));
        let s = fit_scale(scale.scale.max(smallest), (cw, ch), base_dims);
        let (crop, mask) = rescale_object(&donor.crop, &donor.mask, s)?;
        let placement = choose_position(
            &item.annotations.occupied_boxes(),
            crop.dimensions(),
            base_dims,
            s,
            self.config.composite.max_overlap_iou,
            self.config.composite.max_attempts,
            derive_seed(seed, &[b"position"]),
        )?;
        let composite = blend(
            &item.image,
            &crop,
            &mask,
            &placement,
            self.config.composite.feather_px,
            &donor.category,
        )?;
        Ok(Variant { composite, scale })
    }

    fn record(
        &self,
        item: &DatasetItem,
        plan: &ItemPlan,
        donor: &DonorObject,
        v: &Variant,
        k: u32,
        out_name: &str,
    ) -> AugmentationRecord {
        AugmentationRecord {
            output_path: output_rel_path(self.config.task, out_name),
            base_path: item.name.clone(),
            donor_path: donor.relative_path.clone(),
            donor_category: donor.category.clone(),
            caption: plan.matched.base_caption.clone(),
            chosen_by: MatchSummary::from_result(&plan.matched, &plan.chosen),
            placement: v.composite.placement,
            prompt_mode: donor.prompt.mode,
            prompt: donor.prompt.clone(),
            target_ratio: v.scale.ratio,
            ratio_fallback: v.scale.fallback,
            variant: k,
            seed: self.config.seed,
        }
    }
}

#[derive(Default)]
struct Outcome {
    items: Vec<DatasetItem>,
    augmented: bool,
    skipped: bool,
    match_time: Duration,
    composite_time: Duration,
}

fn process(ctx: &RunContext, item: DatasetItem, chosen: bool) -> Result<Outcome> {
    let mut outcome = Outcome::default();
    if chosen {
        let t = Instant::now();
        let plan = ctx.plan(&item.image, &item.name)?;
        outcome.match_time = t.elapsed();
        if let Some(donor) = &plan.donor {
            let t = Instant::now();
            for k in 0..ctx.config.variants_per_image {
                let v = ctx.render(&item, donor, k)?;
                let name = variant_name(&item.name, k);
                let annotations = propagate_annotations(
                    &item.annotations,
                    &v.composite,
                    ctx.config.keep_threshold,
                );
                let record = ctx.record(&item, &plan, donor, &v, k, &name);
                let mut out = DatasetItem::new(name, v.composite.image, annotations);
                out.provenance = Some(record);
                outcome.items.push(out);
            }
            outcome.composite_time = t.elapsed();
            outcome.augmented = true;
            return Ok(outcome);
        }
        outcome.skipped = true;
    }
    let name = passthrough_name(&item.name);
    outcome.items.push(DatasetItem { name, ..item });
    Ok(outcome)
}

/// Adds every gallery category missing from a segmentation class map, in
/// sorted order, after the highest index in use.
pub fn extend_class_map(
    class_map: &BTreeMap<u8, String>,
    categories: &[String],
) -> Result<BTreeMap<u8, String>> {
    let mut out = class_map.clone();
    let known: BTreeSet<&str> = class_map.values().map(String::as_str).collect();
    let mut missing: Vec<&String> = categories
        .iter()
        .filter(|c| !known.contains(c.as_str()))
        .collect();
    missing.sort();
    let mut next = out
        .keys()
        .next_back()
        .map_or(Some(1u8), |k| k.checked_add(1));
    for category in missing {
        let idx =
            next.ok_or_else(|| Error::InvalidInput("more than 255 segmentation classes".into()))?;
        out.insert(idx, category.clone());
        next = idx.checked_add(1);
    }
    Ok(out)
}

fn check_output_names(task: Task, names: &[String], chosen: &[bool], variants: u32) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, &c) in names.iter().zip(chosen) {
        let outs: Vec<String> = if c {
            // A skipped donor falls back to the passthrough name.
            std::iter::once(passthrough_name(name))
                .chain((0..variants).map(|k| variant_name(name, k)))
                .collect()
        } else {
            vec![passthrough_name(name)]
        };
        for out in outs {
            if !seen.insert(out.clone()) {
                return Err(Error::InvalidInput(format!(
                    "two source images map to the same output `{}`",
                    output_rel_path(task, &out)
                )));
            }
        }
    }
    Ok(())
}

pub fn run_augment(config: &RunConfig) -> Result<RunReport> {
    let ctx = RunContext::prepare(config)?;
    run_augment_with(&ctx)
}

/// Augments the source dataset into `output_dir`. Base images are processed
/// in parallel batches and written in source order.
pub fn run_augment_with(ctx: &RunContext) -> Result<RunReport> {
    let started = Instant::now();
    let config = &ctx.config;
    let mut report = RunReport::default();

    let t = Instant::now();
    let mut reader = open_dataset(config.source_dir()?, config.task)?;
    let names = reader.names();
    let chosen = partition_mask(
        names.len(),
        config.fraction,
        derive_seed(config.seed, &[b"partition"]),
    );
    check_output_names(config.task, &names, &chosen, config.variants_per_image)?;
    let class_map = match config.task {
        Task::Segmentation => Some(extend_class_map(
            reader.class_map(),
            ctx.index.categories(),
        )?),
        _ => None,
    };
    report.add_time("load", t.elapsed());

    let out_dir = config.output_dir()?;
    let mut writer = if config.resume {
        DatasetWriter::resume(out_dir, config.task)?
    } else {
        DatasetWriter::create(out_dir, config.task)?
    };
    if writer.is_complete() {
        report.images_resumed = names.len();
        report.wall_time = started.elapsed();
        return Ok(report);
    }
    let done = writer.groups_done().min(names.len());
    reader.skip_items(done);
    report.images_resumed = done;

    let batch = rayon::current_num_threads().max(1) * 4;
    let limit = config
        .stop_after
        .map_or(names.len(), |n| (done + n).min(names.len()));
    let mut position = done;
    while position < limit {
        let t = Instant::now();
        let end = (position + batch).min(limit);
        let mut items = Vec::with_capacity(end - position);
        for _ in position..end {
            let mut item = reader.next().expect("reader yields every listed name")?;
            if let Some(map) = &class_map {
                item.annotations.class_map = map.clone();
            }
            items.push(item);
        }
        report.add_time("load", t.elapsed());

        let outcomes: Vec<Result<Outcome>> = items
            .into_par_iter()
            .zip(&chosen[position..end])
            .map(|(item, &c)| process(ctx, item, c))
            .collect();

        let t = Instant::now();
        for outcome in outcomes {
            let outcome = outcome?;
            writer.write_group(&outcome.items)?;
            report.images_processed += 1;
            report.outputs_written += outcome.items.len();
            if outcome.augmented {
                report.images_augmented += 1;
            } else {
                report.images_passed_through += 1;
            }
            if outcome.skipped {
                report.donors_skipped += 1;
            }
            report.add_time("match", outcome.match_time);
            report.add_time("composite", outcome.composite_time);
        }
        report.add_time("write", t.elapsed());
        position = end;
    }
    if limit < names.len() {
        report.wall_time = started.elapsed();
        return Ok(report);
    }
    let t = Instant::now();
    writer.finish()?;
    report.add_time("write", t.elapsed());
    report.wall_time = started.elapsed();
    Ok(report)
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_names() {
        assert_eq!(passthrough_name("cat/a.jpg"), "cat/a.png");
        assert_eq!(variant_name("x.png", 2), "x_aug2.png");
        assert_eq!(variant_name("noext", 0), "noext_aug0.png");
    }

    #[test]
    fn name_collisions_rejected() {
        let names = vec!["a.jpg".to_string(), "a.png".to_string()];
        assert!(check_output_names(Task::Detection, &names, &[false, false], 1).is_err());
        let names = vec!["a.png".to_string(), "a_aug0.png".to_string()];
        assert!(check_output_names(Task::Detection, &names, &[true, false], 1).is_err());
        assert!(check_output_names(Task::Detection, &names, &[false, false], 1).is_ok());
    }

    #[test]
    fn class_map_extension() {
        let base = BTreeMap::from([(0, "background".to_string()), (3, "car".to_string())]);
        let cats = vec!["dog".to_string(), "car".to_string(), "ant".to_string()];
        let out = extend_class_map(&base, &cats).unwrap();
        assert_eq!(out[&4], "ant");
        assert_eq!(out[&5], "dog");
        assert_eq!(out.len(), 4);
    }
}
