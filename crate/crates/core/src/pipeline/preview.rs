use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{ensure_dir, variant_name, RunConfig, RunContext};
use crate::dataset::{open_dataset, AnnotationSet, DatasetItem};
use crate::error::{Error, Result};
use crate::gallery::load_rgb;
use crate::prompt::PromptBundle;
use crate::types::BBox;

pub const OVERLAY_BOX_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const MARKER_COLOR: Rgb<u8> = Rgb([255, 0, 255]);

#[derive(Debug, Clone, PartialEq)]
pub struct PreviewOutput {
    pub caption_path: PathBuf,
    pub ranking_path: PathBuf,
    /// Missing when no donor object could be found.
    pub overlay_path: Option<PathBuf>,
    pub composite_path: Option<PathBuf>,
    /// Name the augment run gives this composite.
    pub augment_name: Option<String>,
}

fn draw_box(image: &mut RgbImage, bbox: &BBox) {
    let (w, h) = image.dimensions();
    let (x1, y1) = (
        bbox.x_max.min(w).saturating_sub(1),
        bbox.y_max.min(h).saturating_sub(1),
    );
    for x in bbox.x_min..=x1 {
        image.put_pixel(x, bbox.y_min, OVERLAY_BOX_COLOR);
        image.put_pixel(x, y1, OVERLAY_BOX_COLOR);
    }
    for y in bbox.y_min..=y1 {
        image.put_pixel(bbox.x_min, y, OVERLAY_BOX_COLOR);
        image.put_pixel(x1, y, OVERLAY_BOX_COLOR);
    }
}

/// Donor image with the prompt box outlined and a 3x3 marker per point.
pub fn draw_prompt_overlay(donor: &RgbImage, prompt: &PromptBundle) -> RgbImage {
    let mut out = donor.clone();
    let (w, h) = out.dimensions();
    draw_box(&mut out, &prompt.bbox);
    for p in &prompt.points {
        for y in p.y.saturating_sub(1)..=(p.y + 1).min(h - 1) {
            for x in p.x.saturating_sub(1)..=(p.x + 1).min(w - 1) {
                out.put_pixel(x, y, MARKER_COLOR);
            }
        }
    }
    out
}

/// Finds `image_path` in the source dataset so its annotations drive
/// placement exactly as in an augment run.
fn locate_item(config: &RunConfig, image_path: &Path) -> Result<DatasetItem> {
    let target = fs::canonicalize(image_path).map_err(|e| Error::io(image_path, e))?;
    if let Some(root) = config.source_dir.as_deref().filter(|r| r.is_dir()) {
        if let Ok(mut reader) = open_dataset(root, config.task) {
            let names = reader.names();
            let found = names.iter().position(|name| {
                let candidate = match config.task {
                    crate::dataset::Task::Classification => root.join(name),
                    _ => root.join("images").join(name),
                };
                fs::canonicalize(candidate).is_ok_and(|c| c == target)
            });
            if let Some(i) = found {
                reader.skip_items(i);
                return reader.next().expect("position is in range");
            }
        }
    }
    let image = load_rgb(image_path)?;
    let name = image_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "preview.png".into());
    let annotations = AnnotationSet::empty(config.task, image.dimensions());
    Ok(DatasetItem::new(name, image, annotations))
}

pub fn run_preview(config: &RunConfig, base_image_path: &Path) -> Result<PreviewOutput> {
    let ctx = RunContext::prepare(config)?;
    run_preview_with(&ctx, base_image_path)
}

/// Writes `caption.txt`, `ranking.tsv`, `prompt_overlay.png` and
/// `composite.png` for one base image into `output_dir`. The composite is
/// variant 0 of what an augment run with the same seed produces.
pub fn run_preview_with(ctx: &RunContext, base_image_path: &Path) -> Result<PreviewOutput> {
    let out_dir = ctx.config.output_dir()?;
    ensure_dir(out_dir)?;
    let item = locate_item(&ctx.config, base_image_path)?;
    let plan = ctx.plan(&item.image, &item.name)?;

    let caption_path = out_dir.join("caption.txt");
    fs::write(&caption_path, format!("{}\n", plan.matched.base_caption))
        .map_err(|e| Error::io(&caption_path, e))?;
    let mut ranking = String::from("category\tscore\n");
    for s in &plan.matched.ranking {
        let _ = writeln!(ranking, "{}\t{:.6}", s.category, s.score);
    }
    let ranking_path = out_dir.join("ranking.tsv");
    fs::write(&ranking_path, ranking).map_err(|e| Error::io(&ranking_path, e))?;

    let mut output = PreviewOutput {
        caption_path,
        ranking_path,
        overlay_path: None,
        composite_path: None,
        augment_name: None,
    };
    let Some(donor) = &plan.donor else {
        return Ok(output);
    };
    let donor_image = load_rgb(&ctx.index.root().join(&donor.relative_path))?;
    let overlay_path = out_dir.join("prompt_overlay.png");
    draw_prompt_overlay(&donor_image, &donor.prompt)
        .save(&overlay_path)
        .map_err(|e| Error::image(&overlay_path, e))?;
    let variant = ctx.render(&item, donor, 0)?;
    let composite_path = out_dir.join("composite.png");
    variant
        .composite
        .image
        .save(&composite_path)
        .map_err(|e| Error::image(&composite_path, e))?;
    output.overlay_path = Some(overlay_path);
    output.composite_path = Some(composite_path);
    output.augment_name = Some(variant_name(&item.name, 0));
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{PromptMode, PromptPoint};

    #[test]
    fn overlay_marks_box_and_points() {
        let donor = RgbImage::from_pixel(20, 20, Rgb([10, 10, 10]));
        let prompt = PromptBundle {
            bbox: BBox::new(2, 2, 18, 18, "x"),
            points: vec![PromptPoint::positive(6, 6), PromptPoint::positive(12, 12)],
            mode: PromptMode::BoxPlusCam,
        };
        let out = draw_prompt_overlay(&donor, &prompt);
        let magenta = out.pixels().filter(|p| **p == MARKER_COLOR).count();
        assert_eq!(magenta, 18);
        assert_eq!(*out.get_pixel(2, 10), OVERLAY_BOX_COLOR);
        assert_eq!(*out.get_pixel(17, 10), OVERLAY_BOX_COLOR);
    }
}
