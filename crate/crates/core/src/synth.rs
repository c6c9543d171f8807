//! Small synthetic galleries and base datasets drawn in the fake detector's
//! palette, for demos and tests without real data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::backends::category_color;
use crate::dataset::{write_dataset, AnnotationSet, DatasetItem, Manifest, Task};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};
use crate::types::{BBox, IndexMask};

/// Black canvas; the fake detector treats black as background.
fn background(width: u32, height: u32) -> RgbImage {
    RgbImage::new(width, height)
}

fn random_box(
    rng: &mut impl Rng,
    width: u32,
    height: u32,
    min: u32,
    max: u32,
) -> (u32, u32, u32, u32) {
    let w = rng.random_range(min..=max.min(width));
    let h = rng.random_range(min..=max.min(height));
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    (x, y, x + w, y + h)
}

fn fill(image: &mut RgbImage, (x0, y0, x1, y1): (u32, u32, u32, u32), color: Rgb<u8>) {
    for y in y0..y1 {
        for x in x0..x1 {
            image.put_pixel(x, y, color);
        }
    }
}

/// Draws one rectangle per label wherever it fits without touching an
/// earlier one (one-pixel gap). Labels that find no room are dropped.
fn draw_objects(
    image: &mut RgbImage,
    rng: &mut impl Rng,
    labels: &[&str],
    min: u32,
    max: u32,
) -> Vec<BBox> {
    let (w, h) = image.dimensions();
    let mut boxes: Vec<BBox> = Vec::new();
    for label in labels {
        for _ in 0..50 {
            let (x0, y0, x1, y1) = random_box(rng, w, h, min, max);
            let grown = BBox::new(
                x0.saturating_sub(1),
                y0.saturating_sub(1),
                x1 + 1,
                y1 + 1,
                "",
            );
            if boxes.iter().all(|b| grown.intersection_area(b) == 0) {
                fill(image, (x0, y0, x1, y1), category_color(label));
                boxes.push(BBox::new(x0, y0, x1, y1, *label));
                break;
            }
        }
    }
    boxes
}

/// Writes a folder-per-category gallery. Every image holds one large object
/// of its own category and, when there are several categories, a smaller
/// object of the next category so that area ratios can be observed.
pub fn write_gallery(
    root: &Path,
    categories: &[&str],
    per_category: usize,
    size: u32,
    seed: u64,
) -> Result<()> {
    if size < 16 {
        return Err(Error::InvalidInput(
            "gallery images must be at least 16 px".into(),
        ));
    }
    for (ci, category) in categories.iter().enumerate() {
        let dir = root.join(category);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_category {
            let mut rng = rng_from_seed(derive_seed(
                seed,
                &[b"gallery", category.as_bytes(), &(i as u64).to_le_bytes()],
            ));
            let mut image = background(size, size);
            let main = [*category];
            draw_objects(&mut image, &mut rng, &main, size / 3, size / 2);
            if categories.len() > 1 {
                let other = [categories[(ci + 1) % categories.len()]];
                draw_objects(&mut image, &mut rng, &other, size / 8, size / 4);
            }
            let path = dir.join(format!("{category}_{i:03}.png"));
            image.save(&path).map_err(|e| Error::image(&path, e))?;
        }
    }
    Ok(())
}

/// Base items with one to three labelled rectangles each.
pub fn dataset_items(
    task: Task,
    n: usize,
    categories: &[&str],
    width: u32,
    height: u32,
    seed: u64,
) -> Vec<DatasetItem> {
    let class_map: BTreeMap<u8, String> = std::iter::once((0u8, "background".to_string()))
        .chain(
            categories
                .iter()
                .enumerate()
                .map(|(i, c)| (i as u8 + 1, c.to_string())),
        )
        .collect();
    (0..n)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, &[b"base", &(i as u64).to_le_bytes()]));
            let mut image = background(width, height);
            // Faint texture keeps captions (digest-based) distinct per image.
            for _ in 0..8 {
                let (x, y) = (rng.random_range(0..width), rng.random_range(0..height));
                image.put_pixel(x, y, Rgb([rng.random_range(1..32), 0, 0]));
            }
            let count = rng.random_range(1..=3usize.min(categories.len().max(1)));
            let labels: Vec<&str> = (0..count)
                .map(|_| categories[rng.random_range(0..categories.len())])
                .collect();
            let side = width.min(height);
            let boxes = draw_objects(
                &mut image,
                &mut rng,
                &labels,
                (side / 8).max(2),
                (side / 3).max(3),
            );
            let file = format!("img_{i:03}.png");
            match task {
                Task::Classification => {
                    let tag = boxes.first().map_or(categories[0], |b| {
                        categories
                            .iter()
                            .copied()
                            .find(|c| *c == b.label)
                            .unwrap_or(categories[0])
                    });
                    DatasetItem::new(
                        format!("{tag}/{file}"),
                        image,
                        AnnotationSet::classification(tag),
                    )
                }
                Task::Detection => DatasetItem::new(file, image, AnnotationSet::detection(boxes)),
                Task::Segmentation => {
                    let mut mask = IndexMask::filled(width, height, 0);
                    for b in &boxes {
                        let idx = class_map
                            .iter()
                            .find(|(_, n)| **n == b.label)
                            .map_or(0, |(i, _)| *i);
                        for y in b.y_min..b.y_max {
                            for x in b.x_min..b.x_max {
                                mask.set(x, y, idx);
                            }
                        }
                    }
                    DatasetItem::new(
                        file,
                        image,
                        AnnotationSet::segmentation(mask, class_map.clone()),
                    )
                }
            }
        })
        .collect()
}

/// Writes [`dataset_items`] in the task layout under `root`.
pub fn write_base_dataset(
    root: &Path,
    task: Task,
    n: usize,
    categories: &[&str],
    width: u32,
    height: u32,
    seed: u64,
) -> Result<(Vec<DatasetItem>, Manifest)> {
    let items = dataset_items(task, n, categories, width, height, seed);
    let manifest = write_dataset(&items, root, task)?;
    Ok((items, manifest))
}
