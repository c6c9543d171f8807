//! Rescaling, placement and mask-guided pasting of a donor object.
//!
//! With feathering off, the output pixel is the donor pixel wherever the
//! translated mask is 1 and the base pixel everywhere else.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::RatioTable;
use crate::seed::rng_from_seed;
use crate::types::{BBox, BinaryMask};

pub const DEFAULT_MAX_OVERLAP_IOU: f64 = 0.3;
pub const DEFAULT_MAX_ATTEMPTS: u32 = 20;
/// Share of the base image used as reference area when it has no annotated objects.
pub const UNANNOTATED_REFERENCE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Linear factor applied to the donor crop.
    pub scale: f64,
    /// Top-left corner in base coordinates.
    pub x: u32,
    pub y: u32,
    /// Size of the pasted crop.
    pub width: u32,
    pub height: u32,
    pub attempts: u32,
}

impl Placement {
    pub fn as_box(&self, label: &str) -> BBox {
        BBox::new(
            self.x,
            self.y,
            self.x + self.width,
            self.y + self.height,
            label,
        )
    }
}

#[derive(Debug, Clone)]
pub struct CompositeResult {
    pub image: RgbImage,
    pub pasted_mask: BinaryMask,
    pub donor_category: String,
    pub placement: Placement,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeSettings {
    pub feather_px: u32,
    pub max_overlap_iou: f64,
    pub max_attempts: u32,
}

impl Default for CompositeSettings {
    fn default() -> Self {
        CompositeSettings {
            feather_px: 0,
            max_overlap_iou: DEFAULT_MAX_OVERLAP_IOU,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// Resizes crop (bilinear) and mask (nearest neighbour) by the same factor.
pub fn rescale_object(
    crop: &RgbImage,
    mask: &BinaryMask,
    scale: f64,
) -> Result<(RgbImage, BinaryMask)> {
    if crop.dimensions() != mask.dims() {
        return Err(Error::DimensionMismatch {
            left: crop.dimensions(),
            right: mask.dims(),
        });
    }
    let (w, h) = crop.dimensions();
    let degenerate = Error::DegenerateScale {
        scale,
        width: w,
        height: h,
    };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(degenerate);
    }
    let new_w = (f64::from(w) * scale).round();
    let new_h = (f64::from(h) * scale).round();
    if new_w < 1.0
        || new_h < 1.0
        || new_w * new_h < 4.0
        || new_w > f64::from(u32::MAX)
        || new_h > f64::from(u32::MAX)
    {
        return Err(degenerate);
    }
    let (new_w, new_h) = (new_w as u32, new_h as u32);
    if (new_w, new_h) == (w, h) {
        return Ok((crop.clone(), mask.clone()));
    }

    let sx = f64::from(w) / f64::from(new_w);
    let sy = f64::from(h) / f64::from(new_h);
    let scaled = RgbImage::from_fn(new_w, new_h, |ox, oy| {
        let fx = ((f64::from(ox) + 0.5) * sx - 0.5).clamp(0.0, f64::from(w - 1));
        let fy = ((f64::from(oy) + 0.5) * sy - 0.5).clamp(0.0, f64::from(h - 1));
        let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (fx - f64::from(x0), fy - f64::from(y0));
        let mut out = [0u8; 3];
        for (c, slot) in out.iter_mut().enumerate() {
            let p = |x: u32, y: u32| f64::from(crop.get_pixel(x, y).0[c]);
            let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
            let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
            *slot = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    });
    let scaled_mask = BinaryMask::from_fn(new_w, new_h, |ox, oy| {
        let x = (((f64::from(ox) + 0.5) * sx) as u32).min(w - 1);
        let y = (((f64::from(oy) + 0.5) * sy) as u32).min(h - 1);
        mask.get(x, y)
    });
    Ok((scaled, scaled_mask))
}

/// Scene-scale anchor for the donor.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseReference {
    pub area: f64,
    /// Category of the largest annotated object, if any.
    pub category: Option<String>,
}

/// Largest annotated object, else a fixed fraction of the image area.
/// Ties on area go to the first object in `objects`.
pub fn base_reference(objects: &[(String, u64)], image_area: u64) -> BaseReference {
    let mut best: Option<&(String, u64)> = None;
    for object in objects.iter().filter(|(_, area)| *area > 0) {
        if best.is_none_or(|b| object.1 > b.1) {
            best = Some(object);
        }
    }
    match best {
        Some((category, area)) => BaseReference {
            area: *area as f64,
            category: Some(category.clone()),
        },
        None => BaseReference {
            area: image_area as f64 * UNANNOTATED_REFERENCE_FRACTION,
            category: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleChoice {
    pub scale: f64,
    /// Sampled target area ratio.
    pub ratio: f64,
    pub fallback: bool,
}

/// Samples `r ~ U[ratio_min, ratio_max]` for (donor, base-context) and returns
/// `sqrt(r * reference_area / donor_box_area)`. For unseen pairs the fallback
/// interval is a share of `base_image_area`, which then is the reference.
pub fn choose_scale(
    table: &RatioTable,
    donor_category: &str,
    base_context_category: Option<&str>,
    donor_box_area: f64,
    base_ref_area: f64,
    base_image_area: f64,
    seed: u64,
) -> Result<ScaleChoice> {
    if !(donor_box_area > 0.0 && base_ref_area > 0.0 && base_image_area > 0.0) {
        return Err(Error::InvalidInput("areas must be positive".into()));
    }
    let interval = match base_context_category {
        Some(base) => table.interval(donor_category, base),
        None => table.interval(donor_category, ""),
    };
    let mut rng = rng_from_seed(seed);
    let ratio = if interval.min < interval.max {
        rng.random_range(interval.min..=interval.max)
    } else {
        interval.min
    };
    let reference = if interval.fallback {
        base_image_area
    } else {
        base_ref_area
    };
    Ok(ScaleChoice {
        scale: (ratio * reference / donor_box_area).sqrt(),
        ratio,
        fallback: interval.fallback,
    })
}

/// Largest scale not exceeding `scale` at which a `w x h` crop fits the base.
pub fn fit_scale(scale: f64, crop_dims: (u32, u32), base_dims: (u32, u32)) -> f64 {
    let limit_w = f64::from(base_dims.0) / f64::from(crop_dims.0.max(1));
    let limit_h = f64::from(base_dims.1) / f64::from(crop_dims.1.max(1));
    scale.min(limit_w).min(limit_h)
}

/// Proposes uniform top-left corners until one overlaps every existing box
/// with IoU at most `max_overlap_iou`; after `max_attempts` proposals the one
/// with the smallest worst-case overlap wins.
pub fn choose_position(
    existing: &[BBox],
    paste_dims: (u32, u32),
    base_dims: (u32, u32),
    scale: f64,
    max_overlap_iou: f64,
    max_attempts: u32,
    seed: u64,
) -> Result<Placement> {
    let (w, h) = paste_dims;
    let (base_w, base_h) = base_dims;
    if w == 0 || h == 0 || w > base_w || h > base_h {
        return Err(Error::PasteTooLarge {
            paste_w: w,
            paste_h: h,
            base_w,
            base_h,
        });
    }
    let mut rng = rng_from_seed(seed);
    let max_attempts = max_attempts.max(1);
    let mut best: Option<(f64, u32, u32)> = None;
    for attempt in 1..=max_attempts {
        let x = rng.random_range(0..=base_w - w);
        let y = rng.random_range(0..=base_h - h);
        let candidate = BBox::new(x, y, x + w, y + h, "");
        let worst = existing
            .iter()
            .map(|b| candidate.iou(b))
            .fold(0.0, f64::max);
        if worst <= max_overlap_iou {
            return Ok(Placement {
                scale,
                x,
                y,
                width: w,
                height: h,
                attempts: attempt,
            });
        }
        if best.is_none_or(|(bw, _, _)| worst < bw) {
            best = Some((worst, x, y));
        }
    }
    let (_, x, y) = best.expect("at least one attempt");
    Ok(Placement {
        scale,
        x,
        y,
        width: w,
        height: h,
        attempts: max_attempts,
    })
}

/// Blend weight for every mask cell: 1 inside, ramping linearly over the
/// `feather_px` pixels nearest the mask boundary.
fn feather_weights(mask: &BinaryMask, feather_px: u32) -> Vec<f64> {
    let (w, h) = mask.dims();
    let reach = i64::from(feather_px) + 1;
    let mut weights = vec![0.0; w as usize * h as usize];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let mut nearest = reach as f64;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                    let outside = nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h);
                    if outside || !mask.get(nx as u32, ny as u32) {
                        nearest = nearest.min(((dx * dx + dy * dy) as f64).sqrt());
                    }
                }
            }
            weights[(y * w + x) as usize] = (nearest / reach as f64).min(1.0);
        }
    }
    weights
}

pub fn blend(
    base: &RgbImage,
    donor_crop: &RgbImage,
    donor_mask: &BinaryMask,
    placement: &Placement,
    feather_px: u32,
    donor_category: &str,
) -> Result<CompositeResult> {
    if donor_crop.dimensions() != donor_mask.dims() {
        return Err(Error::DimensionMismatch {
            left: donor_crop.dimensions(),
            right: donor_mask.dims(),
        });
    }
    let (cw, ch) = donor_crop.dimensions();
    let (bw, bh) = base.dimensions();
    if u64::from(placement.x) + u64::from(cw) > u64::from(bw)
        || u64::from(placement.y) + u64::from(ch) > u64::from(bh)
    {
        return Err(Error::OutOfBounds(format!(
            "{cw}x{ch} crop at ({}, {}) leaves the {bw}x{bh} base",
            placement.x, placement.y
        )));
    }
    let mut image = base.clone();
    let mut pasted_mask = BinaryMask::new(bw, bh);
    let weights = (feather_px > 0).then(|| feather_weights(donor_mask, feather_px));
    for y in 0..ch {
        for x in 0..cw {
            if !donor_mask.get(x, y) {
                continue;
            }
            let (tx, ty) = (placement.x + x, placement.y + y);
            pasted_mask.set(tx, ty, true);
            let donor = *donor_crop.get_pixel(x, y);
            let pixel = match &weights {
                None => donor,
                Some(weights) => {
                    let alpha = weights[(y * cw + x) as usize];
                    let under = base.get_pixel(tx, ty);
                    let mut out = [0u8; 3];
                    for c in 0..3 {
                        let v =
                            alpha * f64::from(donor.0[c]) + (1.0 - alpha) * f64::from(under.0[c]);
                        out[c] = v.round().clamp(0.0, 255.0) as u8;
                    }
                    Rgb(out)
                }
            };
            image.put_pixel(tx, ty, pixel);
        }
    }
    Ok(CompositeResult {
        image,
        pasted_mask,
        donor_category: donor_category.to_string(),
        placement: *placement,
    })
}
