use super::{AnnotationSet, Task, BACKGROUND_INDEX};
use crate::compositor::CompositeResult;
use crate::types::{BBox, BinaryMask};

/// Existing boxes keeping less than this share of their pixels visible are dropped.
pub const DEFAULT_KEEP_THRESHOLD: f64 = 0.2;

/// Share of the box's pixels not covered by `pasted`.
pub fn visible_fraction(bbox: &BBox, pasted: &BinaryMask) -> f64 {
    let x_max = bbox.x_max.min(pasted.width());
    let y_max = bbox.y_max.min(pasted.height());
    let area = bbox.area();
    if area == 0 {
        return 0.0;
    }
    let mut covered = 0u64;
    for y in bbox.y_min..y_max {
        for x in bbox.x_min..x_max {
            covered += u64::from(pasted.get(x, y));
        }
    }
    (area - covered) as f64 / area as f64
}

/// Carries base annotations through a paste.
///
/// * detection: boxes whose visible share drops below `keep_threshold` are
///   removed (never shrunk) and the tight box of the pasted mask is appended
/// * segmentation: pasted pixels take the donor class index, which is added
///   to the class map if new
/// * classification: unchanged
pub fn propagate_annotations(
    base: &AnnotationSet,
    result: &CompositeResult,
    keep_threshold: f64,
) -> AnnotationSet {
    let mut out = base.clone();
    let pasted = &result.pasted_mask;
    match base.task {
        Task::Classification => {}
        Task::Detection => {
            out.boxes
                .retain(|b| visible_fraction(b, pasted) >= keep_threshold);
            if let Some((x0, y0, x1, y1)) = pasted.bounds() {
                out.boxes
                    .push(BBox::new(x0, y0, x1, y1, result.donor_category.clone()));
            }
        }
        Task::Segmentation => {
            let index = match out
                .class_map
                .iter()
                .find(|(_, name)| **name == result.donor_category)
            {
                Some((&idx, _)) => Some(idx),
                None => {
                    // Next index after the highest one in use; 255 classes is the ceiling.
                    let next = out
                        .class_map
                        .keys()
                        .next_back()
                        .map_or(Some(BACKGROUND_INDEX + 1), |&k| k.checked_add(1));
                    if let Some(idx) = next {
                        out.class_map.insert(idx, result.donor_category.clone());
                    }
                    next
                }
            };
            if let (Some(index), Some(mask)) = (index, out.index_mask.as_mut()) {
                for y in 0..pasted.height().min(mask.height()) {
                    for x in 0..pasted.width().min(mask.width()) {
                        if pasted.get(x, y) {
                            mask.set(x, y, index);
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use image::RgbImage;

    use super::*;
    use crate::compositor::Placement;
    use crate::types::IndexMask;

    fn result_with(mask: BinaryMask, category: &str) -> CompositeResult {
        let (w, h) = mask.dims();
        CompositeResult {
            image: RgbImage::new(w, h),
            pasted_mask: mask,
            donor_category: category.into(),
            placement: Placement {
                scale: 1.0,
                x: 0,
                y: 0,
                width: 1,
                height: 1,
                attempts: 1,
            },
        }
    }

    #[test]
    fn new_box_is_tight() {
        let mask = BinaryMask::from_fn(10, 10, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        let out = propagate_annotations(
            &AnnotationSet::detection(vec![]),
            &result_with(mask, "dog"),
            0.2,
        );
        assert_eq!(out.boxes, vec![BBox::new(2, 2, 6, 6, "dog")]);
    }

    #[test]
    fn fully_covered_box_dropped() {
        let mask = BinaryMask::from_fn(10, 10, |x, y| x < 8 && y < 8);
        let base = AnnotationSet::detection(vec![
            BBox::new(1, 1, 5, 5, "cat"),
            BBox::new(6, 6, 10, 10, "cup"),
        ]);
        let out = propagate_annotations(&base, &result_with(mask, "dog"), 0.2);
        let labels: Vec<_> = out.boxes.iter().map(|b| b.label.as_str()).collect();
        // cup keeps 12 of 16 pixels visible.
        assert_eq!(labels, vec!["cup", "dog"]);
    }

    #[test]
    fn segmentation_overlay_matches_per_pixel_oracle() {
        let base_mask = IndexMask::new(6, 6, (0..36).map(|i| (i % 3) as u8).collect()).unwrap();
        let class_map = BTreeMap::from([(0, "bg".into()), (1, "road".into()), (2, "car".into())]);
        let base = AnnotationSet::segmentation(base_mask.clone(), class_map);
        let pasted = BinaryMask::from_fn(6, 6, |x, y| x * y % 4 == 1);
        let out = propagate_annotations(&base, &result_with(pasted.clone(), "dog"), 0.2);
        assert_eq!(out.class_map[&3], "dog");
        let mask = out.index_mask.unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expected = if pasted.get(x, y) {
                    3
                } else {
                    base_mask.get(x, y)
                };
                assert_eq!(mask.get(x, y), expected);
            }
        }

        // Existing class reuses its index.
        let out = propagate_annotations(&base, &result_with(pasted, "car"), 0.2);
        assert_eq!(out.class_map.len(), 3);
    }

    #[test]
    fn classification_unchanged() {
        let base = AnnotationSet::classification("cat");
        let out = propagate_annotations(&base, &result_with(BinaryMask::filled(4, 4), "dog"), 0.2);
        assert_eq!(out, base);
    }
}
