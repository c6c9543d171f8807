use cacp_core::compositor::{blend, Placement};
use cacp_core::gallery::RatioTable;
use cacp_core::metrics::{accuracy, iou_mask, map50, miou, DetectionMatch};
use cacp_core::{BBox, BinaryMask, EmbeddingVector, IndexMask};
use image::{Rgb, RgbImage};
use num::rational::BigRational;
use num::One;
use proptest::prelude::*;

fn index_mask(w: u32, h: u32) -> impl Strategy<Value = IndexMask> {
    prop::collection::vec(0u8..3, (w * h) as usize)
        .prop_map(move |d| IndexMask::new(w, h, d).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (IndexMask, IndexMask)> {
    (1u32..8, 1u32..8).prop_flat_map(|(w, h)| (index_mask(w, h), index_mask(w, h)))
}

fn bbox(label: &'static str) -> impl Strategy<Value = BBox> {
    (0u32..10, 0u32..10, 1u32..6, 1u32..6)
        .prop_map(move |(x, y, w, h)| BBox::new(x, y, x + w, y + h, label))
}

fn scored(label: &'static str) -> impl Strategy<Value = BBox> {
    (bbox(label), 1u32..5).prop_map(|(b, s)| b.with_score(f64::from(s) / 4.0))
}

fn nonzero_vector() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-10.0f32..10.0, 4)
        .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 0.01))
}

proptest! {
    #[test]
    fn mask_metrics_are_bounded_and_symmetric((a, b) in mask_pair()) {
        for class in 0..3 {
            let ab = iou_mask(&a, &b, class).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou_mask(&b, &a, class).unwrap());
        }
        let m = miou(&a, &b, &[0, 1, 2]).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(miou(&a, &a, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn miou_ignores_pixel_order((a, b) in mask_pair(), rotate in 0usize..64) {
        let n = a.as_raw().len();
        let k = rotate % n;
        let (w, h) = a.dims();
        let mut ra = a.as_raw().to_vec();
        let mut rb = b.as_raw().to_vec();
        ra.rotate_left(k);
        rb.rotate_left(k);
        let (pa, pb) = (IndexMask::new(w, h, ra).unwrap(), IndexMask::new(w, h, rb).unwrap());
        let classes = [0, 1, 2];
        prop_assert!((miou(&a, &b, &classes).unwrap() - miou(&pa, &pb, &classes).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_item_order(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..20), rotate in 0usize..20) {
        let preds: Vec<String> = pairs.iter().map(|p| p.0.to_string()).collect();
        let truth: Vec<String> = pairs.iter().map(|p| p.1.to_string()).collect();
        let a = accuracy(&preds, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let k = rotate % pairs.len();
        let (mut rp, mut rt) = (preds.clone(), truth.clone());
        rp.rotate_left(k);
        rt.rotate_left(k);
        prop_assert_eq!(a, accuracy(&rp, &rt).unwrap());
    }

    #[test]
    fn box_iou_is_symmetric_and_bounded(a in bbox("x"), b in bbox("x")) {
        let ab = a.iou(&b);
        prop_assert_eq!(ab, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(a.iou(&a), 1.0);
    }

    #[test]
    fn map_is_bounded(preds in prop::collection::vec(scored("a"), 0..6), gts in prop::collection::vec(bbox("a"), 1..5)) {
        let ap = map50(&[DetectionMatch::new(preds, gts)], &["a"]).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn dropping_an_unmatchable_prediction_never_lowers_ap(
        preds in prop::collection::vec(scored("a"), 0..5),
        gts in prop::collection::vec(bbox("a"), 1..4),
        score in 1u32..5,
    ) {
        // A box far from every ground truth is always a false positive.
        let far = BBox::new(100, 100, 105, 105, "a").with_score(f64::from(score) / 4.0);
        let mut with_fp = preds.clone();
        with_fp.push(far);
        let clean = map50(&[DetectionMatch::new(preds, gts.clone())], &["a"]).unwrap();
        let noisy = map50(&[DetectionMatch::new(with_fp, gts)], &["a"]).unwrap();
        prop_assert!(clean + 1e-12 >= noisy, "{clean} < {noisy}");
    }

    #[test]
    fn cosine_ignores_positive_scaling(a in nonzero_vector(), b in nonzero_vector(), s in 0.01f32..100.0, t in 0.01f32..100.0) {
        let (va, vb) = (EmbeddingVector::new(a).unwrap(), EmbeddingVector::new(b).unwrap());
        let base = va.cosine(&vb).unwrap();
        let scaled = va.scaled(s).cosine(&vb.scaled(t)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-5, "{base} vs {scaled}");
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn ratio_table_is_reciprocal(images in prop::collection::vec(prop::collection::vec((0usize..3, 1u32..9, 1u32..9), 0..4), 0..6)) {
        let labels = ["a", "b", "c"];
        let mut table = RatioTable::new();
        for objects in &images {
            let boxes: Vec<BBox> = objects.iter().map(|&(l, w, h)| BBox::new(0, 0, w, h, labels[l])).collect();
            table.observe_image(&boxes);
        }
        for (a, b, stats) in table.pairs() {
            let rev = table.get(b, a).unwrap();
            prop_assert_eq!(&stats.min, &(BigRational::one() / &rev.max));
            prop_assert_eq!(&stats.max, &(BigRational::one() / &rev.min));
            prop_assert!(stats.min <= stats.max);
        }
    }

    #[test]
    fn blend_leaves_unmasked_pixels_alone(
        (bw, bh) in (1u32..24, 1u32..24),
        seed in any::<u64>(),
        density in 0.0f64..1.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (cw, ch) = (rng.random_range(1..=bw), rng.random_range(1..=bh));
        let base = RgbImage::from_fn(bw, bh, |_, _| Rgb(rng.random()));
        let crop = RgbImage::from_fn(cw, ch, |_, _| Rgb(rng.random()));
        let mask = BinaryMask::from_fn(cw, ch, |_, _| rng.random_bool(density));
        let placement = Placement {
            scale: 1.0,
            x: rng.random_range(0..=bw - cw),
            y: rng.random_range(0..=bh - ch),
            width: cw,
            height: ch,
            attempts: 1,
        };
        let feather = rng.random_range(0..3);
        let out = blend(&base, &crop, &mask, &placement, feather, "obj").unwrap();
        prop_assert_eq!(out.image.dimensions(), base.dimensions());
        prop_assert_eq!(out.pasted_mask.count(), mask.count());
        if feather == 0 {
            for (x, y, p) in out.image.enumerate_pixels() {
                if !out.pasted_mask.get(x, y) {
                    prop_assert_eq!(p, base.get_pixel(x, y));
                }
            }
        }
    }
}
