use footscan_core::detector::{detect, BoundingBox, Detection, DetectorConfig, RasterImage};
use footscan_core::synthetic::Scene;
use footscan_testkit::detector_oracle::{brute_force_detect, outputs_match};
use footscan_testkit::images::{planted, random_image};
use footscan_testkit::scoring::{match_detections, MatchCounts};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn permissive() -> DetectorConfig {
    DetectorConfig {
        min_area_floor: 1,
        report_threshold: 0.0,
        nms_iou: 0.1,
        ..DetectorConfig::default()
    }
}

#[test]
fn planted_square_matches_oracle() {
    let img = planted(100, 100, BoundingBox::new(20, 30, 20, 20));
    let cfg = DetectorConfig::default();
    let expected = brute_force_detect(&img, &cfg);
    assert_eq!(expected, vec![Detection::new(BoundingBox::new(20, 30, 20, 20), 1.0)]);
    assert_eq!(detect(&img, &cfg).unwrap(), expected);
}

#[test]
fn two_squares_match_oracle() {
    let mut img = planted(100, 100, BoundingBox::new(60, 60, 20, 20));
    img.fill_rect(BoundingBox::new(10, 10, 20, 20), [255, 0, 0]);
    let cfg = DetectorConfig::default();
    let expected = brute_force_detect(&img, &cfg);
    assert_eq!(
        expected
            .iter()
            .map(|d| (d.bbox.left, d.bbox.top, d.confidence))
            .collect::<Vec<_>>(),
        vec![(10, 10, 1.0), (60, 60, 1.0)]
    );
    assert_eq!(detect(&img, &cfg).unwrap(), expected);
}

#[test]
fn random_small_images_match_oracle() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let configs = [
        DetectorConfig::default(),
        permissive(),
        DetectorConfig {
            redness_threshold: 0.3,
            min_red_channel: 120,
            min_area_floor: 4,
            report_threshold: 0.7,
            nms_iou: 0.0,
            ..DetectorConfig::default()
        },
    ];
    let mut nonempty = 0;
    for i in 0..600 {
        let img = random_image(&mut rng, 32);
        let cfg = &configs[i % configs.len()];
        let expected = brute_force_detect(&img, cfg);
        let actual = detect(&img, cfg).unwrap();
        assert!(
            outputs_match(&actual, &expected, 1e-9),
            "image {i}: {actual:?} vs {expected:?}"
        );
        nonempty += usize::from(!expected.is_empty());
    }
    assert!(nonempty > 100, "generator too sparse: {nonempty}");
}

proptest! {
    #[test]
    fn detect_is_pure(seed in any::<u64>()) {
        let img = random_image(&mut StdRng::seed_from_u64(seed), 32);
        let a = detect(&img, &permissive()).unwrap();
        let b = detect(&img.clone(), &permissive()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn boxes_inside_image_and_above_threshold(seed in any::<u64>(), report in 0.0f64..1.0) {
        let img = random_image(&mut StdRng::seed_from_u64(seed), 32);
        let cfg = DetectorConfig { report_threshold: report, min_area_floor: 1, ..DetectorConfig::default() };
        for d in detect(&img, &cfg).unwrap() {
            prop_assert!(d.bbox.fits_within(img.width(), img.height()));
            prop_assert!(d.confidence >= report && d.confidence <= 1.0);
        }
    }

    #[test]
    fn translation_shifts_box_exactly(
        w in 5u32..30, h in 5u32..30,
        x in 0u32..40, y in 0u32..40,
        dx in -40i64..40, dy in -40i64..40,
    ) {
        let (canvas_w, canvas_h) = (120, 110);
        let lesion = BoundingBox::new(x, y, w, h);
        let Some(moved) = lesion.translate(dx, dy) else { return Ok(()) };
        prop_assume!(moved.fits_within(canvas_w, canvas_h) && lesion.fits_within(canvas_w, canvas_h));
        let before = detect(&planted(canvas_w, canvas_h, lesion), &DetectorConfig::default()).unwrap();
        let after = detect(&planted(canvas_w, canvas_h, moved), &DetectorConfig::default()).unwrap();
        prop_assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(&after) {
            prop_assert_eq!(a.bbox.translate(dx, dy), Some(b.bbox));
            prop_assert_eq!(a.confidence, b.confidence);
        }
    }
}

#[test]
fn all_black_image_is_empty() {
    let img = RasterImage::filled(64, 64, [0, 0, 0]);
    assert!(detect(&img, &DetectorConfig::default()).unwrap().is_empty());
    assert!(brute_force_detect(&img, &DetectorConfig::default()).is_empty());
}

#[test]
fn synthetic_scenes_are_found_exactly() {
    let mut totals = MatchCounts::default();
    for seed in 0..40 {
        let scene = Scene::generate(seed);
        let dets = detect(&scene.image, &DetectorConfig::default()).unwrap();
        totals.add(match_detections(&dets, &scene.lesions, 0.9));
    }
    assert_eq!(totals.precision(), 1.0, "{totals:?}");
    assert_eq!(totals.recall(), 1.0, "{totals:?}");
}
