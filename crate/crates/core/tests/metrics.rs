use std::path::Path;

use points2pix::metrics::*;
use points2pix::raster::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> Vec<DetectionRecord> {
    read_detections(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name), 256.0).unwrap()
}

/// Count the unit pixel cells covered by both boxes and by either.
fn iou_by_pixels(a: &[i64; 4], b: &[i64; 4]) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    let inside = |r: &[i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

fn as_f(b: &[i64; 4]) -> BBox {
    b.map(|v| v as f64)
}

#[test]
fn box_iou_equals_pixel_enumeration() {
    assert_eq!(box_iou(&[0., 0., 10., 10.], &[5., 0., 15., 10.]), 1.0 / 3.0);
    assert_eq!(iou_by_pixels(&[0, 0, 10, 10], &[5, 0, 15, 10]), 1.0 / 3.0);
    assert_eq!(box_iou(&[0., 0., 4., 4.], &[0., 0., 4., 4.]), 1.0);
    assert_eq!(box_iou(&[0., 0., 4., 4.], &[4., 0., 8., 4.]), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x0 = rng.random_range(0..40);
        let y0 = rng.random_range(0..40);
        [x0, y0, x0 + rng.random_range(1..25), y0 + rng.random_range(1..25)]
    };
    for _ in 0..500 {
        let (a, b) = (rand_box(&mut rng), rand_box(&mut rng));
        assert_eq!(box_iou(&as_f(&a), &as_f(&b)), iou_by_pixels(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn three_pair_fixture_matches_hand_computation() {
    let pairs = pair_detections(&fixture("real_detections.jsonl"), &fixture("fake_detections.jsonl"), "Car", None).pairs;
    assert_eq!(pairs.len(), 3);
    // threshold, tp_real, tp_fake, per-pair IoUs of the qualifying pairs
    let expected: [(f64, usize, usize, &[f64]); 3] = [
        (0.1, 3, 3, &[1.0 / 3.0, 1.0, 0.5]),
        (0.5, 3, 2, &[1.0 / 3.0, 1.0]),
        (0.75, 2, 1, &[1.0 / 3.0]),
    ];
    for (t, tp_real, tp_fake, ious) in expected {
        let sc = classification_score(&pairs, t).unwrap();
        assert_eq!((sc.tp_real, sc.tp_fake), (tp_real, tp_fake), "threshold {t}");
        assert_eq!(sc.score, Some(tp_fake as f64 / tp_real as f64));
        let inc = inception_score(&pairs, t).unwrap();
        assert_eq!(inc.qualifying, ious.len());
        let got: Vec<f64> = inc.table.iter().map(|r| r.iou).collect();
        assert_eq!(got, ious);
        assert_eq!(inc.mean_iou, Some(ious.iter().sum::<f64>() / ious.len() as f64));
    }
    let inc = inception_score(&pairs, 0.5).unwrap();
    assert_eq!(inc.table[0].real_confidence, 0.9);
    assert_eq!(inc.table[1].fake_box, [10.0, 10.0, 30.0, 30.0]);
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalPair> {
    let classes = ["Car", "Pedestrian"];
    let dets = |rng: &mut ChaCha8Rng, id: &str| -> Vec<DetectionRecord> {
        (0..rng.random_range(0..4))
            .map(|_| {
                let x0 = rng.random_range(0.0..200.0);
                let y0 = rng.random_range(0.0..200.0);
                DetectionRecord {
                    image_id: id.into(),
                    object_class: classes[rng.random_range(0..2)].into(),
                    confidence: (rng.random_range(0..=20) as f64) / 20.0,
                    bbox: [x0, y0, x0 + rng.random_range(1.0..50.0), y0 + rng.random_range(1.0..50.0)],
                }
            })
            .collect()
    };
    (0..n)
        .map(|i| {
            let id = format!("s{i}");
            EvalPair {
                real_detections: dets(rng, &id),
                fake_detections: dets(rng, &id),
                image_id: id,
                target_class: "Car".into(),
            }
        })
        .collect()
}

/// Straightforward loop versions, sharing nothing with the library.
fn oracle_best(dets: &[DetectionRecord], t: f64) -> Option<(f64, BBox)> {
    let mut best: Option<(f64, BBox)> = None;
    for d in dets {
        if d.object_class == "Car" && d.confidence >= t {
            match best {
                Some((c, _)) if c >= d.confidence => {}
                _ => best = Some((d.confidence, d.bbox)),
            }
        }
    }
    best
}

fn oracle_iou(a: BBox, b: BBox) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    if ix * iy == 0.0 {
        return 0.0;
    }
    let i = ix * iy;
    i / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i)
}

#[test]
fn scores_equal_scalar_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let pairs = random_pairs(&mut rng, 1 + trial * 5);
        for t in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let (mut tr, mut tf) = (0, 0);
            let mut ious = Vec::new();
            for p in &pairs {
                let r = oracle_best(&p.real_detections, t);
                let f = oracle_best(&p.fake_detections, t);
                tr += r.is_some() as usize;
                tf += f.is_some() as usize;
                if let (Some(r), Some(f)) = (r, f) {
                    ious.push(oracle_iou(r.1, f.1));
                }
            }
            let sc = classification_score(&pairs, t).unwrap();
            assert_eq!((sc.tp_real, sc.tp_fake), (tr, tf));
            assert_eq!(sc.score, if tr == 0 { None } else { Some(tf as f64 / tr as f64) });
            let inc = inception_score(&pairs, t).unwrap();
            let table: Vec<f64> = inc.table.iter().map(|r| r.iou).collect();
            assert_eq!(table, ious);
            let mean = if ious.is_empty() { None } else { Some(ious.iter().sum::<f64>() / ious.len() as f64) };
            assert_eq!(inc.mean_iou, mean);
        }
    }
}

#[test]
fn diversity_score_matches_oracle_and_edge_cases() {
    let d = |conf: f64, b: BBox| DetectionRecord {
        image_id: "x".into(),
        object_class: "Car".into(),
        confidence: conf,
        bbox: b,
    };
    let real = vec![d(0.9, [0., 0., 10., 10.])];
    let same: Vec<(String, Option<Vec<DetectionRecord>>)> =
        (0..10).map(|k| (format!("x_bg{k}"), Some(real.clone()))).collect();
    let s = diversity_score(&real, &same, "Car", 0.5).unwrap();
    assert_eq!((s.mean_sc, s.mean_iou), (Some(1.0), Some(1.0)));

    let none: Vec<_> = (0..10).map(|k| (format!("x_bg{k}"), Some(vec![]))).collect();
    let s = diversity_score(&real, &none, "Car", 0.5).unwrap();
    assert_eq!((s.mean_sc, s.mean_iou), (Some(0.0), None));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut fakes = Vec::new();
    for k in 0..10 {
        let dets = if k == 3 {
            None
        } else {
            Some(
                (0..rng.random_range(0..3))
                    .map(|_| {
                        let x = rng.random_range(0.0..8.0);
                        d(rng.random_range(0.0..1.0), [x, 0.0, x + 6.0, 10.0])
                    })
                    .collect::<Vec<_>>(),
            )
        };
        fakes.push((format!("x_bg{k}"), dets));
    }
    let s = diversity_score(&real, &fakes, "Car", 0.4).unwrap();
    let mut evaluated = 0;
    let mut ious = Vec::new();
    for (_, dets) in &fakes {
        if let Some(dets) = dets {
            evaluated += 1;
            if let Some((_, b)) = oracle_best(dets, 0.4) {
                ious.push(oracle_iou([0., 0., 10., 10.], b));
            }
        }
    }
    assert_eq!(s.missing, vec!["x_bg3".to_string()]);
    assert_eq!(s.evaluated, evaluated);
    assert_eq!(s.mean_sc, Some(ious.len() as f64 / evaluated as f64));
    assert_eq!(s.mean_iou, (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64));
}

#[test]
fn report_marks_empty_fake_files_and_undefined_scores() {
    let real = fixture("real_detections.jsonl");
    let r = build_report(&real, &[], "Car", &[0.3, 0.5, 1.0], None).unwrap();
    assert!(r.rows[..2].iter().all(|row| row.classification.score == Some(0.0)));
    assert_eq!(r.rows[2].classification.score, None);
    assert!(r.warnings.iter().any(|w| w.contains("empty")));
    let same = build_report(&real, &real, "Car", &[0.3, 0.5, 0.7], None).unwrap();
    assert!(same.rows.iter().all(|row| row.classification.score == Some(1.0)));
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"score\":null"));
}

fn square(img: &mut Image, x0: usize, y0: usize, size: usize, color: [f32; 3]) {
    for y in y0..y0 + size {
        for x in x0..x0 + size {
            for c in 0..3 {
                img.set(c, y, x, color[c]);
            }
        }
    }
}

#[test]
fn blob_detector_fixtures() {
    let cfg = BlobDetectorConfig::default();
    let blank = Image::filled(3, 128, 128, 0.5);
    assert!(blob_detector(&blank, "blank", &cfg).is_empty());

    let mut one = blank.clone();
    square(&mut one, 30, 50, 40, [0.9, 0.1, 0.1]);
    let d = blob_detector(&one, "one", &cfg);
    assert_eq!(d.len(), 1);
    let expect = [30.0, 50.0, 70.0, 90.0];
    assert!(d[0].bbox.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1.0), "{:?}", d[0].bbox);
    assert_eq!(d[0].object_class, "Car");

    let mut two = blank.clone();
    square(&mut two, 5, 5, 20, [0.9, 0.1, 0.1]);
    square(&mut two, 60, 70, 30, [0.85, 0.12, 0.1]);
    assert_eq!(blob_detector(&two, "two", &cfg).len(), 2);
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in (0i64..50, 0i64..50, 1i64..30, 1i64..30), b in (0i64..50, 0i64..50, 1i64..30, 1i64..30)) {
        let ba = [a.0 as f64, a.1 as f64, (a.0 + a.2) as f64, (a.1 + a.3) as f64];
        let bb = [b.0 as f64, b.1 as f64, (b.0 + b.2) as f64, (b.1 + b.3) as f64];
        let v = box_iou(&ba, &bb);
        prop_assert_eq!(v, box_iou(&bb, &ba));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v == 1.0, ba == bb);
    }

    #[test]
    fn scaling_fake_confidences_down_never_raises_sc(seed in 0u64..500, k in 0.0f64..1.0, t in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut rng, 12);
        let scaled: Vec<EvalPair> = pairs.iter().cloned().map(|mut p| {
            for d in &mut p.fake_detections { d.confidence *= k; }
            p
        }).collect();
        let a = classification_score(&pairs, t).unwrap();
        let b = classification_score(&scaled, t).unwrap();
        prop_assert_eq!(a.tp_real, b.tp_real);
        prop_assert!(b.tp_fake <= a.tp_fake);
    }

    #[test]
    fn inception_mean_is_mean_of_its_table(seed in 0u64..500, t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inc = inception_score(&random_pairs(&mut rng, 30), t).unwrap();
        if inc.table.is_empty() {
            prop_assert_eq!(inc.mean_iou, None);
        } else {
            prop_assert_eq!(inc.mean_iou, Some(inc.table.iter().map(|r| r.iou).sum::<f64>() / inc.table.len() as f64));
        }
    }
}
