mod common;

use common::*;
use rand::Rng;
use sedet::boxes::BBox;
use sedet::data::anchors::{kmeans_anchors, mean_distortion, shape_distance, AnchorSet};
use sedet::data::augment::*;
use sedet::data::labelme::{parse_labelme, to_labelme};
use sedet::data::synth::{generate_scene, render_scene, SceneConfig};
use sedet::data::*;
use sedet::Error;

fn sample(image: Image, objects: Vec<(BBox, usize)>) -> Sample {
    let annotation = Annotation {
        image: "t".into(),
        width: image.width,
        height: image.height,
        objects,
    };
    Sample { image, annotation }
}

fn inside(b: &BBox, w: usize, h: usize) -> bool {
    let [x0, y0, x1, y1] = b.corners();
    b.w > 0.0 && b.h > 0.0 && x0 >= -1e-9 && y0 >= -1e-9 && x1 <= w as f64 + 1e-9 && y1 <= h as f64 + 1e-9
}

const FIXTURE: &str = r#"{
  "version": "5.0.1",
  "flags": {},
  "shapes": [
    {"label": "uphand", "points": [[10, 20], [50, 80]], "group_id": null, "shape_type": "rectangle", "flags": {}},
    {"label": "discuss", "points": [[90.5, 70], [60, 10]], "shape_type": "rectangle"}
  ],
  "imagePath": "frame_0001.jpg",
  "imageData": null,
  "imageHeight": 100,
  "imageWidth": 120
}"#;

#[test]
fn labelme_fixture_parses_to_center_boxes() {
    let ann = parse_labelme(FIXTURE, &Vocabulary::default()).unwrap();
    assert_eq!((ann.width, ann.height), (120, 100));
    assert_eq!(ann.image, "frame_0001.jpg");
    assert_eq!(ann.objects[0], (BBox::new(30.0, 50.0, 40.0, 60.0), 1));
    assert_eq!(ann.objects[1], (BBox::new(75.25, 40.0, 30.5, 60.0), 6));
}

#[test]
fn labelme_corner_order_does_not_matter() {
    let vocab = Vocabulary::default();
    let a = parse_labelme(&FIXTURE.replace("[[10, 20], [50, 80]]", "[[50, 80], [10, 20]]"), &vocab).unwrap();
    let b = parse_labelme(&FIXTURE.replace("[[10, 20], [50, 80]]", "[[10, 80], [50, 20]]"), &vocab).unwrap();
    let c = parse_labelme(FIXTURE, &vocab).unwrap();
    assert_eq!(a, c);
    assert_eq!(b, c);
}

#[test]
fn labelme_errors_are_distinct() {
    let vocab = Vocabulary::default();
    match parse_labelme(&FIXTURE.replace("uphand", "sleeping"), &vocab) {
        Err(Error::UnknownLabel(l)) => assert_eq!(l, "sleeping"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_labelme("{not json", &vocab), Err(Error::MalformedAnnotation(_))));
    assert!(matches!(
        parse_labelme(&FIXTURE.replace("\"imageWidth\"", "\"w\""), &vocab),
        Err(Error::MissingField("imageWidth"))
    ));
    assert!(matches!(
        parse_labelme(&FIXTURE.replace("[[10, 20], [50, 80]]", "[[10, 20], [10, 80]]"), &vocab),
        Err(Error::DegenerateRectangle { .. })
    ));
    assert!(matches!(
        parse_labelme(&FIXTURE.replace("\"shape_type\": \"rectangle\", \"flags\"", "\"shape_type\": \"polygon\", \"flags\""), &vocab),
        Err(Error::MalformedAnnotation(_))
    ));
    assert!(matches!(
        parse_labelme(&FIXTURE.replace("[50, 80]", "[50, 180]"), &vocab),
        Err(Error::OutOfBounds(..))
    ));
}

#[test]
fn labelme_write_then_parse_is_identity() {
    let vocab = Vocabulary::default();
    let mut r = rng(3);
    for _ in 0..200 {
        let (w, h) = (r.random_range(20..300), r.random_range(20..300));
        let objects = (0..r.random_range(0..8))
            .map(|_| {
                let x0 = r.random_range(0..w - 4) as f64 + 0.5 * r.random_range(0..2) as f64;
                let y0 = r.random_range(0..h - 4) as f64;
                let x1 = r.random_range(x0 as usize + 2..=w) as f64;
                let y1 = r.random_range(y0 as usize + 1..=h) as f64;
                (BBox::from_corners(x0, y0, x1, y1), r.random_range(0..7))
            })
            .collect();
        let ann = Annotation { image: "x.ppm".into(), width: w, height: h, objects };
        assert_eq!(parse_labelme(&to_labelme(&ann, &vocab), &vocab).unwrap(), ann);
    }
}

#[test]
fn ppm_round_trip_and_comments() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = Image::filled(5, 3, [0.0; 3]);
    for y in 0..3 {
        for x in 0..5 {
            img.put_pixel(y, x, [(x * 50) as f64 / 255.0, (y * 100) as f64 / 255.0, 1.0]);
        }
    }
    let p = dir.path().join("a.ppm");
    img.write_ppm(&p).unwrap();
    assert_eq!(Image::read_ppm(&p).unwrap(), img);

    let q = dir.path().join("b.ppm");
    let mut bytes = b"P6\n# comment\n2 1\n# another\n15\n".to_vec();
    bytes.extend_from_slice(&[15, 0, 5, 0, 15, 0]);
    std::fs::write(&q, bytes).unwrap();
    let b = Image::read_ppm(&q).unwrap();
    assert_eq!(b.pixel(0, 0), [1.0, 0.0, 1.0 / 3.0]);
    assert_eq!(b.pixel(0, 1), [0.0, 1.0, 0.0]);

    std::fs::write(&q, b"P3\n1 1\n255\n0 0 0").unwrap();
    assert!(matches!(Image::read_ppm(&q), Err(Error::BadImage { .. })));
    std::fs::write(&q, b"P6\n4 4\n255\nabc").unwrap();
    assert!(matches!(Image::read_ppm(&q), Err(Error::BadImage { .. })));
}

#[test]
fn letterbox_square_input_is_identity() {
    let mut r = rng(4);
    let img = Image { width: 32, height: 32, data: (0..3 * 32 * 32).map(|_| r.random()).collect() };
    let (out, lb) = letterbox_image(&img, 32);
    assert_eq!(out, img);
    assert_eq!(lb, Letterbox::identity(32, 32));
}

#[test]
fn letterbox_wide_image_pads_vertically_evenly() {
    let img = Image::filled(128, 64, [1.0, 0.0, 0.0]);
    let (out, lb) = letterbox_image(&img, 64);
    assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (0.5, 0.0, 16.0));
    for y in 0..64 {
        let expect = if (16..48).contains(&y) { [1.0, 0.0, 0.0] } else { [PAD_VALUE; 3] };
        assert_eq!(out.pixel(y, 10), expect, "row {y}");
    }
}

#[test]
fn letterbox_transform_inverts() {
    let mut r = rng(5);
    for _ in 0..500 {
        let img = Image::filled(r.random_range(10..400), r.random_range(10..400), [0.0; 3]);
        let (_, lb) = letterbox_image(&img, 96);
        let b = BBox::new(r.random_range(0.0..400.0), r.random_range(0.0..400.0), r.random_range(0.1..100.0), r.random_range(0.1..100.0));
        let back = lb.invert(&lb.apply(&b));
        assert!((back.x - b.x).abs() < 1e-9 && (back.y - b.y).abs() < 1e-9);
        assert!((back.w - b.w).abs() < 1e-9 && (back.h - b.h).abs() < 1e-9);
    }
}

#[test]
fn mosaic_of_solid_images_is_solid() {
    let s = sample(Image::filled(40, 30, [0.2, 0.4, 0.8]), vec![]);
    let mut r = rng(6);
    for _ in 0..10 {
        let out = mosaic([&s, &s, &s, &s], 64, &AugmentConfig::default(), r.random());
        for v in out.image.data.chunks(64 * 64).zip([0.2, 0.4, 0.8]) {
            assert!(v.0.iter().all(|p| (p - v.1).abs() < 1e-12));
        }
    }
}

#[test]
fn centered_mosaic_keeps_each_source_in_its_quadrant() {
    // boxes sit well inside each 64x64 source so nothing is clipped away
    let srcs: Vec<Sample> = (0..4)
        .map(|q| sample(Image::filled(64, 64, [0.5; 3]), vec![(BBox::new(32.0, 32.0, 20.0, 12.0), q)]))
        .collect();
    let params = MosaicParams { center: (64, 64), zoom: [1.0; 4] };
    let out = mosaic_with([&srcs[0], &srcs[1], &srcs[2], &srcs[3]], 64, &params);
    assert_eq!(out.annotation.objects.len(), 4);
    let quads = [[0., 0.], [32., 0.], [0., 32.], [32., 32.]];
    for (b, c) in &out.annotation.objects {
        let [qx, qy] = quads[*c];
        assert_eq!(*b, BBox::new(qx + 16.0, qy + 16.0, 10.0, 6.0));
    }
}

#[test]
fn random_mosaic_boxes_stay_inside_canvas_and_quadrant() {
    let mut r = rng(7);
    let cfg = AugmentConfig::default();
    for _ in 0..100 {
        let srcs: Vec<Sample> = (0..4)
            .map(|q| {
                let (w, h) = (r.random_range(30..120), r.random_range(30..120));
                let objects = (0..5)
                    .map(|_| {
                        let x0 = r.random_range(0..w - 5) as f64;
                        let y0 = r.random_range(0..h - 5) as f64;
                        let b = BBox::from_corners(x0, y0, r.random_range(x0 as usize + 2..=w) as f64, r.random_range(y0 as usize + 2..=h) as f64);
                        (b, q)
                    })
                    .collect();
                sample(Image::filled(w, h, [0.1; 3]), objects)
            })
            .collect();
        let target = 64;
        let mut mr = rng(r.random());
        let params = MosaicParams::sample(target, &cfg, &mut mr);
        let out = mosaic_with([&srcs[0], &srcs[1], &srcs[2], &srcs[3]], target, &params);
        let (cx, cy) = (params.center.0 as f64 / 2.0, params.center.1 as f64 / 2.0);
        for (b, q) in &out.annotation.objects {
            assert!(inside(b, target, target));
            let [x0, y0, x1, y1] = b.corners();
            let ok_x = if q % 2 == 0 { x1 <= cx + 1e-9 } else { x0 >= cx - 1e-9 };
            let ok_y = if *q < 2 { y1 <= cy + 1e-9 } else { y0 >= cy - 1e-9 };
            assert!(ok_x && ok_y, "{b:?} escaped quadrant {q}");
        }
    }
}

#[test]
fn identity_affine_changes_nothing() {
    let mut r = rng(8);
    let img = Image { width: 40, height: 30, data: (0..3 * 40 * 30).map(|_| r.random()).collect() };
    let s = sample(img, vec![(BBox::new(10.0, 10.0, 6.0, 4.0), 2)]);
    let out = affine_with(&s, &AffineParams::IDENTITY);
    assert_eq!(out.image, s.image);
    assert_eq!(out.annotation, s.annotation);
}

#[test]
fn translation_shifts_centers_and_clips_at_edges() {
    let s = sample(
        Image::filled(100, 50, [0.3; 3]),
        vec![(BBox::new(20.0, 20.0, 10.0, 10.0), 0), (BBox::new(90.0, 20.0, 10.0, 10.0), 1)],
    );
    let out = affine_with(&s, &AffineParams { tx: 10.0, ..AffineParams::IDENTITY });
    assert_eq!(out.annotation.objects[0], (BBox::new(30.0, 20.0, 10.0, 10.0), 0));
    // the second box now spans 95..105 and is cut at 100
    assert_eq!(out.annotation.objects[1], (BBox::new(97.5, 20.0, 5.0, 10.0), 1));
    assert_eq!(out.image.pixel(10, 5), [PAD_VALUE; 3]);
    assert_eq!(out.image.pixel(10, 15), [0.3; 3]);
}

#[test]
fn quarter_turn_swaps_box_sides() {
    let s = sample(Image::filled(64, 64, [0.3; 3]), vec![(BBox::new(32.0, 32.0, 20.0, 8.0), 0)]);
    let out = affine_with(&s, &AffineParams { degrees: 90.0, ..AffineParams::IDENTITY });
    let (b, _) = out.annotation.objects[0];
    assert!((b.x - 32.0).abs() < 1e-9 && (b.y - 32.0).abs() < 1e-9);
    assert!((b.w - 8.0).abs() < 1e-9 && (b.h - 20.0).abs() < 1e-9);
}

#[test]
fn tiny_remnants_are_dropped() {
    let s = sample(Image::filled(50, 50, [0.3; 3]), vec![(BBox::new(45.0, 25.0, 10.0, 10.0), 0)]);
    // 1 px of 10 remains visible: 10% is kept, less is not
    let keep = affine_with(&s, &AffineParams { tx: 9.0, ..AffineParams::IDENTITY });
    assert_eq!(keep.annotation.objects.len(), 1);
    let gone = affine_with(&s, &AffineParams { tx: 9.5, ..AffineParams::IDENTITY });
    assert!(gone.annotation.objects.is_empty());
}

#[test]
fn augmentation_is_seeded_and_keeps_boxes_valid() {
    let vocab = Vocabulary::default();
    let scene = SceneConfig { width: 96, height: 80, ..Default::default() };
    let pool: Vec<Sample> = (0..6).map(|i| generate_scene(&scene, &vocab, i).unwrap()).collect();
    let cfg = AugmentConfig { degrees: 15.0, ..Default::default() };
    for seed in 0..40 {
        let a = training_sample(&pool, seed as usize % 6, 64, &cfg, seed);
        let b = training_sample(&pool, seed as usize % 6, 64, &cfg, seed);
        assert_eq!(a.image, b.image);
        assert_eq!(a.annotation, b.annotation);
        assert_eq!((a.image.width, a.image.height), (64, 64));
        assert!(a.annotation.objects.iter().all(|(bb, _)| inside(bb, 64, 64)));
    }
    let off = AugmentConfig { enabled: false, ..cfg };
    let plain = training_sample(&pool, 0, 64, &off, 1);
    assert_eq!(plain.image, letterbox_image(&pool[0].image, 64).0);
}

#[test]
fn kmeans_identical_boxes_collapse() {
    let boxes = vec![[12.0, 7.0]; 20];
    let a = kmeans_anchors(&boxes, 9, 1).unwrap();
    assert_eq!(a, vec![[12.0, 7.0]; 9]);
}

#[test]
fn kmeans_recovers_separated_clusters_exactly() {
    let centers = [[4.0, 6.0], [30.0, 20.0], [120.0, 90.0]];
    let mut boxes = Vec::new();
    for (i, c) in centers.iter().enumerate() {
        boxes.extend(std::iter::repeat_n(*c, 5 + i));
    }
    for seed in 0..20 {
        assert_eq!(kmeans_anchors(&boxes, 3, seed).unwrap(), centers.to_vec());
    }
}

#[test]
fn kmeans_beats_the_worst_random_restart() {
    let mut r = rng(9);
    let boxes: Vec<[f64; 2]> = (0..50).map(|_| [r.random_range(2.0..100.0), r.random_range(2.0..100.0)]).collect();
    let ours = mean_distortion(&boxes, &kmeans_anchors(&boxes, 3, 0).unwrap());
    // random restarts: three boxes drawn as centroids, then Lloyd steps
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut cent: Vec<[f64; 2]> = (0..3).map(|_| boxes[r.random_range(0..50)]).collect();
        for _ in 0..50 {
            let mut sum = vec![[0.0, 0.0, 0.0]; 3];
            for b in &boxes {
                let k = (0..3).min_by(|&i, &j| shape_distance(*b, cent[i]).total_cmp(&shape_distance(*b, cent[j]))).unwrap();
                sum[k] = [sum[k][0] + b[0], sum[k][1] + b[1], sum[k][2] + 1.0];
            }
            for k in 0..3 {
                if sum[k][2] > 0.0 {
                    cent[k] = [sum[k][0] / sum[k][2], sum[k][1] / sum[k][2]];
                }
            }
        }
        worst = worst.max(mean_distortion(&boxes, &cent));
    }
    assert!(ours <= worst, "{ours} > {worst}");
}

#[test]
fn kmeans_anchors_stay_within_input_ranges_and_reject_short_input() {
    let mut r = rng(10);
    for seed in 0..30 {
        let boxes: Vec<[f64; 2]> = (0..40).map(|_| [r.random_range(1.0..50.0), r.random_range(5.0..80.0)]).collect();
        let lo = [0, 1].map(|d| boxes.iter().map(|b| b[d]).fold(f64::INFINITY, f64::min));
        let hi = [0, 1].map(|d| boxes.iter().map(|b| b[d]).fold(0.0, f64::max));
        let a = kmeans_anchors(&boxes, 9, seed).unwrap();
        assert_eq!(a, kmeans_anchors(&boxes, 9, seed).unwrap());
        for w in a.windows(2) {
            assert!(w[0][0] * w[0][1] <= w[1][0] * w[1][1]);
        }
        for x in &a {
            for d in 0..2 {
                assert!(x[d] >= lo[d] - 1e-9 && x[d] <= hi[d] + 1e-9);
            }
        }
    }
    assert!(matches!(
        kmeans_anchors(&[[1.0, 1.0]; 4], 9, 0),
        Err(Error::InsufficientBoxes { needed: 9, got: 4 })
    ));
    let set = AnchorSet::new(vec![[3.0, 3.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
    assert_eq!(set.anchors[0], [1.0, 1.0]);
    assert!(AnchorSet::new(vec![[1.0, 1.0]; 4]).is_err());
}

#[test]
fn empty_scene_is_background_only() {
    let cfg = SceneConfig { min_objects: 0, max_objects: 0, ..Default::default() };
    let s = generate_scene(&cfg, &Vocabulary::default(), 3).unwrap();
    assert!(s.annotation.objects.is_empty());
    assert_eq!((s.image.width, s.image.height), (160, 160));
}

#[test]
fn forced_scene_reports_the_forced_box() {
    let cfg = SceneConfig::default();
    let b = BBox::from_corners(10.0, 20.0, 50.0, 44.0);
    let s = render_scene(&cfg, &[(b, 4)], 1);
    assert_eq!(s.annotation.objects, vec![(b, 4)]);
    // glyph pixels differ from the plain background inside the box only
    let bg = render_scene(&cfg, &[], 1);
    let mut changed = 0;
    for y in 0..160 {
        for x in 0..160 {
            if s.image.pixel(y, x) != bg.image.pixel(y, x) {
                changed += 1;
                assert!((10..50).contains(&x) && (20..44).contains(&y));
            }
        }
    }
    assert!(changed > 100);
}

#[test]
fn scenes_follow_class_frequencies_and_never_overlap() {
    let vocab = Vocabulary::default();
    let weights = vec![4.0, 1.0, 2.0, 1.0, 1.0, 3.0, 1.0];
    let cfg = SceneConfig { class_weights: weights.clone(), min_size: 12, max_size: 30, ..Default::default() };
    let mut counts = [0usize; 7];
    for seed in 0..1000 {
        let s = generate_scene(&cfg, &vocab, seed).unwrap();
        s.annotation.check(7).unwrap();
        for (i, (a, c)) in s.annotation.objects.iter().enumerate() {
            counts[*c] += 1;
            for (b, _) in &s.annotation.objects[i + 1..] {
                assert_eq!(sedet::boxes::iou(a, b), 0.0);
            }
        }
    }
    let total: usize = counts.iter().sum();
    let wsum: f64 = weights.iter().sum();
    for c in 0..7 {
        let got = counts[c] as f64 / total as f64;
        let want = weights[c] / wsum;
        assert!((got - want).abs() <= 0.05 * want.max(0.1), "class {c}: {got} vs {want}");
    }
    assert_eq!(generate_scene(&cfg, &vocab, 5).unwrap().image, generate_scene(&cfg, &vocab, 5).unwrap().image);
}

#[test]
fn manifest_round_trip_with_comments() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocabulary::default();
    let cfg = SceneConfig { width: 48, height: 40, min_size: 8, max_size: 16, ..Default::default() };
    let mut entries = Vec::new();
    for i in 0..3 {
        let s = generate_scene(&cfg, &vocab, i).unwrap();
        let img = dir.path().join(format!("img_{i}.ppm"));
        let ann = dir.path().join(format!("img_{i}.json"));
        s.image.write_ppm(&img).unwrap();
        labelme::write_labelme(&ann, &s.annotation, &vocab).unwrap();
        entries.push(ManifestEntry { image: img, annotation: ann });
    }
    let m = dir.path().join("manifest.txt");
    write_manifest(&m, &entries).unwrap();
    let text = std::fs::read_to_string(&m).unwrap();
    assert!(text.starts_with("img_0.ppm\timg_0.json\n"));
    std::fs::write(&m, format!("# generated\n\n{text}")).unwrap();
    assert_eq!(read_manifest(&m).unwrap(), entries);
    let data = load_dataset(&m, &vocab).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data[1].annotation.objects, generate_scene(&cfg, &vocab, 1).unwrap().annotation.objects);

    std::fs::write(&m, "only-one-column\n").unwrap();
    assert!(matches!(read_manifest(&m), Err(Error::MalformedAnnotation(_))));
}
