use std::collections::BTreeMap;

use omdet::data::{
    generate_synthetic, ingest_pseudo_labels, load_coco_json, parse_coco, render_scene, shape_covers, write_coco,
    Annotation, ConflictSpec, DetectionDataset, FederatedRegistry, Image, ImageEntry, LabelSource, SyntheticDatasetSpec,
    SHAPES,
};
use omdet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ONE: &str = r#"{
  "images": [{"id": 7, "file_name": "a.png", "width": 100, "height": 80}],
  "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 10, 20, 30]}],
  "categories": [{"id": 3, "name": "pipe"}, {"id": 1, "name": "valve"}]
}"#;

fn data_err(r: omdet::Result<DetectionDataset>) -> String {
    match r {
        Err(e @ Error::Data(_)) => {
            assert_eq!(e.exit_code(), 3);
            e.to_string()
        }
        Err(e) => panic!("expected a data error, got {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

#[test]
fn coco_boxes_become_xyxy_and_categories_sort_by_id() {
    let ds = parse_coco(ONE, "one", None).unwrap();
    assert_eq!(ds.vocabulary, vec!["valve", "pipe"]);
    assert_eq!(ds.images.len(), 1);
    assert_eq!((ds.images[0].width, ds.images[0].height), (100, 80));
    let a = &ds.annotations_of(7)[0];
    assert_eq!(a.label, "pipe");
    assert_eq!(a.bbox, [10.0, 10.0, 30.0, 40.0]);
    assert_eq!(a.source, LabelSource::Human);
}

#[test]
fn coco_without_annotations_is_valid() {
    let text = r#"{"images": [{"id": 1, "file_name": "x.png", "width": 4, "height": 4}], "annotations": [], "categories": []}"#;
    let ds = parse_coco(text, "empty", None).unwrap();
    assert_eq!(ds.annotation_count(), 0);
    assert!(ds.annotations_of(1).is_empty());
}

#[test]
fn coco_boxes_are_clamped_into_the_image() {
    let text = ONE.replace("[10, 10, 20, 30]", "[-5, 70, 200, 30]");
    let ds = parse_coco(&text, "c", None).unwrap();
    assert_eq!(ds.annotations_of(7)[0].bbox, [0.0, 70.0, 100.0, 80.0]);
}

#[test]
fn coco_errors_name_the_entity() {
    let msg = data_err(parse_coco(&ONE.replace("\"image_id\": 7", "\"image_id\": 8"), "c", None));
    assert!(msg.contains("annotation 1") && msg.contains("image_id 8"), "{msg}");
    let msg = data_err(parse_coco(&ONE.replace("\"category_id\": 3", "\"category_id\": 9"), "c", None));
    assert!(msg.contains("annotation 1") && msg.contains("category_id 9"), "{msg}");
    let msg = data_err(parse_coco(&ONE.replace("\"width\": 100, ", ""), "c", None));
    assert!(msg.contains("image 7") && msg.contains("width"), "{msg}");
    let msg = data_err(parse_coco(&ONE.replace("\"bbox\": [10, 10, 20, 30]", "\"bbox\": [1, 2]"), "c", None));
    assert!(msg.contains("annotation 1"), "{msg}");
    let msg = data_err(parse_coco(r#"{"images": [], "annotations": []}"#, "c", None));
    assert!(msg.contains("categories"), "{msg}");
    data_err(parse_coco("{not json", "c", None));
}

fn gradient_image(w: usize, h: usize) -> Image {
    let px: Vec<f32> = (0..3 * w * h).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
    Image::new(w, h, px).unwrap()
}

#[test]
fn png_round_trip_is_exact_on_the_8_bit_grid() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient_image(13, 7);
    let p = dir.path().join("g.png");
    img.save_png(&p).unwrap();
    assert_eq!(Image::load(&p).unwrap(), img);
}

#[test]
fn written_coco_loads_back_with_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let mut annotations = BTreeMap::new();
    annotations.insert(
        2,
        vec![Annotation { label: "b".into(), bbox: [1.0, 2.0, 5.0, 6.0], source: LabelSource::Human, confidence: 1.0 }],
    );
    let ds = DetectionDataset {
        name: "rt".into(),
        vocabulary: vec!["a".into(), "b".into()],
        images: vec![ImageEntry { id: 2, file_name: Some("two.png".into()), width: 13, height: 7, image: gradient_image(13, 7) }],
        annotations,
    };
    let json = dir.path().join("rt.json");
    write_coco(&ds, &json, Some(dir.path())).unwrap();
    let back = load_coco_json(&json, Some(dir.path())).unwrap();
    assert_eq!(back, ds);
    // a size mismatch between the JSON and the file is caught
    let text = std::fs::read_to_string(&json).unwrap().replace("\"width\": 13", "\"width\": 12");
    data_err(parse_coco(&text, "rt", Some(dir.path())));
}

#[test]
fn pseudo_labels_filter_by_confidence_and_grow_the_vocabulary() {
    let ds = parse_coco(ONE, "one", None).unwrap();
    let lines = [
        r#"{"image_id": 7, "label": "pipe", "bbox": [1, 2, 11, 12], "confidence": 0.9}"#,
        r#"{"image_id": 7, "label": "pipe", "bbox": [1, 2, 11, 12], "confidence": 0.3}"#,
        r#"{"image_id": 99, "label": "pipe", "bbox": [1, 2, 11, 12], "confidence": 0.9}"#,
        "",
        r#"{"image_id": 7, "label": "pump", "bbox": [50, 60, 40, 90], "confidence": 0.5}"#,
    ]
    .join("\n");
    let (ds, report) = ingest_pseudo_labels(ds, &lines, 0.5).unwrap();
    assert_eq!((report.kept, report.below_threshold, report.unknown_image), (2, 1, 1));
    assert_eq!(report.new_labels, vec!["pump"]);
    assert_eq!(ds.vocabulary, vec!["valve", "pipe", "pump"]);
    let anns = ds.annotations_of(7);
    assert_eq!(anns.len(), 3);
    assert_eq!(anns[1].source, LabelSource::Pseudo);
    assert_eq!(anns[1].confidence, 0.9);
    // corners are reordered and clamped
    assert_eq!(anns[2].bbox, [40.0, 60.0, 50.0, 80.0]);
    ds.validate().unwrap();
    let err = ingest_pseudo_labels(parse_coco(ONE, "one", None).unwrap(), "{\"image_id\": 7}", 0.5).unwrap_err();
    assert!(err.to_string().contains("line 1"), "{err}");
}

fn clean_spec(datasets: Vec<SyntheticDatasetSpec>) -> ConflictSpec {
    ConflictSpec { image_size: 64, datasets, noise_std: 0.0, color_jitter: 0.0, ..ConflictSpec::default() }
}

fn spec_ds(name: &str, vocab: &[&str], images: usize) -> SyntheticDatasetSpec {
    SyntheticDatasetSpec { name: name.into(), vocabulary: vocab.iter().map(|s| s.to_string()).collect(), images }
}

/// Bounding boxes of the 8-connected non-background components of `img`.
fn component_boxes(img: &Image, background: f32) -> Vec<[f64; 4]> {
    let (w, h) = (img.width, img.height);
    let fg = |x: usize, y: usize| (0..3).any(|c| img.get(c, y, x) != background);
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[y * w + x] || !fg(x, y) {
                continue;
            }
            let mut b = [x, y, x + 1, y + 1];
            let mut stack = vec![(x, y)];
            seen[y * w + x] = true;
            while let Some((cx, cy)) = stack.pop() {
                b = [b[0].min(cx), b[1].min(cy), b[2].max(cx + 1), b[3].max(cy + 1)];
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as usize, ny as usize);
                        if !seen[ny * w + nx] && fg(nx, ny) {
                            seen[ny * w + nx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            boxes.push(b.map(|v| v as f64));
        }
    }
    boxes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    boxes
}

#[test]
fn shape_boxes_match_the_rendered_pixels() {
    let spec = clean_spec(vec![spec_ds("all", &SHAPES, 1)]);
    let kinds: Vec<String> = SHAPES.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bg = spec.background as f32;
    for _ in 0..60 {
        let (img, placed) = render_scene(&spec, &kinds, &mut rng).unwrap();
        let mut want: Vec<[f64; 4]> = placed.iter().map(|p| p.bbox).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(component_boxes(&img, bg), want);
    }
}

#[test]
fn every_shape_is_nonempty_at_the_smallest_side() {
    for s in SHAPES {
        let covered = (0..14).flat_map(|y| (0..14).map(move |x| (x, y))).filter(|&(x, y)| shape_covers(s, 14, x, y)).count();
        assert!(covered > 20, "{s}: {covered}");
    }
    assert!(!shape_covers("hexagon", 14, 7, 7));
}

#[test]
fn unlabeled_shapes_are_drawn_but_not_annotated() {
    let spec = clean_spec(vec![spec_ds("A", &["circle", "square"], 30), spec_ds("B", &["circle"], 30)]);
    let sets = generate_synthetic(&spec, 3).unwrap();
    let b = &sets[1];
    assert_eq!(b.vocabulary, vec!["circle"]);
    let mut unlabeled = 0;
    for im in &b.images {
        let comps = component_boxes(&im.image, spec.background as f32);
        let anns = b.annotations_of(im.id);
        assert!(anns.iter().all(|a| a.label == "circle"));
        assert!(anns.iter().all(|a| comps.contains(&a.bbox)));
        unlabeled += comps.len() - anns.len();
    }
    assert!(unlabeled > 10, "only {unlabeled} unlabeled squares");
    let a = &sets[0];
    assert!(a.annotations.values().flatten().any(|x| x.label == "square"));
    for d in &sets {
        d.validate().unwrap();
        assert!(d.images.iter().all(|i| i.file_name.as_deref().unwrap().starts_with(&format!("{}_", d.name))));
    }
}

#[test]
fn same_seed_same_pixels() {
    let spec = ConflictSpec { image_size: 48, min_side: 8, max_side: 16, datasets: vec![spec_ds("A", &["ring", "cross"], 5), spec_ds("B", &["ring"], 4)], ..ConflictSpec::default() };
    let a = generate_synthetic(&spec, 11).unwrap();
    let b = generate_synthetic(&spec, 11).unwrap();
    let c = generate_synthetic(&spec, 12).unwrap();
    assert_eq!(a, b);
    let bits = |d: &[DetectionDataset]| d[0].images[0].image.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    // the datasets draw different scenes
    assert_ne!(a[0].images[0].image, a[1].images[0].image);
}

#[test]
fn unknown_shapes_and_bad_ranges_are_config_errors() {
    let bad = clean_spec(vec![spec_ds("A", &["circle", "hexagon"], 2)]);
    let err = generate_synthetic(&bad, 0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("hexagon"));
    let bad = ConflictSpec { min_side: 40, max_side: 20, ..clean_spec(vec![spec_ds("A", &["ring"], 1)]) };
    assert_eq!(generate_synthetic(&bad, 0).unwrap_err().exit_code(), 2);
    assert_eq!(generate_synthetic(&clean_spec(vec![]), 0).unwrap_err().exit_code(), 2);
}

fn blank_dataset(name: &str, n: u64) -> DetectionDataset {
    DetectionDataset {
        name: name.into(),
        vocabulary: vec!["x".into()],
        images: (1..=n).map(|id| ImageEntry { id, file_name: None, width: 4, height: 4, image: Image::filled(4, 4, [0.0; 3]) }).collect(),
        annotations: BTreeMap::new(),
    }
}

#[test]
fn registry_frequency_follows_the_weights() {
    let reg = FederatedRegistry::new(vec![blank_dataset("a", 5), blank_dataset("b", 7)], Some(vec![1.0, 3.0])).unwrap();
    let draws: Vec<(usize, usize)> = reg.stream(4).take(10_000).collect();
    let share = draws.iter().filter(|d| d.0 == 1).count() as f64 / draws.len() as f64;
    assert!((share - 0.75).abs() < 0.02, "{share}");
    // each dataset walks through all its images before repeating
    let first_a: Vec<usize> = draws.iter().filter(|d| d.0 == 0).take(5).map(|d| d.1).collect();
    let mut sorted = first_a.clone();
    sorted.sort();
    assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    assert_eq!(reg.stream(4).take(500).collect::<Vec<_>>(), draws[..500].to_vec());
    assert_ne!(reg.stream(5).take(500).collect::<Vec<_>>(), draws[..500].to_vec());
}

#[test]
fn registry_defaults_to_image_counts_and_keeps_vocabularies_apart() {
    let mut b = blank_dataset("b", 3);
    b.vocabulary = vec!["y".into()];
    let reg = FederatedRegistry::new(vec![blank_dataset("a", 1), b], None).unwrap();
    assert_eq!(reg.weights, vec![1.0, 3.0]);
    assert_eq!(reg.total_images(), 4);
    assert_eq!(reg.datasets[0].vocabulary, vec!["x"]);
    assert_eq!(reg.datasets[1].vocabulary, vec!["y"]);
    assert!(FederatedRegistry::new(vec![], None).is_err());
    assert!(FederatedRegistry::new(vec![blank_dataset("a", 1)], Some(vec![-1.0])).is_err());
    assert!(FederatedRegistry::new(vec![blank_dataset("a", 1), blank_dataset("e", 0)], Some(vec![1.0, 1.0])).is_err());
}
