//! Detection datasets: COCO-subset ingestion, pseudo labels, the synthetic
//! shape generator and the multi-dataset registry.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use omdet_tensor::{Float, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config, data, Error, Result};
use crate::geometry::clamp_xyxy;

/// RGB image, planar `[3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Arc<Vec<f32>>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != 3 * width * height {
            return Err(data(format!("{} pixel values for a {width}x{height} image", pixels.len())));
        }
        Ok(Image { width, height, pixels: Arc::new(pixels) })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let pixels = (0..3).flat_map(|c| std::iter::repeat_n(rgb[c], plane)).collect();
        Image { width, height, pixels: Arc::new(pixels) }
    }

    pub fn to_tensor<F: Float>(&self) -> Tensor<F> {
        Tensor::new(vec![3, self.height, self.width], self.pixels.iter().map(|&v| F::lit(f64::from(v))).collect())
            .expect("image buffer matches its size")
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| data(format!("cannot decode {}: {e}", path.display())))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut pixels = vec![0f32; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * h + y as usize) * w + x as usize] = f32::from(p.0[c]) / 255.0;
            }
        }
        Image::new(w, h, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                p.0[c] = (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save(path).map_err(|e| data(format!("cannot write {}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Human,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    /// Absolute xyxy.
    pub bbox: [f64; 4],
    pub source: LabelSource,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: u64,
    pub file_name: Option<String>,
    pub width: usize,
    pub height: usize,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDataset {
    pub name: String,
    pub vocabulary: Vec<String>,
    pub images: Vec<ImageEntry>,
    pub annotations: BTreeMap<u64, Vec<Annotation>>,
}

impl DetectionDataset {
    pub fn annotations_of(&self, id: u64) -> &[Annotation] {
        self.annotations.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Distinct labels annotated on an image, sorted.
    pub fn labels_of(&self, id: u64) -> BTreeSet<String> {
        self.annotations_of(id).iter().map(|a| a.label.clone()).collect()
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }

    /// Checks the dataset invariants: unique ids, labels in the vocabulary,
    /// boxes inside their image.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let vocab: BTreeSet<&str> = self.vocabulary.iter().map(String::as_str).collect();
        if vocab.len() != self.vocabulary.len() {
            return Err(data(format!("{}: duplicate vocabulary entries", self.name)));
        }
        let mut sizes = HashMap::new();
        for im in &self.images {
            if !ids.insert(im.id) {
                return Err(data(format!("{}: duplicate image id {}", self.name, im.id)));
            }
            sizes.insert(im.id, (im.width as f64, im.height as f64));
        }
        for (id, anns) in &self.annotations {
            let &(w, h) = sizes.get(id).ok_or_else(|| data(format!("{}: annotations for unknown image {id}", self.name)))?;
            for a in anns {
                if !vocab.contains(a.label.as_str()) {
                    return Err(data(format!("{}: label {:?} not in vocabulary", self.name, a.label)));
                }
                let b = a.bbox;
                if !(b[0] <= b[2] && b[1] <= b[3] && b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w && b[3] <= h) {
                    return Err(data(format!("{}: box {b:?} outside image {id}", self.name)));
                }
            }
        }
        Ok(())
    }
}

fn field<'a>(v: &'a Value, key: &str, what: &str, id: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Data(format!("{what} {id}: missing key {key:?}")))
}

fn as_u64(v: &Value, key: &str, what: &str, id: &str) -> Result<u64> {
    field(v, key, what, id)?.as_u64().ok_or_else(|| Error::Data(format!("{what} {id}: {key:?} is not an unsigned integer")))
}

fn entity_id(v: &Value) -> String {
    v.get("id").map(|i| i.to_string()).unwrap_or_else(|| "<no id>".into())
}

fn array<'a>(root: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    root.get(key).and_then(Value::as_array).ok_or_else(|| Error::Data(format!("missing top-level array {key:?}")))
}

/// Loads a COCO-style JSON file. Images are decoded from `image_root` when
/// it is given; otherwise they are blank canvases of the declared size.
pub fn load_coco_json(path: &Path, image_root: Option<&Path>) -> Result<DetectionDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_coco(&text, &name, image_root)
}

pub fn parse_coco(text: &str, name: &str, image_root: Option<&Path>) -> Result<DetectionDataset> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid JSON: {e}")))?;
    let mut cats = Vec::new();
    for c in array(&root, "categories")? {
        let id = entity_id(c);
        let cid = as_u64(c, "id", "category", &id)?;
        let label = field(c, "name", "category", &id)?
            .as_str()
            .ok_or_else(|| Error::Data(format!("category {id}: \"name\" is not a string")))?;
        cats.push((cid, label.to_string()));
    }
    cats.sort_by_key(|c| c.0);
    let cat_names: HashMap<u64, String> = cats.iter().cloned().collect();
    if cat_names.len() != cats.len() {
        return Err(data("duplicate category id"));
    }

    let mut images = Vec::new();
    let mut sizes = HashMap::new();
    for im in array(&root, "images")? {
        let id = entity_id(im);
        let iid = as_u64(im, "id", "image", &id)?;
        let width = as_u64(im, "width", "image", &id)? as usize;
        let height = as_u64(im, "height", "image", &id)? as usize;
        let file = field(im, "file_name", "image", &id)?
            .as_str()
            .ok_or_else(|| Error::Data(format!("image {id}: \"file_name\" is not a string")))?
            .to_string();
        let image = match image_root {
            Some(r) => {
                let img = Image::load(&r.join(&file))?;
                if (img.width, img.height) != (width, height) {
                    return Err(data(format!("image {id}: file is {}x{}, JSON says {width}x{height}", img.width, img.height)));
                }
                img
            }
            None => Image::filled(width, height, [0.0; 3]),
        };
        if sizes.insert(iid, (width as f64, height as f64)).is_some() {
            return Err(data(format!("image {id}: duplicate id")));
        }
        images.push(ImageEntry { id: iid, file_name: Some(file), width, height, image });
    }

    let mut annotations: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for a in array(&root, "annotations")? {
        let id = entity_id(a);
        let iid = as_u64(a, "image_id", "annotation", &id)?;
        let cid = as_u64(a, "category_id", "annotation", &id)?;
        let bbox = field(a, "bbox", "annotation", &id)?
            .as_array()
            .filter(|b| b.len() == 4)
            .ok_or_else(|| Error::Data(format!("annotation {id}: \"bbox\" must be [x, y, w, h]")))?;
        let xywh: Vec<f64> = bbox
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| Error::Data(format!("annotation {id}: non-numeric bbox"))))
            .collect::<Result<_>>()?;
        let label = cat_names
            .get(&cid)
            .ok_or_else(|| Error::Data(format!("annotation {id}: unknown category_id {cid}")))?;
        let &(w, h) = sizes.get(&iid).ok_or_else(|| Error::Data(format!("annotation {id}: unknown image_id {iid}")))?;
        let b = clamp_xyxy([xywh[0], xywh[1], xywh[0] + xywh[2], xywh[1] + xywh[3]], w, h);
        annotations.entry(iid).or_default().push(Annotation {
            label: label.clone(),
            bbox: b,
            source: LabelSource::Human,
            confidence: 1.0,
        });
    }
    let ds = DetectionDataset { name: name.to_string(), vocabulary: cats.into_iter().map(|c| c.1).collect(), images, annotations };
    ds.validate()?;
    Ok(ds)
}

/// Writes `ds` as COCO JSON (+ PNG files when `image_dir` is given).
pub fn write_coco(ds: &DetectionDataset, json_path: &Path, image_dir: Option<&Path>) -> Result<()> {
    let mut images = Vec::new();
    for im in &ds.images {
        let file = im.file_name.clone().unwrap_or_else(|| format!("{:06}.png", im.id));
        if let Some(dir) = image_dir {
            im.image.save_png(&dir.join(&file))?;
        }
        images.push(serde_json::json!({"id": im.id, "file_name": file, "width": im.width, "height": im.height}));
    }
    let cat_id = |l: &str| ds.vocabulary.iter().position(|v| v == l).map(|i| i + 1);
    let mut anns = Vec::new();
    for (iid, list) in &ds.annotations {
        for a in list {
            let b = a.bbox;
            anns.push(serde_json::json!({
                "id": anns.len() + 1,
                "image_id": iid,
                "category_id": cat_id(&a.label),
                "bbox": [b[0], b[1], b[2] - b[0], b[3] - b[1]],
                "area": (b[2] - b[0]) * (b[3] - b[1]),
                "iscrowd": 0,
            }));
        }
    }
    let cats: Vec<Value> =
        ds.vocabulary.iter().enumerate().map(|(i, n)| serde_json::json!({"id": i + 1, "name": n})).collect();
    let root = serde_json::json!({"images": images, "annotations": anns, "categories": cats});
    let text = serde_json::to_string_pretty(&root).map_err(|e| data(e.to_string()))?;
    std::fs::write(json_path, text).map_err(|e| Error::io(format!("writing {}", json_path.display()), e))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub kept: usize,
    pub below_threshold: usize,
    pub unknown_image: usize,
    pub new_labels: Vec<String>,
}

#[derive(Deserialize)]
struct PseudoLine {
    image_id: u64,
    label: String,
    bbox: [f64; 4],
    confidence: f64,
}

/// Appends pseudo-label annotations read from JSON lines
/// `{image_id, label, bbox: [x1, y1, x2, y2], confidence}`.
pub fn ingest_pseudo_labels(
    mut ds: DetectionDataset,
    jsonl: &str,
    min_confidence: f64,
) -> Result<(DetectionDataset, IngestReport)> {
    let sizes: HashMap<u64, (f64, f64)> = ds.images.iter().map(|i| (i.id, (i.width as f64, i.height as f64))).collect();
    let mut report = IngestReport::default();
    for (n, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PseudoLine =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("pseudo labels line {}: {e}", n + 1)))?;
        let Some(&(w, h)) = sizes.get(&p.image_id) else {
            report.unknown_image += 1;
            continue;
        };
        if p.confidence < min_confidence {
            report.below_threshold += 1;
            continue;
        }
        if !ds.vocabulary.contains(&p.label) {
            ds.vocabulary.push(p.label.clone());
            report.new_labels.push(p.label.clone());
        }
        let b = p.bbox;
        let b = clamp_xyxy([b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])], w, h);
        ds.annotations.entry(p.image_id).or_default().push(Annotation {
            label: p.label,
            bbox: b,
            source: LabelSource::Pseudo,
            confidence: p.confidence,
        });
        report.kept += 1;
    }
    Ok((ds, report))
}

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub name: String,
    pub vocabulary: Vec<String>,
    pub images: usize,
}

/// Datasets over the same shape world; each annotates only its vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConflictSpec {
    pub image_size: usize,
    pub datasets: Vec<SyntheticDatasetSpec>,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape side range in pixels.
    pub min_side: usize,
    pub max_side: usize,
    pub noise_std: f64,
    pub background: f64,
    pub color_jitter: f64,
}

impl Default for ConflictSpec {
    fn default() -> Self {
        let ds = |name: &str, vocab: &[&str], images| SyntheticDatasetSpec {
            name: name.into(),
            vocabulary: vocab.iter().map(|s| s.to_string()).collect(),
            images,
        };
        ConflictSpec {
            image_size: 96,
            datasets: vec![
                ds("A", &["circle", "square", "triangle", "cross"], 300),
                ds("B", &["circle"], 300),
                ds("C", &["square"], 300),
            ],
            min_shapes: 1,
            max_shapes: 4,
            min_side: 14,
            max_side: 30,
            noise_std: 0.08,
            background: 0.45,
            color_jitter: 0.05,
        }
    }
}

fn base_color(shape: &str) -> [f64; 3] {
    match shape {
        "circle" => [0.9, 0.2, 0.2],
        "square" => [0.2, 0.75, 0.25],
        "triangle" => [0.2, 0.35, 0.95],
        "cross" => [0.95, 0.85, 0.15],
        _ => [0.85, 0.3, 0.9],
    }
}

/// Whether pixel `(x, y)` (centre at `+0.5`) of a `side`-sized shape whose
/// top-left corner is the origin is covered.
pub fn shape_covers(shape: &str, side: usize, x: usize, y: usize) -> bool {
    let s = side as f64;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (c, r) = (s / 2.0, s / 2.0);
    let d2 = (px - c).powi(2) + (py - c).powi(2);
    match shape {
        "circle" => d2 <= r * r,
        "ring" => d2 <= r * r && d2 >= (0.55 * r).powi(2),
        "square" => true,
        "triangle" => {
            // apex at top centre, base along the bottom edge
            let half = 0.5 * s * py / s;
            (px - c).abs() <= half
        }
        "cross" => {
            let arm = s / 3.0;
            (px - c).abs() <= arm / 2.0 || (py - c).abs() <= arm / 2.0
        }
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub shape: String,
    pub origin: (usize, usize),
    pub side: usize,
    /// Tight pixel extent of the rasterized shape, xyxy.
    pub bbox: [f64; 4],
}

/// Draws one synthetic image; returns it with every placed shape.
pub fn render_scene(spec: &ConflictSpec, kinds: &[String], rng: &mut ChaCha8Rng) -> Result<(Image, Vec<PlacedShape>)> {
    let n = spec.image_size;
    let plane = n * n;
    let mut px: Vec<f32> = (0..3 * plane)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (spec.background + spec.noise_std * z).clamp(0.0, 1.0) as f32
        })
        .collect();
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut placed: Vec<PlacedShape> = Vec::new();
    for _ in 0..count {
        let shape = kinds[rng.random_range(0..kinds.len())].clone();
        // Rejection-sample a non-overlapping spot (2 px gap); give up after a
        // bounded number of tries so crowded specs still terminate.
        for _ in 0..50 {
            let side = rng.random_range(spec.min_side..=spec.max_side);
            let x0 = rng.random_range(0..=n - side);
            let y0 = rng.random_range(0..=n - side);
            let clash = placed.iter().any(|p| {
                let (ox, oy, os) = (p.origin.0, p.origin.1, p.side);
                x0 < ox + os + 2 && ox < x0 + side + 2 && y0 < oy + os + 2 && oy < y0 + side + 2
            });
            if clash {
                continue;
            }
            let base = base_color(&shape);
            let color: Vec<f32> = base
                .iter()
                .map(|&c| {
                    let z: f64 = rng.sample(StandardNormal);
                    (c + spec.color_jitter * z).clamp(0.0, 1.0) as f32
                })
                .collect();
            let mut ext = [usize::MAX, usize::MAX, 0, 0];
            for y in 0..side {
                for x in 0..side {
                    if shape_covers(&shape, side, x, y) {
                        let (gx, gy) = (x0 + x, y0 + y);
                        for c in 0..3 {
                            px[c * plane + gy * n + gx] = color[c];
                        }
                        ext = [ext[0].min(gx), ext[1].min(gy), ext[2].max(gx + 1), ext[3].max(gy + 1)];
                    }
                }
            }
            let bbox = [ext[0] as f64, ext[1] as f64, ext[2] as f64, ext[3] as f64];
            placed.push(PlacedShape { shape, origin: (x0, y0), side, bbox });
            break;
        }
    }
    Ok((Image::new(n, n, px)?, placed))
}

/// Generates one dataset per spec entry. Every image draws shapes from the
/// union of all vocabularies, but each dataset annotates only its own.
pub fn generate_synthetic(spec: &ConflictSpec, seed: u64) -> Result<Vec<DetectionDataset>> {
    if spec.datasets.is_empty() {
        return Err(config("synthetic spec lists no datasets"));
    }
    if spec.min_shapes == 0 || spec.min_shapes > spec.max_shapes {
        return Err(config("need 1 <= min_shapes <= max_shapes"));
    }
    if spec.min_side < 3 || spec.min_side > spec.max_side || spec.max_side > spec.image_size {
        return Err(config("need 3 <= min_side <= max_side <= image_size"));
    }
    let mut kinds: Vec<String> = Vec::new();
    for d in &spec.datasets {
        for v in &d.vocabulary {
            if !SHAPES.contains(&v.as_str()) {
                return Err(config(format!("dataset {}: unknown shape {v:?} (known: {SHAPES:?})", d.name)));
            }
            if !kinds.contains(v) {
                kinds.push(v.clone());
            }
        }
    }
    kinds.sort_by_key(|k| SHAPES.iter().position(|s| s == k));
    let mut out = Vec::new();
    for (di, d) in spec.datasets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(di as u64 + 1);
        let mut images = Vec::new();
        let mut annotations = BTreeMap::new();
        for i in 0..d.images {
            let (image, shapes) = render_scene(spec, &kinds, &mut rng)?;
            let id = i as u64 + 1;
            let anns: Vec<Annotation> = shapes
                .into_iter()
                .filter(|s| d.vocabulary.contains(&s.shape))
                .map(|s| Annotation { label: s.shape, bbox: s.bbox, source: LabelSource::Human, confidence: 1.0 })
                .collect();
            if !anns.is_empty() {
                annotations.insert(id, anns);
            }
            images.push(ImageEntry {
                id,
                file_name: Some(format!("{}_{id:05}.png", d.name)),
                width: spec.image_size,
                height: spec.image_size,
                image,
            });
        }
        out.push(DetectionDataset { name: d.name.clone(), vocabulary: d.vocabulary.clone(), images, annotations });
    }
    Ok(out)
}

/// Several datasets sampled by weight, vocabularies kept separate.
#[derive(Clone, Debug)]
pub struct FederatedRegistry {
    pub datasets: Vec<DetectionDataset>,
    pub weights: Vec<f64>,
}

impl FederatedRegistry {
    /// Weights default to each dataset's share of the images.
    pub fn new(datasets: Vec<DetectionDataset>, weights: Option<Vec<f64>>) -> Result<Self> {
        if datasets.is_empty() || datasets.iter().all(|d| d.images.is_empty()) {
            return Err(data("registry needs at least one non-empty dataset"));
        }
        let weights = match weights {
            Some(w) => {
                if w.len() != datasets.len() || w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(config("one non-negative weight per dataset, not all zero"));
                }
                w
            }
            None => datasets.iter().map(|d| d.images.len() as f64).collect(),
        };
        for (d, &w) in datasets.iter().zip(&weights) {
            if w > 0.0 && d.images.is_empty() {
                return Err(data(format!("dataset {} has weight {w} but no images", d.name)));
            }
        }
        Ok(FederatedRegistry { datasets, weights })
    }

    pub fn total_images(&self) -> usize {
        self.datasets.iter().map(|d| d.images.len()).sum()
    }

    pub fn stream(&self, seed: u64) -> RegistryStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5eed);
        RegistryStream {
            rng,
            pick: WeightedIndex::new(&self.weights).expect("validated weights"),
            sizes: self.datasets.iter().map(|d| d.images.len()).collect(),
            orders: vec![Vec::new(); self.datasets.len()],
        }
    }
}

/// Deterministic interleave: pick a dataset by weight, then that dataset's
/// next image from its own reshuffled cycle.
#[derive(Clone, Debug)]
pub struct RegistryStream {
    rng: ChaCha8Rng,
    pick: WeightedIndex<f64>,
    sizes: Vec<usize>,
    orders: Vec<Vec<usize>>,
}

impl Iterator for RegistryStream {
    /// `(dataset index, image index)`
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        let d = self.pick.sample(&mut self.rng);
        if self.orders[d].is_empty() {
            let mut order: Vec<usize> = (0..self.sizes[d]).collect();
            order.shuffle(&mut self.rng);
            order.reverse();
            self.orders[d] = order;
        }
        self.orders[d].pop().map(|i| (d, i))
    }
}

/// Absolute path helper for dataset specs given relative to a config file.
pub fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}
