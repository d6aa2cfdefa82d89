//! COCO-style average precision.

use omdet_tensor::Float;
use serde::{Deserialize, Serialize};

use crate::data::DetectionDataset;
use crate::error::{usage, Result};
use crate::geometry::iou;
use crate::mdn::Model;
use crate::text::{EmbeddingProvider, Slot};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image: u64,
    pub class: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGroundTruth {
    pub image: u64,
    pub class: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_det: usize,
    /// Detections below this score are ignored by the recall metric.
    pub recall_score_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_det: 300, recall_score_threshold: 0.3 }
    }
}

/// Metrics are `None` for classes without ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub recall50: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall50: f64,
    pub num_images: usize,
    pub num_det: usize,
    pub num_gt: usize,
    pub recall_score_threshold: f64,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.name == name)
    }
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * f64::from(i)).collect()
}

/// TP flags of `dets` (already in ranking order) under greedy matching: each
/// detection takes the unmatched GT of its image with the highest IoU
/// `>= thresh`; a detection of an already-taken GT is a false positive.
pub fn greedy_match(dets: &[EvalDetection], gts: &[EvalGroundTruth], thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image != d.image {
                    continue;
                }
                let o = iou(d.bbox, g.bbox);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked TP flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = f64::from(r) / 100.0;
        // absorbs rounding in recall levels like 0.07 vs 7/100
        if let Some(i) = recall.iter().position(|&x| x >= level - 1e-12) {
            total += precision[i];
        }
    }
    total / 101.0
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Caps each image at `max_det` detections (best first; ties keep input
/// order), then ranks by score with ties broken by image id.
fn rank(dets: &[EvalDetection], max_det: usize) -> Vec<EvalDetection> {
    // Per-image cap, best first; ties keep input order.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[a].image.cmp(&dets[b].image).then(dets[b].score.total_cmp(&dets[a].score)).then(a.cmp(&b)));
    let mut kept = Vec::with_capacity(dets.len());
    let mut run = (u64::MAX, 0usize);
    for i in order {
        let d = dets[i];
        run = if run.0 == d.image { (d.image, run.1 + 1) } else { (d.image, 1) };
        if run.1 <= max_det {
            kept.push(d);
        }
    }
    // kept is image-sorted, so equal scores stay in image then box order
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image.cmp(&b.image)));
    kept
}

/// AP over IoU 0.50:0.95, AP50, AP75 and recall@0.5 per class.
pub fn compute_ap(
    class_names: &[String],
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    num_images: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let nc = class_names.len();
    if let Some(d) = dets.iter().find(|d| d.class >= nc) {
        return Err(usage(format!("detection class {} outside the {nc}-class space", d.class)));
    }
    if let Some(g) = gts.iter().find(|g| g.class >= nc) {
        return Err(usage(format!("ground-truth class {} outside the {nc}-class space", g.class)));
    }
    let kept = rank(dets, cfg.max_det);

    let thresholds = iou_thresholds();
    let mut classes = Vec::with_capacity(nc);
    for (c, name) in class_names.iter().enumerate() {
        let cd: Vec<EvalDetection> = kept.iter().filter(|d| d.class == c).copied().collect();
        let cg: Vec<EvalGroundTruth> = gts.iter().filter(|g| g.class == c).copied().collect();
        let m = if cg.is_empty() {
            ClassMetrics { name: name.clone(), ap: None, ap50: None, ap75: None, recall50: None, num_gt: 0, num_det: cd.len() }
        } else {
            let aps: Vec<f64> = thresholds.iter().map(|&t| interpolated_ap(&greedy_match(&cd, &cg, t), cg.len())).collect();
            let confident: Vec<EvalDetection> =
                cd.iter().filter(|d| d.score >= cfg.recall_score_threshold).copied().collect();
            let hits = greedy_match(&confident, &cg, 0.5).into_iter().filter(|&t| t).count();
            ClassMetrics {
                name: name.clone(),
                ap: Some(mean(aps.iter().copied())),
                ap50: Some(aps[0]),
                ap75: Some(aps[5]),
                recall50: Some(hits as f64 / cg.len() as f64),
                num_gt: cg.len(),
                num_det: cd.len(),
            }
        };
        classes.push(m);
    }
    Ok(EvalReport {
        ap: mean(classes.iter().filter_map(|c| c.ap)),
        ap50: mean(classes.iter().filter_map(|c| c.ap50)),
        ap75: mean(classes.iter().filter_map(|c| c.ap75)),
        recall50: mean(classes.iter().filter_map(|c| c.recall50)),
        classes,
        num_images,
        num_det: kept.len(),
        num_gt: gts.len(),
        recall_score_threshold: cfg.recall_score_threshold,
    })
}

/// One point of a precision-recall curve: the metrics after accepting every
/// detection scoring at least `score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub class: String,
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Raw precision-recall curves at one IoU threshold, ranked and capped as
/// in [`compute_ap`]. Classes without ground truth have no points.
pub fn pr_curves(
    class_names: &[String],
    dets: &[EvalDetection],
    gts: &[EvalGroundTruth],
    iou_thresh: f64,
    cfg: &EvalConfig,
) -> Vec<PrPoint> {
    let kept = rank(dets, cfg.max_det);
    let mut out = Vec::new();
    for (c, name) in class_names.iter().enumerate() {
        let cd: Vec<EvalDetection> = kept.iter().filter(|d| d.class == c).copied().collect();
        let cg: Vec<EvalGroundTruth> = gts.iter().filter(|g| g.class == c).copied().collect();
        if cg.is_empty() {
            continue;
        }
        let mut hits = 0usize;
        for (i, (d, tp)) in cd.iter().zip(greedy_match(&cd, &cg, iou_thresh)).enumerate() {
            hits += usize::from(tp);
            out.push(PrPoint {
                class: name.clone(),
                score: d.score,
                recall: hits as f64 / cg.len() as f64,
                precision: hits as f64 / (i + 1) as f64,
            });
        }
    }
    out
}

/// Evaluation inputs of a dataset: the task (its whole vocabulary in
/// alphabetical order), all detections of the model and the ground truth.
pub struct EvalInputs {
    pub vocabulary: Vec<String>,
    pub detections: Vec<EvalDetection>,
    pub ground_truth: Vec<EvalGroundTruth>,
}

pub fn collect_eval_inputs<F: Float>(
    model: &Model<F>,
    dataset: &DetectionDataset,
    provider: &EmbeddingProvider,
    cfg: &EvalConfig,
) -> Result<EvalInputs> {
    let mut vocab = dataset.vocabulary.clone();
    vocab.sort();
    if vocab.len() > model.cfg.max_task {
        return Err(usage(format!(
            "dataset {} has {} labels but the model accepts at most {} per task; evaluate it in chunks",
            dataset.name,
            vocab.len(),
            model.cfg.max_task
        )));
    }
    let slots: Vec<Slot> = vocab.iter().cloned().map(Some).collect();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for entry in &dataset.images {
        for d in model.detect(&entry.image, &slots, provider, 0.0, cfg.max_det)? {
            dets.push(EvalDetection { image: entry.id, class: d.class_index, bbox: d.bbox, score: d.score });
        }
        for a in dataset.annotations_of(entry.id) {
            let class = vocab.iter().position(|v| *v == a.label).expect("validated vocabulary");
            gts.push(EvalGroundTruth { image: entry.id, class, bbox: a.bbox });
        }
    }
    Ok(EvalInputs { vocabulary: vocab, detections: dets, ground_truth: gts })
}

/// Runs the model on every image with the dataset's whole vocabulary (in
/// alphabetical order) as the task, then scores it.
pub fn evaluate_dataset<F: Float>(
    model: &Model<F>,
    dataset: &DetectionDataset,
    provider: &EmbeddingProvider,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let inputs = collect_eval_inputs(model, dataset, provider, cfg)?;
    compute_ap(&inputs.vocabulary, &inputs.detections, &inputs.ground_truth, dataset.images.len(), cfg)
}
