//! Per-image task sampling: which label words the detector is asked about.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotation, FederatedRegistry};
use crate::error::{usage, Result};
use crate::geometry::xyxy_to_cxcywh;
use crate::matching::{GroundTruth, Targets};
use crate::text::Slot;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledTask {
    /// Task words in presentation order (pads excluded).
    pub words: Vec<String>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub pad_count: usize,
    /// Annotations whose label was kept as a positive.
    pub filtered_gts: Vec<Annotation>,
}

impl SampledTask {
    pub fn k(&self) -> usize {
        self.words.len() + self.pad_count
    }

    /// Words followed by the pad slots.
    pub fn slots(&self) -> Vec<Slot> {
        self.words.iter().cloned().map(Some).chain(std::iter::repeat_n(None, self.pad_count)).collect()
    }

    /// Ground truths with class indices into the task, boxes normalized by
    /// the `w`×`h` image.
    pub fn targets(&self, w: f64, h: f64) -> Targets {
        let gts = self
            .filtered_gts
            .iter()
            .map(|a| GroundTruth {
                class: self.words.iter().position(|x| *x == a.label).expect("filtered to task words"),
                bbox: xyxy_to_cxcywh(a.bbox, w, h),
            })
            .collect();
        Targets { gts }
    }
}

/// One draw of the sampling strategy: `k ~ U{1..K}`; keep a random
/// `k`-subset of the image labels if there are more than `k`; otherwise fill
/// with negatives from the rest of the vocabulary, then with pads.
pub fn sample_task<R: Rng + ?Sized>(
    annotations: &[Annotation],
    vocabulary: &[String],
    max_task: usize,
    rng: &mut R,
) -> Result<SampledTask> {
    if max_task == 0 {
        return Err(usage("K must be >= 1"));
    }
    let labels: BTreeSet<&str> = annotations.iter().map(|a| a.label.as_str()).collect();
    if labels.is_empty() && vocabulary.is_empty() {
        return Err(usage("cannot sample a task: no image labels and an empty vocabulary"));
    }
    let k = rng.random_range(1..=max_task);
    let labels: Vec<&str> = labels.into_iter().collect();
    let positives: Vec<String> = if labels.len() > k {
        labels.choose_multiple(rng, k).map(|s| s.to_string()).collect()
    } else {
        labels.iter().map(|s| s.to_string()).collect()
    };
    let candidates: Vec<&String> = vocabulary.iter().filter(|w| !labels.contains(&w.as_str())).collect();
    let want = k - positives.len();
    let negatives: Vec<String> = candidates.choose_multiple(rng, want.min(candidates.len())).map(|s| (*s).clone()).collect();
    let mut words: Vec<String> = positives.iter().chain(&negatives).cloned().collect();
    words.shuffle(rng);
    let pad_count = k - words.len();
    let filtered_gts = annotations.iter().filter(|a| positives.contains(&a.label)).cloned().collect();
    Ok(SampledTask { words, positives, negatives, pad_count, filtered_gts })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub dataset: usize,
    pub image: usize,
    pub task: SampledTask,
    pub targets: Targets,
}

/// Independent task per picked image, each against its own dataset's
/// vocabulary.
pub fn build_batch<R: Rng + ?Sized>(
    registry: &FederatedRegistry,
    picks: &[(usize, usize)],
    max_task: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    picks
        .iter()
        .map(|&(d, i)| {
            let ds = &registry.datasets[d];
            let entry = &ds.images[i];
            let task = sample_task(ds.annotations_of(entry.id), &ds.vocabulary, max_task, rng)?;
            let targets = task.targets(entry.width as f64, entry.height as f64);
            Ok(BatchItem { dataset: d, image: i, task, targets })
        })
        .collect()
}
