//! Nearest-neighbor detection from a small labeled embedding set, few-shot
//! sampling, and average-precision evaluation at IoU 0.5.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::association::{FrameId, InstanceId};
use crate::discovery::Cluster;
use crate::geometry::{iou, BoundingBox};

#[derive(Debug, Error)]
pub enum DetectionError {
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("no cluster carries a label")]
    NoLabeledClusters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub embedding: Vec<f64>,
    pub label: InstanceId,
}

/// Reference set for nearest-neighbor classification.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub entries: Vec<LabeledExample>,
}

/// A query proposal with its embedding.
#[derive(Debug, Clone)]
pub struct EmbeddedProposal {
    pub frame_id: FrameId,
    pub bbox: BoundingBox,
    pub embedding: Vec<f64>,
}

/// A labeled, scored box. The score is `2.0 - mindist`, so unit embeddings
/// keep it in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_id: FrameId,
    pub bbox: BoundingBox,
    pub label: InstanceId,
    pub score: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Labels each query with its nearest labeled embedding (ties: lowest entry
/// index) and scores it `2.0 - mindist`. When `background_distance` is set,
/// queries farther than that from every entry are dropped as background.
pub fn knn_detect(
    set: &LabeledSet,
    queries: &[EmbeddedProposal],
    background_distance: Option<f64>,
) -> Result<Vec<Detection>, DetectionError> {
    if set.entries.is_empty() {
        return Err(DetectionError::EmptyLabeledSet);
    }
    let mut detections = Vec::with_capacity(queries.len());
    for q in queries {
        let mut best_dist = f64::INFINITY;
        let mut best_label = set.entries[0].label;
        for entry in &set.entries {
            let d = euclidean(&q.embedding, &entry.embedding);
            if d < best_dist {
                best_dist = d;
                best_label = entry.label;
            }
        }
        if let Some(tau) = background_distance {
            if best_dist > tau {
                continue;
            }
        }
        detections.push(Detection {
            frame_id: q.frame_id,
            bbox: q.bbox,
            label: best_label,
            score: 2.0 - best_dist,
        });
    }
    Ok(detections)
}

/// Builds a reference set from labeled clusters: every member of a labeled
/// cluster contributes its embedding under the cluster's label. Unlabeled
/// clusters are skipped; zero labeled clusters is an error.
pub fn cluster_labeled_detector(
    clusters: &[Cluster],
    cluster_labels: &BTreeMap<usize, InstanceId>,
    embeddings: &[Vec<f64>],
) -> Result<LabeledSet, DetectionError> {
    let mut entries = Vec::new();
    for cluster in clusters {
        let label = match cluster_labels.get(&cluster.id) {
            Some(&l) => l,
            None => continue,
        };
        for &member in &cluster.members {
            entries.push(LabeledExample {
                embedding: embeddings[member].clone(),
                label,
            });
        }
    }
    if entries.is_empty() {
        return Err(DetectionError::NoLabeledClusters);
    }
    Ok(LabeledSet { entries })
}

/// Index form of [`few_shot_sample`]: picks up to `n_per_class` pool indices
/// per label, uniformly under the seed, sorted within each class. Callers
/// that keep several representations of the same examples (say, trained
/// embeddings and raw features) can apply one draw to both.
pub fn few_shot_sample_indices(
    labels: &[InstanceId],
    n_per_class: usize,
    seed: u64,
) -> Vec<usize> {
    let mut by_label: BTreeMap<InstanceId, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        by_label.entry(*label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for (_, mut indices) in by_label {
        if indices.len() > n_per_class {
            indices.shuffle(&mut rng);
            indices.truncate(n_per_class);
            indices.sort_unstable();
        }
        selected.extend(indices);
    }
    selected
}

/// Samples up to `n_per_class` examples per label, uniformly under the seed.
/// Classes with fewer examples contribute everything they have.
pub fn few_shot_sample(pool: &[LabeledExample], n_per_class: usize, seed: u64) -> LabeledSet {
    let labels: Vec<InstanceId> = pool.iter().map(|e| e.label).collect();
    let entries = few_shot_sample_indices(&labels, n_per_class, seed)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    LabeledSet { entries }
}

/// Average precision for one class at the given IoU threshold using
/// all-points interpolation.
///
/// Detections are ranked by descending score (ties keep input order); each is
/// greedily matched to the unmatched ground-truth box of highest IoU at or
/// above the threshold in its own frame. `None` when the class has no
/// ground-truth boxes (undefined AP, excluded from means).
pub fn average_precision(
    detections: &[Detection],
    gt_boxes: &[(FrameId, BoundingBox)],
    iou_threshold: f64,
) -> Option<f64> {
    if gt_boxes.is_empty() {
        return None;
    }
    if detections.is_empty() {
        return Some(0.0);
    }

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .expect("scores are finite")
    });

    let mut gt_matched = vec![false; gt_boxes.len()];
    let mut is_tp = Vec::with_capacity(order.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(f64, usize)> = None;
        for (gi, (frame, gbox)) in gt_boxes.iter().enumerate() {
            if *frame != det.frame_id || gt_matched[gi] {
                continue;
            }
            let v = iou(&det.bbox, gbox);
            if v >= iou_threshold && best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                gt_matched[gi] = true;
                is_tp.push(true);
            }
            None => is_tp.push(false),
        }
    }

    let n_gt = gt_boxes.len() as f64;
    let mut precisions = Vec::with_capacity(is_tp.len());
    let mut recalls = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in &is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / n_gt);
    }

    // Precision envelope from the right, then the exact area under the
    // stepwise precision-recall curve.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(&precisions) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Arithmetic mean of per-instance average precisions.
pub fn mean_ap(aps: &[f64]) -> f64 {
    assert!(!aps.is_empty(), "mean over zero defined APs");
    aps.iter().sum::<f64>() / aps.len() as f64
}
