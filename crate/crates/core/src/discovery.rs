//! Mean-shift object discovery and its precision/recall evaluation.
//!
//! Every embedding seeds a mode-seeking iteration; converged modes closer
//! than half a bandwidth are merged, and each point belongs to the cluster of
//! the mode its seed reached. Discovery quality is measured per ground-truth
//! instance through its dominant cluster, the cluster holding the most
//! proposals of that instance.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::association::{InstanceId, Proposal};
use crate::geometry::{iou, BoundingBox};

/// Kernel for the mean-shift window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// Uniform window: the update is the mean of points within one bandwidth.
    Flat,
    /// Gaussian weights over all points with sigma = bandwidth.
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MeanShiftConfig {
    pub kernel: Kernel,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Modes within `merge_radius_factor * bandwidth` collapse into one.
    pub merge_radius_factor: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::Flat,
            tolerance: 1e-4,
            max_iterations: 300,
            merge_radius_factor: 0.5,
        }
    }
}

/// A discovered group: converged mode plus the indices of the input points
/// assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: usize,
    pub mode: Vec<f64>,
    pub members: Vec<usize>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean-shift clustering. Seeds one iteration per input point, merges
/// converged modes, and partitions the points by the mode their seed reached.
/// Empty input yields no clusters.
pub fn mean_shift(points: &[Vec<f64>], bandwidth: f64, cfg: &MeanShiftConfig) -> Vec<Cluster> {
    assert!(bandwidth > 0.0, "bandwidth must be positive");
    if points.is_empty() {
        return Vec::new();
    }
    let dim = points[0].len();
    assert!(
        points.iter().all(|p| p.len() == dim),
        "points must share one dimension"
    );
    // Flattened copy keeps the inner loop on contiguous memory.
    let data: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let n = points.len();
    let h2 = bandwidth * bandwidth;
    let tol2 = cfg.tolerance * cfg.tolerance;

    let mut converged: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut mean = vec![0.0; dim];
    for seed in points {
        let mut x = seed.clone();
        for _ in 0..cfg.max_iterations {
            mean.iter_mut().for_each(|m| *m = 0.0);
            let mut weight = 0.0;
            for p in data.chunks_exact(dim) {
                let d2 = dist2(&x, p);
                let w = match cfg.kernel {
                    Kernel::Flat => {
                        if d2 <= h2 {
                            1.0
                        } else {
                            continue;
                        }
                    }
                    Kernel::Gaussian => (-d2 / (2.0 * h2)).exp(),
                };
                weight += w;
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += w * v;
                }
            }
            if weight == 0.0 {
                break; // empty window: the iterate is already a fixed point
            }
            mean.iter_mut().for_each(|m| *m /= weight);
            let shift2 = dist2(&x, &mean);
            x.copy_from_slice(&mean);
            if shift2 < tol2 {
                break;
            }
        }
        converged.push(x);
    }

    // Merge nearby modes; the earliest mode wins and keeps its index.
    let merge2 = (bandwidth * cfg.merge_radius_factor).powi(2);
    let mut modes: Vec<Vec<f64>> = Vec::new();
    let mut assignment = vec![0usize; n];
    for (i, c) in converged.iter().enumerate() {
        match modes.iter().position(|m| dist2(m, c) <= merge2) {
            Some(k) => assignment[i] = k,
            None => {
                modes.push(c.clone());
                assignment[i] = modes.len() - 1;
            }
        }
    }

    modes
        .into_iter()
        .enumerate()
        .map(|(id, mode)| Cluster {
            id,
            mode,
            members: assignment
                .iter()
                .enumerate()
                .filter(|(_, &a)| a == id)
                .map(|(i, _)| i)
                .collect(),
        })
        .collect()
}

/// Drops clusters with fewer than `min_size` members, preserving order and
/// cluster ids.
pub fn filter_clusters(clusters: Vec<Cluster>, min_size: usize) -> Vec<Cluster> {
    assert!(min_size >= 1);
    clusters
        .into_iter()
        .filter(|c| c.members.len() >= min_size)
        .collect()
}

/// Assigns each proposal the instance of its highest-IoU ground-truth box,
/// when that IoU reaches `iou_threshold`; ties go to the earlier box.
pub fn label_proposals_by_gt(
    proposals: &[Proposal],
    gt_boxes: &[(BoundingBox, InstanceId)],
    iou_threshold: f64,
) -> Vec<Option<InstanceId>> {
    assert!(iou_threshold > 0.0 && iou_threshold <= 1.0);
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(f64, InstanceId)> = None;
            for (bbox, inst) in gt_boxes {
                let v = iou(&p.bbox, bbox);
                if v >= iou_threshold && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, *inst));
                }
            }
            best.map(|(_, inst)| inst)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceDiscovery {
    pub instance_id: InstanceId,
    pub dominant_cluster_id: Option<usize>,
    pub precision: f64,
    pub recall: f64,
}

/// Per-instance dominant-cluster metrics plus their averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    /// Bandwidth the clusters were produced with, when known.
    pub bandwidth: Option<f64>,
    pub n_clusters: usize,
    pub per_instance: Vec<InstanceDiscovery>,
    pub average_precision: f64,
    pub average_recall: f64,
    /// Instances that had no labeled proposal and were left out.
    pub excluded_instances: Vec<InstanceId>,
}

/// Evaluates clusters against per-proposal instance labels (aligned with the
/// points given to [`mean_shift`]).
///
/// For each instance, the dominant cluster is the one containing the most
/// proposals of that instance (ties: larger cluster, then lower id);
/// precision is the labeled share of that cluster and recall the share of the
/// instance's labeled proposals it captured. Instances from
/// `expected_instances` that have no labeled proposal are reported as
/// excluded.
pub fn discovery_pr(
    clusters: &[Cluster],
    labels: &[Option<InstanceId>],
    expected_instances: Option<&[InstanceId]>,
) -> DiscoveryReport {
    let mut totals: BTreeMap<InstanceId, usize> = BTreeMap::new();
    for inst in labels.iter().flatten() {
        *totals.entry(*inst).or_insert(0) += 1;
    }

    // Per-cluster counts of each instance among its members.
    let counts: Vec<BTreeMap<InstanceId, usize>> = clusters
        .iter()
        .map(|c| {
            let mut m = BTreeMap::new();
            for &idx in &c.members {
                if let Some(inst) = labels[idx] {
                    *m.entry(inst).or_insert(0) += 1;
                }
            }
            m
        })
        .collect();

    let mut per_instance = Vec::new();
    for (&inst, &total) in &totals {
        let mut best: Option<(usize, usize, usize, usize)> = None; // (count, size, id, position)
        for (pos, cluster) in clusters.iter().enumerate() {
            let count = counts[pos].get(&inst).copied().unwrap_or(0);
            if count == 0 {
                continue;
            }
            let cand = (count, cluster.members.len(), cluster.id, pos);
            let better = match best {
                None => true,
                Some((bc, bs, bid, _)) => {
                    count > bc || (count == bc && (cand.1 > bs || (cand.1 == bs && cluster.id < bid)))
                }
            };
            if better {
                best = Some(cand);
            }
        }
        match best {
            Some((count, size, id, _)) => per_instance.push(InstanceDiscovery {
                instance_id: inst,
                dominant_cluster_id: Some(id),
                precision: count as f64 / size as f64,
                recall: count as f64 / total as f64,
            }),
            None => per_instance.push(InstanceDiscovery {
                instance_id: inst,
                dominant_cluster_id: None,
                precision: 0.0,
                recall: 0.0,
            }),
        }
    }

    let excluded: Vec<InstanceId> = match expected_instances {
        Some(all) => {
            let seen: BTreeSet<InstanceId> = totals.keys().copied().collect();
            let mut missing: Vec<InstanceId> =
                all.iter().copied().filter(|i| !seen.contains(i)).collect();
            missing.sort_unstable();
            missing.dedup();
            missing
        }
        None => Vec::new(),
    };

    let n = per_instance.len() as f64;
    let (avg_p, avg_r) = if per_instance.is_empty() {
        (0.0, 0.0)
    } else {
        (
            per_instance.iter().map(|i| i.precision).sum::<f64>() / n,
            per_instance.iter().map(|i| i.recall).sum::<f64>() / n,
        )
    };

    DiscoveryReport {
        bandwidth: None,
        n_clusters: clusters.len(),
        per_instance,
        average_precision: avg_p,
        average_recall: avg_r,
        excluded_instances: excluded,
    }
}

/// Maps each instance's dominant cluster to that instance, emulating a human
/// assigning one label per discovered cluster. When two instances share a
/// dominant cluster the one with more members there wins (ties: lower
/// instance id).
pub fn dominant_cluster_labels(
    clusters: &[Cluster],
    labels: &[Option<InstanceId>],
) -> BTreeMap<usize, InstanceId> {
    let report = discovery_pr(clusters, labels, None);
    let by_id: BTreeMap<usize, &Cluster> = clusters.iter().map(|c| (c.id, c)).collect();
    let mut assignment: BTreeMap<usize, (usize, InstanceId)> = BTreeMap::new(); // cluster -> (count, instance)
    for inst in &report.per_instance {
        let cluster_id = match inst.dominant_cluster_id {
            Some(id) => id,
            None => continue,
        };
        let count = by_id[&cluster_id]
            .members
            .iter()
            .filter(|&&m| labels[m] == Some(inst.instance_id))
            .count();
        let replace = match assignment.get(&cluster_id) {
            None => true,
            Some(&(c, i)) => count > c || (count == c && inst.instance_id < i),
        };
        if replace {
            assignment.insert(cluster_id, (count, inst.instance_id));
        }
    }
    assignment
        .into_iter()
        .map(|(cluster, (_, inst))| (cluster, inst))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn flat() -> MeanShiftConfig {
        MeanShiftConfig::default()
    }

    #[test]
    fn two_well_separated_groups_in_one_dimension() {
        // Hand iteration: seeds {0, 0.1} see only each other within bandwidth
        // 1 and settle on 0.05; likewise {5, 5.1} on 5.05.
        let points = vec![vec![0.0], vec![0.1], vec![5.0], vec![5.1]];
        let clusters = mean_shift(&points, 1.0, &flat());
        assert_eq!(clusters.len(), 2);
        assert_abs_diff_eq!(clusters[0].mode[0], 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(clusters[1].mode[0], 5.05, epsilon = 1e-6);
        assert_eq!(clusters[0].members, vec![0, 1]);
        assert_eq!(clusters[1].members, vec![2, 3]);
    }

    #[test]
    fn identical_points_form_a_single_cluster_at_that_point() {
        let points = vec![vec![1.5, -2.0]; 7];
        let clusters = mean_shift(&points, 0.3, &flat());
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].mode, vec![1.5, -2.0]);
        assert_eq!(clusters[0].members.len(), 7);
    }

    #[test]
    fn bandwidth_covering_the_diameter_gives_one_cluster() {
        let points = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.7, 0.9]];
        let clusters = mean_shift(&points, 10.0, &flat());
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members.len(), 4);
    }

    #[test]
    fn tiny_bandwidth_isolates_each_distinct_point() {
        let points = vec![vec![0.0], vec![1.0], vec![2.0], vec![1.0]];
        let clusters = mean_shift(&points, 1e-6, &flat());
        assert_eq!(clusters.len(), 3);
    }

    /// Independent fixed-point iteration used as the oracle: iterate the
    /// window mean from every start until the shift is negligible, then
    /// deduplicate the converged positions.
    fn brute_force_modes(points: &[Vec<f64>], bandwidth: f64) -> Vec<Vec<f64>> {
        let mut found: Vec<Vec<f64>> = Vec::new();
        for start in points {
            let mut x = start.clone();
            for _ in 0..10_000 {
                let neighbors: Vec<&Vec<f64>> = points
                    .iter()
                    .filter(|p| dist2(&x, p) <= bandwidth * bandwidth)
                    .collect();
                if neighbors.is_empty() {
                    break;
                }
                let mut next = vec![0.0; x.len()];
                for p in &neighbors {
                    for (n, v) in next.iter_mut().zip(p.iter()) {
                        *n += v;
                    }
                }
                next.iter_mut().for_each(|v| *v /= neighbors.len() as f64);
                let shift = dist2(&x, &next).sqrt();
                x = next;
                if shift < 1e-10 {
                    break;
                }
            }
            if !found.iter().any(|m| dist2(m, &x).sqrt() < 1e-3) {
                found.push(x);
            }
        }
        found
    }

    #[test]
    fn modes_match_brute_force_iteration() {
        // Three separated blobs in 2-D, under 30 points.
        let mut points = Vec::new();
        let centers = [[0.0, 0.0], [4.0, 0.5], [1.0, 6.0]];
        let mut v = 0.7;
        for c in &centers {
            for i in 0..9 {
                v = (v * 97.0 + i as f64).rem_euclid(1.0);
                let dx = (v - 0.5) * 0.4;
                let dy = ((v * 7.3).rem_euclid(1.0) - 0.5) * 0.4;
                points.push(vec![c[0] + dx, c[1] + dy]);
            }
        }
        let bandwidth = 1.0;
        let clusters = mean_shift(&points, bandwidth, &flat());
        let oracle = brute_force_modes(&points, bandwidth);
        assert_eq!(clusters.len(), oracle.len());
        for cluster in &clusters {
            let nearest = oracle
                .iter()
                .map(|m| dist2(m, &cluster.mode).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 1e-3, "mode off by {nearest}");
        }
    }

    #[test]
    fn filtering_by_size_keeps_large_clusters_in_order() {
        let mk = |id: usize, n: usize| Cluster {
            id,
            mode: vec![0.0],
            members: (0..n).collect(),
        };
        let clusters = vec![mk(0, 3), mk(1, 8), mk(2, 20)];
        let kept = filter_clusters(clusters.clone(), 8);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].id, 1);
        assert_eq!(kept[1].id, 2);
        assert_eq!(filter_clusters(clusters.clone(), 1).len(), 3);
        assert!(filter_clusters(clusters, 21).is_empty());
    }

    fn prop(bbox: BoundingBox) -> Proposal {
        Proposal {
            frame_id: 0,
            bbox,
            feature: Vec::new(),
            gt_label: None,
        }
    }

    #[test]
    fn proposals_are_labeled_by_best_overlap() {
        let gt = vec![
            (BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap(), 1),
            (BoundingBox::new(8.0, 0.0, 18.0, 10.0).unwrap(), 2),
        ];
        // Exact match takes that instance.
        let exact = prop(BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap());
        // Disjoint from both.
        let far = prop(BoundingBox::new(50.0, 50.0, 60.0, 60.0).unwrap());
        // Overlaps both; higher IoU with the second box wins.
        let between = prop(BoundingBox::new(7.0, 0.0, 17.0, 10.0).unwrap());
        let labels = label_proposals_by_gt(&[exact, far, between], &gt, 0.5);
        assert_eq!(labels, vec![Some(1), None, Some(2)]);
    }

    #[test]
    fn perfect_cluster_scores_perfect_precision_and_recall() {
        let labels: Vec<Option<InstanceId>> = vec![Some(3); 10];
        let cluster = Cluster {
            id: 0,
            mode: vec![0.0],
            members: (0..10).collect(),
        };
        let report = discovery_pr(&[cluster], &labels, None);
        assert_eq!(report.per_instance.len(), 1);
        assert_eq!(report.per_instance[0].precision, 1.0);
        assert_eq!(report.per_instance[0].recall, 1.0);
    }

    #[test]
    fn dominant_cluster_arithmetic_matches_hand_values() {
        // Instance A has 12 labeled proposals; its dominant cluster holds 9
        // of them plus one proposal of instance B.
        let mut labels: Vec<Option<InstanceId>> = vec![Some(0); 12];
        labels.push(Some(1)); // index 12
        let c0 = Cluster {
            id: 0,
            mode: vec![0.0],
            members: (0..9).chain(std::iter::once(12)).collect(),
        };
        let c1 = Cluster {
            id: 1,
            mode: vec![1.0],
            members: vec![9, 10, 11],
        };
        let report = discovery_pr(&[c0, c1], &labels, None);
        let a = &report.per_instance[0];
        assert_eq!(a.dominant_cluster_id, Some(0));
        assert_abs_diff_eq!(a.precision, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(a.recall, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn unseen_expected_instances_are_reported_excluded() {
        let labels = vec![Some(0), Some(0), None];
        let cluster = Cluster {
            id: 0,
            mode: vec![0.0],
            members: vec![0, 1, 2],
        };
        let report = discovery_pr(&[cluster], &labels, Some(&[0, 1, 2]));
        assert_eq!(report.excluded_instances, vec![1, 2]);
        assert_eq!(report.per_instance.len(), 1);
    }

    #[test]
    fn report_is_invariant_to_proposal_and_cluster_reordering() {
        let labels = vec![Some(0), Some(0), Some(1), None, Some(1), Some(0)];
        let clusters = vec![
            Cluster {
                id: 0,
                mode: vec![0.0],
                members: vec![0, 1, 3],
            },
            Cluster {
                id: 1,
                mode: vec![1.0],
                members: vec![2, 4, 5],
            },
        ];
        let base = discovery_pr(&clusters, &labels, None);

        // Permute the proposal indexing.
        let perm = [3usize, 5, 0, 1, 4, 2]; // new index of old proposal i
        let mut new_labels = vec![None; labels.len()];
        for (old, &new) in perm.iter().enumerate() {
            new_labels[new] = labels[old];
        }
        let mut permuted: Vec<Cluster> = clusters
            .iter()
            .map(|c| Cluster {
                id: c.id,
                mode: c.mode.clone(),
                members: c.members.iter().map(|&m| perm[m]).collect(),
            })
            .collect();
        // And swap the cluster order (ids travel with the clusters).
        permuted.reverse();
        let report = discovery_pr(&permuted, &new_labels, None);
        assert_eq!(base.per_instance, report.per_instance);
        assert_eq!(base.average_precision, report.average_precision);
        assert_eq!(base.average_recall, report.average_recall);
    }

    proptest! {
        #[test]
        fn every_point_lands_in_exactly_one_cluster(
            points in proptest::collection::vec(
                proptest::collection::vec(-3.0..3.0f64, 2),
                1..40,
            ),
            bandwidth in 0.05..4.0f64,
        ) {
            let clusters = mean_shift(&points, bandwidth, &flat());
            let mut seen = vec![0usize; points.len()];
            for c in &clusters {
                for &m in &c.members {
                    seen[m] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
