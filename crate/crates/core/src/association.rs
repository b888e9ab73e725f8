//! Cross-frame proposal association and triplet mining.
//!
//! Two proposals in different frames are declared to be the same object when
//! the depth points of one, reprojected through the known camera poses into
//! the other frame, form a box that overlaps the other proposal strongly
//! enough. Matched pairs become anchor/positive training examples; negatives
//! come from the anchor's own frame, where non-overlapping proposals are
//! guaranteed to show different objects.

use std::collections::HashMap;

use nalgebra::Point3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{iou, reproject_boxes, BoundingBox, CameraPose, Intrinsics, PointCloud};

pub type FrameId = u32;
pub type LocationId = u32;
pub type InstanceId = u32;

/// A posed RGB-D observation: camera pose, depth points, object proposals,
/// and ground-truth boxes (the latter used for evaluation only).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: FrameId,
    pub location_id: LocationId,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    pub cloud: PointCloud,
    pub proposals: Vec<Proposal>,
    pub gt_boxes: Vec<(BoundingBox, InstanceId)>,
}

/// A candidate object box in one frame with its fixed feature descriptor.
///
/// `gt_label` is the evaluation-only instance assignment; the training
/// pipeline never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub frame_id: FrameId,
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
    pub gt_label: Option<InstanceId>,
}

/// Identifies one proposal within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProposalRef {
    pub frame_id: FrameId,
    pub index: usize,
}

/// Two proposals in different frames asserted to show the same object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub a: ProposalRef,
    pub b: ProposalRef,
    pub iou_score: f64,
}

/// Anchor/positive come from a match pair; the negative shares the anchor's
/// frame and does not overlap it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: ProposalRef,
    pub positive: ProposalRef,
    pub negative: ProposalRef,
}

/// Which frame pairs are considered for matching: camera centers within
/// `radius` meters, optionally restricted to same-or-adjacent grid locations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NeighborhoodSpec {
    pub radius: f64,
    #[serde(default)]
    pub grid: Option<GridAdjacency>,
}

/// Grid layout for the optional adjacency restriction; location ids are
/// row-major (`location = row * cols + col`) and adjacency is Chebyshev
/// distance at most one.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GridAdjacency {
    pub cols: u32,
}

impl GridAdjacency {
    fn adjacent(&self, a: LocationId, b: LocationId) -> bool {
        let (ra, ca) = (a / self.cols, a % self.cols);
        let (rb, cb) = (b / self.cols, b % self.cols);
        ra.abs_diff(rb) <= 1 && ca.abs_diff(cb) <= 1
    }
}

impl NeighborhoodSpec {
    /// Neighbor test on (location id, camera center) pairs; frames at the
    /// same grid location share a center and are always neighbors of each
    /// other when the radius is non-negative.
    pub fn location_neighbors(
        &self,
        a: (LocationId, &Point3<f64>),
        b: (LocationId, &Point3<f64>),
    ) -> bool {
        if (a.1 - b.1).norm() > self.radius {
            return false;
        }
        match &self.grid {
            Some(grid) => grid.adjacent(a.0, b.0),
            None => true,
        }
    }

    pub fn neighbors(&self, a: &Frame, b: &Frame) -> bool {
        self.location_neighbors(
            (a.location_id, &a.pose.center()),
            (b.location_id, &b.pose.center()),
        )
    }
}

/// Matches proposals of `frame_k` against proposals of `frame_l`.
///
/// Every proposal of `frame_k` is reprojected into `frame_l`; candidate pairs
/// with IoU at least `th` are reduced to a one-to-one assignment greedily in
/// descending IoU order (ties broken by lower proposal indices), so each
/// proposal appears in at most one returned pair.
pub fn match_frames(
    frame_k: &Frame,
    frame_l: &Frame,
    th: f64,
    min_points: usize,
) -> Vec<MatchPair> {
    assert!(frame_k.id != frame_l.id, "frames must be distinct");
    assert!(
        frame_k.intrinsics == frame_l.intrinsics,
        "frames must share intrinsics"
    );
    assert!(th > 0.0 && th < 1.0, "threshold must lie in (0, 1)");

    let boxes_k: Vec<BoundingBox> = frame_k.proposals.iter().map(|p| p.bbox).collect();
    let projected = reproject_boxes(
        &boxes_k,
        &frame_k.cloud,
        &frame_k.pose,
        &frame_l.pose,
        &frame_k.intrinsics,
        min_points,
    );

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, proj) in projected.iter().enumerate() {
        let proj = match proj {
            Some(b) => b,
            None => continue,
        };
        for (j, prop_l) in frame_l.proposals.iter().enumerate() {
            let score = iou(proj, &prop_l.bbox);
            if score >= th {
                candidates.push((score, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("IoU is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut used_k = vec![false; frame_k.proposals.len()];
    let mut used_l = vec![false; frame_l.proposals.len()];
    let mut pairs = Vec::new();
    for (score, i, j) in candidates {
        if used_k[i] || used_l[j] {
            continue;
        }
        used_k[i] = true;
        used_l[j] = true;
        pairs.push(MatchPair {
            a: ProposalRef {
                frame_id: frame_k.id,
                index: i,
            },
            b: ProposalRef {
                frame_id: frame_l.id,
                index: j,
            },
            iou_score: score,
        });
    }
    pairs
}

/// Runs [`match_frames`] over every unordered frame pair allowed by the
/// neighborhood spec, in ascending (frame id, frame id) order. The lower
/// frame id is always the reprojection source.
pub fn build_matches(
    frames: &[Frame],
    neighborhood: &NeighborhoodSpec,
    th: f64,
    min_points: usize,
) -> Vec<MatchPair> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by_key(|&i| frames[i].id);

    let mut matches = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            let (a, b) = (&frames[i], &frames[j]);
            if neighborhood.neighbors(a, b) {
                matches.extend(match_frames(a, b, th, min_points));
            }
        }
    }
    matches
}

/// Expands match pairs into training triplets.
///
/// Each pair yields up to two triplets (either side as anchor). The negative
/// is drawn uniformly, under the given seed, from proposals in the anchor's
/// frame whose box does not overlap the anchor at all; orderings without an
/// eligible negative are dropped.
pub fn mine_triplets(matches: &[MatchPair], frames: &[Frame], seed: u64) -> Vec<Triplet> {
    let by_id: HashMap<FrameId, &Frame> = frames.iter().map(|f| (f.id, f)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    for pair in matches {
        for (anchor, positive) in [(pair.a, pair.b), (pair.b, pair.a)] {
            let frame = by_id
                .get(&anchor.frame_id)
                .expect("match references a frame absent from the dataset");
            let anchor_box = &frame.proposals[anchor.index].bbox;
            let eligible: Vec<usize> = frame
                .proposals
                .iter()
                .enumerate()
                .filter(|(idx, p)| *idx != anchor.index && iou(anchor_box, &p.bbox) == 0.0)
                .map(|(idx, _)| idx)
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let pick = eligible[rng.random_range(0..eligible.len())];
            triplets.push(Triplet {
                anchor,
                positive,
                negative: ProposalRef {
                    frame_id: anchor.frame_id,
                    index: pick,
                },
            });
        }
    }
    triplets
}
