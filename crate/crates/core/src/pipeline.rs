//! End-to-end orchestration: simulate -> associate -> train -> embed ->
//! discover -> detect -> evaluate.
//!
//! Stages communicate exclusively through files under one output directory,
//! are individually rerunnable, and are cached by a content hash over their
//! configuration and input artifacts. All stage seeds derive from the single
//! pipeline seed, so one seed pins the entire run; reports embed the config
//! hash and seed for attribution.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::association::{
    build_matches, mine_triplets, Frame, InstanceId, MatchPair, NeighborhoodSpec, ProposalRef,
};
use crate::dataset::{self, Dataset, DatasetError};
use crate::detection::{
    average_precision, cluster_labeled_detector, few_shot_sample_indices, knn_detect, mean_ap,
    Detection, EmbeddedProposal, LabeledExample, LabeledSet,
};
use crate::discovery::{
    discovery_pr, dominant_cluster_labels, filter_clusters, mean_shift, Cluster, DiscoveryReport,
    MeanShiftConfig,
};
use crate::geometry::nms_keep_first;
use crate::metriclearn::{embed, train, EmbeddingModel, MetricError, TrainConfig, TrainOutcome};
use crate::scenesim::{build_dataset, generate_world, SimError, World, WorldConfig};
use crate::seed::derive_seed;

// Seed streams fanned out from the pipeline seed.
const STREAM_TRAIN_PLACEMENT: u64 = 0;
const STREAM_TEST_PLACEMENT: u64 = 1;
const STREAM_TRAIN_RENDER: u64 = 2;
const STREAM_TEST_RENDER: u64 = 3;
const STREAM_TRAINING: u64 = 4;
const STREAM_IDENTITY: u64 = 5;
const STREAM_TRIPLET_DUMP: u64 = 6;
const STREAM_FEW_SHOT: u64 = 7;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl PipelineError {
    /// 2 for configuration and I/O problems, 1 for failures inside a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Io(_) => 2,
            PipelineError::Stage { .. } => 1,
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Io(e.to_string())
    }
}

fn sim_err(e: SimError) -> PipelineError {
    match e {
        SimError::InvalidConfig(msg) => PipelineError::Config(msg),
        other => PipelineError::Stage {
            stage: "simulate",
            message: other.to_string(),
        },
    }
}

fn metric_err(stage: &'static str, e: MetricError) -> PipelineError {
    match e {
        MetricError::InvalidConfig(msg) => PipelineError::Config(msg),
        other => PipelineError::Stage {
            stage,
            message: other.to_string(),
        },
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Overlap threshold for a reprojected box to match a proposal.
    pub iou_threshold: f64,
    /// Minimum surviving depth points for a reprojection to count.
    pub min_points: usize,
    /// Neighborhood radius in meters; derived as 1.5 grid steps when absent.
    pub radius: Option<f64>,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.1,
            min_points: 10,
            radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryConfig {
    pub mean_shift: MeanShiftConfig,
    pub bandwidths: Vec<f64>,
    pub min_cluster_size: usize,
    /// IoU for assigning ground-truth instances to proposals.
    pub gt_iou: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            mean_shift: MeanShiftConfig::default(),
            bandwidths: vec![0.4, 0.5, 0.6, 0.7, 0.8],
            min_cluster_size: 8,
            gt_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub few_shot_counts: Vec<usize>,
    pub nms_iou: f64,
    /// Optional background rejection distance; disabled by default since
    /// ranking handles background for mAP.
    pub background_distance: Option<f64>,
    pub eval_iou: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            few_shot_counts: vec![1, 3, 5, 10],
            nms_iou: 0.7,
            background_distance: None,
            eval_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: Option<String>,
    pub world: WorldConfig,
    pub association: AssociationConfig,
    pub train: TrainConfig,
    pub discovery: DiscoveryConfig,
    pub detection: DetectionConfig,
}

impl PipelineConfig {
    pub fn neighborhood(&self) -> NeighborhoodSpec {
        NeighborhoodSpec {
            radius: self
                .association
                .radius
                .unwrap_or(1.5 * self.world.grid_spacing),
            grid: None,
        }
    }

    /// Hex SHA-256 of the serialized config; embedded in every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex_digest(json.as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// In-memory experiment primitives. The disk stages below and the acceptance
// suite both drive these, so there is a single implementation of the
// protocol.
// ---------------------------------------------------------------------------

/// Canonical proposal order of a dataset: frames in slice order, proposals in
/// index order.
pub fn proposal_refs(frames: &[Frame]) -> Vec<ProposalRef> {
    frames
        .iter()
        .flat_map(|f| {
            (0..f.proposals.len()).map(|index| ProposalRef {
                frame_id: f.id,
                index,
            })
        })
        .collect()
}

/// Ground-truth labels aligned with [`proposal_refs`].
pub fn proposal_gt_labels(frames: &[Frame]) -> Vec<Option<InstanceId>> {
    frames
        .iter()
        .flat_map(|f| f.proposals.iter().map(|p| p.gt_label))
        .collect()
}

/// Embeds every proposal of every frame, in canonical order.
pub fn embed_dataset(
    model: &EmbeddingModel,
    frames: &[Frame],
) -> Result<Vec<Vec<f64>>, MetricError> {
    let mut rows = Vec::new();
    for f in frames {
        for p in &f.proposals {
            rows.push(embed(model, &p.feature)?);
        }
    }
    Ok(rows)
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / norm).collect()
}

/// Raw-feature baseline representation: the frozen descriptor, L2-normalized.
pub fn normalized_raw_features(frames: &[Frame]) -> Vec<Vec<f64>> {
    frames
        .iter()
        .flat_map(|f| f.proposals.iter().map(|p| normalize(&p.feature)))
        .collect()
}

/// Query proposals of a dataset after per-frame class-agnostic NMS, paired
/// with the chosen representation rows (aligned with canonical order).
pub fn build_queries(
    frames: &[Frame],
    representation: &[Vec<f64>],
    nms_iou: f64,
) -> Vec<EmbeddedProposal> {
    let mut queries = Vec::new();
    let mut row = 0usize;
    for f in frames {
        let boxes: Vec<_> = f.proposals.iter().map(|p| p.bbox).collect();
        let kept = nms_keep_first(&boxes, nms_iou);
        for k in kept {
            queries.push(EmbeddedProposal {
                frame_id: f.id,
                bbox: f.proposals[k].bbox,
                embedding: representation[row + k].clone(),
            });
        }
        row += f.proposals.len();
    }
    queries
}

/// Labeled training pool: canonical-order indices of proposals with a
/// ground-truth label, plus their labels.
pub fn labeled_pool(frames: &[Frame]) -> (Vec<usize>, Vec<InstanceId>) {
    let labels = proposal_gt_labels(frames);
    let mut idx = Vec::new();
    let mut lab = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(inst) = l {
            idx.push(i);
            lab.push(*inst);
        }
    }
    (idx, lab)
}

/// Ground-truth boxes of a dataset grouped by instance.
pub fn gt_by_instance(frames: &[Frame]) -> BTreeMap<InstanceId, Vec<(u32, crate::geometry::BoundingBox)>> {
    let mut map: BTreeMap<InstanceId, Vec<_>> = BTreeMap::new();
    for f in frames {
        for (bbox, inst) in &f.gt_boxes {
            map.entry(*inst).or_default().push((f.id, *bbox));
        }
    }
    map
}

/// Per-instance APs and their mean over instances with ground truth.
pub fn evaluate_detections(
    detections: &[Detection],
    gt: &BTreeMap<InstanceId, Vec<(u32, crate::geometry::BoundingBox)>>,
    eval_iou: f64,
) -> (f64, BTreeMap<InstanceId, f64>) {
    let mut by_label: BTreeMap<InstanceId, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_label.entry(d.label).or_default().push(d.clone());
    }
    let empty: Vec<Detection> = Vec::new();
    let mut per_instance = BTreeMap::new();
    for (inst, boxes) in gt {
        let dets = by_label.get(inst).unwrap_or(&empty);
        if let Some(ap) = average_precision(dets, boxes, eval_iou) {
            per_instance.insert(*inst, ap);
        }
    }
    let aps: Vec<f64> = per_instance.values().copied().collect();
    let map = if aps.is_empty() { 0.0 } else { mean_ap(&aps) };
    (map, per_instance)
}

/// Mean intra-instance and inter-instance embedding distances over labeled
/// proposals.
pub fn separation_stats(
    embeddings: &[Vec<f64>],
    labels: &[Option<InstanceId>],
) -> (f64, f64) {
    let labeled: Vec<(usize, InstanceId)> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|inst| (i, inst)))
        .collect();
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for (a, &(ia, la)) in labeled.iter().enumerate() {
        for &(ib, lb) in labeled.iter().skip(a + 1) {
            let d = embeddings[ia]
                .iter()
                .zip(&embeddings[ib])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if la == lb {
                intra.0 += d;
                intra.1 += 1;
            } else {
                inter.0 += d;
                inter.1 += 1;
            }
        }
    }
    (
        if intra.1 > 0 { intra.0 / intra.1 as f64 } else { 0.0 },
        if inter.1 > 0 { inter.0 / inter.1 as f64 } else { 0.0 },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub bandwidth: f64,
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub n_clusters: usize,
}

/// Runs the bandwidth sweep; returns the rows, the index of the best
/// bandwidth (highest precision-recall harmonic mean, ties to the lower
/// bandwidth), and the filtered clusters plus report at that bandwidth.
pub fn discovery_sweep(
    embeddings: &[Vec<f64>],
    labels: &[Option<InstanceId>],
    expected: &[InstanceId],
    cfg: &DiscoveryConfig,
) -> Result<(Vec<SweepRow>, usize, Vec<Cluster>, DiscoveryReport), PipelineError> {
    if cfg.bandwidths.is_empty() {
        return Err(PipelineError::Config("empty bandwidth sweep".into()));
    }
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let mut kept: Option<(Vec<Cluster>, DiscoveryReport)> = None;
    for (i, &bw) in cfg.bandwidths.iter().enumerate() {
        let clusters = mean_shift(embeddings, bw, &cfg.mean_shift);
        let filtered = filter_clusters(clusters, cfg.min_cluster_size);
        let mut report = discovery_pr(&filtered, labels, Some(expected));
        report.bandwidth = Some(bw);
        let (p, r) = (report.average_precision, report.average_recall);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        rows.push(SweepRow {
            bandwidth: bw,
            avg_precision: p,
            avg_recall: r,
            n_clusters: filtered.len(),
        });
        if best.map_or(true, |(bf, _)| f1 > bf) {
            best = Some((f1, i));
            kept = Some((filtered, report));
        }
    }
    let (_, best_idx) = best.expect("non-empty sweep");
    let (clusters, report) = kept.expect("non-empty sweep");
    Ok((rows, best_idx, clusters, report))
}

/// All in-memory artifacts of one end-to-end run on a train/test world pair.
pub struct Experiment {
    pub config: PipelineConfig,
    pub train_world: World,
    pub train_frames: Vec<Frame>,
    pub test_frames: Vec<Frame>,
    pub outcome: TrainOutcome,
    pub train_embeddings: Vec<Vec<f64>>,
    pub test_embeddings: Vec<Vec<f64>>,
    pub matches: Vec<MatchPair>,
}

/// Simulates the world pair, builds matches, and trains the embedding —
/// everything the application stages need, without touching disk.
pub fn run_experiment(config: &PipelineConfig) -> Result<Experiment, PipelineError> {
    let mut world_cfg = config.world.clone();
    world_cfg.seed = derive_seed(config.seed, STREAM_IDENTITY);
    let train_world = generate_world(&world_cfg, derive_seed(config.seed, STREAM_TRAIN_PLACEMENT))
        .map_err(sim_err)?;
    let test_world = generate_world(&world_cfg, derive_seed(config.seed, STREAM_TEST_PLACEMENT))
        .map_err(sim_err)?;
    let train_frames = build_dataset(
        &train_world,
        &world_cfg,
        derive_seed(config.seed, STREAM_TRAIN_RENDER),
    );
    let test_frames = build_dataset(
        &test_world,
        &world_cfg,
        derive_seed(config.seed, STREAM_TEST_RENDER),
    );

    let neighborhood = config.neighborhood();
    let matches = build_matches(
        &train_frames,
        &neighborhood,
        config.association.iou_threshold,
        config.association.min_points,
    );
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, STREAM_TRAINING),
        ..config.train.clone()
    };
    let outcome = train(&train_frames, &matches, &neighborhood, &train_cfg)
        .map_err(|e| metric_err("train", e))?;
    let train_embeddings =
        embed_dataset(&outcome.model, &train_frames).map_err(|e| metric_err("embed", e))?;
    let test_embeddings =
        embed_dataset(&outcome.model, &test_frames).map_err(|e| metric_err("embed", e))?;

    Ok(Experiment {
        config: config.clone(),
        train_world,
        train_frames,
        test_frames,
        outcome,
        train_embeddings,
        test_embeddings,
        matches,
    })
}

impl Experiment {
    /// Few-shot detection with `n` labeled boxes per instance: returns
    /// (trained-embedding mAP, raw-feature baseline mAP). Both variants use
    /// the same sampled boxes.
    pub fn few_shot_eval(&self, n: usize) -> Result<(f64, f64), PipelineError> {
        let (pool_idx, pool_labels) = labeled_pool(&self.train_frames);
        if pool_idx.is_empty() {
            return Err(PipelineError::Stage {
                stage: "detect",
                message: "no labeled proposals in the training world".into(),
            });
        }
        let raw_train = normalized_raw_features(&self.train_frames);
        let raw_test = normalized_raw_features(&self.test_frames);
        let selected = few_shot_sample_indices(
            &pool_labels,
            n,
            derive_seed(self.config.seed, STREAM_FEW_SHOT + n as u64),
        );
        let make_set = |rep: &[Vec<f64>]| LabeledSet {
            entries: selected
                .iter()
                .map(|&i| LabeledExample {
                    embedding: rep[pool_idx[i]].clone(),
                    label: pool_labels[i],
                })
                .collect(),
        };
        let gt = gt_by_instance(&self.test_frames);
        let nms = self.config.detection.nms_iou;
        let bg = self.config.detection.background_distance;
        let eval_iou = self.config.detection.eval_iou;

        let emb_queries = build_queries(&self.test_frames, &self.test_embeddings, nms);
        let emb_dets = knn_detect(&make_set(&self.train_embeddings), &emb_queries, bg)
            .map_err(|e| PipelineError::Stage {
                stage: "detect",
                message: e.to_string(),
            })?;
        let raw_queries = build_queries(&self.test_frames, &raw_test, nms);
        let raw_dets =
            knn_detect(&make_set(&raw_train), &raw_queries, bg).map_err(|e| PipelineError::Stage {
                stage: "detect",
                message: e.to_string(),
            })?;
        let (emb_map, _) = evaluate_detections(&emb_dets, &gt, eval_iou);
        let (raw_map, _) = evaluate_detections(&raw_dets, &gt, eval_iou);
        Ok((emb_map, raw_map))
    }

    /// Discovery sweep on the training world's embeddings.
    pub fn discovery(&self) -> Result<(Vec<SweepRow>, usize, Vec<Cluster>, DiscoveryReport), PipelineError> {
        let labels = proposal_gt_labels(&self.train_frames);
        let expected: Vec<InstanceId> =
            self.train_world.objects.iter().map(|o| o.instance_id).collect();
        discovery_sweep(
            &self.train_embeddings,
            &labels,
            &expected,
            &self.config.discovery,
        )
    }

    /// Detector built from dominant-cluster labels, evaluated on the test
    /// world: returns its mAP.
    pub fn cluster_labeled_eval(&self, clusters: &[Cluster]) -> Result<f64, PipelineError> {
        let labels = proposal_gt_labels(&self.train_frames);
        let label_map = dominant_cluster_labels(clusters, &labels);
        let set = cluster_labeled_detector(clusters, &label_map, &self.train_embeddings).map_err(
            |e| PipelineError::Stage {
                stage: "detect",
                message: e.to_string(),
            },
        )?;
        let queries = build_queries(
            &self.test_frames,
            &self.test_embeddings,
            self.config.detection.nms_iou,
        );
        let dets = knn_detect(&set, &queries, self.config.detection.background_distance)
            .map_err(|e| PipelineError::Stage {
                stage: "detect",
                message: e.to_string(),
            })?;
        let gt = gt_by_instance(&self.test_frames);
        Ok(evaluate_detections(&dets, &gt, self.config.detection.eval_iou).0)
    }

    /// Intra/inter instance distance means on held-out (test) proposals.
    pub fn separation(&self) -> (f64, f64) {
        let labels = proposal_gt_labels(&self.test_frames);
        separation_stats(&self.test_embeddings, &labels)
    }
}

// ---------------------------------------------------------------------------
// Disk stages.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Associate,
    Train,
    Embed,
    Discover,
    Detect,
    Eval,
}

impl Stage {
    pub fn all() -> [Stage; 7] {
        [
            Stage::Simulate,
            Stage::Associate,
            Stage::Train,
            Stage::Embed,
            Stage::Discover,
            Stage::Detect,
            Stage::Eval,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Associate => "associate",
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Discover => "discover",
            Stage::Detect => "detect",
            Stage::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulate" => Ok(Stage::Simulate),
            "associate" => Ok(Stage::Associate),
            "train" => Ok(Stage::Train),
            "embed" => Ok(Stage::Embed),
            "discover" => Ok(Stage::Discover),
            "detect" => Ok(Stage::Detect),
            "eval" => Ok(Stage::Eval),
            other => Err(format!(
                "unknown stage {other:?} (expected one of simulate, associate, train, embed, discover, detect, eval)"
            )),
        }
    }
}

/// File layout inside one pipeline output directory.
pub struct PipelinePaths {
    pub root: PathBuf,
}

impl PipelinePaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn train_dataset(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn test_dataset(&self) -> PathBuf {
        self.root.join("test")
    }
    pub fn matches(&self) -> PathBuf {
        self.root.join("matches.tsv")
    }
    pub fn triplets(&self) -> PathBuf {
        self.root.join("triplets.tsv")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.bin")
    }
    pub fn loss_trace(&self) -> PathBuf {
        self.root.join("loss_trace.csv")
    }
    pub fn embeddings_train(&self) -> PathBuf {
        self.root.join("embeddings_train.csv")
    }
    pub fn embeddings_test(&self) -> PathBuf {
        self.root.join("embeddings_test.csv")
    }
    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.tsv")
    }
    pub fn discovery_report(&self) -> PathBuf {
        self.root.join("discovery_report.json")
    }
    pub fn pr_sweep(&self) -> PathBuf {
        self.root.join("pr_sweep.csv")
    }
    pub fn detections_dir(&self) -> PathBuf {
        self.root.join("detections")
    }
    pub fn detections_few_shot(&self, variant: &str, n: usize) -> PathBuf {
        self.detections_dir()
            .join(format!("few_shot_{variant}_n{n}.csv"))
    }
    pub fn detections_cluster(&self) -> PathBuf {
        self.detections_dir().join("cluster_labeled.csv")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join("stamps").join(format!("{}.sha256", stage.name()))
    }
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<(), PipelineError> {
    let bytes = std::fs::read(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(&bytes);
    Ok(())
}

/// Hash of a directory tree: sorted relative paths and file contents.
fn hash_tree(hasher: &mut Sha256, dir: &Path) -> Result<(), PipelineError> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", d.display())))?;
        for entry in entries {
            let p = entry
                .map_err(|e| PipelineError::Io(e.to_string()))?
                .path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    for f in &files {
        hasher.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        hash_file(hasher, f)?;
    }
    Ok(())
}

enum StampInput<'a> {
    File(PathBuf),
    Tree(PathBuf),
    Text(&'a str),
}

fn compute_stamp(stage: Stage, inputs: &[StampInput<'_>]) -> Result<String, PipelineError> {
    let mut hasher = Sha256::new();
    hasher.update(stage.name().as_bytes());
    for input in inputs {
        match input {
            StampInput::File(p) => hash_file(&mut hasher, p)?,
            StampInput::Tree(p) => hash_tree(&mut hasher, p)?,
            StampInput::Text(t) => hasher.update(t.as_bytes()),
        }
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: Stage,
    pub cached: bool,
    pub detail: String,
}

/// Discovery artifact written to `discovery_report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscoveryArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub best_bandwidth: f64,
    pub report: DiscoveryReport,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotRow {
    pub n: usize,
    pub embedding_map: f64,
    pub raw_map: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub embedding_ap: f64,
    pub raw_ap: f64,
    pub cluster_labeled_ap: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceEval {
    pub instance_id: InstanceId,
    pub category: String,
    pub gt_count: usize,
    pub embedding_ap: Option<f64>,
    pub raw_ap: Option<f64>,
    pub cluster_labeled_ap: Option<f64>,
}

/// Evaluation artifact written to `eval_report.json`. Per-instance and
/// category numbers refer to the reference few-shot count noted in
/// `reference_n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub ap_interpolation: String,
    pub reference_n: usize,
    pub few_shot: Vec<FewShotRow>,
    pub cluster_labeled_map: f64,
    pub category_rollup: Vec<CategoryRow>,
    pub per_instance: Vec<InstanceEval>,
    pub intra_instance_distance: f64,
    pub inter_instance_distance: f64,
    /// Instances with no ground truth in the test world.
    pub excluded_instances: Vec<InstanceId>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let json =
        serde_json::to_string_pretty(value).map_err(|e| PipelineError::Io(e.to_string()))?;
    std::fs::write(path, json.as_bytes())
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

/// Runs the requested stages in order against one output directory,
/// skipping stages whose inputs and configuration are unchanged since the
/// last run.
pub fn run_pipeline(
    config: &PipelineConfig,
    out: &Path,
    stages: &[Stage],
) -> Result<Vec<StageReport>, PipelineError> {
    let paths = PipelinePaths::new(out);
    std::fs::create_dir_all(paths.root.join("stamps"))
        .map_err(|e| PipelineError::Io(format!("{}: {e}", out.display())))?;
    write_json(&paths.config(), config)?;
    let config_hash = config.hash();

    let mut reports = Vec::new();
    for &stage in stages {
        let report = run_stage(config, &paths, &config_hash, stage)?;
        reports.push(report);
    }
    Ok(reports)
}

fn cached(paths: &PipelinePaths, stage: Stage, stamp: &str, outputs: &[PathBuf]) -> bool {
    if !outputs.iter().all(|p| p.exists()) {
        return false;
    }
    match std::fs::read_to_string(paths.stamp(stage)) {
        Ok(existing) => existing == stamp,
        Err(_) => false,
    }
}

fn write_stamp(paths: &PipelinePaths, stage: Stage, stamp: &str) -> Result<(), PipelineError> {
    std::fs::write(paths.stamp(stage), stamp)
        .map_err(|e| PipelineError::Io(e.to_string()))
}

fn run_stage(
    config: &PipelineConfig,
    paths: &PipelinePaths,
    config_hash: &str,
    stage: Stage,
) -> Result<StageReport, PipelineError> {
    let config_json = serde_json::to_string(config).expect("config serializes");
    let detail = match stage {
        Stage::Simulate => {
            let stamp = compute_stamp(stage, &[StampInput::Text(&config_json)])?;
            let outputs = [
                paths.train_dataset().join("manifest.json"),
                paths.test_dataset().join("manifest.json"),
            ];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_simulate(config, paths)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Associate => {
            let stamp = compute_stamp(
                stage,
                &[
                    StampInput::Text(&config_json),
                    StampInput::Tree(paths.train_dataset()),
                ],
            )?;
            let outputs = [paths.matches(), paths.triplets()];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_associate(config, paths)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Train => {
            let stamp = compute_stamp(
                stage,
                &[
                    StampInput::Text(&config_json),
                    StampInput::Tree(paths.train_dataset()),
                    StampInput::File(paths.matches()),
                ],
            )?;
            let outputs = [paths.model(), paths.loss_trace()];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_train(config, paths)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Embed => {
            let stamp = compute_stamp(
                stage,
                &[
                    StampInput::Text(&config_json),
                    StampInput::Tree(paths.train_dataset()),
                    StampInput::Tree(paths.test_dataset()),
                    StampInput::File(paths.model()),
                ],
            )?;
            let outputs = [paths.embeddings_train(), paths.embeddings_test()];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_embed(paths)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Discover => {
            let stamp = compute_stamp(
                stage,
                &[
                    StampInput::Text(&config_json),
                    StampInput::Tree(paths.train_dataset()),
                    StampInput::File(paths.embeddings_train()),
                ],
            )?;
            let outputs = [paths.clusters(), paths.discovery_report(), paths.pr_sweep()];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_discover(config, paths, config_hash)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Detect => {
            let stamp = compute_stamp(
                stage,
                &[
                    StampInput::Text(&config_json),
                    StampInput::Tree(paths.train_dataset()),
                    StampInput::Tree(paths.test_dataset()),
                    StampInput::File(paths.embeddings_train()),
                    StampInput::File(paths.embeddings_test()),
                    StampInput::File(paths.clusters()),
                ],
            )?;
            let mut outputs = vec![paths.detections_cluster()];
            for &n in &config.detection.few_shot_counts {
                outputs.push(paths.detections_few_shot("embedding", n));
                outputs.push(paths.detections_few_shot("raw", n));
            }
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_detect(config, paths)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
        Stage::Eval => {
            let mut inputs = vec![
                StampInput::Text(&config_json),
                StampInput::Tree(paths.test_dataset()),
                StampInput::File(paths.embeddings_test()),
                StampInput::File(paths.detections_cluster()),
            ];
            for &n in &config.detection.few_shot_counts {
                inputs.push(StampInput::File(paths.detections_few_shot("embedding", n)));
                inputs.push(StampInput::File(paths.detections_few_shot("raw", n)));
            }
            let stamp = compute_stamp(stage, &inputs)?;
            let outputs = [paths.eval_report()];
            if cached(paths, stage, &stamp, &outputs) {
                return Ok(StageReport {
                    stage,
                    cached: true,
                    detail: "unchanged".into(),
                });
            }
            let detail = stage_eval(config, paths, config_hash)?;
            write_stamp(paths, stage, &stamp)?;
            detail
        }
    };
    Ok(StageReport {
        stage,
        cached: false,
        detail,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset, PipelineError> {
    Ok(dataset::read_dataset(path)?)
}

fn stage_simulate(config: &PipelineConfig, paths: &PipelinePaths) -> Result<String, PipelineError> {
    let mut world_cfg = config.world.clone();
    world_cfg.seed = derive_seed(config.seed, STREAM_IDENTITY);
    let mut counts = Vec::new();
    for (dir, placement, render) in [
        (
            paths.train_dataset(),
            STREAM_TRAIN_PLACEMENT,
            STREAM_TRAIN_RENDER,
        ),
        (
            paths.test_dataset(),
            STREAM_TEST_PLACEMENT,
            STREAM_TEST_RENDER,
        ),
    ] {
        let world = generate_world(&world_cfg, derive_seed(config.seed, placement))
            .map_err(sim_err)?;
        let frames = build_dataset(&world, &world_cfg, derive_seed(config.seed, render));
        let instances = world.instance_categories(&world_cfg);
        dataset::write_dataset(&dir, &frames, &world_cfg.intrinsics, &instances)?;
        let n_proposals: usize = frames.iter().map(|f| f.proposals.len()).sum();
        let n_gt: usize = frames.iter().map(|f| f.gt_boxes.len()).sum();
        counts.push(format!(
            "{}: {} frames, {} proposals, {} gt boxes",
            dir.file_name().unwrap().to_string_lossy(),
            frames.len(),
            n_proposals,
            n_gt
        ));
    }
    Ok(counts.join("; "))
}

fn stage_associate(
    config: &PipelineConfig,
    paths: &PipelinePaths,
) -> Result<String, PipelineError> {
    let data = load_dataset(&paths.train_dataset())?;
    let neighborhood = config.neighborhood();
    let matches = build_matches(
        &data.frames,
        &neighborhood,
        config.association.iou_threshold,
        config.association.min_points,
    );
    dataset::write_matches(&paths.matches(), &matches)?;
    let triplets = mine_triplets(
        &matches,
        &data.frames,
        derive_seed(config.seed, STREAM_TRIPLET_DUMP),
    );
    dataset::write_triplets(&paths.triplets(), &triplets)?;
    Ok(format!(
        "{} match pairs, {} triplets",
        matches.len(),
        triplets.len()
    ))
}

fn stage_train(config: &PipelineConfig, paths: &PipelinePaths) -> Result<String, PipelineError> {
    let data = load_dataset(&paths.train_dataset())?;
    let matches = dataset::read_matches(&paths.matches())?;
    let train_cfg = TrainConfig {
        seed: derive_seed(config.seed, STREAM_TRAINING),
        ..config.train.clone()
    };
    let outcome = train(&data.frames, &matches, &config.neighborhood(), &train_cfg)
        .map_err(|e| metric_err("train", e))?;
    outcome
        .model
        .save(&paths.model())
        .map_err(|e| PipelineError::Io(e.to_string()))?;
    dataset::write_loss_trace(&paths.loss_trace(), &outcome.trace)?;
    let last_loss = outcome.trace.last().map(|r| r.loss).unwrap_or(0.0);
    Ok(format!(
        "{} steps ({} skipped), final batch loss {last_loss:.4}",
        outcome.trace.len(),
        outcome.skipped_steps
    ))
}

fn stage_embed(paths: &PipelinePaths) -> Result<String, PipelineError> {
    let model = EmbeddingModel::load(&paths.model()).map_err(|e| PipelineError::Io(e.to_string()))?;
    let mut total = 0usize;
    for (dataset_dir, out) in [
        (paths.train_dataset(), paths.embeddings_train()),
        (paths.test_dataset(), paths.embeddings_test()),
    ] {
        let data = load_dataset(&dataset_dir)?;
        let refs = proposal_refs(&data.frames);
        let embeddings =
            embed_dataset(&model, &data.frames).map_err(|e| metric_err("embed", e))?;
        let rows: Vec<(ProposalRef, Vec<f64>)> =
            refs.into_iter().zip(embeddings).collect();
        dataset::write_embeddings(&out, &rows)?;
        total += rows.len();
    }
    Ok(format!("{total} proposals embedded"))
}

fn read_embedding_rows(
    path: &Path,
) -> Result<(Vec<ProposalRef>, Vec<Vec<f64>>), PipelineError> {
    let rows = dataset::read_embeddings(path)?;
    let refs = rows.iter().map(|(r, _)| *r).collect();
    let embeddings = rows.into_iter().map(|(_, e)| e).collect();
    Ok((refs, embeddings))
}

fn stage_discover(
    config: &PipelineConfig,
    paths: &PipelinePaths,
    config_hash: &str,
) -> Result<String, PipelineError> {
    let data = load_dataset(&paths.train_dataset())?;
    let (refs, embeddings) = read_embedding_rows(&paths.embeddings_train())?;
    let labels = proposal_gt_labels(&data.frames);
    if labels.len() != embeddings.len() {
        return Err(PipelineError::Stage {
            stage: "discover",
            message: "embeddings do not match the dataset".into(),
        });
    }
    let expected: Vec<InstanceId> = data.instance_categories.keys().copied().collect();
    let (sweep, best_idx, clusters, report) =
        discovery_sweep(&embeddings, &labels, &expected, &config.discovery)?;

    let mut csv = String::from("bandwidth,avg_precision,avg_recall,n_clusters\n");
    for row in &sweep {
        use std::fmt::Write as _;
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.bandwidth, row.avg_precision, row.avg_recall, row.n_clusters
        );
    }
    std::fs::write(paths.pr_sweep(), csv.as_bytes())
        .map_err(|e| PipelineError::Io(e.to_string()))?;
    dataset::write_clusters(&paths.clusters(), &clusters, &refs)?;
    let best_bandwidth = sweep[best_idx].bandwidth;
    let artifact = DiscoveryArtifact {
        config_hash: config_hash.to_string(),
        seed: config.seed,
        best_bandwidth,
        report,
        sweep,
    };
    write_json(&paths.discovery_report(), &artifact)?;
    Ok(format!(
        "best bandwidth {best_bandwidth}: P {:.3}, R {:.3}, {} clusters",
        artifact.report.average_precision,
        artifact.report.average_recall,
        artifact.report.n_clusters
    ))
}

fn stage_detect(config: &PipelineConfig, paths: &PipelinePaths) -> Result<String, PipelineError> {
    let train_data = load_dataset(&paths.train_dataset())?;
    let test_data = load_dataset(&paths.test_dataset())?;
    let (train_refs, train_embeddings) = read_embedding_rows(&paths.embeddings_train())?;
    let (_, test_embeddings) = read_embedding_rows(&paths.embeddings_test())?;
    std::fs::create_dir_all(paths.detections_dir())
        .map_err(|e| PipelineError::Io(e.to_string()))?;

    let stage_err = |message: String| PipelineError::Stage {
        stage: "detect",
        message,
    };

    let (pool_idx, pool_labels) = labeled_pool(&train_data.frames);
    if pool_idx.is_empty() {
        return Err(stage_err("no labeled proposals in the training world".into()));
    }
    let raw_train = normalized_raw_features(&train_data.frames);
    let raw_test = normalized_raw_features(&test_data.frames);
    let nms = config.detection.nms_iou;
    let bg = config.detection.background_distance;
    let emb_queries = build_queries(&test_data.frames, &test_embeddings, nms);
    let raw_queries = build_queries(&test_data.frames, &raw_test, nms);

    let mut written = 0usize;
    for &n in &config.detection.few_shot_counts {
        let selected = few_shot_sample_indices(
            &pool_labels,
            n,
            derive_seed(config.seed, STREAM_FEW_SHOT + n as u64),
        );
        let make_set = |rep: &[Vec<f64>]| LabeledSet {
            entries: selected
                .iter()
                .map(|&i| LabeledExample {
                    embedding: rep[pool_idx[i]].clone(),
                    label: pool_labels[i],
                })
                .collect(),
        };
        let emb_dets = knn_detect(&make_set(&train_embeddings), &emb_queries, bg)
            .map_err(|e| stage_err(e.to_string()))?;
        dataset::write_detections(&paths.detections_few_shot("embedding", n), &emb_dets)?;
        let raw_dets = knn_detect(&make_set(&raw_train), &raw_queries, bg)
            .map_err(|e| stage_err(e.to_string()))?;
        dataset::write_detections(&paths.detections_few_shot("raw", n), &raw_dets)?;
        written += 2;
    }

    // Cluster-labeled detector from the discovery stage's dump.
    let cluster_rows = dataset::read_clusters(&paths.clusters())?;
    let row_of: HashMap<ProposalRef, usize> = train_refs
        .iter()
        .enumerate()
        .map(|(i, r)| (*r, i))
        .collect();
    let mut grouped: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (cluster_id, pref) in cluster_rows {
        let row = *row_of
            .get(&pref)
            .ok_or_else(|| stage_err(format!("cluster member {pref:?} not in embeddings")))?;
        grouped.entry(cluster_id).or_default().push(row);
    }
    let clusters: Vec<Cluster> = grouped
        .into_iter()
        .map(|(id, members)| Cluster {
            id,
            mode: Vec::new(),
            members,
        })
        .collect();
    let labels = proposal_gt_labels(&train_data.frames);
    let label_map = dominant_cluster_labels(&clusters, &labels);
    let set = cluster_labeled_detector(&clusters, &label_map, &train_embeddings)
        .map_err(|e| stage_err(e.to_string()))?;
    let dets = knn_detect(&set, &emb_queries, bg).map_err(|e| stage_err(e.to_string()))?;
    dataset::write_detections(&paths.detections_cluster(), &dets)?;
    written += 1;

    Ok(format!("{written} detection files"))
}

fn stage_eval(
    config: &PipelineConfig,
    paths: &PipelinePaths,
    config_hash: &str,
) -> Result<String, PipelineError> {
    let test_data = load_dataset(&paths.test_dataset())?;
    let gt = gt_by_instance(&test_data.frames);
    if gt.is_empty() {
        return Err(PipelineError::Stage {
            stage: "eval",
            message: "test world has no ground-truth boxes".into(),
        });
    }
    let eval_iou = config.detection.eval_iou;

    let mut few_shot = Vec::new();
    let mut reference: Option<(usize, BTreeMap<InstanceId, f64>, BTreeMap<InstanceId, f64>)> =
        None;
    let reference_n = config
        .detection
        .few_shot_counts
        .iter()
        .copied()
        .find(|&n| n == 5)
        .or_else(|| config.detection.few_shot_counts.iter().copied().max())
        .ok_or_else(|| PipelineError::Config("empty few-shot counts".into()))?;
    for &n in &config.detection.few_shot_counts {
        let emb = dataset::read_detections(&paths.detections_few_shot("embedding", n))?;
        let raw = dataset::read_detections(&paths.detections_few_shot("raw", n))?;
        let (emb_map, emb_per) = evaluate_detections(&emb, &gt, eval_iou);
        let (raw_map, raw_per) = evaluate_detections(&raw, &gt, eval_iou);
        few_shot.push(FewShotRow {
            n,
            embedding_map: emb_map,
            raw_map,
        });
        if n == reference_n {
            reference = Some((n, emb_per, raw_per));
        }
    }
    let (reference_n, emb_per, raw_per) = reference.expect("reference n evaluated");

    let cluster_dets = dataset::read_detections(&paths.detections_cluster())?;
    let (cluster_map, cluster_per) = evaluate_detections(&cluster_dets, &gt, eval_iou);

    // Per-instance table and category rollups.
    let mut per_instance = Vec::new();
    let mut by_category: BTreeMap<String, (Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (inst, boxes) in &gt {
        let category = test_data
            .instance_categories
            .get(inst)
            .cloned()
            .unwrap_or_else(|| "unknown".into());
        let e = emb_per.get(inst).copied();
        let r = raw_per.get(inst).copied();
        let c = cluster_per.get(inst).copied();
        per_instance.push(InstanceEval {
            instance_id: *inst,
            category: category.clone(),
            gt_count: boxes.len(),
            embedding_ap: e,
            raw_ap: r,
            cluster_labeled_ap: c,
        });
        let slot = by_category.entry(category).or_default();
        if let Some(v) = e {
            slot.0.push(v);
        }
        if let Some(v) = r {
            slot.1.push(v);
        }
        if let Some(v) = c {
            slot.2.push(v);
        }
    }
    let category_rollup: Vec<CategoryRow> = by_category
        .into_iter()
        .map(|(category, (e, r, c))| CategoryRow {
            instances: e.len().max(r.len()).max(c.len()),
            embedding_ap: if e.is_empty() { 0.0 } else { mean_ap(&e) },
            raw_ap: if r.is_empty() { 0.0 } else { mean_ap(&r) },
            cluster_labeled_ap: if c.is_empty() { 0.0 } else { mean_ap(&c) },
            category,
        })
        .collect();

    let excluded: Vec<InstanceId> = test_data
        .instance_categories
        .keys()
        .filter(|i| !gt.contains_key(i))
        .copied()
        .collect();

    let (_, test_embeddings) = read_embedding_rows(&paths.embeddings_test())?;
    let labels = proposal_gt_labels(&test_data.frames);
    let (intra, inter) = separation_stats(&test_embeddings, &labels);

    let artifact = EvalArtifact {
        config_hash: config_hash.to_string(),
        seed: config.seed,
        ap_interpolation: "all-points".into(),
        reference_n,
        few_shot,
        cluster_labeled_map: cluster_map,
        category_rollup,
        per_instance,
        intra_instance_distance: intra,
        inter_instance_distance: inter,
        excluded_instances: excluded,
    };
    write_json(&paths.eval_report(), &artifact)?;
    let n1 = artifact.few_shot.first();
    Ok(format!(
        "cluster-labeled mAP {:.3}; n=1 embedding mAP {:.3} vs raw {:.3}",
        cluster_map,
        n1.map(|r| r.embedding_map).unwrap_or(0.0),
        n1.map(|r| r.raw_map).unwrap_or(0.0)
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_order_round_trips_through_names() {
        for stage in Stage::all() {
            let parsed: Stage = stage.name().parse().unwrap();
            assert_eq!(parsed, stage);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn neighborhood_radius_defaults_to_one_and_a_half_steps() {
        let config = PipelineConfig::default();
        let spec = config.neighborhood();
        assert_eq!(spec.radius, 1.5 * config.world.grid_spacing);
        let fixed = PipelineConfig {
            association: AssociationConfig {
                radius: Some(2.5),
                ..AssociationConfig::default()
            },
            ..PipelineConfig::default()
        };
        assert_eq!(fixed.neighborhood().radius, 2.5);
    }
}
