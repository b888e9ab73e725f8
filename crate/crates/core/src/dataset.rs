//! Dataset and artifact formats on disk.
//!
//! A dataset directory holds a JSON manifest plus three files per frame:
//! a binary point cloud (magic `PTS1`, little-endian u32 count, then xyz as
//! little-endian f32 in the frame's camera coordinates), a proposals CSV
//! (box, optional ground-truth label, descriptor feature columns), and a
//! ground-truth CSV (instance, category, box). Poses in the manifest are
//! row-major camera-to-world rotations plus translations in meters;
//! coordinates follow the crate-wide conventions (camera +z forward, pixel
//! y down).
//!
//! Writing is deterministic: floats are formatted with their shortest
//! round-trip representation, so write -> read -> write reproduces files
//! byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{
    Frame, FrameId, InstanceId, LocationId, MatchPair, Proposal, ProposalRef, Triplet,
};
use crate::detection::Detection;
use crate::discovery::Cluster;
use crate::geometry::{BoundingBox, CameraPose, Intrinsics, PointCloud};
use crate::metriclearn::TraceRecord;

const CLOUD_MAGIC: &[u8; 4] = b"PTS1";
const MANIFEST_VERSION: u32 = 1;
/// Pose orthonormality tolerance applied when loading serialized datasets.
const MANIFEST_POSE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    Validation(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: FrameId,
    pub location_id: LocationId,
    /// Row-major camera-to-world rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub cloud_file: String,
    pub proposals_file: String,
    pub gt_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub intrinsics: Intrinsics,
    /// Every instance of the world with its category, including instances
    /// that never passed the visibility filters.
    pub instances: BTreeMap<InstanceId, String>,
    pub frames: Vec<FrameRecord>,
}

/// A dataset in memory: frames plus instance metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub instance_categories: BTreeMap<InstanceId, String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn write_point_cloud(path: &Path, cloud: &PointCloud) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(8 + cloud.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

pub fn read_point_cloud(path: &Path) -> Result<PointCloud, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 8 || &bytes[0..4] != CLOUD_MAGIC {
        return Err(parse_err(path, 0, "bad point cloud magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * 12 {
        return Err(parse_err(path, 0, "point cloud length mismatch"));
    }
    let mut points = Vec::with_capacity(count);
    for chunk in bytes[8..].chunks_exact(12) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
        points.push(Point3::new(x, y, z));
    }
    PointCloud::new(points).map_err(|e| parse_err(path, 0, e.to_string()))
}

fn proposals_csv(frame: &Frame, dim: usize) -> String {
    let mut out = String::from("index,xmin,ymin,xmax,ymax,gt_label");
    for i in 0..dim {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for (i, p) in frame.proposals.iter().enumerate() {
        let label = p.gt_label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(
            out,
            "{i},{},{},{},{},{label}",
            p.bbox.xmin, p.bbox.ymin, p.bbox.xmax, p.bbox.ymax
        );
        for f in &p.feature {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

fn gt_csv(
    frame: &Frame,
    categories: &BTreeMap<InstanceId, String>,
) -> Result<String, DatasetError> {
    let mut out = String::from("instance_id,category,xmin,ymin,xmax,ymax\n");
    for (bbox, inst) in &frame.gt_boxes {
        let category = categories.get(inst).ok_or_else(|| {
            DatasetError::Validation(format!("instance {inst} has no category"))
        })?;
        if category.contains(',') {
            return Err(DatasetError::Validation(format!(
                "category name {category:?} contains a comma"
            )));
        }
        let _ = write!(
            out,
            "{inst},{category},{},{},{},{}\n",
            bbox.xmin, bbox.ymin, bbox.xmax, bbox.ymax
        );
    }
    Ok(out)
}

/// Writes a dataset directory: `manifest.json` plus `frames/NNNNNN.{pts,
/// props.csv, gt.csv}`.
pub fn write_dataset(
    dir: &Path,
    frames: &[Frame],
    intrinsics: &Intrinsics,
    instances: &BTreeMap<InstanceId, String>,
) -> Result<(), DatasetError> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let dim = frames
        .iter()
        .flat_map(|f| f.proposals.first())
        .map(|p| p.feature.len())
        .next()
        .unwrap_or(0);

    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let stem = format!("{:06}", frame.id);
        let cloud_file = format!("frames/{stem}.pts");
        let proposals_file = format!("frames/{stem}.props.csv");
        let gt_file = format!("frames/{stem}.gt.csv");
        write_point_cloud(&dir.join(&cloud_file), &frame.cloud)?;
        write_atomic(
            &dir.join(&proposals_file),
            proposals_csv(frame, dim).as_bytes(),
        )?;
        write_atomic(&dir.join(&gt_file), gt_csv(frame, instances)?.as_bytes())?;
        let r = frame.pose.rotation();
        records.push(FrameRecord {
            frame_id: frame.id,
            location_id: frame.location_id,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [
                frame.pose.translation().x,
                frame.pose.translation().y,
                frame.pose.translation().z,
            ],
            cloud_file,
            proposals_file,
            gt_file,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        intrinsics: *intrinsics,
        instances: instances.clone(),
        frames: records,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DatasetError::Validation(e.to_string()))?;
    write_atomic(&dir.join("manifest.json"), json.as_bytes())
}

fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64, DatasetError> {
    field
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("bad float {field:?}")))
}

fn read_proposals(
    path: &Path,
    frame_id: FrameId,
    intrinsics: &Intrinsics,
) -> Result<Vec<Proposal>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "empty proposals file"))?;
    if !header.starts_with("index,xmin,ymin,xmax,ymax,gt_label") {
        return Err(parse_err(path, 1, "unexpected proposals header"));
    }
    let dim = header.split(',').count().saturating_sub(6);
    let mut proposals = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 + dim {
            return Err(parse_err(path, idx + 1, "wrong number of columns"));
        }
        let xmin = parse_f64(path, idx + 1, fields[1])?;
        let ymin = parse_f64(path, idx + 1, fields[2])?;
        let xmax = parse_f64(path, idx + 1, fields[3])?;
        let ymax = parse_f64(path, idx + 1, fields[4])?;
        let bbox = BoundingBox::new(xmin, ymin, xmax, ymax)
            .map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        if bbox.xmin < 0.0
            || bbox.ymin < 0.0
            || bbox.xmax > intrinsics.width as f64
            || bbox.ymax > intrinsics.height as f64
        {
            return Err(parse_err(path, idx + 1, "proposal box outside image"));
        }
        let gt_label = if fields[5].is_empty() {
            None
        } else {
            Some(fields[5].parse::<InstanceId>().map_err(|_| {
                parse_err(path, idx + 1, format!("bad instance id {:?}", fields[5]))
            })?)
        };
        let mut feature = Vec::with_capacity(dim);
        for f in &fields[6..] {
            let v = parse_f64(path, idx + 1, f)?;
            if !v.is_finite() {
                return Err(parse_err(path, idx + 1, "non-finite feature"));
            }
            feature.push(v);
        }
        proposals.push(Proposal {
            frame_id,
            bbox,
            feature,
            gt_label,
        });
    }
    Ok(proposals)
}

fn read_gt(path: &Path) -> Result<Vec<(BoundingBox, InstanceId)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate();
    lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "empty ground-truth file"))?;
    let mut boxes = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(path, idx + 1, "wrong number of columns"));
        }
        let inst = fields[0]
            .parse::<InstanceId>()
            .map_err(|_| parse_err(path, idx + 1, "bad instance id"))?;
        let bbox = BoundingBox::new(
            parse_f64(path, idx + 1, fields[2])?,
            parse_f64(path, idx + 1, fields[3])?,
            parse_f64(path, idx + 1, fields[4])?,
            parse_f64(path, idx + 1, fields[5])?,
        )
        .map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        boxes.push((bbox, inst));
    }
    Ok(boxes)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| parse_err(&manifest_path, e.line(), e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::Validation(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for record in &manifest.frames {
        if !seen.insert(record.frame_id) {
            return Err(DatasetError::Validation(format!(
                "duplicate frame id {}",
                record.frame_id
            )));
        }
        let r = &record.rotation;
        let rotation = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let t = Vector3::new(
            record.translation[0],
            record.translation[1],
            record.translation[2],
        );
        let pose = CameraPose::with_tolerance(rotation, t, MANIFEST_POSE_TOLERANCE)
            .map_err(|e| DatasetError::Validation(format!("frame {}: {e}", record.frame_id)))?;
        let cloud = read_point_cloud(&dir.join(&record.cloud_file))?;
        let proposals = read_proposals(
            &dir.join(&record.proposals_file),
            record.frame_id,
            &manifest.intrinsics,
        )?;
        let gt_boxes = read_gt(&dir.join(&record.gt_file))?;
        frames.push(Frame {
            id: record.frame_id,
            location_id: record.location_id,
            pose,
            intrinsics: manifest.intrinsics,
            cloud,
            proposals,
            gt_boxes,
        });
    }
    let dims: std::collections::BTreeSet<usize> = frames
        .iter()
        .flat_map(|f| &f.proposals)
        .map(|p| p.feature.len())
        .collect();
    if dims.len() > 1 {
        return Err(DatasetError::Validation(
            "inconsistent feature dimensions across frames".into(),
        ));
    }
    Ok(Dataset {
        intrinsics: manifest.intrinsics,
        frames,
        instance_categories: manifest.instances,
    })
}

/// Match dump: tab-separated, one pair per line after the header.
pub fn write_matches(path: &Path, matches: &[MatchPair]) -> Result<(), DatasetError> {
    let mut out = String::from("frame_a\tproposal_a\tframe_b\tproposal_b\tiou\n");
    for m in matches {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\n",
            m.a.frame_id, m.a.index, m.b.frame_id, m.b.index, m.iou_score
        );
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_matches(path: &Path) -> Result<Vec<MatchPair>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(path, idx + 1, "wrong number of fields"));
        }
        let num = |s: &str| -> Result<u64, DatasetError> {
            s.parse()
                .map_err(|_| parse_err(path, idx + 1, format!("bad integer {s:?}")))
        };
        out.push(MatchPair {
            a: ProposalRef {
                frame_id: num(fields[0])? as FrameId,
                index: num(fields[1])? as usize,
            },
            b: ProposalRef {
                frame_id: num(fields[2])? as FrameId,
                index: num(fields[3])? as usize,
            },
            iou_score: parse_f64(path, idx + 1, fields[4])?,
        });
    }
    Ok(out)
}

/// Triplet dump: tab-separated (anchor, positive, negative) references.
pub fn write_triplets(path: &Path, triplets: &[Triplet]) -> Result<(), DatasetError> {
    let mut out = String::from(
        "anchor_frame\tanchor_index\tpositive_frame\tpositive_index\tnegative_frame\tnegative_index\n",
    );
    for t in triplets {
        let _ = write!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            t.anchor.frame_id,
            t.anchor.index,
            t.positive.frame_id,
            t.positive.index,
            t.negative.frame_id,
            t.negative.index
        );
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_loss_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), DatasetError> {
    let mut out = String::from("step,lr_effective,loss,triplets_in_batch\n");
    for r in trace {
        let _ = write!(
            out,
            "{},{},{},{}\n",
            r.step, r.lr_effective, r.loss, r.triplets_in_batch
        );
    }
    write_atomic(path, out.as_bytes())
}

/// Embeddings keyed by proposal reference; row order is the canonical
/// proposal order (ascending frame id, then proposal index).
pub fn write_embeddings(
    path: &Path,
    rows: &[(ProposalRef, Vec<f64>)],
) -> Result<(), DatasetError> {
    let dim = rows.first().map(|(_, e)| e.len()).unwrap_or(0);
    let mut out = String::from("frame_id,proposal_index");
    for i in 0..dim {
        let _ = write!(out, ",e{i}");
    }
    out.push('\n');
    for (r, e) in rows {
        let _ = write!(out, "{},{}", r.frame_id, r.index);
        for v in e {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(ProposalRef, Vec<f64>)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(parse_err(path, idx + 1, "wrong number of fields"));
        }
        let frame_id = fields[0]
            .parse::<FrameId>()
            .map_err(|_| parse_err(path, idx + 1, "bad frame id"))?;
        let index = fields[1]
            .parse::<usize>()
            .map_err(|_| parse_err(path, idx + 1, "bad proposal index"))?;
        let mut embedding = Vec::with_capacity(fields.len() - 2);
        for f in &fields[2..] {
            embedding.push(parse_f64(path, idx + 1, f)?);
        }
        rows.push((ProposalRef { frame_id, index }, embedding));
    }
    Ok(rows)
}

/// Cluster dump: one member per line.
pub fn write_clusters(
    path: &Path,
    clusters: &[Cluster],
    refs: &[ProposalRef],
) -> Result<(), DatasetError> {
    let mut out = String::from("cluster_id\tframe_id\tproposal_index\n");
    for c in clusters {
        for &m in &c.members {
            let r = refs[m];
            let _ = write!(out, "{}\t{}\t{}\n", c.id, r.frame_id, r.index);
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_clusters(path: &Path) -> Result<Vec<(usize, ProposalRef)>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, idx + 1, "wrong number of fields"));
        }
        let cluster_id = fields[0]
            .parse::<usize>()
            .map_err(|_| parse_err(path, idx + 1, "bad cluster id"))?;
        let frame_id = fields[1]
            .parse::<FrameId>()
            .map_err(|_| parse_err(path, idx + 1, "bad frame id"))?;
        let index = fields[2]
            .parse::<usize>()
            .map_err(|_| parse_err(path, idx + 1, "bad proposal index"))?;
        rows.push((cluster_id, ProposalRef { frame_id, index }));
    }
    Ok(rows)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<(), DatasetError> {
    let mut out = String::from("frame_id,x1,y1,x2,y2,label,score\n");
    for d in detections {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}\n",
            d.frame_id, d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax, d.label, d.score
        );
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(parse_err(path, idx + 1, "wrong number of fields"));
        }
        let bbox = BoundingBox::new(
            parse_f64(path, idx + 1, fields[1])?,
            parse_f64(path, idx + 1, fields[2])?,
            parse_f64(path, idx + 1, fields[3])?,
            parse_f64(path, idx + 1, fields[4])?,
        )
        .map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        out.push(Detection {
            frame_id: fields[0]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad frame id"))?,
            bbox,
            label: fields[5]
                .parse()
                .map_err(|_| parse_err(path, idx + 1, "bad label"))?,
            score: parse_f64(path, idx + 1, fields[6])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesim::{build_dataset, generate_world, WorldConfig};

    fn tiny_dataset() -> (Vec<Frame>, Intrinsics, BTreeMap<InstanceId, String>) {
        let config = WorldConfig {
            object_count: 6,
            grid_cols: 2,
            grid_rows: 1,
            ..WorldConfig::default()
        };
        let world = generate_world(&config, 3).unwrap();
        let frames = build_dataset(&world, &config, 9);
        let instances = world.instance_categories(&config);
        (frames, config.intrinsics, instances)
    }

    fn read_dir_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
        let mut out = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.insert(
                        p.strip_prefix(dir).unwrap().to_path_buf(),
                        std::fs::read(&p).unwrap(),
                    );
                }
            }
        }
        out
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let (frames, intrinsics, instances) = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("first");
        write_dataset(&first, &frames, &intrinsics, &instances).unwrap();
        let loaded = read_dataset(&first).unwrap();
        assert_eq!(loaded.frames.len(), frames.len());
        assert_eq!(loaded.instance_categories, instances);

        let second = dir.path().join("second");
        write_dataset(&second, &loaded.frames, &loaded.intrinsics, &loaded.instance_categories)
            .unwrap();
        let a = read_dir_bytes(&first);
        let b = read_dir_bytes(&second);
        assert_eq!(a.len(), b.len());
        for (path, bytes) in &a {
            assert_eq!(Some(bytes), b.get(path).as_deref(), "file {path:?} differs");
        }
    }

    #[test]
    fn proposals_and_labels_survive_the_round_trip() {
        let (frames, intrinsics, instances) = tiny_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &frames, &intrinsics, &instances).unwrap();
        let loaded = read_dataset(dir.path()).unwrap();
        for (orig, back) in frames.iter().zip(&loaded.frames) {
            assert_eq!(orig.id, back.id);
            assert_eq!(orig.proposals.len(), back.proposals.len());
            for (p, q) in orig.proposals.iter().zip(&back.proposals) {
                assert_eq!(p.bbox, q.bbox);
                assert_eq!(p.gt_label, q.gt_label);
                assert_eq!(p.feature, q.feature);
            }
            assert_eq!(orig.gt_boxes, back.gt_boxes);
            // Cloud coordinates are quantized to f32 on disk.
            assert_eq!(orig.cloud.len(), back.cloud.len());
            for (a, b) in orig.cloud.points.iter().zip(&back.cloud.points) {
                assert!((a - b).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.pts");
        std::fs::write(&path, b"not a cloud").unwrap();
        assert!(read_point_cloud(&path).is_err());

        let manifest = dir.path().join("manifest.json");
        std::fs::write(&manifest, b"{ not json").unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(DatasetError::Parse { .. })
        ));
    }

    #[test]
    fn match_and_triplet_dumps_round_trip() {
        let matches = vec![
            MatchPair {
                a: ProposalRef {
                    frame_id: 0,
                    index: 3,
                },
                b: ProposalRef {
                    frame_id: 6,
                    index: 1,
                },
                iou_score: 0.8421,
            },
            MatchPair {
                a: ProposalRef {
                    frame_id: 2,
                    index: 0,
                },
                b: ProposalRef {
                    frame_id: 5,
                    index: 4,
                },
                iou_score: 0.125,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matches.tsv");
        write_matches(&path, &matches).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame_a\tproposal_a\tframe_b\tproposal_b\tiou\n"));
        assert_eq!(read_matches(&path).unwrap(), matches);
    }

    #[test]
    fn embeddings_and_detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            (
                ProposalRef {
                    frame_id: 1,
                    index: 0,
                },
                vec![0.25, -0.5, 1.0 / 3.0],
            ),
            (
                ProposalRef {
                    frame_id: 1,
                    index: 2,
                },
                vec![1e-12, 2.0, -3.5],
            ),
        ];
        let path = dir.path().join("embeddings.csv");
        write_embeddings(&path, &rows).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), rows);

        let dets = vec![Detection {
            frame_id: 4,
            bbox: BoundingBox::new(1.0, 2.0, 30.0, 40.0).unwrap(),
            label: 9,
            score: 1.75,
        }];
        let dpath = dir.path().join("detections.csv");
        write_detections(&dpath, &dets).unwrap();
        assert_eq!(read_detections(&dpath).unwrap(), dets);
    }
}
