//! Camera model, point-cloud containment, cross-frame box reprojection, and
//! box overlap measures.
//!
//! Conventions: right-handed coordinates, a camera looks down its +z axis,
//! pixel x grows right and pixel y grows down with the origin at the top-left
//! image corner. Poses map camera coordinates to world coordinates; point
//! clouds are stored in the camera frame of the view that captured them.

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),
    #[error("point cloud contains a non-finite coordinate")]
    NonFinitePoint,
}

/// Rigid camera pose mapping camera coordinates to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// Default orthonormality tolerance for constructed poses.
pub const POSE_TOLERANCE: f64 = 1e-9;

impl CameraPose {
    /// Builds a pose from a camera-to-world rotation and translation,
    /// rejecting rotations that are not orthonormal with unit determinant
    /// within [`POSE_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        Self::with_tolerance(rotation, translation, POSE_TOLERANCE)
    }

    /// Like [`CameraPose::new`] but with a caller-chosen tolerance. Poses read
    /// back from serialized datasets use a looser bound.
    pub fn with_tolerance(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        tolerance: f64,
    ) -> Result<Self, GeometryError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation;
        let max_dev = (gram - Matrix3::identity())
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        if max_dev > tolerance {
            return Err(GeometryError::InvalidPose(format!(
                "rotation not orthonormal (max |RᵀR - I| = {max_dev:.3e})"
            )));
        }
        let det_dev = (rotation.determinant() - 1.0).abs();
        if det_dev > tolerance {
            return Err(GeometryError::InvalidPose(format!(
                "rotation determinant deviates from 1 by {det_dev:.3e}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn camera_to_world(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn world_to_camera(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }
}

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(0.0..(width as f64)).contains(&cx) || !(0.0..(height as f64)).contains(&cy) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Axis-aligned box in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BoundingBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, GeometryError> {
        if ![xmin, ymin, xmax, ymax].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidBox("non-finite coordinate".into()));
        }
        if xmin >= xmax || ymin >= ymax {
            return Err(GeometryError::InvalidBox(format!(
                "degenerate extent ({xmin}, {ymin}, {xmax}, {ymax})"
            )));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Boundary-inclusive pixel containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    /// Intersection of the box with `[0, width] x [0, height]`; `None` when
    /// the clipped box is degenerate or lies fully outside.
    pub fn clip_to_image(&self, intr: &Intrinsics) -> Option<BoundingBox> {
        let xmin = self.xmin.max(0.0);
        let ymin = self.ymin.max(0.0);
        let xmax = self.xmax.min(intr.width as f64);
        let ymax = self.ymax.min(intr.height as f64);
        if xmin < xmax && ymin < ymax {
            Some(BoundingBox {
                xmin,
                ymin,
                xmax,
                ymax,
            })
        } else {
            None
        }
    }
}

/// Points in one camera's coordinate frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    /// Wraps points, rejecting non-finite coordinates. Empty clouds are valid.
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinitePoint);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project_point(intr: &Intrinsics, p: &Point3<f64>) -> Result<Point2<f64>, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok(Point2::new(
        intr.fx * p.x / p.z + intr.cx,
        intr.fy * p.y / p.z + intr.cy,
    ))
}

/// Back-projects a pixel at a given depth (z in camera coordinates) to a
/// camera-frame point. Counterpart of [`project_point`], used by tests and
/// the simulator's oracles.
pub fn unproject_pixel(intr: &Intrinsics, px: &Point2<f64>, depth: f64) -> Point3<f64> {
    Point3::new(
        (px.x - intr.cx) / intr.fx * depth,
        (px.y - intr.cy) / intr.fy * depth,
        depth,
    )
}

/// Subset of a cloud whose projections fall inside `bbox` (clipped to the
/// image, boundary inclusive). Points behind the camera are skipped.
pub fn points_in_box(cloud: &PointCloud, intr: &Intrinsics, bbox: &BoundingBox) -> PointCloud {
    let clipped = match bbox.clip_to_image(intr) {
        Some(b) => b,
        None => return PointCloud::default(),
    };
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            p.z > 0.0 && {
                let px = project_point(intr, p).expect("z > 0 checked");
                clipped.contains(px.x, px.y)
            }
        })
        .copied()
        .collect();
    PointCloud { points }
}

/// Reprojects each box from the view of `pose_k` into the view of `pose_l`.
///
/// For every box: take the cloud points contained in the (image-clipped) box,
/// move them camera-k -> world -> camera-l, drop points that land behind
/// camera l, project the rest, and return the min/max pixel extent clipped to
/// the image. Yields `None` when fewer than `min_points` points survive or
/// the resulting extent is degenerate.
///
/// The per-point work is shared across boxes, which is what frame matching
/// leans on; [`reproject_box`] is the single-box form.
pub fn reproject_boxes(
    boxes: &[BoundingBox],
    cloud: &PointCloud,
    pose_k: &CameraPose,
    pose_l: &CameraPose,
    intr: &Intrinsics,
    min_points: usize,
) -> Vec<Option<BoundingBox>> {
    assert!(min_points >= 1, "min_points must be at least 1");
    // Source projection (None when behind camera k) and target projection
    // (None when behind camera l) for every cloud point.
    let mut src_px: Vec<Option<Point2<f64>>> = Vec::with_capacity(cloud.len());
    let mut dst_px: Vec<Option<Point2<f64>>> = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        if p.z > 0.0 {
            src_px.push(Some(project_point(intr, p).expect("z > 0 checked")));
            let world = pose_k.camera_to_world(p);
            let cam_l = pose_l.world_to_camera(&world);
            if cam_l.z > 0.0 {
                dst_px.push(Some(project_point(intr, &cam_l).expect("z > 0 checked")));
            } else {
                dst_px.push(None);
            }
        } else {
            src_px.push(None);
            dst_px.push(None);
        }
    }

    boxes
        .iter()
        .map(|bbox| {
            let clipped = bbox.clip_to_image(intr)?;
            let mut count = 0usize;
            let mut xmin = f64::INFINITY;
            let mut ymin = f64::INFINITY;
            let mut xmax = f64::NEG_INFINITY;
            let mut ymax = f64::NEG_INFINITY;
            for (src, dst) in src_px.iter().zip(&dst_px) {
                if let (Some(s), Some(d)) = (src, dst) {
                    if clipped.contains(s.x, s.y) {
                        count += 1;
                        xmin = xmin.min(d.x);
                        ymin = ymin.min(d.y);
                        xmax = xmax.max(d.x);
                        ymax = ymax.max(d.y);
                    }
                }
            }
            if count < min_points {
                return None;
            }
            BoundingBox {
                xmin,
                ymin,
                xmax,
                ymax,
            }
            .clip_to_image(intr)
        })
        .collect()
}

/// Single-box form of [`reproject_boxes`].
pub fn reproject_box(
    bbox: &BoundingBox,
    cloud: &PointCloud,
    pose_k: &CameraPose,
    pose_l: &CameraPose,
    intr: &Intrinsics,
    min_points: usize,
) -> Option<BoundingBox> {
    reproject_boxes(&[*bbox], cloud, pose_k, pose_l, intr, min_points)
        .pop()
        .flatten()
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let iy = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Class-agnostic non-maximum suppression with priority given by input order:
/// a box is kept when its IoU with every previously kept box stays at or
/// below `iou_threshold`. Returns indices of kept boxes in input order.
pub fn nms_keep_first(boxes: &[BoundingBox], iou_threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, bbox) in boxes.iter().enumerate() {
        if kept.iter().all(|&k| iou(&boxes[k], bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
