//! Per-frame occupancy label generation from a labeled scene point set.
//!
//! For every frame: check the pose, place a world-aligned grid in front of the
//! camera, copy each voxel's label from the nearest source point, and drop
//! frames that are almost empty or show fewer than two semantic classes.
//! World z is the vertical axis.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{orthonormality_error, CameraModel, ORTHONORMAL_TOL};
use crate::tensorio::{CameraDoc, DenseTensor, TensorIoError};
use crate::voxel::{class_histogram, GridError, GridSpec, LabelGrid, NUM_CLASSES, UNKNOWN};

pub const DEFAULT_FRAMES_PER_SCENE: usize = 100;
pub const DEFAULT_TRAIN_RATIO: f64 = 0.7;
/// Rotation deviation above which a pose is rejected outright.
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-3;
/// Frames whose free-or-unknown share exceeds this many percent are rejected.
pub const MAX_EMPTY_PERCENT: u64 = 95;
pub const MIN_SEMANTIC_CLASSES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelGenError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate view: camera forward direction has no horizontal component")]
    DegenerateView,
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl From<LabelGenError> for TensorIoError {
    fn from(e: LabelGenError) -> Self {
        TensorIoError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    InvalidPose,
    OutOfBounds,
    EmptyRatio,
    ClassCount,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] = [
        RejectReason::InvalidPose,
        RejectReason::OutOfBounds,
        RejectReason::EmptyRatio,
        RejectReason::ClassCount,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::InvalidPose => "invalid_pose",
            RejectReason::OutOfBounds => "out_of_bounds",
            RejectReason::EmptyRatio => "empty_ratio",
            RejectReason::ClassCount => "class_count",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameDecision {
    Keep,
    Reject(RejectReason),
}

impl FrameDecision {
    pub fn is_keep(self) -> bool {
        self == FrameDecision::Keep
    }

    pub fn verdict(self) -> &'static str {
        match self {
            FrameDecision::Keep => "keep",
            FrameDecision::Reject(_) => "reject",
        }
    }

    pub fn reason(self) -> &'static str {
        match self {
            FrameDecision::Keep => "none",
            FrameDecision::Reject(r) => r.as_str(),
        }
    }
}

/// Source of label transfer: labeled points (0 = free, 1..=11 semantic).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointSet {
    points: Vec<[f64; 3]>,
    labels: Vec<u8>,
    source_voxel_size: f64,
}

impl LabeledPointSet {
    pub fn new(
        points: Vec<[f64; 3]>,
        labels: Vec<u8>,
        source_voxel_size: f64,
    ) -> Result<Self, LabelGenError> {
        if points.is_empty() {
            return Err(LabelGenError::Domain("labeled point set is empty".into()));
        }
        if points.len() != labels.len() {
            return Err(LabelGenError::Domain(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(LabelGenError::Domain(format!("point {i} is not finite")));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= NUM_CLASSES) {
            return Err(LabelGenError::Domain(format!(
                "point {i} has label {}, expected 0..=11",
                labels[i]
            )));
        }
        if !(source_voxel_size > 0.0 && source_voxel_size.is_finite()) {
            return Err(LabelGenError::Domain(format!(
                "source voxel size must be positive, got {source_voxel_size}"
            )));
        }
        Ok(Self {
            points,
            labels,
            source_voxel_size,
        })
    }

    /// Reads a `P x 4` float tensor of `(x, y, z, label)` rows.
    pub fn from_tensor(t: &DenseTensor, source_voxel_size: f64) -> Result<Self, TensorIoError> {
        let &[_, 4] = t.dims() else {
            return Err(TensorIoError::Format(format!(
                "labeled points must have shape (P, 4), got {:?}",
                t.dims()
            )));
        };
        let data = t.to_f32_vec()?;
        let mut points = Vec::with_capacity(data.len() / 4);
        let mut labels = Vec::with_capacity(data.len() / 4);
        for (i, row) in data.chunks_exact(4).enumerate() {
            let l = row[3];
            if !(l >= 0.0 && l < NUM_CLASSES as f32 && l.fract() == 0.0) {
                return Err(TensorIoError::Format(format!("point {i} has label {l}")));
            }
            points.push([f64::from(row[0]), f64::from(row[1]), f64::from(row[2])]);
            labels.push(l as u8);
        }
        Ok(Self::new(points, labels, source_voxel_size)?)
    }

    pub fn to_tensor(&self) -> DenseTensor {
        let data = self
            .points
            .iter()
            .zip(&self.labels)
            .flat_map(|(p, &l)| [p[0] as f32, p[1] as f32, p[2] as f32, f32::from(l)])
            .collect();
        DenseTensor::from_f32(vec![self.points.len(), 4], data).expect("nonempty point set")
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
    pub fn source_voxel_size(&self) -> f64 {
        self.source_voxel_size
    }

    /// One source-voxel diagonal.
    pub fn default_max_dist(&self) -> f64 {
        self.source_voxel_size * 3f64.sqrt()
    }
}

/// Axis-aligned scene box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn parse(text: &str) -> Result<Self, TensorIoError> {
        let b: Self =
            serde_json::from_str(text).map_err(|e| TensorIoError::Format(e.to_string()))?;
        if (0..3).any(|a| !(b.min[a].is_finite() && b.max[a].is_finite() && b.min[a] <= b.max[a])) {
            return Err(TensorIoError::Format(
                "scene bounds need finite min <= max".into(),
            ));
        }
        Ok(b)
    }
}

fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SAMPLE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

/// Picks `n` frames: the sequence is cut into `n` contiguous strata of equal
/// (integer-rounded) length and one frame is drawn uniformly from each.
/// Fewer than `n` frames are returned whole. Order is preserved.
pub fn sample_frames<T: Clone>(frames: &[T], n: usize, seed: u64) -> Result<Vec<T>, LabelGenError> {
    if n == 0 {
        return Err(LabelGenError::Domain("frame count must be positive".into()));
    }
    if frames.is_empty() {
        return Err(LabelGenError::Domain("no frames to sample".into()));
    }
    let len = frames.len();
    if len <= n {
        return Ok(frames.to_vec());
    }
    let mut rng = seeded_rng(seed, SAMPLE_STREAM);
    Ok((0..n)
        .map(|i| {
            let lo = i * len / n;
            let hi = (i + 1) * len / n;
            frames[rng.random_range(lo..hi)].clone()
        })
        .collect())
}

/// Seeded shuffle, then the first `round(ratio · n)` become training frames.
/// Both halves keep the input order.
pub fn split_frames<T: Clone>(frames: &[T], train_ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(
        (0.0..=1.0).contains(&train_ratio),
        "train ratio must be in [0, 1], got {train_ratio}"
    );
    let n = frames.len();
    let n_train = (train_ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, SPLIT_STREAM));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (f, t) in frames.iter().zip(is_train) {
        if t {
            train.push(f.clone());
        } else {
            val.push(f.clone());
        }
    }
    (train, val)
}

fn rotation_of(pose: &[f64; 16]) -> Matrix3<f64> {
    Matrix3::new(
        pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10],
    )
}

/// Rejects non-finite or clearly non-rigid poses and cameras outside the scene box.
pub fn validate_pose(cam: &CameraDoc, bounds: &SceneBounds) -> FrameDecision {
    let pose = &cam.cam_to_world;
    if pose.iter().any(|x| !x.is_finite()) {
        return FrameDecision::Reject(RejectReason::InvalidPose);
    }
    let err = orthonormality_error(&rotation_of(pose));
    if !(err <= POSE_ORTHONORMAL_TOL) {
        return FrameDecision::Reject(RejectReason::InvalidPose);
    }
    let position = Point3::new(pose[3], pose[7], pose[11]);
    if !bounds.contains(&position) {
        return FrameDecision::Reject(RejectReason::OutOfBounds);
    }
    FrameDecision::Keep
}

/// Builds the camera, snapping a slightly non-orthonormal rotation (deviation
/// within [`POSE_ORTHONORMAL_TOL`]) to the nearest rotation.
pub fn camera_from_doc(doc: &CameraDoc) -> Result<CameraModel, crate::camera::CameraError> {
    let mut pose = doc.cam_to_world;
    let rot = rotation_of(&pose);
    if pose.iter().all(|x| x.is_finite()) && orthonormality_error(&rot) > ORTHONORMAL_TOL {
        let svd = rot.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut fixed = u * v_t;
        if fixed.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            fixed = u * v_t;
        }
        for r in 0..3 {
            for c in 0..3 {
                pose[r * 4 + c] = fixed[(r, c)];
            }
        }
    }
    CameraModel::new(doc.fx, doc.fy, doc.cx, doc.cy, doc.width, doc.height, pose)
}

/// Grid origin for a frame.
///
/// The grid's horizontal footprint is centred half its x-extent ahead of the
/// camera along the horizontal projection of the optical axis; the bottom
/// face sits at `floor_height`.
pub fn select_origin(
    cam: &CameraModel,
    dims: [usize; 3],
    voxel_size: f64,
    floor_height: f64,
) -> Result<[f64; 3], LabelGenError> {
    let f = cam.forward();
    let horiz = (f.x * f.x + f.y * f.y).sqrt();
    if horiz < 1e-6 {
        return Err(LabelGenError::DegenerateView);
    }
    let (fx, fy) = (f.x / horiz, f.y / horiz);
    let half_x = dims[0] as f64 * voxel_size / 2.0;
    let half_y = dims[1] as f64 * voxel_size / 2.0;
    let pos = cam.position();
    let center_x = pos.x + half_x * fx;
    let center_y = pos.y + half_x * fy;
    Ok([center_x - half_x, center_y - half_y, floor_height])
}

type CellKey = (i64, i64, i64);

struct SpatialHash {
    base: [f64; 3],
    cell: f64,
    cells: HashMap<CellKey, Vec<u32>>,
}

impl SpatialHash {
    fn key(&self, p: &[f64; 3]) -> CellKey {
        let k = |a: usize| ((p[a] - self.base[a]) / self.cell).floor() as i64;
        (k(0), k(1), k(2))
    }
}

#[inline]
fn consider(best: &mut Option<(f64, u32)>, d2: f64, idx: u32) {
    match *best {
        Some((bd, bi)) if d2 > bd || (d2 == bd && idx > bi) => {}
        _ => *best = Some((d2, idx)),
    }
}

#[inline]
fn squared_distance(c: &Point3<f64>, p: &[f64; 3]) -> f64 {
    let dx = p[0] - c.x;
    let dy = p[1] - c.y;
    let dz = p[2] - c.z;
    dx * dx + dy * dy + dz * dz
}

/// Labels each voxel with its nearest source point if that point is within
/// `max_dist` of the centroid, else unknown (255). Equidistant points resolve
/// to the smaller point index.
pub fn transfer_labels(src: &LabeledPointSet, spec: &GridSpec, max_dist: f64) -> LabelGrid {
    let [_, ny, nz] = spec.dims();
    let mut labels = vec![UNKNOWN; spec.voxel_count()];
    let resolve = |best: Option<(f64, u32)>| match best {
        Some((d2, i)) if d2.sqrt() <= max_dist => src.labels[i as usize],
        _ => UNKNOWN,
    };

    if !(max_dist > 0.0 && max_dist.is_finite()) {
        labels
            .par_chunks_mut(ny * nz)
            .enumerate()
            .for_each(|(i, slab)| {
                for (jk, out) in slab.iter_mut().enumerate() {
                    let c = spec.centroid_unchecked([i, jk / nz, jk % nz]);
                    let mut best = None;
                    for (idx, p) in src.points.iter().enumerate() {
                        consider(&mut best, squared_distance(&c, p), idx as u32);
                    }
                    *out = resolve(best);
                }
            });
        return LabelGrid::new(spec.clone(), labels).expect("labels come from a validated set");
    }

    // Cells a little wider than max_dist: every point within max_dist of a
    // centroid lies in the 27 cells around the centroid's cell.
    let origin = spec.origin();
    let extent = spec.extent();
    let mut hash = SpatialHash {
        base: origin.map(|o| o - max_dist),
        cell: max_dist * (1.0 + 1e-6),
        cells: HashMap::new(),
    };
    for (idx, p) in src.points.iter().enumerate() {
        let near = (0..3)
            .all(|a| p[a] >= origin[a] - max_dist && p[a] <= origin[a] + extent[a] + max_dist);
        if near {
            let key = hash.key(p);
            hash.cells.entry(key).or_default().push(idx as u32);
        }
    }

    labels
        .par_chunks_mut(ny * nz)
        .enumerate()
        .for_each(|(i, slab)| {
            for (jk, out) in slab.iter_mut().enumerate() {
                let c = spec.centroid_unchecked([i, jk / nz, jk % nz]);
                let (kx, ky, kz) = hash.key(&[c.x, c.y, c.z]);
                let mut best = None;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            if let Some(bucket) = hash.cells.get(&(kx + dx, ky + dy, kz + dz)) {
                                for &idx in bucket {
                                    consider(
                                        &mut best,
                                        squared_distance(&c, &src.points[idx as usize]),
                                        idx,
                                    );
                                }
                            }
                        }
                    }
                }
                *out = resolve(best);
            }
        });
    LabelGrid::new(spec.clone(), labels).expect("labels come from a validated set")
}

/// Rejects grids that are more than 95% free-or-unknown, then grids with fewer
/// than two semantic classes. Exactly 95% empty is kept.
pub fn frame_filter(g: &LabelGrid) -> FrameDecision {
    let h = class_histogram(g);
    if h.empty() * 100 > h.total() * MAX_EMPTY_PERCENT {
        return FrameDecision::Reject(RejectReason::EmptyRatio);
    }
    if h.distinct_semantic() < MIN_SEMANTIC_CLASSES {
        return FrameDecision::Reject(RejectReason::ClassCount);
    }
    FrameDecision::Keep
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGenConfig {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Defaults to the source point set's voxel diagonal.
    pub max_dist: Option<f64>,
    pub floor_height: f64,
    pub seed: u64,
    pub frames_per_scene: usize,
    pub train_ratio: f64,
}

impl Default for LabelGenConfig {
    fn default() -> Self {
        Self {
            dims: [60, 60, 36],
            voxel_size: 0.08,
            max_dist: None,
            floor_height: 0.0,
            seed: 0,
            frames_per_scene: DEFAULT_FRAMES_PER_SCENE,
            train_ratio: DEFAULT_TRAIN_RATIO,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub decision: FrameDecision,
    /// Present only when the frame is kept.
    pub grid: Option<LabelGrid>,
}

impl FrameOutcome {
    fn rejected(reason: RejectReason) -> Self {
        Self {
            decision: FrameDecision::Reject(reason),
            grid: None,
        }
    }
}

/// Pose check, origin placement, label transfer and filtering for one frame.
pub fn generate_frame_label(
    points: &LabeledPointSet,
    bounds: &SceneBounds,
    camera: &CameraDoc,
    config: &LabelGenConfig,
) -> Result<FrameOutcome, LabelGenError> {
    let decision = validate_pose(camera, bounds);
    if let FrameDecision::Reject(r) = decision {
        return Ok(FrameOutcome::rejected(r));
    }
    let Ok(cam) = camera_from_doc(camera) else {
        return Ok(FrameOutcome::rejected(RejectReason::InvalidPose));
    };
    let origin = select_origin(&cam, config.dims, config.voxel_size, config.floor_height)?;
    let spec = GridSpec::new(config.dims, origin, config.voxel_size)?;
    let max_dist = config.max_dist.unwrap_or_else(|| points.default_max_dist());
    let grid = transfer_labels(points, &spec, max_dist);
    let decision = frame_filter(&grid);
    Ok(FrameOutcome {
        decision,
        grid: decision.is_keep().then_some(grid),
    })
}
