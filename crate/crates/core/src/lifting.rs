//! Lifting 2D features into the voxel grid, weighted by sampled depth probability.
//!
//! Each voxel centroid is projected once at image scale 1. At scale `k` the
//! feature map and depth distribution are sampled at `(u/k, v/k)`, the depth
//! weight is read from the bin containing the voxel's camera-frame depth, and
//! the weighted features are summed over scales in ascending order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::depthbin::{DepthBinSpec, DepthDistribution};
use crate::tensorio::{DenseTensor, TensorIoError};
use crate::voxel::GridSpec;

/// Image scales of the 2D pyramid, finest first.
pub const SCALES: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("channel mismatch: scale {scale} has {found} channels, expected {expected}")]
    ChannelMismatch {
        scale: usize,
        expected: usize,
        found: usize,
    },
    #[error("missing scale {0}")]
    MissingScale(usize),
}

impl From<LiftError> for TensorIoError {
    fn from(e: LiftError) -> Self {
        TensorIoError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Round to the nearest pixel, ties to even.
    #[default]
    Nearest,
    /// Convex combination of the four neighbours, indices clamped at the border.
    Bilinear,
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

/// One feature map, layout (channel, row, col).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<Self, LiftError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(LiftError::Domain(
                "feature map extents must be positive".into(),
            ));
        }
        if data.len() != channels * height * width {
            return Err(LiftError::Domain(format!(
                "{} values for feature map ({channels}, {height}, {width})",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self, TensorIoError> {
        let &[c, h, w] = t.dims() else {
            return Err(TensorIoError::Format(format!(
                "feature map must be rank 3 (C, H, W), got {:?}",
                t.dims()
            )));
        };
        Ok(Self::new(c, h, w, t.to_f32_vec()?)?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Same values in (row, col, channel) order.
    fn to_channels_last(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        out.par_chunks_mut(self.channels * self.width)
            .enumerate()
            .for_each(|(row, dst)| {
                for col in 0..self.width {
                    let px = row * self.width + col;
                    for c in 0..self.channels {
                        dst[col * self.channels + c] = self.data[c * plane + px];
                    }
                }
            });
        out
    }
}

/// 2D feature maps at scales drawn from {1, 2, 4, 8} of an `height x width` image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    height: usize,
    width: usize,
    channels: usize,
    levels: BTreeMap<usize, FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(
        height: usize,
        width: usize,
        levels: impl IntoIterator<Item = (usize, FeatureMap)>,
    ) -> Result<Self, LiftError> {
        if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
            return Err(LiftError::Domain(format!(
                "image extents {height}x{width} must be positive multiples of 8"
            )));
        }
        let levels: BTreeMap<usize, FeatureMap> = levels.into_iter().collect();
        let Some(first) = levels.values().next() else {
            return Err(LiftError::Domain("feature pyramid has no levels".into()));
        };
        let channels = first.channels;
        for (&k, map) in &levels {
            if !SCALES.contains(&k) {
                return Err(LiftError::Domain(format!("unsupported scale {k}")));
            }
            if map.channels != channels {
                return Err(LiftError::ChannelMismatch {
                    scale: k,
                    expected: channels,
                    found: map.channels,
                });
            }
            if (map.height, map.width) != (height / k, width / k) {
                return Err(LiftError::Domain(format!(
                    "scale {k} map is {}x{}, expected {}x{}",
                    map.height,
                    map.width,
                    height / k,
                    width / k
                )));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            levels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn levels(&self) -> &BTreeMap<usize, FeatureMap> {
        &self.levels
    }
    pub fn level(&self, scale: usize) -> Option<&FeatureMap> {
        self.levels.get(&scale)
    }
}

/// Scale-1 projection of a voxel centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedVoxel {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    /// Inside the scale-1 image and in front of the camera.
    pub valid: bool,
}

impl ProjectedVoxel {
    const INVALID: Self = Self {
        u: f64::NAN,
        v: f64::NAN,
        z: f64::NAN,
        valid: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelProjection {
    spec: GridSpec,
    image_height: usize,
    image_width: usize,
    voxels: Vec<ProjectedVoxel>,
}

impl VoxelProjection {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn voxels(&self) -> &[ProjectedVoxel] {
        &self.voxels
    }
    pub fn image_size(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }
    pub fn valid_count(&self) -> usize {
        self.voxels.iter().filter(|p| p.valid).count()
    }
    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.voxels.len() as f64
    }
}

pub fn project_voxels(cam: &CameraModel, spec: &GridSpec) -> VoxelProjection {
    let [_, ny, nz] = spec.dims();
    let mut voxels = vec![ProjectedVoxel::INVALID; spec.voxel_count()];
    voxels
        .par_chunks_mut(ny * nz)
        .enumerate()
        .for_each(|(i, slab)| {
            for (jk, out) in slab.iter_mut().enumerate() {
                let c = spec.centroid_unchecked([i, jk / nz, jk % nz]);
                let pd = cam.project(&c);
                if cam.in_fov(&pd) {
                    *out = ProjectedVoxel {
                        u: pd.u,
                        v: pd.v,
                        z: pd.z,
                        valid: true,
                    };
                } else {
                    out.z = pd.z;
                }
            }
        });
    VoxelProjection {
        spec: spec.clone(),
        image_height: cam.height() as usize,
        image_width: cam.width() as usize,
        voxels,
    }
}

/// Pixel offsets and weights of one sample on a `height x width` map.
#[derive(Debug, Clone, Copy)]
enum Site {
    Nearest(usize),
    Bilinear([usize; 4], [f32; 4]),
}

#[inline]
fn sample_site(
    p: &ProjectedVoxel,
    scale: usize,
    height: usize,
    width: usize,
    mode: SamplingMode,
) -> Site {
    let x = p.u / scale as f64;
    let y = p.v / scale as f64;
    let clamp = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    match mode {
        SamplingMode::Nearest => {
            let col = clamp(x.round_ties_even(), width);
            let row = clamp(y.round_ties_even(), height);
            Site::Nearest(row * width + col)
        }
        SamplingMode::Bilinear => {
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
            let (c0, c1) = (clamp(x0, width), clamp(x0 + 1.0, width));
            let (r0, r1) = (clamp(y0, height), clamp(y0 + 1.0, height));
            Site::Bilinear(
                [
                    r0 * width + c0,
                    r0 * width + c1,
                    r1 * width + c0,
                    r1 * width + c1,
                ],
                [
                    (1.0 - fx) * (1.0 - fy),
                    fx * (1.0 - fy),
                    (1.0 - fx) * fy,
                    fx * fy,
                ],
            )
        }
    }
}

#[inline]
fn sample_plane(plane: &[f32], site: Site) -> f32 {
    match site {
        Site::Nearest(o) => plane[o],
        Site::Bilinear(o, w) => {
            w[0] * plane[o[0]] + w[1] * plane[o[1]] + w[2] * plane[o[2]] + w[3] * plane[o[3]]
        }
    }
}

fn check_level_size(
    what: &str,
    scale: usize,
    h: usize,
    w: usize,
    proj: &VoxelProjection,
) -> Result<(), LiftError> {
    let (ih, iw) = proj.image_size();
    if scale == 0 || ih % scale != 0 || iw % scale != 0 || (h, w) != (ih / scale, iw / scale) {
        return Err(LiftError::Domain(format!(
            "{what} at scale {scale} is {h}x{w}; image is {ih}x{iw}"
        )));
    }
    Ok(())
}

/// Samples one feature level for every voxel; output is voxel-major, `C` values each.
/// Invalid voxels get the zero vector.
pub fn sample_features(
    level: &FeatureMap,
    scale: usize,
    proj: &VoxelProjection,
    mode: SamplingMode,
) -> Result<Vec<f32>, LiftError> {
    check_level_size("feature map", scale, level.height, level.width, proj)?;
    let c = level.channels;
    let plane = level.height * level.width;
    let mut out = vec![0.0f32; proj.voxels.len() * c];
    out.par_chunks_mut(c)
        .zip(proj.voxels.par_iter())
        .for_each(|(dst, p)| {
            if !p.valid {
                return;
            }
            let site = sample_site(p, scale, level.height, level.width, mode);
            for (ch, d) in dst.iter_mut().enumerate() {
                *d = sample_plane(&level.data[ch * plane..(ch + 1) * plane], site);
            }
        });
    Ok(out)
}

/// Probability of each voxel's own depth bin, sampled from a scale-`scale`
/// distribution. Zero for invalid voxels.
pub fn sample_depth_weights(
    dist: &DepthDistribution,
    scale: usize,
    proj: &VoxelProjection,
    spec: &DepthBinSpec,
    mode: SamplingMode,
) -> Result<Vec<f32>, LiftError> {
    check_level_size(
        "depth distribution",
        scale,
        dist.height(),
        dist.width(),
        proj,
    )?;
    if dist.n_bins() != spec.n_bins() {
        return Err(LiftError::Domain(format!(
            "distribution has {} bins, spec has {}",
            dist.n_bins(),
            spec.n_bins()
        )));
    }
    Ok(proj
        .voxels
        .par_iter()
        .map(|p| depth_weight(dist, scale, p, spec, mode))
        .collect())
}

#[inline]
fn depth_weight(
    dist: &DepthDistribution,
    scale: usize,
    p: &ProjectedVoxel,
    spec: &DepthBinSpec,
    mode: SamplingMode,
) -> f32 {
    if !p.valid {
        return 0.0;
    }
    let site = sample_site(p, scale, dist.height(), dist.width(), mode);
    sample_plane(dist.plane(spec.bin_index(p.z)), site).clamp(0.0, 1.0)
}

/// Lifted features, layout (X, Y, Z, C).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureVolume {
    spec: GridSpec,
    channels: usize,
    features: Vec<f32>,
}

impl VoxelFeatureVolume {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn features(&self) -> &[f32] {
        &self.features
    }
    pub fn voxel(&self, index: [usize; 3]) -> &[f32] {
        let o = self.spec.linear_index(index) * self.channels;
        &self.features[o..o + self.channels]
    }

    pub fn to_tensor(&self) -> DenseTensor {
        let [x, y, z] = self.spec.dims();
        DenseTensor::from_f32(vec![x, y, z, self.channels], self.features.clone())
            .expect("positive extents")
    }
}

struct PreparedLevel<'a> {
    scale: usize,
    height: usize,
    width: usize,
    channels_last: Vec<f32>,
    dist: &'a DepthDistribution,
}

/// Depth-weighted multi-scale lifting: per voxel, `Σ_k w_k · f_k` over the
/// scales present in `features`, accumulated in ascending scale order.
///
/// Every feature level needs a distribution at the same scale.
pub fn fuse(
    features: &FeaturePyramid,
    dists: &BTreeMap<usize, DepthDistribution>,
    proj: &VoxelProjection,
    spec: &DepthBinSpec,
    mode: SamplingMode,
) -> Result<VoxelFeatureVolume, LiftError> {
    let (ih, iw) = proj.image_size();
    if (features.height, features.width) != (ih, iw) {
        return Err(LiftError::Domain(format!(
            "feature pyramid is {}x{}, camera image is {ih}x{iw}",
            features.height, features.width
        )));
    }
    let channels = features.channels;
    let mut levels = Vec::with_capacity(features.levels.len());
    for (&scale, map) in &features.levels {
        let dist = dists.get(&scale).ok_or(LiftError::MissingScale(scale))?;
        check_level_size(
            "depth distribution",
            scale,
            dist.height(),
            dist.width(),
            proj,
        )?;
        if dist.n_bins() != spec.n_bins() {
            return Err(LiftError::Domain(format!(
                "scale {scale} distribution has {} bins, spec has {}",
                dist.n_bins(),
                spec.n_bins()
            )));
        }
        levels.push(PreparedLevel {
            scale,
            height: map.height,
            width: map.width,
            channels_last: map.to_channels_last(),
            dist,
        });
    }

    let mut out = vec![0.0f32; proj.voxels.len() * channels];
    let [_, _, nz] = proj.spec.dims();
    // One (i, j) column of voxels per task: contiguous in both input and output.
    out.par_chunks_mut(nz * channels)
        .zip(proj.voxels.par_chunks(nz))
        .for_each(|(dst, column)| {
            for (acc, p) in dst.chunks_exact_mut(channels).zip(column) {
                if !p.valid {
                    continue;
                }
                for lvl in &levels {
                    let w = depth_weight(lvl.dist, lvl.scale, p, spec, mode);
                    match sample_site(p, lvl.scale, lvl.height, lvl.width, mode) {
                        Site::Nearest(o) => {
                            let f = &lvl.channels_last[o * channels..(o + 1) * channels];
                            for (a, &fv) in acc.iter_mut().zip(f) {
                                *a += w * fv;
                            }
                        }
                        Site::Bilinear(o, bw) => {
                            let f = |n: usize| {
                                &lvl.channels_last[o[n] * channels..(o[n] + 1) * channels]
                            };
                            let (f0, f1, f2, f3) = (f(0), f(1), f(2), f(3));
                            for c in 0..channels {
                                let fv =
                                    bw[0] * f0[c] + bw[1] * f1[c] + bw[2] * f2[c] + bw[3] * f3[c];
                                acc[c] += w * fv;
                            }
                        }
                    }
                }
            }
        });
    Ok(VoxelFeatureVolume {
        spec: proj.spec.clone(),
        channels,
        features: out,
    })
}
