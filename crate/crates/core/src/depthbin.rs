//! Linear-increasing depth discretization and depth supervision.
//!
//! Bin `i` spans `[d_min + δ·i(i+1)/2, d_min + δ·(i+1)(i+2)/2)`, so its width is
//! `(i+1)·δ` with `δ = 2(d_max − d_min) / (n(n+1))`. The last bin is closed at
//! `d_max`.

use rayon::prelude::*;
use thiserror::Error;

use crate::reduce::pairwise_sum;
use crate::tensorio::{DenseTensor, TensorIoError};

/// Clamp applied to predicted probabilities before taking logs.
pub const BCE_EPS: f64 = 1e-7;
/// Tolerance on per-pixel probability sums.
pub const NORMALIZATION_TOL: f64 = 1e-5;

// Indoor defaults; override per dataset.
pub const DEFAULT_D_MIN: f64 = 0.2;
pub const DEFAULT_D_MAX: f64 = 10.0;
pub const DEFAULT_N_BINS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthError {
    #[error("invalid depth-bin spec: {0}")]
    InvalidSpec(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("domain error: {0}")]
    Domain(String),
}

impl From<DepthError> for TensorIoError {
    fn from(e: DepthError) -> Self {
        TensorIoError::Format(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinSpec {
    d_min: f64,
    d_max: f64,
    n_bins: usize,
    delta: f64,
}

impl Default for DepthBinSpec {
    fn default() -> Self {
        Self::new(DEFAULT_D_MIN, DEFAULT_D_MAX, DEFAULT_N_BINS).unwrap()
    }
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self, DepthError> {
        if !(d_min.is_finite() && d_max.is_finite()) || d_min >= d_max {
            return Err(DepthError::InvalidSpec(format!(
                "need finite d_min < d_max, got {d_min} and {d_max}"
            )));
        }
        if n_bins == 0 {
            return Err(DepthError::InvalidSpec("n_bins must be positive".into()));
        }
        let n = n_bins as f64;
        let delta = 2.0 * (d_max - d_min) / (n * (1.0 + n));
        if !(delta > 0.0) {
            return Err(DepthError::InvalidSpec(format!(
                "degenerate bin step {delta}"
            )));
        }
        Ok(Self {
            d_min,
            d_max,
            n_bins,
            delta,
        })
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }
    pub fn d_max(&self) -> f64 {
        self.d_max
    }
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
    /// Width of the first bin.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Lower edge of bin `i`; `edge(n_bins)` is exactly `d_max`.
    pub fn edge(&self, i: usize) -> f64 {
        if i >= self.n_bins {
            return self.d_max;
        }
        let tri = (i * (i + 1) / 2) as f64;
        self.d_min + self.delta * tri
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|i| self.edge(i)).collect()
    }

    /// Midpoints of each bin.
    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.n_bins)
            .map(|i| 0.5 * (self.edge(i) + self.edge(i + 1)))
            .collect()
    }

    /// Continuous bin coordinate `l = −0.5 + 0.5·√(1 + 8(d − d_min)/δ)`.
    ///
    /// Below `d_min − δ/8` the radicand turns negative; there the odd extension
    /// `−0.5 − 0.5·√(−r)` keeps `l` finite and monotone.
    pub fn continuous_index(&self, d: f64) -> f64 {
        let r = 1.0 + 8.0 * (d - self.d_min) / self.delta;
        if r >= 0.0 {
            -0.5 + 0.5 * r.sqrt()
        } else {
            -0.5 - 0.5 * (-r).sqrt()
        }
    }

    /// Discrete bin of depth `d`: floor of the continuous index, clamped to
    /// `[0, n_bins − 1]`, with half-open bins checked against the edges.
    pub fn bin_index(&self, d: f64) -> usize {
        let last = self.n_bins - 1;
        let l = self.continuous_index(d).floor();
        let mut b = if l.is_nan() || l <= 0.0 {
            0
        } else if l >= last as f64 {
            last
        } else {
            l as usize
        };
        // Rounding in the square root can land one bin off right at an edge.
        while b < last && d >= self.edge(b + 1) {
            b += 1;
        }
        while b > 0 && d < self.edge(b) {
            b -= 1;
        }
        b
    }
}

/// Per-pixel categorical distribution over depth bins, axis order (bin, row, col).
///
/// Each pixel column either sums to one (within [`NORMALIZATION_TOL`]) or is all
/// zero, which marks a pixel with no depth information.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthDistribution {
    n_bins: usize,
    height: usize,
    width: usize,
    probs: Vec<f32>,
}

impl DepthDistribution {
    pub fn new(
        n_bins: usize,
        height: usize,
        width: usize,
        probs: Vec<f32>,
    ) -> Result<Self, DepthError> {
        if n_bins == 0 || height == 0 || width == 0 {
            return Err(DepthError::InvalidDistribution(
                "extents must be positive".into(),
            ));
        }
        if probs.len() != n_bins * height * width {
            return Err(DepthError::InvalidDistribution(format!(
                "{} probabilities for shape ({n_bins}, {height}, {width})",
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DepthError::InvalidDistribution(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let d = Self {
            n_bins,
            height,
            width,
            probs,
        };
        let plane = height * width;
        for px in 0..plane {
            let sum: f64 = (0..n_bins)
                .map(|b| f64::from(d.probs[b * plane + px]))
                .sum();
            if sum != 0.0 && (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(DepthError::InvalidDistribution(format!(
                    "pixel ({}, {}) sums to {sum}",
                    px / width,
                    px % width
                )));
            }
        }
        Ok(d)
    }

    pub fn uniform(n_bins: usize, height: usize, width: usize) -> Result<Self, DepthError> {
        let p = 1.0 / n_bins as f32;
        Self::new(n_bins, height, width, vec![p; n_bins * height * width])
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self, TensorIoError> {
        let &[n, h, w] = t.dims() else {
            return Err(TensorIoError::Format(format!(
                "depth distribution must be rank 3 (bin, row, col), got {:?}",
                t.dims()
            )));
        };
        Ok(Self::new(n, h, w, t.to_f32_vec()?)?)
    }

    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_f32(
            vec![self.n_bins, self.height, self.width],
            self.probs.clone(),
        )
        .expect("positive extents")
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    #[inline]
    pub fn at(&self, bin: usize, row: usize, col: usize) -> f32 {
        self.probs[(bin * self.height + row) * self.width + col]
    }

    /// One bin as a row-major (row, col) plane.
    pub fn plane(&self, bin: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.probs[bin * n..(bin + 1) * n]
    }

    pub fn column_sum(&self, row: usize, col: usize) -> f64 {
        (0..self.n_bins)
            .map(|b| f64::from(self.at(b, row, col)))
            .sum()
    }
}

/// Metric depth per pixel, row-major; values ≤ 0 mark missing depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f32>) -> Result<Self, DepthError> {
        if height == 0 || width == 0 || depth.len() != height * width {
            return Err(DepthError::Domain(format!(
                "{} depths for a {height}x{width} map",
                depth.len()
            )));
        }
        if depth.iter().any(|d| !d.is_finite()) {
            return Err(DepthError::Domain(
                "depth map has non-finite entries".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            depth,
        })
    }

    /// Accepts (H, W) or (1, H, W) tensors.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self, TensorIoError> {
        let (h, w) = match *t.dims() {
            [h, w] | [1, h, w] => (h, w),
            _ => {
                return Err(TensorIoError::Format(format!(
                    "depth map must have shape (H, W) or (1, H, W), got {:?}",
                    t.dims()
                )))
            }
        };
        Ok(Self::new(h, w, t.to_f32_vec()?)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn is_missing(d: f32) -> bool {
        d <= 0.0
    }
}

/// One-hot depth supervision plus the per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthTarget {
    pub dist: DepthDistribution,
    pub mask: Vec<bool>,
}

pub fn one_hot_target(dm: &DepthMap, spec: &DepthBinSpec) -> DepthTarget {
    let plane = dm.height * dm.width;
    let n = spec.n_bins();
    let mut probs = vec![0.0f32; n * plane];
    let mut mask = vec![false; plane];
    for (px, &d) in dm.depth.iter().enumerate() {
        if DepthMap::is_missing(d) {
            continue;
        }
        probs[spec.bin_index(f64::from(d)) * plane + px] = 1.0;
        mask[px] = true;
    }
    DepthTarget {
        dist: DepthDistribution {
            n_bins: n,
            height: dm.height,
            width: dm.width,
            probs,
        },
        mask,
    }
}

/// Bin index of every pixel of a depth map; missing pixels get -1.
pub fn bin_index_map(dm: &DepthMap, spec: &DepthBinSpec) -> Vec<i64> {
    dm.depth
        .iter()
        .map(|&d| {
            if DepthMap::is_missing(d) {
                -1
            } else {
                spec.bin_index(f64::from(d)) as i64
            }
        })
        .collect()
}

/// Spatial mean pooling over `factor × factor` blocks, per bin.
///
/// Empty (all-zero) columns are left out of the mean so they neither dilute
/// nor unnormalize neighbours; a block of only empty columns stays empty.
pub fn downsample_distribution(
    dist: &DepthDistribution,
    factor: usize,
) -> Result<DepthDistribution, DepthError> {
    if factor == 0 || !dist.height.is_multiple_of(factor) || !dist.width.is_multiple_of(factor) {
        return Err(DepthError::Domain(format!(
            "{}x{} not divisible by factor {factor}",
            dist.height, dist.width
        )));
    }
    let (h, w) = (dist.height / factor, dist.width / factor);
    let n = dist.n_bins;
    let src_plane = dist.height * dist.width;
    let occupied: Vec<bool> = (0..src_plane)
        .into_par_iter()
        .map(|px| (0..n).any(|b| dist.probs[b * src_plane + px] != 0.0))
        .collect();
    let counts: Vec<u32> = (0..h * w)
        .map(|o| {
            let (r, c) = (o / w, o % w);
            let mut k = 0;
            for dr in 0..factor {
                let row = (r * factor + dr) * dist.width + c * factor;
                k += occupied[row..row + factor].iter().filter(|&&x| x).count() as u32;
            }
            k
        })
        .collect();
    let mut probs = vec![0.0f32; n * h * w];
    probs
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(b, out)| {
            let src = dist.plane(b);
            for (o, slot) in out.iter_mut().enumerate() {
                let k = counts[o];
                if k == 0 {
                    continue;
                }
                let (r, c) = (o / w, o % w);
                let mut acc = 0.0f64;
                for dr in 0..factor {
                    let row = (r * factor + dr) * dist.width + c * factor;
                    acc += src[row..row + factor]
                        .iter()
                        .map(|&p| f64::from(p))
                        .sum::<f64>();
                }
                *slot = (acc / f64::from(k)) as f32;
            }
        });
    Ok(DepthDistribution {
        n_bins: n,
        height: h,
        width: w,
        probs,
    })
}

fn check_loss_shapes(
    pred: &DepthDistribution,
    target: &DepthDistribution,
    mask: &[bool],
) -> Result<(), DepthError> {
    let shape = |d: &DepthDistribution| (d.n_bins, d.height, d.width);
    if shape(pred) != shape(target) {
        return Err(DepthError::Domain(format!(
            "prediction shape {:?} differs from target shape {:?}",
            shape(pred),
            shape(target)
        )));
    }
    if mask.len() != pred.height * pred.width {
        return Err(DepthError::Domain(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            pred.height * pred.width
        )));
    }
    Ok(())
}

fn clamp_prob(p: f32) -> f64 {
    f64::from(p).clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy over unmasked pixel-bin pairs.
///
/// The normalizer counts only unmasked terms; with every pixel masked the loss is 0.
pub fn bce_depth_loss(
    pred: &DepthDistribution,
    target: &DepthDistribution,
    mask: &[bool],
) -> Result<f64, DepthError> {
    check_loss_shapes(pred, target, mask)?;
    Ok(bce_mean(target, mask, |i| f64::from(pred.probs[i])))
}

/// [`bce_depth_loss`] for raw probabilities laid out like `target`, with no
/// normalization requirement.
pub fn bce_depth_loss_raw(
    pred: &[f64],
    target: &DepthDistribution,
    mask: &[bool],
) -> Result<f64, DepthError> {
    if pred.len() != target.probs.len() {
        return Err(DepthError::Domain(format!(
            "{} predictions for {} target entries",
            pred.len(),
            target.probs.len()
        )));
    }
    check_loss_shapes(target, target, mask)?;
    Ok(bce_mean(target, mask, |i| pred[i]))
}

fn bce_mean(target: &DepthDistribution, mask: &[bool], pred: impl Fn(usize) -> f64 + Sync) -> f64 {
    let plane = target.height * target.width;
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return 0.0;
    }
    let term = |i: usize| {
        if !mask[i % plane] {
            return 0.0;
        }
        let p = pred(i).clamp(BCE_EPS, 1.0 - BCE_EPS);
        let t = f64::from(target.probs[i]);
        t * p.ln() + (1.0 - t) * (1.0 - p).ln()
    };
    let total = pairwise_sum(target.probs.len(), &term);
    -total / (valid * target.n_bins) as f64
}

/// Gradient of [`bce_depth_loss`] with respect to each predicted probability,
/// laid out like `pred`. Evaluated at the clamped probability; zero where masked.
pub fn bce_depth_loss_grad(
    pred: &DepthDistribution,
    target: &DepthDistribution,
    mask: &[bool],
) -> Result<Vec<f64>, DepthError> {
    check_loss_shapes(pred, target, mask)?;
    let plane = pred.height * pred.width;
    let valid = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; pred.probs.len()];
    if valid == 0 {
        return Ok(grad);
    }
    let norm = (valid * pred.n_bins) as f64;
    grad.par_iter_mut().enumerate().for_each(|(i, g)| {
        if mask[i % plane] {
            let p = clamp_prob(pred.probs[i]);
            let t = f64::from(target.probs[i]);
            *g = ((1.0 - t) / (1.0 - p) - t / p) / norm;
        }
    });
    Ok(grad)
}
