//! Voxel grid geometry and semantic label grids.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::{DenseTensor, TensorData, TensorIoError};

pub const FREE: u8 = 0;
pub const UNKNOWN: u8 = 255;
pub const NUM_SEMANTIC: usize = 11;
/// Free plus the eleven semantic classes.
pub const NUM_CLASSES: usize = 12;

/// Semantic class names for labels 1..=11, in canonical order.
pub const CLASS_NAMES: [&str; NUM_SEMANTIC] = [
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
];

pub fn is_semantic(label: u8) -> bool {
    (1..=NUM_SEMANTIC as u8).contains(&label)
}

pub fn is_valid_label(label: u8) -> bool {
    (label as usize) < NUM_CLASSES || label == UNKNOWN
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid label {value} at voxel {index}")]
    InvalidLabel { index: usize, value: u8 },
}

impl From<GridError> for TensorIoError {
    fn from(e: GridError) -> Self {
        TensorIoError::Format(e.to_string())
    }
}

/// Axis-aligned voxel grid. Axis order is (X, Y, Z) with Z fastest in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> Result<Self, GridError> {
        if dims.contains(&0) {
            return Err(GridError::Domain(format!(
                "grid extents must be ≥ 1, got {dims:?}"
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(GridError::Domain(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if origin.iter().any(|x| !x.is_finite()) {
            return Err(GridError::Domain("grid origin must be finite".into()));
        }
        Ok(Self {
            dims,
            origin,
            voxel_size,
        })
    }

    /// NYUv2 full-resolution grid: 240 x 144 x 240 at 0.02 m.
    pub fn nyu_full(origin: [f64; 3]) -> Self {
        Self::new([240, 144, 240], origin, 0.02).unwrap()
    }

    /// NYUv2 evaluation grid: 60 x 36 x 60 at 0.08 m.
    pub fn nyu_eval(origin: [f64; 3]) -> Self {
        Self::new([60, 36, 60], origin, 0.08).unwrap()
    }

    /// Occ-ScanNet grid: 60 x 60 x 36 at 0.08 m, vertical axis last.
    pub fn occ_scannet(origin: [f64; 3]) -> Self {
        Self::new([60, 60, 36], origin, 0.08).unwrap()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Extent of the grid along each axis, meters.
    pub fn extent(&self) -> [f64; 3] {
        self.dims.map(|d| d as f64 * self.voxel_size)
    }

    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    /// Centroid without bounds checking; callers iterate valid indices.
    pub fn centroid_unchecked(&self, index: [usize; 3]) -> Point3<f64> {
        Point3::new(
            self.origin[0] + self.voxel_size * (index[0] as f64 + 0.5),
            self.origin[1] + self.voxel_size * (index[1] as f64 + 0.5),
            self.origin[2] + self.voxel_size * (index[2] as f64 + 0.5),
        )
    }

    pub fn centroid(&self, index: [usize; 3]) -> Result<Point3<f64>, GridError> {
        if index.iter().zip(self.dims).any(|(&i, d)| i >= d) {
            return Err(GridError::Domain(format!(
                "voxel index {index:?} outside dims {:?}",
                self.dims
            )));
        }
        Ok(self.centroid_unchecked(index))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    spec: GridSpec,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(spec: GridSpec, labels: Vec<u8>) -> Result<Self, GridError> {
        if labels.len() != spec.voxel_count() {
            return Err(GridError::Domain(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                spec.voxel_count()
            )));
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| !is_valid_label(l))
        {
            return Err(GridError::InvalidLabel { index, value });
        }
        Ok(Self { spec, labels })
    }

    pub fn filled(spec: GridSpec, label: u8) -> Result<Self, GridError> {
        let n = spec.voxel_count();
        Self::new(spec, vec![label; n])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, index: [usize; 3]) -> u8 {
        self.labels[self.spec.linear_index(index)]
    }

    /// Rank-3 u8 tensor with axes (X, Y, Z).
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor::from_u8(self.spec.dims.to_vec(), self.labels.clone())
            .expect("grid dims are positive")
    }

    /// Label files carry no geometry; the caller supplies origin and voxel size.
    pub fn from_tensor(
        t: &DenseTensor,
        origin: [f64; 3],
        voxel_size: f64,
    ) -> Result<Self, TensorIoError> {
        let TensorData::U8(labels) = t.data() else {
            return Err(TensorIoError::DtypeMismatch {
                expected: crate::tensorio::DType::U8,
                found: t.dtype(),
            });
        };
        let &[x, y, z] = t.dims() else {
            return Err(TensorIoError::Format(format!(
                "label grid must be rank 3, got dims {:?}",
                t.dims()
            )));
        };
        let spec = GridSpec::new([x, y, z], origin, voxel_size)?;
        Ok(Self::new(spec, labels.clone())?)
    }
}

/// Chooses the label of a downsampled block from per-value counts.
///
/// Plurality over semantic labels with ties to the smallest id; blocks without
/// semantics become free if any free voxel is present, else unknown.
fn block_vote(counts: &[u32; NUM_CLASSES + 1]) -> u8 {
    let mut best = 0u8;
    let mut best_count = 0u32;
    for (label, &n) in counts.iter().enumerate().take(NUM_SEMANTIC + 1).skip(1) {
        if n > best_count {
            best = label as u8;
            best_count = n;
        }
    }
    if best_count > 0 {
        best
    } else if counts[FREE as usize] > 0 {
        FREE
    } else {
        UNKNOWN
    }
}

fn histogram_slot(label: u8) -> usize {
    if label == UNKNOWN {
        NUM_CLASSES
    } else {
        label as usize
    }
}

pub fn downsample_labels(g: &LabelGrid, factor: usize) -> Result<LabelGrid, GridError> {
    if factor == 0 {
        return Err(GridError::Domain(
            "downsampling factor must be positive".into(),
        ));
    }
    let dims = g.spec.dims;
    if dims.iter().any(|d| d % factor != 0) {
        return Err(GridError::Domain(format!(
            "grid dims {dims:?} not divisible by {factor}"
        )));
    }
    let out_spec = GridSpec::new(
        dims.map(|d| d / factor),
        g.spec.origin,
        g.spec.voxel_size * factor as f64,
    )?;
    let [ox, oy, oz] = out_spec.dims;
    let mut out = Vec::with_capacity(out_spec.voxel_count());
    for i in 0..ox {
        for j in 0..oy {
            for k in 0..oz {
                let mut counts = [0u32; NUM_CLASSES + 1];
                for di in 0..factor {
                    for dj in 0..factor {
                        let base =
                            g.spec
                                .linear_index([i * factor + di, j * factor + dj, k * factor]);
                        for &l in &g.labels[base..base + factor] {
                            counts[histogram_slot(l)] += 1;
                        }
                    }
                }
                out.push(block_vote(&counts));
            }
        }
    }
    LabelGrid::new(out_spec, out)
}

/// Counts of each label value; slot 12 holds the unknown (255) count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassHistogram {
    counts: [u64; NUM_CLASSES + 1],
}

impl ClassHistogram {
    pub fn of(labels: &[u8]) -> Self {
        let mut h = Self::default();
        for &l in labels {
            h.counts[histogram_slot(l)] += 1;
        }
        h
    }

    pub fn count(&self, label: u8) -> u64 {
        if is_valid_label(label) {
            self.counts[histogram_slot(label)]
        } else {
            0
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Free plus unknown voxels.
    pub fn empty(&self) -> u64 {
        self.count(FREE) + self.count(UNKNOWN)
    }

    pub fn distinct_semantic(&self) -> usize {
        self.counts[1..=NUM_SEMANTIC]
            .iter()
            .filter(|&&c| c > 0)
            .count()
    }

    /// Nonzero (label, count) pairs in ascending label order.
    pub fn nonzero(&self) -> Vec<(u8, u64)> {
        (0..NUM_CLASSES as u8)
            .chain(std::iter::once(UNKNOWN))
            .map(|l| (l, self.count(l)))
            .filter(|&(_, c)| c > 0)
            .collect()
    }
}

pub fn class_histogram(g: &LabelGrid) -> ClassHistogram {
    ClassHistogram::of(&g.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_spec(dims: [usize; 3]) -> GridSpec {
        GridSpec::new(dims, [0.0; 3], 1.0).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let s = unit_spec([2, 2, 2]);
        assert_eq!(s.centroid([0, 0, 0]).unwrap(), Point3::new(0.5, 0.5, 0.5));
        let s = GridSpec::nyu_eval([-2.4, 0.0, -2.4]);
        let c = s.centroid([30, 18, 30]).unwrap();
        let want = [0.04, 1.48, 0.04];
        for a in 0..3 {
            assert!((c[a] - want[a]).abs() < 1e-12, "{c:?}");
        }
        assert!(s.centroid([60, 0, 0]).is_err());
    }

    #[test]
    fn adjacent_centroids_differ_by_voxel_size() {
        let s = GridSpec::new([3, 4, 5], [0.1, -2.0, 7.0], 0.25).unwrap();
        for axis in 0..3 {
            let mut idx = [1, 1, 1];
            let a = s.centroid(idx).unwrap();
            idx[axis] += 1;
            let b = s.centroid(idx).unwrap();
            let d = b - a;
            for other in 0..3 {
                let want = if other == axis { 0.25 } else { 0.0 };
                assert!((d[other] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_index_roundtrip() {
        let s = unit_spec([3, 4, 5]);
        for idx in 0..s.voxel_count() {
            assert_eq!(s.linear_index(s.unravel(idx)), idx);
        }
        assert_eq!(s.linear_index([0, 0, 1]), 1);
        assert_eq!(s.linear_index([1, 0, 0]), 20);
    }

    #[test]
    fn grid_presets() {
        assert_eq!(GridSpec::nyu_full([0.0; 3]).dims(), [240, 144, 240]);
        assert_eq!(GridSpec::nyu_eval([0.0; 3]).dims(), [60, 36, 60]);
        assert_eq!(GridSpec::occ_scannet([0.0; 3]).dims(), [60, 60, 36]);
        assert!(GridSpec::new([1, 0, 1], [0.0; 3], 1.0).is_err());
        assert!(GridSpec::new([1, 1, 1], [0.0; 3], 0.0).is_err());
    }

    #[test]
    fn nyu_full_downsamples_to_eval() {
        let full = LabelGrid::filled(GridSpec::nyu_full([0.0; 3]), 3).unwrap();
        let eval = downsample_labels(&full, 4).unwrap();
        assert_eq!(eval.spec().dims(), [60, 36, 60]);
        assert!((eval.spec().voxel_size() - 0.08).abs() < 1e-15);
        assert!(eval.labels().iter().all(|&l| l == 3));
    }

    fn block(labels: [u8; 8]) -> u8 {
        let g = LabelGrid::new(unit_spec([2, 2, 2]), labels.to_vec()).unwrap();
        downsample_labels(&g, 2).unwrap().labels()[0]
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(block([5; 8]), 5);
        assert_eq!(block([3, 3, 3, 8, 3, 3, 3, 3]), 3);
        assert_eq!(block([9, 2, 9, 2, 9, 2, 9, 2]), 2);
        assert_eq!(block([0, 0, 0, 0, 0, 0, 0, 4]), 4);
        assert_eq!(block([255, 0, 255, 255, 255, 255, 255, 255]), 0);
        assert_eq!(block([255; 8]), 255);
        let g = LabelGrid::filled(unit_spec([2, 3, 2]), 1).unwrap();
        assert!(downsample_labels(&g, 2).is_err());
    }

    /// Every 2x2x2 block over labels {0, 1, 2, 255}: 4^8 = 65536 cases.
    #[test]
    fn exhaustive_block_plurality() {
        const VALUES: [u8; 4] = [0, 1, 2, 255];
        for code in 0u32..(1 << 16) {
            let labels: [u8; 8] = std::array::from_fn(|i| VALUES[((code >> (2 * i)) & 3) as usize]);
            let chosen = block(labels);
            let count = |v: u8| labels.iter().filter(|&&l| l == v).count();
            let semantic_max = count(1).max(count(2));
            if semantic_max == 0 {
                let want = if count(0) > 0 { 0 } else { 255 };
                assert_eq!(chosen, want, "{labels:?}");
            } else {
                assert!(is_semantic(chosen), "{labels:?}");
                assert_eq!(count(chosen), semantic_max, "{labels:?}");
                if count(1) == count(2) {
                    assert_eq!(chosen, 1);
                }
            }
        }
    }

    #[test]
    fn histogram_examples() {
        let g = LabelGrid::filled(unit_spec([2, 2, 2]), 0).unwrap();
        assert_eq!(class_histogram(&g).nonzero(), vec![(0, 8)]);
        let g = LabelGrid::new(unit_spec([1, 2, 2]), vec![0, 255, 3, 3]).unwrap();
        assert_eq!(
            class_histogram(&g).nonzero(),
            vec![(0, 1), (3, 2), (255, 1)]
        );
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(matches!(
            LabelGrid::new(unit_spec([1, 1, 2]), vec![0, 12]),
            Err(GridError::InvalidLabel {
                index: 1,
                value: 12
            })
        ));
    }

    #[test]
    fn tensor_roundtrip_keeps_axis_order() {
        let spec = unit_spec([2, 3, 4]);
        let labels: Vec<u8> = (0..24).map(|i| (i % 12) as u8).collect();
        let g = LabelGrid::new(spec, labels).unwrap();
        let t = g.to_tensor();
        assert_eq!(t.dims(), &[2, 3, 4]);
        assert_eq!(LabelGrid::from_tensor(&t, [0.0; 3], 1.0).unwrap(), g);
    }

    fn arb_grid() -> impl Strategy<Value = LabelGrid> {
        prop::array::uniform3(1usize..6).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, 5, 11, 255]), n)
                .prop_map(move |labels| LabelGrid::new(unit_spec(dims), labels).unwrap())
        })
    }

    proptest! {
        #[test]
        fn histogram_sums_to_voxel_count(g in arb_grid()) {
            prop_assert_eq!(class_histogram(&g).total(), g.spec().voxel_count() as u64);
        }

        #[test]
        fn downsample_idempotent_on_constant(label in prop::sample::select(vec![0u8, 4, 11, 255]), f in 1usize..4) {
            let g = LabelGrid::filled(unit_spec([2 * f, f, 3 * f]), label).unwrap();
            let once = downsample_labels(&g, f).unwrap();
            prop_assert!(once.labels().iter().all(|&l| l == label));
            let twice = downsample_labels(&once, 1).unwrap();
            prop_assert_eq!(twice.labels(), once.labels());
        }
    }
}
