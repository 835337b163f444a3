//! Deterministic core of monocular indoor occupancy prediction: depth binning,
//! depth-weighted voxel feature lifting, occupancy label generation and
//! scene-completion metrics.

// `!(x <= tol)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod depthbin;
pub mod labelgen;
pub mod lifting;
pub mod metrics;
mod reduce;
pub mod tensorio;
pub mod voxel;

pub use reduce::pairwise_sum;
