//! Correspondence-free rigid point-cloud registration.
//!
//! A global feature encoder maps a point cloud to a fixed-length descriptor;
//! an inverse-compositional Lucas–Kanade loop then solves for the rigid
//! transform that makes the source descriptor match the target descriptor.
//! Two encoders are provided: a PointNet-style shared MLP and a selective
//! state-space (Mamba-style) sequence encoder over a space-filling-curve
//! ordering of the points.
//!
//! Supporting pieces:
//!
//! - [`geom3d`]: SE(3) twists, exponential/logarithm maps, error metrics.
//! - [`cloud`]: point clouds, normalization, subsampling, nearest neighbours,
//!   Chamfer/Hausdorff distances and file I/O.
//! - [`tensor`]: a small float64 reverse-mode autodiff tape with Adam.
//! - [`encoder`]: the two descriptor networks and their training loop.
//! - [`register`]: IC-LK and point-to-point ICP solvers.
//! - [`synth`]: mesh ray casting, depth reprojection and pair generation.

pub mod cloud;
pub mod encoder;
mod error;
pub mod geom3d;
pub mod register;
pub mod synth;
pub mod tensor;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use geom3d::{RigidTransform, Twist};

/// Derives an independent stream seed from a base seed and a path of
/// indices (SplitMix64 finalizer chained over the parts).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
