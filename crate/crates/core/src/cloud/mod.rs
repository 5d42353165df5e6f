//! Point clouds and alignment-quality metrics.
//!
//! Chamfer distance here is the mean of *unsquared* nearest-neighbour
//! distances, averaged over both directions:
//! `CD(a, b) = (mean_{p in a} d(p, b) + mean_{q in b} d(q, a)) / 2`.
//! Hausdorff distance is the symmetric maximum of the same quantities.

mod io;
mod kdtree;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_cloud, read_mesh_file, write_cloud, write_ply};
pub use kdtree::NnIndex;

/// An ordered, non-empty list of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self { points })
    }

    /// Builds from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(Error::Config(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                coords.len()
            )));
        }
        Self::new(coords.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false; present for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    pub fn max_radius_from(&self, center: &Vector3<f64>) -> f64 {
        self.points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max)
    }

    /// Applies `f` to every point, preserving order. Finiteness of the result
    /// is the caller's responsibility.
    pub fn map_points(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
        }
    }

    /// Points at `indices`, in the given order.
    ///
    /// # Panics
    ///
    /// If `indices` is empty or out of range.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        assert!(!indices.is_empty(), "selection must be non-empty");
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }
}

/// Similarity `p -> scale * (p - center)` mapping a cloud into the unit ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center()) * self.scale
    }

    pub fn invert_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + self.center()
    }

    pub fn apply(&self, pc: &PointCloud) -> PointCloud {
        pc.map_points(|p| self.apply_point(p))
    }
}

/// Centers `pc` on its centroid and scales it so the farthest point lies at
/// radius one.
pub fn normalize(pc: &PointCloud) -> Result<(PointCloud, Normalization)> {
    let center = pc.centroid();
    let radius = pc.max_radius_from(&center);
    if !(radius > 0.0) {
        return Err(Error::DegenerateCloud);
    }
    let record = Normalization {
        center: center.into(),
        scale: 1.0 / radius,
    };
    Ok((record.apply(pc), record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubsampleMethod {
    #[default]
    Random,
    FarthestPoint,
}

impl std::str::FromStr for SubsampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "farthest-point" | "fps" => Ok(Self::FarthestPoint),
            other => Err(Error::Config(format!("unknown subsample method `{other}`"))),
        }
    }
}

/// Indices chosen by [`subsample`].
///
/// `Random` returns `m` distinct indices in ascending order, so `m == N` is
/// the identity. `FarthestPoint` draws a seeded probe point and starts the
/// greedy farthest-point traversal from the point farthest from that probe;
/// indices come back in selection order, ties going to the lowest index.
pub fn subsample_indices(
    pc: &PointCloud,
    m: usize,
    method: SubsampleMethod,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::BadCount {
            requested: m,
            available: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        SubsampleMethod::Random => {
            let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        SubsampleMethod::FarthestPoint => {
            let probe = pc.points[rand::Rng::random_range(&mut rng, 0..n)];
            let pts = pc.points();
            let first = argmax(pts.iter().map(|p| dist_sq(p, &probe)));
            let mut chosen = Vec::with_capacity(m);
            let mut nearest = vec![f64::INFINITY; n];
            let mut current = first;
            for _ in 0..m {
                chosen.push(current);
                for (d, p) in nearest.iter_mut().zip(pts) {
                    *d = d.min(dist_sq(p, &pts[current]));
                }
                current = argmax(nearest.iter().copied());
            }
            Ok(chosen)
        }
    }
}

/// First index of the maximum; NaN-free input assumed.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in values.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

pub fn subsample(pc: &PointCloud, m: usize, method: SubsampleMethod, seed: u64) -> Result<PointCloud> {
    Ok(pc.select(&subsample_indices(pc, m, method, seed)?))
}

/// Squared Euclidean distance. Every metric in this module goes through this
/// one function so that the kd-tree and brute-force paths agree bit for bit.
#[inline]
pub fn dist_sq(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

/// Nearest-neighbour distance from each point of `from` into `index`.
fn nn_distances(from: &PointCloud, index: &NnIndex) -> Vec<f64> {
    from.points()
        .iter()
        .map(|p| index.nearest(p).1.sqrt())
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let (ia, ib) = (NnIndex::build(a), NnIndex::build(b));
    0.5 * (mean(&nn_distances(a, &ib)) + mean(&nn_distances(b, &ia)))
}

pub fn hausdorff_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let (ia, ib) = (NnIndex::build(a), NnIndex::build(b));
    let fwd = nn_distances(a, &ib).into_iter().fold(0.0, f64::max);
    let bwd = nn_distances(b, &ia).into_iter().fold(0.0, f64::max);
    fwd.max(bwd)
}
