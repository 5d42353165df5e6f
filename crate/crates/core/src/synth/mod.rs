//! Synthetic pair generation: ray-cast a triangle mesh from a pinhole
//! camera to get the visible surface (target), unproject the resulting depth
//! map back to world space (source), then subsample, normalize, add noise
//! and displace the source by a known perturbation.
//!
//! Camera frame convention: x right, y down, z forward. Pixel `(u, v)` is
//! sampled at its centre `(u + 0.5, v + 0.5)`, so its ray in camera
//! coordinates is `((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)` and the
//! ray parameter of a hit equals its camera-frame depth.

pub mod meshes;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::cloud::{normalize, read_mesh_file, subsample_indices, Normalization, PointCloud, SubsampleMethod};
use crate::error::{Error, Result};
use crate::geom3d::{apply, RigidTransform};

/// Rays closer than this to their origin are not hits.
pub const RAY_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates indices and drops zero-area faces.
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::Config(format!("face {f:?} indexes past {} vertices", vertices.len())));
        }
        let faces = faces
            .into_iter()
            .filter(|f| {
                let [a, b, c] = f.map(|i| vertices[i]);
                (b - a).cross(&(c - a)).norm() > 0.0
            })
            .collect();
        Ok(Self { vertices, faces })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let (v, f) = read_mesh_file(path)?;
        Self::new(v, f)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn triangle(&self, i: usize) -> [Vector3<f64>; 3] {
        self.faces[i].map(|k| self.vertices[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-to-world.
    pub pose: RigidTransform,
}

impl CameraModel {
    /// Square pixels, principal point at the image centre, horizontal field
    /// of view `fov_deg`.
    pub fn new(width: usize, height: usize, fov_deg: f64, pose: RigidTransform) -> Self {
        let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            pose,
        }
    }

    /// 96 x 96 pixels with a 60 degree field of view.
    pub fn standard(pose: RigidTransform) -> Self {
        Self::new(96, 96, 60.0, pose)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Camera-frame direction through the centre of pixel `(u, v)`, with
    /// unit z component.
    pub fn pixel_direction(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous pixel coordinates of a camera-frame point.
    fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Camera-to-world pose at `eye` looking towards `target`, with `up` mapped
/// to the image's upward direction (negative camera y).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> RigidTransform {
    let z = (target - eye).normalize();
    let mut up_perp = up - z * up.dot(&z);
    if up_perp.norm() < 1e-9 {
        let alt = if z.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        up_perp = alt - z * alt.dot(&z);
    }
    let y = -up_perp.normalize();
    let x = y.cross(&z);
    RigidTransform::new(Matrix3::from_columns(&[x, y, z]), eye)
}

/// Per-pixel camera-frame depth, row-major; `0.0` marks pixels with no hit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn hits(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0 && d.is_finite()).count()
    }
}

/// Ray/triangle intersection. Returns `(t, u, v)` with hit point
/// `origin + t dir = (1 - u - v) a + u b + v c`, for `t > RAY_EPS`.
pub fn moller_trumbore(origin: &Vector3<f64>, dir: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<(f64, f64, f64)> {
    let [a, b, c] = tri;
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() <= 1e-12 * dir.norm() * e1.norm() * e2.norm() {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv;
    (t > RAY_EPS).then_some((t, u, v))
}

/// Visible surface seen by a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Raycast {
    /// World-space hit points, row-major over the pixels that hit.
    pub points: Vec<Vector3<f64>>,
    /// `(u, v)` of each entry of `points`.
    pub pixels: Vec<(usize, usize)>,
    pub depth: DepthMap,
}

impl Raycast {
    pub fn cloud(&self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(Error::EmptyView);
        }
        PointCloud::new(self.points.clone())
    }
}

/// One ray per pixel; the nearest hit over all triangles wins. Triangles
/// entirely in front of the camera are only tested against the pixels of
/// their projected bounding box; triangles straddling the camera plane are
/// tested against every pixel.
pub fn raycast_visible(mesh: &TriangleMesh, cam: &CameraModel) -> Raycast {
    let (w, h) = (cam.width, cam.height);
    let world_to_cam = cam.pose.inverse();
    let local: Vec<Vector3<f64>> = mesh.vertices().iter().map(|p| world_to_cam.transform_point(p)).collect();
    let dirs: Vec<Vector3<f64>> = (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| cam.pixel_direction(u, v)).collect();
    let mut best = vec![f64::INFINITY; w * h];
    let origin = Vector3::zeros();

    for face in mesh.faces() {
        let tri = face.map(|k| local[k]);
        if tri.iter().all(|p| p.z <= 0.0) {
            continue;
        }
        let (u0, u1, v0, v1) = if tri.iter().all(|p| p.z > RAY_EPS) {
            let mut lo = (f64::INFINITY, f64::INFINITY);
            let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for p in &tri {
                let (x, y) = cam.project(p);
                lo = (lo.0.min(x), lo.1.min(y));
                hi = (hi.0.max(x), hi.1.max(y));
            }
            // Pixel centres inside [lo, hi], padded by one pixel.
            let clamp = |x: f64, n: usize| x.clamp(0.0, n as f64) as usize;
            (
                clamp(lo.0 - 1.5, w),
                clamp(hi.0 + 1.5, w),
                clamp(lo.1 - 1.5, h),
                clamp(hi.1 + 1.5, h),
            )
        } else {
            (0, w, 0, h)
        };
        for v in v0..v1 {
            for u in u0..u1 {
                let i = v * w + u;
                if let Some((t, _, _)) = moller_trumbore(&origin, &dirs[i], &tri) {
                    if t < best[i] {
                        best[i] = t;
                    }
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut pixels = Vec::new();
    let mut data = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let t = best[i];
            if t.is_finite() {
                data[i] = t;
                let dir = cam.pose.rotation * dirs[i];
                points.push(cam.pose.translation + dir * t);
                pixels.push((u, v));
            }
        }
    }
    Raycast {
        points,
        pixels,
        depth: DepthMap { width: w, height: h, data },
    }
}

/// Unprojects every pixel with a positive finite depth to world space,
/// row-major: local `d * ((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)`,
/// then the camera pose.
pub fn reproject_depth(depth: &DepthMap, cam: &CameraModel) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(depth.hits());
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = depth.get(u, v);
            if d > 0.0 && d.is_finite() {
                out.push(cam.pose.transform_point(&(cam.pixel_direction(u, v) * d)));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    /// Points kept per cloud (fewer if the view has fewer hits).
    pub n_points: usize,
    /// Standard deviation of the Gaussian noise added to the source, in
    /// normalized units.
    pub noise_sigma: f64,
    pub subsample: SubsampleMethod,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            n_points: 1024,
            noise_sigma: 0.0,
            subsample: SubsampleMethod::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub source: PointCloud,
    pub target: PointCloud,
    /// Maps the source onto the target.
    pub g_gt: RigidTransform,
    /// World-to-normalized map shared by both clouds.
    pub normalization: Normalization,
}

/// Builds one registration pair from a single viewpoint.
///
/// Target: ray-cast cloud. Source: depth reprojection of the same view.
/// Both are subsampled with the same indices, normalized with the target's
/// centre and scale, then the source receives noise and is displaced by
/// `perturb`; `g_gt = perturb^{-1}`.
pub fn make_pair(mesh: &TriangleMesh, cam: &CameraModel, cfg: &PairConfig, perturb: &RigidTransform, seed: u64) -> Result<Pair> {
    cam.validate()?;
    let cast = raycast_visible(mesh, cam);
    let target_world = cast.cloud()?;
    let source_world = PointCloud::new(reproject_depth(&cast.depth, cam))?;
    let m = cfg.n_points.min(target_world.len());
    let idx = subsample_indices(&target_world, m, cfg.subsample, crate::derive_seed(seed, &[0]))?;
    let (target, normalization) = normalize(&target_world.select(&idx))?;
    let source = normalization.apply(&source_world.select(&idx));
    let source = if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[1]));
        let noisy = source
            .points()
            .iter()
            .map(|p| p + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        PointCloud::new(noisy)?
    } else {
        source
    };
    Ok(Pair {
        source: apply(perturb, &source),
        target,
        g_gt: perturb.inverse(),
        normalization,
    })
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<CameraModel>> {
    let cams: Vec<CameraModel> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

pub fn write_trajectory(path: impl AsRef<Path>, cams: &[CameraModel]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(cams)?)?;
    Ok(())
}
