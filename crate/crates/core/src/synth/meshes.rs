//! Watertight procedural meshes used as stand-in scenes, and camera paths
//! that view them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use super::{look_at, CameraModel, TriangleMesh};
use crate::error::{Error, Result};

/// UV sphere of radius 1 at the origin with `res` latitude bands and
/// `2 res` longitude segments.
pub fn sphere(res: usize) -> TriangleMesh {
    let (stacks, slices) = (res.max(2), 2 * res.max(2));
    let mut v = vec![Vector3::new(0.0, 0.0, 1.0)];
    for i in 1..stacks {
        let phi = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let th = TAU * j as f64 / slices as f64;
            v.push(Vector3::new(phi.sin() * th.cos(), phi.sin() * th.sin(), phi.cos()));
        }
    }
    v.push(Vector3::new(0.0, 0.0, -1.0));
    let south = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
    let mut f = Vec::new();
    for j in 0..slices {
        f.push([0, ring(1, j), ring(1, j + 1)]);
        f.push([south, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            f.push([a, c, d]);
            f.push([a, d, b]);
        }
    }
    TriangleMesh::new(v, f).expect("valid sphere")
}

/// Torus around the z axis with centre-line radius `major` and tube radius
/// `minor`, `nu` segments around z and `nv` around the tube.
pub fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> TriangleMesh {
    let (nu, nv) = (nu.max(3), nv.max(3));
    let mut v = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let a = TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let b = TAU * j as f64 / nv as f64;
            let r = major + minor * b.cos();
            v.push(Vector3::new(r * a.cos(), r * a.sin(), minor * b.sin()));
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + j % nv;
    let mut f = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh::new(v, f).expect("valid torus")
}

/// A capped tube of constant radius swept along a smooth curve that bends
/// in two planes, a rough stand-in for a segment of tubular anatomy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BentTube {
    pub radius: f64,
    pub length: f64,
    /// Amplitude of the in-plane S-bend.
    pub bend: f64,
    /// Amplitude of the out-of-plane arch.
    pub lift: f64,
}

impl Default for BentTube {
    fn default() -> Self {
        Self {
            radius: 0.3,
            length: 3.0,
            bend: 0.4,
            lift: 0.4,
        }
    }
}

impl BentTube {
    /// Centre-line point at parameter `s` in `[0, 1]`.
    pub fn centerline(&self, s: f64) -> Vector3<f64> {
        Vector3::new(
            self.length * (s - 0.5),
            self.bend * (TAU * s).sin(),
            self.lift * (1.0 - (PI * s).cos()),
        )
    }

    pub fn tangent(&self, s: f64) -> Vector3<f64> {
        Vector3::new(
            self.length,
            self.bend * TAU * (TAU * s).cos(),
            self.lift * PI * (PI * s).sin(),
        )
        .normalize()
    }

    /// Parallel-transported `(normal, binormal)` frames at `n + 1` evenly
    /// spaced parameters.
    pub fn frames(&self, n: usize) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        let mut out = Vec::with_capacity(n + 1);
        let t0 = self.tangent(0.0);
        let seed = if t0.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let mut normal = (seed - t0 * seed.dot(&t0)).normalize();
        for i in 0..=n {
            let t = self.tangent(i as f64 / n as f64);
            normal = (normal - t * normal.dot(&t)).normalize();
            out.push((normal, t.cross(&normal)));
        }
        out
    }

    /// `rings + 1` cross-sections of `segments` vertices, plus a centre
    /// vertex closing each end.
    pub fn mesh(&self, rings: usize, segments: usize) -> TriangleMesh {
        let (rings, segments) = (rings.max(1), segments.max(3));
        let frames = self.frames(rings);
        let mut v = Vec::with_capacity((rings + 1) * segments + 2);
        for (i, (n, b)) in frames.iter().enumerate() {
            let c = self.centerline(i as f64 / rings as f64);
            for j in 0..segments {
                let a = TAU * j as f64 / segments as f64;
                v.push(c + (n * a.cos() + b * a.sin()) * self.radius);
            }
        }
        let start = v.len();
        v.push(self.centerline(0.0));
        v.push(self.centerline(1.0));
        let id = |i: usize, j: usize| i * segments + j % segments;
        let mut f = Vec::new();
        for i in 0..rings {
            for j in 0..segments {
                f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        for j in 0..segments {
            f.push([start, id(0, j + 1), id(0, j)]);
            f.push([start + 1, id(rings, j), id(rings, j + 1)]);
        }
        TriangleMesh::new(v, f).expect("valid tube")
    }
}

/// Built-in scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scene {
    Sphere,
    Torus,
    BentTube,
}

impl std::str::FromStr for Scene {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "torus" => Ok(Self::Torus),
            "bent-tube" | "tube" => Ok(Self::BentTube),
            other => Err(Error::Config(format!("unknown scene `{other}`"))),
        }
    }
}

impl Scene {
    pub fn name(self) -> &'static str {
        match self {
            Scene::Sphere => "sphere",
            Scene::Torus => "torus",
            Scene::BentTube => "bent-tube",
        }
    }

    pub fn mesh(self) -> TriangleMesh {
        match self {
            Scene::Sphere => sphere(24),
            Scene::Torus => torus(1.0, 0.35, 48, 24),
            Scene::BentTube => BentTube::default().mesh(120, 32),
        }
    }

    /// `n` standard cameras viewing the scene.
    ///
    /// Sphere and torus cameras orbit outside on a golden-angle spiral; the
    /// sphere is viewed from close by with an off-centre aim so the image
    /// border cuts its silhouette. Tube cameras sit on the centre line and
    /// look down the lumen, rolling as they advance.
    pub fn trajectory(self, n: usize) -> Vec<CameraModel> {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let f = (i as f64 + 0.5) / n.max(1) as f64;
                let pose = match self {
                    Scene::Sphere | Scene::Torus => {
                        let z = 1.0 - 2.0 * f;
                        let r = (1.0 - z * z).sqrt();
                        let a = golden * i as f64;
                        let dir = Vector3::new(r * a.cos(), r * a.sin(), z);
                        let side = dir.cross(&Vector3::new(-dir.y, dir.x + 0.3, 0.5)).normalize();
                        match self {
                            Scene::Sphere => look_at(dir * 1.8, side * 0.25, Vector3::z()),
                            _ => {
                                // Keep the torus mostly in view from above or below.
                                let d = Vector3::new(dir.x, dir.y, dir.z.signum() * dir.z.abs().max(0.5)).normalize();
                                look_at(d * 3.0, side * 0.3, Vector3::z())
                            }
                        }
                    }
                    Scene::BentTube => {
                        let tube = BentTube::default();
                        let s = 0.05 + 0.45 * f;
                        let eye = tube.centerline(s);
                        let ahead = tube.centerline(s + 0.15);
                        let roll = golden * i as f64;
                        let t = tube.tangent(s);
                        let seed = if t.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
                        let n = (seed - t * seed.dot(&t)).normalize();
                        let up = n * roll.cos() + t.cross(&n) * roll.sin();
                        look_at(eye, ahead, up)
                    }
                };
                CameraModel::standard(pose)
            })
            .collect()
    }
}
