use lkreg::cloud::{chamfer_distance, PointCloud};
use lkreg::geom3d::{apply, sample_perturbation, RigidTransform};
use lkreg::synth::meshes::{sphere, torus, BentTube, Scene};
use lkreg::synth::{
    look_at, make_pair, moller_trumbore, raycast_visible, read_trajectory, reproject_depth, write_trajectory,
    CameraModel, DepthMap, PairConfig, TriangleMesh,
};
use lkreg::Error;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

/// Plane intersection followed by same-side tests against the three edges.
fn plane_oracle(o: &Vector3<f64>, d: &Vector3<f64>, tri: &[Vector3<f64>; 3]) -> Option<f64> {
    let [a, b, c] = tri;
    let n = (b - a).cross(&(c - a));
    let denom = n.dot(d);
    if denom.abs() < 1e-12 * n.norm() * d.norm() {
        return None;
    }
    let t = n.dot(&(a - o)) / denom;
    if t <= 1e-9 {
        return None;
    }
    let p = o + d * t;
    let inside = [(a, b), (b, c), (c, a)].iter().all(|(x, y)| (*y - *x).cross(&(p - *x)).dot(&n) >= 0.0);
    inside.then_some(t)
}

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

#[test]
fn moller_trumbore_examples() {
    let tri = [Vector3::new(-1.0, -1.0, 0.0), Vector3::new(1.0, -1.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
    let (o, d) = (Vector3::new(0.0, 0.0, -1.0), Vector3::new(0.0, 0.0, 1.0));
    let (t, _, _) = moller_trumbore(&o, &d, &tri).unwrap();
    assert!((t - 1.0).abs() < 1e-15);
    let shifted = tri.map(|p| p + Vector3::new(6.0, 0.0, 0.0));
    assert!(moller_trumbore(&o, &d, &shifted).is_none());
}

#[test]
fn moller_trumbore_agrees_with_plane_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = 0;
    for _ in 0..10_000 {
        let tri = [rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0), rand_vec(&mut rng, 1.0)];
        let o = rand_vec(&mut rng, 3.0);
        // Aim at barycentric weights in [-0.3, 1.3] so that many rays hit.
        let (wu, wv) = (rng.random_range(-0.3..1.3), rng.random_range(-0.3..1.3));
        let aim = tri[0] + (tri[1] - tri[0]) * wu + (tri[2] - tri[0]) * wv;
        let d = (aim - o).normalize();
        let mt = moller_trumbore(&o, &d, &tri);
        let oracle = plane_oracle(&o, &d, &tri);
        assert_eq!(mt.is_some(), oracle.is_some(), "{o:?} {d:?} {tri:?}");
        if let (Some((t, u, v)), Some(t2)) = (mt, oracle) {
            hits += 1;
            assert!((t - t2).abs() < 1e-9);
            let p = tri[0] * (1.0 - u - v) + tri[1] * u + tri[2] * v;
            assert!((p - (o + d * t)).norm() < 1e-9);
        }
    }
    assert!(hits > 1500, "{hits}");
}

fn quad(z: f64, half: f64) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    (
        vec![
            Vector3::new(-half, -half, z),
            Vector3::new(half, -half, z),
            Vector3::new(half, half, z),
            Vector3::new(-half, half, z),
        ],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

#[test]
fn flat_wall_fills_the_view() {
    let (v, f) = quad(2.5, 100.0);
    let mesh = TriangleMesh::new(v, f).unwrap();
    let cam = CameraModel::new(32, 24, 60.0, RigidTransform::identity());
    let cast = raycast_visible(&mesh, &cam);
    assert_eq!(cast.points.len(), 32 * 24);
    assert!(cast.depth.data.iter().all(|d| (d - 2.5).abs() < 1e-9));
}

#[test]
fn nearer_quad_occludes() {
    let (mut v, mut f) = quad(1.0, 50.0);
    let (v2, f2) = quad(2.0, 50.0);
    f.extend(f2.iter().map(|t| t.map(|i| i + 4)));
    v.extend(v2);
    // List the far quad first so that order cannot decide the result.
    f.reverse();
    let mesh = TriangleMesh::new(v, f).unwrap();
    let cam = CameraModel::new(20, 20, 60.0, RigidTransform::identity());
    let cast = raycast_visible(&mesh, &cam);
    assert_eq!(cast.points.len(), 400);
    assert!(cast.points.iter().all(|p| (p.z - 1.0).abs() < 1e-12));
}

#[test]
fn sphere_views_only_show_the_near_side() {
    let mesh = sphere(64);
    for (i, eye) in [Vector3::new(0.0, 0.0, 3.0), Vector3::new(2.0, -1.5, 0.7), Vector3::new(-1.4, 0.2, -1.3)].iter().enumerate() {
        let cam = CameraModel::new(48, 48, 60.0, look_at(*eye, Vector3::zeros(), Vector3::new(0.1, 1.0, 0.2)));
        let cast = raycast_visible(&mesh, &cam);
        assert!(cast.points.len() > 100, "view {i}");
        for p in &cast.points {
            assert!(p.dot(&(p - eye)) < 0.0);
        }
    }
}

#[test]
fn reprojection_example_cases() {
    let cam = CameraModel {
        fx: 50.0,
        fy: 40.0,
        cx: 10.5,
        cy: 7.5,
        width: 20,
        height: 16,
        pose: RigidTransform::identity(),
    };
    let mut depth = DepthMap { width: 20, height: 16, data: vec![0.0; 320] };
    depth.data[7 * 20 + 10] = 2.0;
    depth.data[0] = 1.0;
    let pts = reproject_depth(&depth, &cam);
    assert_eq!(pts.len(), 2);
    assert_eq!(pts[1], Vector3::new(0.0, 0.0, 2.0));
    assert!((pts[0] - Vector3::new(-10.0 / 50.0, -7.0 / 40.0, 1.0)).norm() < 1e-15);
}

fn scene_cameras() -> Vec<(TriangleMesh, CameraModel)> {
    let mut out = Vec::new();
    for scene in [Scene::Sphere, Scene::Torus, Scene::BentTube] {
        let mesh = scene.mesh();
        for cam in scene.trajectory(3) {
            out.push((mesh.clone(), cam));
        }
    }
    out
}

#[test]
fn depth_roundtrip_and_occlusion_on_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for (mesh, cam) in scene_cameras() {
        let cast = raycast_visible(&mesh, &cam);
        assert!(cast.points.len() > 500, "sparse view {}", cast.points.len());
        let back = reproject_depth(&cast.depth, &cam);
        assert_eq!(back.len(), cast.points.len());
        let to_cam = cam.pose.inverse();
        for ((p, q), &(u, v)) in cast.points.iter().zip(&back).zip(&cast.pixels) {
            assert!((p - q).norm() < 1e-9);
            assert!((to_cam.transform_point(p).z - cast.depth.get(u, v)).abs() < 1e-9);
        }
        // Brute-force occlusion check on random pixels, in world space.
        let origin = cam.pose.translation;
        for _ in 0..120 {
            let (u, v) = (rng.random_range(0..cam.width), rng.random_range(0..cam.height));
            let dir = cam.pose.rotation * cam.pixel_direction(u, v);
            let nearest = (0..mesh.faces().len())
                .filter_map(|i| moller_trumbore(&origin, &dir, &mesh.triangle(i)).map(|h| h.0))
                .fold(f64::INFINITY, f64::min);
            let d = cast.depth.get(u, v);
            if d == 0.0 {
                assert!(nearest.is_infinite());
            } else {
                assert!((nearest - d).abs() < 1e-9, "{nearest} vs {d}");
            }
            checked += 1;
        }
    }
    assert!(checked >= 1000);
}

#[test]
fn sphere_vertices_on_unit_radius() {
    let m = sphere(16);
    assert!(m.vertices().iter().all(|v| (v.norm() - 1.0).abs() < 1e-9));
}

fn euler_characteristic(mesh: &TriangleMesh) -> i64 {
    let mut edges = HashSet::new();
    for f in mesh.faces() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            edges.insert((a.min(b), a.max(b)));
        }
    }
    mesh.vertices().len() as i64 - edges.len() as i64 + mesh.faces().len() as i64
}

#[test]
fn mesh_topology() {
    assert_eq!(euler_characteristic(&torus(1.0, 0.3, 24, 12)), 0);
    assert_eq!(euler_characteristic(&sphere(12)), 2);
    assert_eq!(euler_characteristic(&BentTube::default().mesh(40, 16)), 2);
}

#[test]
fn bent_tube_stays_within_radius_of_centerline() {
    let tube = BentTube::default();
    let rings = 40;
    let mesh = tube.mesh(rings, 16);
    // Dense samples that include every ring parameter.
    let samples: Vec<Vector3<f64>> = (0..=rings * 8).map(|i| tube.centerline(i as f64 / (rings * 8) as f64)).collect();
    for v in mesh.vertices() {
        let d = samples.iter().map(|c| (v - c).norm()).fold(f64::INFINITY, f64::min);
        assert!(d <= tube.radius + 1e-9, "{d}");
    }
}

#[test]
fn pair_without_noise_or_motion_is_identical() {
    let mesh = Scene::BentTube.mesh();
    let cam = &Scene::BentTube.trajectory(4)[1];
    let cfg = PairConfig { n_points: 256, ..PairConfig::default() };
    let pair = make_pair(&mesh, cam, &cfg, &RigidTransform::identity(), 7).unwrap();
    assert_eq!(pair.source.len(), 256);
    for (a, b) in pair.source.points().iter().zip(pair.target.points()) {
        assert!((a - b).norm() < 1e-9);
    }
    // Normalized to the unit ball.
    assert!(pair.target.points().iter().all(|p| p.norm() <= 1.0 + 1e-12));
    assert_eq!(make_pair(&mesh, cam, &cfg, &RigidTransform::identity(), 7).unwrap(), pair);
}

#[test]
fn ground_truth_undoes_the_perturbation() {
    let mesh = Scene::Sphere.mesh();
    let cam = &Scene::Sphere.trajectory(2)[0];
    let perturb = lkreg::geom3d::perturbation_at_angle(30.0, 0.1, 3);
    let pair = make_pair(&mesh, cam, &PairConfig { n_points: 300, ..PairConfig::default() }, &perturb, 4).unwrap();
    let back = apply(&pair.g_gt, &pair.source);
    for (a, b) in back.points().iter().zip(pair.target.points()) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn noisy_pairs_stay_within_chamfer_bound() {
    let mesh = Scene::Torus.mesh();
    let cams = Scene::Torus.trajectory(10);
    let sigma = 0.005;
    let cfg = PairConfig { n_points: 256, noise_sigma: sigma, ..PairConfig::default() };
    for trial in 0..100u64 {
        let cam = &cams[trial as usize % cams.len()];
        let perturb = sample_perturbation(45.0, 0.1, trial);
        let pair = make_pair(&mesh, cam, &cfg, &perturb, trial).unwrap();
        let cd = chamfer_distance(&apply(&pair.g_gt, &pair.source), &pair.target);
        assert!(cd <= 3.0 * sigma, "trial {trial}: {cd}");
    }
}

#[test]
fn empty_view_is_reported() {
    let mesh = sphere(8);
    let cam = CameraModel::standard(look_at(Vector3::new(0.0, 0.0, 5.0), Vector3::new(0.0, 0.0, 10.0), Vector3::y()));
    assert!(matches!(make_pair(&mesh, &cam, &PairConfig::default(), &RigidTransform::identity(), 0), Err(Error::EmptyView)));
    assert!(raycast_visible(&mesh, &cam).cloud().is_err());
}

#[test]
fn trajectory_file_roundtrip_and_mesh_validation() {
    let cams = Scene::Torus.trajectory(3);
    let path = std::env::temp_dir().join(format!("lkreg-traj-{}.json", std::process::id()));
    write_trajectory(&path, &cams).unwrap();
    assert_eq!(read_trajectory(&path).unwrap(), cams);
    assert!(TriangleMesh::new(vec![Vector3::zeros()], vec![[0, 0, 1]]).is_err());
    let degenerate = TriangleMesh::new(vec![Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0], vec![[0, 1, 2]]).unwrap();
    assert!(degenerate.faces().is_empty());
    let _ = PointCloud::new(vec![Vector3::zeros()]).unwrap();
}
