//! Rigid-body geometry on SE(3).
//!
//! Twists are ordered `(omega, v)`: the first three components are the
//! axis-angle rotation in radians, the last three the translational part.
//! Every Jacobian column in [`crate::register`] follows this order.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

/// Below this rotation angle the exp/log maps switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;

/// Rotation angles this close to pi are rejected by [`log_transform`].
const NEAR_PI_MARGIN: f64 = 1e-6;

/// Tangent-space coordinates of a rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(xi: [f64; 6]) -> Self {
        Self {
            omega: Vector3::new(xi[0], xi[1], xi[2]),
            v: Vector3::new(xi[3], xi[4], xi[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }

    pub fn norm(&self) -> f64 {
        (self.omega.norm_squared() + self.v.norm_squared()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.v)
    }
}

/// A proper rigid motion `p -> R p + t`.
///
/// Serialized as the row-major 4x4 homogeneous matrix (16 numbers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 16]", into = "[f64; 16]")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        Self::new(rodrigues(&(axis * (angle / n))), Vector3::zeros())
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Takes the upper 3x4 block; the bottom row is not inspected.
    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|c| c.is_finite())
    }

    /// Largest deviation of `R^T R` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det = (self.rotation.determinant() - 1.0).abs();
        gram.amax().max(det)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        compose(&self, &rhs)
    }
}

impl From<RigidTransform> for [f64; 16] {
    fn from(g: RigidTransform) -> Self {
        let m = g.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }
}

impl TryFrom<[f64; 16]> for RigidTransform {
    type Error = String;

    fn try_from(v: [f64; 16]) -> std::result::Result<Self, String> {
        if v.iter().any(|c| !c.is_finite()) {
            return Err("pose contains non-finite entries".into());
        }
        let bottom = [v[12], v[13], v[14], v[15]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(format!("pose bottom row must be [0, 0, 0, 1], got {bottom:?}"));
        }
        let m = Matrix4::from_row_slice(&v);
        let g = RigidTransform::from_matrix4(&m);
        let err = g.orthonormality_error();
        if err > 1e-6 {
            return Err(format!("pose rotation is not orthonormal (error {err:e})"));
        }
        Ok(g)
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`, times two.
fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Coefficients `sin(t)/t`, `(1-cos t)/t^2`, `(t - sin t)/t^3`.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < SMALL_ANGLE {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let s = theta.sin();
        let half = (0.5 * theta).sin();
        (s / theta, 2.0 * half * half / t2, (theta - s) / (t2 * theta))
    }
}

fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = exp_coefficients(omega.norm());
    let w = hat(omega);
    Matrix3::identity() + w * a + w * w * b
}

/// Geodesic angle of a rotation matrix, in `[0, pi]`.
///
/// Evaluated as `atan2(|sin|, cos)` so that it stays accurate near zero,
/// where `acos` of the clamped trace loses half the digits.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = (0.5 * vee_antisym(r).norm()).clamp(0.0, 1.0);
    sin.atan2(cos)
}

/// Exponential map se(3) -> SE(3).
pub fn exp_twist(xi: &Twist) -> RigidTransform {
    let theta = xi.omega.norm();
    let (a, b, c) = exp_coefficients(theta);
    let w = hat(&xi.omega);
    let w2 = w * w;
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let left_jacobian = Matrix3::identity() + w * b + w2 * c;
    RigidTransform::new(rotation, left_jacobian * xi.v)
}

/// Logarithm map SE(3) -> se(3), returning the canonical twist with
/// `|omega| < pi`.
pub fn log_transform(g: &RigidTransform) -> Result<Twist> {
    let r = &g.rotation;
    let axis2 = vee_antisym(r);
    let theta = rotation_angle(r);
    if theta > PI - NEAR_PI_MARGIN {
        return Err(Error::AngleNearPi { angle: theta });
    }
    let (omega, inv_coef) = if theta < SMALL_ANGLE {
        (axis2 * 0.5, 1.0 / 12.0 + theta * theta / 720.0)
    } else {
        let half = 0.5 * theta;
        let omega = axis2 * (theta / (2.0 * theta.sin()));
        (omega, (1.0 - half / half.tan()) / (theta * theta))
    };
    let w = hat(&omega);
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * inv_coef;
    Ok(Twist::new(omega, v_inv * g.translation))
}

/// Value and gradient with respect to the six twist coordinates.
#[derive(Clone, Copy)]
struct Dual {
    v: f64,
    d: [f64; 6],
}

impl Dual {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 6] }
    }

    fn map(self, v: f64, slope: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= slope);
        Self { v, d }
    }
}

impl std::ops::Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        d.iter_mut().zip(o.d).for_each(|(a, b)| *a += b);
        Dual { v: self.v + o.v, d }
    }
}

impl std::ops::Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + o.map(-o.v, -1.0)
    }
}

impl std::ops::Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 6];
        for (i, x) in d.iter_mut().enumerate() {
            *x = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl std::ops::Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, c: f64) -> Dual {
        self.map(self.v * c, c)
    }
}

type DualMat = [[Dual; 3]; 3];

fn dual_matmul(a: &DualMat, b: &DualMat) -> DualMat {
    let mut out = [[Dual::constant(0.0); 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, o) in row.iter_mut().enumerate() {
            *o = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// [`exp_twist`] together with its derivative. Returns the twelve entries
/// `[R (row-major), t]` and their 12x6 Jacobian with respect to
/// `(omega, v)`, exact also at zero rotation.
pub fn exp_twist_with_jacobian(xi: &[f64; 6]) -> ([f64; 12], [[f64; 6]; 12]) {
    let x: Vec<Dual> = (0..6)
        .map(|i| {
            let mut d = [0.0; 6];
            d[i] = 1.0;
            Dual { v: xi[i], d }
        })
        .collect();
    let t2 = x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
    let (a, b, c) = if t2.v < 1e-8 {
        // Series terms up to theta^4 keep value and slope at machine precision.
        let t4 = t2 * t2;
        (
            Dual::constant(1.0) - t2 * (1.0 / 6.0) + t4 * (1.0 / 120.0),
            Dual::constant(0.5) - t2 * (1.0 / 24.0) + t4 * (1.0 / 720.0),
            Dual::constant(1.0 / 6.0) - t2 * (1.0 / 120.0) + t4 * (1.0 / 5040.0),
        )
    } else {
        let th = t2.v.sqrt();
        let (s, co) = th.sin_cos();
        let half = (0.5 * th).sin();
        let av = s / th;
        let bv = 2.0 * half * half / t2.v;
        let cv = (th - s) / (t2.v * th);
        // Derivatives with respect to theta, then chain through theta^2.
        let da = (co * th - s) / t2.v;
        let db = (s * th - 2.0 * (1.0 - co)) / (t2.v * th);
        let dc = (3.0 * s - 2.0 * th - th * co) / (t2.v * t2.v);
        let dth = 0.5 / th;
        (t2.map(av, da * dth), t2.map(bv, db * dth), t2.map(cv, dc * dth))
    };
    let z = Dual::constant(0.0);
    let w: DualMat = [[z, z - x[2], x[1]], [x[2], z, z - x[0]], [z - x[1], x[0], z]];
    let w2 = dual_matmul(&w, &w);
    let mut rot = [[z; 3]; 3];
    let mut left = [[z; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = Dual::constant(if i == j { 1.0 } else { 0.0 });
            rot[i][j] = id + a * w[i][j] + b * w2[i][j];
            left[i][j] = id + b * w[i][j] + c * w2[i][j];
        }
    }
    let mut values = [0.0; 12];
    let mut jac = [[0.0; 6]; 12];
    for i in 0..3 {
        for j in 0..3 {
            values[3 * i + j] = rot[i][j].v;
            jac[3 * i + j] = rot[i][j].d;
        }
        let t = left[i][0] * x[3] + left[i][1] * x[4] + left[i][2] * x[5];
        values[9 + i] = t.v;
        jac[9 + i] = t.d;
    }
    (values, jac)
}

/// `a` applied after `b`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn apply(g: &RigidTransform, pc: &PointCloud) -> PointCloud {
    pc.map_points(|p| g.transform_point(p))
}

/// Geodesic angle between the two rotations, in degrees.
pub fn rotation_error_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    rotation_angle(&(est.rotation * gt.rotation.transpose())).to_degrees()
}

pub fn translation_error(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (est.translation - gt.translation).norm()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn perturbation_from(rng: &mut ChaCha8Rng, angle: f64, max_trans: f64) -> RigidTransform {
    let axis = unit_vector(rng);
    let direction = unit_vector(rng);
    let radius = max_trans * rng.random::<f64>().cbrt();
    let mut g = RigidTransform::from_axis_angle(axis, angle);
    g.translation = direction * radius;
    g
}

/// Random rigid perturbation: uniform axis, angle uniform in
/// `[0, max_angle_deg]`, translation uniform in the ball of radius `max_trans`.
pub fn sample_perturbation(max_angle_deg: f64, max_trans: f64, seed: u64) -> RigidTransform {
    assert!(
        (0.0..=179.0).contains(&max_angle_deg),
        "perturbation angle must lie in [0, 179] degrees"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random::<f64>() * max_angle_deg.to_radians();
    perturbation_from(&mut rng, angle, max_trans)
}

/// Like [`sample_perturbation`] but with the rotation angle fixed to exactly
/// `angle_deg`; used by robustness sweeps.
pub fn perturbation_at_angle(angle_deg: f64, max_trans: f64, seed: u64) -> RigidTransform {
    assert!(
        (0.0..=179.0).contains(&angle_deg),
        "perturbation angle must lie in [0, 179] degrees"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _ = rng.random::<f64>();
    perturbation_from(&mut rng, angle_deg.to_radians(), max_trans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assume, proptest};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn exp_jacobian_matches_value_and_differences() {
        for xi in [[0.0; 6], [1e-6, -2e-6, 3e-7, 0.1, 0.2, -0.3], [0.4, -1.1, 0.7, 0.3, -0.2, 0.5], [2.5, 0.1, -0.3, 1.0, 0.0, 2.0]] {
            let (vals, jac) = exp_twist_with_jacobian(&xi);
            let g = exp_twist(&Twist::from_array(xi));
            for i in 0..3 {
                for j in 0..3 {
                    assert!((vals[3 * i + j] - g.rotation[(i, j)]).abs() < 1e-14);
                }
                assert!((vals[9 + i] - g.translation[i]).abs() < 1e-14);
            }
            let h = 1e-6;
            for k in 0..6 {
                let (mut p, mut m) = (xi, xi);
                p[k] += h;
                m[k] -= h;
                let (vp, vm) = (exp_twist_with_jacobian(&p).0, exp_twist_with_jacobian(&m).0);
                for r in 0..12 {
                    let fd = (vp[r] - vm[r]) / (2.0 * h);
                    assert!((fd - jac[r][k]).abs() < 1e-7, "xi {xi:?} out {r} in {k}: {fd} vs {}", jac[r][k]);
                }
            }
        }
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Twist {
        let axis = unit_vector(rng);
        let angle = rng.random::<f64>() * max_angle;
        let v = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        Twist::new(axis * angle, v)
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
        exp_twist(&random_twist(rng, 3.0))
    }

    fn max_abs_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        (a.to_matrix4() - b.to_matrix4()).amax()
    }

    #[test]
    fn zero_twist_is_identity() {
        assert_eq!(exp_twist(&Twist::zero()), RigidTransform::identity());
        let xi = log_transform(&RigidTransform::identity()).unwrap();
        assert_eq!(xi.to_array(), [0.0; 6]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let g = exp_twist(&Twist::from_array([0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0]));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((g.rotation - expected).amax() < 1e-15);
        assert_eq!(g.translation, Vector3::zeros());

        let xi = log_transform(&g).unwrap().to_array();
        let want = [0.0, 0.0, FRAC_PI_2, 0.0, 0.0, 0.0];
        for (a, b) in xi.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn roundtrip_at_fixed_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mut xi = random_twist(&mut rng, 1.0);
            xi.omega = xi.omega.normalize() * 0.7;
            let back = log_transform(&exp_twist(&xi)).unwrap();
            for (a, b) in back.to_array().iter().zip(xi.to_array()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tiny_angles_use_the_series_branch() {
        for &theta in &[0.0, 1e-12, 5e-9, 2e-8, 1e-6] {
            let xi = Twist::new(Vector3::new(0.3, -0.4, 0.5).normalize() * theta, Vector3::new(1.0, 2.0, -3.0));
            let g = exp_twist(&xi);
            assert!(g.orthonormality_error() < 1e-12);
            let back = log_transform(&g).unwrap();
            for (a, b) in back.to_array().iter().zip(xi.to_array()) {
                assert!((a - b).abs() < 1e-12, "theta {theta}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn log_rejects_angles_near_pi() {
        let g = RigidTransform::from_axis_angle(Vector3::x(), PI - 1e-8);
        assert!(matches!(log_transform(&g), Err(Error::AngleNearPi { .. })));
        let g = RigidTransform::from_axis_angle(Vector3::x(), PI - 1e-4);
        assert!(log_transform(&g).is_ok());
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_transform(&mut rng);
        assert_eq!(compose(&g, &RigidTransform::identity()), g);
        assert!(max_abs_diff(&compose(&g, &g.inverse()), &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            // 4x4 product written out by hand, independent of nalgebra's.
            let (ma, mb) = (a.to_matrix4(), b.to_matrix4());
            let mut prod = Matrix4::zeros();
            for i in 0..4 {
                for j in 0..4 {
                    prod[(i, j)] = (0..4).map(|k| ma[(i, k)] * mb[(k, j)]).sum();
                }
            }
            assert!((compose(&a, &b).to_matrix4() - prod).amax() < 1e-12);
        }
    }

    #[test]
    fn apply_identity_translation_and_inverse() {
        let pc = PointCloud::new(vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, -2.0, 0.5),
        ])
        .unwrap();
        assert_eq!(apply(&RigidTransform::identity(), &pc), pc);

        let origin = PointCloud::new(vec![Vector3::zeros()]).unwrap();
        let moved = apply(&RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0)), &origin);
        assert_eq!(moved.points()[0], Vector3::new(1.0, 2.0, 3.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_transform(&mut rng);
        let back = apply(&g.inverse(), &apply(&g, &pc));
        for (p, q) in back.points().iter().zip(pc.points()) {
            assert!((p - q).amax() < 1e-9);
        }
    }

    #[test]
    fn rotation_error_known_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_transform(&mut rng);
        assert_eq!(rotation_error_deg(&gt, &gt), 0.0);
        for _ in 0..20 {
            let d = RigidTransform::from_axis_angle(unit_vector(&mut rng), 30f64.to_radians());
            let est = compose(&d, &gt);
            assert!((rotation_error_deg(&est, &gt) - 30.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_error_matches_log_map_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let rel = RigidTransform::new(a.rotation * b.rotation.transpose(), Vector3::zeros());
            let Ok(xi) = log_transform(&rel) else { continue };
            assert!((rotation_error_deg(&a, &b) - xi.omega.norm().to_degrees()).abs() < 1e-7);
        }
    }

    #[test]
    fn translation_error_cases() {
        let a = RigidTransform::identity();
        assert_eq!(translation_error(&a, &a), 0.0);
        let b = RigidTransform::from_translation(Vector3::new(0.3, 0.0, 0.4));
        assert!((translation_error(&a, &b) - 0.5).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, q) = (random_transform(&mut rng), random_transform(&mut rng));
        let d = p.translation - q.translation;
        let brute = (d.x * d.x + d.y * d.y + d.z * d.z).sqrt();
        assert!((translation_error(&p, &q) - brute).abs() < 1e-15);
    }

    #[test]
    fn perturbation_zero_and_determinism() {
        assert_eq!(sample_perturbation(0.0, 0.0, 11), RigidTransform::identity());
        assert_eq!(sample_perturbation(45.0, 0.1, 11), sample_perturbation(45.0, 0.1, 11));
        assert_ne!(sample_perturbation(45.0, 0.1, 11), sample_perturbation(45.0, 0.1, 12));
        let g = perturbation_at_angle(60.0, 0.1, 5);
        assert!((g.angle().to_degrees() - 60.0).abs() < 1e-9);
        assert!(g.translation.norm() <= 0.1);
    }

    #[test]
    fn perturbation_angles_are_uniform() {
        // Kolmogorov-Smirnov against U[0, 90], alpha = 0.01.
        let n = 10_000;
        let mut angles: Vec<f64> = (0..n)
            .map(|s| sample_perturbation(90.0, 0.1, s as u64).angle().to_degrees())
            .collect();
        angles.sort_by(f64::total_cmp);
        let d = angles
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let f = a / 90.0;
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn pose_json_is_row_major() {
        let g = RigidTransform::new(
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(json, "[0.0,-1.0,0.0,1.0,1.0,0.0,0.0,2.0,0.0,0.0,1.0,3.0,0.0,0.0,0.0,1.0]");
        let back: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<RigidTransform>("[2,0,0,0,0,1,0,0,0,0,1,0,0,0,0,1]").is_err());
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(
            wx in -1.0f64..1.0, wy in -1.0f64..1.0, wz in -1.0f64..1.0,
            angle in 0.0f64..3.0,
            vx in -5.0f64..5.0, vy in -5.0f64..5.0, vz in -5.0f64..5.0,
        ) {
            let axis = Vector3::new(wx, wy, wz);
            prop_assume!(axis.norm() > 1e-3);
            let xi = Twist::new(axis.normalize() * angle, Vector3::new(vx, vy, vz));
            let g = exp_twist(&xi);
            prop_assert!(g.orthonormality_error() < 1e-9);
            let back = log_transform(&g).unwrap();
            for (a, b) in back.to_array().iter().zip(xi.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn composed_perturbation_error_is_its_angle(seed in 0u64..10_000, angle in 0.0f64..179.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_transform(&mut rng);
            let d = perturbation_at_angle(angle, 0.5, seed);
            prop_assert!((rotation_error_deg(&compose(&d, &g), &g) - angle).abs() < 1e-6);
        }

        #[test]
        fn apply_distributes_over_compose(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_transform(&mut rng), random_transform(&mut rng));
            let pts = (0..16)
                .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
                .collect();
            let pc = PointCloud::new(pts).unwrap();
            let lhs = apply(&compose(&a, &b), &pc);
            let rhs = apply(&a, &apply(&b, &pc));
            for (p, q) in lhs.points().iter().zip(rhs.points()) {
                prop_assert!((p - q).amax() < 1e-9);
            }
        }
    }
}
