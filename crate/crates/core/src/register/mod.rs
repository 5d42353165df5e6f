//! Alignment solvers: inverse-compositional Lucas–Kanade in descriptor space
//! and point-to-point ICP.
//!
//! Both return the transform `G` that maps the source onto the target,
//! `P_T ≈ G · P_S`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::cloud::{NnIndex, PointCloud};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::geom3d::{apply, exp_twist, RigidTransform, Twist};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LkSettings {
    pub max_iters: usize,
    /// Finite-difference step for the Jacobian, in twist units.
    pub step_fd: f64,
    /// Stop once the update norm falls below this.
    pub tol_dxi: f64,
    /// Levenberg term added to the diagonal of the normal equations.
    pub damping: f64,
    /// Debug mode: re-evaluate the Jacobian at the current source estimate
    /// every iteration instead of once on the target.
    pub recompute_jacobian: bool,
}

impl Default for LkSettings {
    fn default() -> Self {
        Self {
            max_iters: 10,
            step_fd: 1e-2,
            tol_dxi: 1e-7,
            damping: 1e-9,
            recompute_jacobian: false,
        }
    }
}

impl LkSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.step_fd > 0.0) || !(self.tol_dxi > 0.0) || !(self.damping >= 0.0) {
            return Err(Error::Config(format!("invalid LK settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub g_est: RigidTransform,
    pub iterations: usize,
    pub converged: bool,
    /// One entry per iteration: descriptor residual norm for IC-LK, RMS
    /// correspondence distance for ICP.
    pub residual_history: Vec<f64>,
    /// Seconds spent in the call.
    pub wall_time: f64,
}

/// Monotonic timer that degrades to zero where no clock is available.
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// Forward-difference Jacobian `K x 6` of the descriptor with respect to a
/// twist applied to the target: column `i` is
/// `(phi(exp(-h e_i) P_T) - phi(P_T)) / (-h)`.
pub fn jacobian_fd(model: &EncoderModel, p_t: &PointCloud, step: f64) -> Result<DMatrix<f64>> {
    let base = model.descriptor(p_t)?;
    jacobian_fd_from(model, p_t, &base, step)
}

fn jacobian_fd_from(model: &EncoderModel, p_t: &PointCloud, base: &[f64], step: f64) -> Result<DMatrix<f64>> {
    let k = base.len();
    let mut jac = DMatrix::zeros(k, 6);
    for i in 0..6 {
        let mut xi = [0.0; 6];
        xi[i] = -step;
        let moved = apply(&exp_twist(&Twist::from_array(xi)), p_t);
        let phi = model.descriptor(&moved)?;
        for r in 0..k {
            jac[(r, i)] = (phi[r] - base[r]) / (-step);
        }
    }
    Ok(jac)
}

/// `(J^T J + damping I)^{-1} J^T`, the 6 x K map from residual to update.
pub fn lk_solver(jac: &DMatrix<f64>, damping: f64) -> Result<DMatrix<f64>> {
    let jt = jac.transpose();
    let mut normal = &jt * jac;
    for i in 0..normal.nrows() {
        normal[(i, i)] += damping;
    }
    if !normal.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularNormalEquations);
    }
    let chol = normal.cholesky().ok_or(Error::SingularNormalEquations)?;
    Ok(chol.solve(&jt))
}

/// Inverse-compositional LK. Starting from `G = I`, each iteration forms
/// `r = phi(G P_S) - phi(P_T)`, solves `dxi = (J^T J + damping I)^{-1} J^T r`
/// and updates `G <- exp(dxi)^{-1} G`. Stops when `|dxi| < tol_dxi` or after
/// `max_iters` updates; a non-finite update ends the loop early with the last
/// finite estimate and `converged = false`.
pub fn iclk_register(
    model: &EncoderModel,
    p_s: &PointCloud,
    p_t: &PointCloud,
    settings: &LkSettings,
) -> Result<RegistrationResult> {
    settings.validate()?;
    let clock = Stopwatch::start();
    let phi_t = DVector::from_vec(model.descriptor(p_t)?);
    let mut solver = lk_solver(&jacobian_fd_from(model, p_t, phi_t.as_slice(), settings.step_fd)?, settings.damping)?;

    let mut g = RigidTransform::identity();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=settings.max_iters {
        let moved = apply(&g, p_s);
        let phi = DVector::from_vec(model.descriptor(&moved)?);
        if settings.recompute_jacobian && k > 1 {
            solver = lk_solver(&jacobian_fd_from(model, &moved, phi.as_slice(), settings.step_fd)?, settings.damping)?;
        }
        let r = phi - &phi_t;
        history.push(r.norm());
        let dxi = &solver * r;
        let twist = Twist::from_array([dxi[0], dxi[1], dxi[2], dxi[3], dxi[4], dxi[5]]);
        let next = exp_twist(&-twist) * g;
        if !twist.is_finite() || !next.is_finite() {
            break;
        }
        g = next;
        iterations = k;
        if twist.norm() < settings.tol_dxi {
            converged = true;
            break;
        }
    }
    history.truncate(iterations);
    Ok(RegistrationResult {
        g_est: g,
        iterations,
        converged,
        residual_history: history,
        wall_time: clock.seconds(),
    })
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`
/// (cross-covariance SVD with reflection correction, so `det R = +1`).
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<RigidTransform> {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return Err(Error::DegenerateCorrespondences);
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = SVD::new(h, true, true);
    let sv = svd.singular_values;
    let scale = sv.max();
    // A rotation is pinned down once two singular values are non-zero.
    let rank = sv.iter().filter(|&&s| s > 1e-12 * scale.max(f64::MIN_POSITIVE)).count();
    if !(scale > 0.0) || rank < 2 {
        return Err(Error::DegenerateCorrespondences);
    }
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = v * fix * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs))
}

/// Point-to-point ICP from `G = I`: nearest neighbours of the moved source
/// in the target, closed-form rigid update, repeat. Converged once an
/// update moves less than `tol` in both rotation angle (radians) and
/// translation.
pub fn icp_register(p_s: &PointCloud, p_t: &PointCloud, max_iters: usize, tol: f64) -> Result<RegistrationResult> {
    let clock = Stopwatch::start();
    let index = NnIndex::build(p_t);
    let mut g = RigidTransform::identity();
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=max_iters {
        let moved: Vec<Vector3<f64>> = p_s.points().iter().map(|p| g.transform_point(p)).collect();
        let mut matched = Vec::with_capacity(moved.len());
        let mut sq = 0.0;
        for p in &moved {
            let (i, d2) = index.nearest(p);
            matched.push(*index.point(i));
            sq += d2;
        }
        history.push((sq / moved.len() as f64).sqrt());
        let delta = kabsch(&moved, &matched)?;
        g = delta * g;
        iterations = k;
        if delta.angle() < tol && delta.translation.norm() < tol {
            converged = true;
            break;
        }
    }
    Ok(RegistrationResult {
        g_est: g,
        iterations,
        converged,
        residual_history: history,
        wall_time: clock.seconds(),
    })
}
