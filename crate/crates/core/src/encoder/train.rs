use nalgebra::Matrix4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{points_tensor, EncoderModel};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom3d::{apply, exp_twist_with_jacobian, sample_perturbation, RigidTransform};
use crate::register::{jacobian_fd, lk_solver, LkSettings};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// One registration example: `target ≈ g_gt · source`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub source: PointCloud,
    pub target: PointCloud,
    pub g_gt: RigidTransform,
}

/// Re-perturbs the source of every sample on every visit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub max_angle_deg: f64,
    pub max_trans: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the descriptor term in the loss.
    pub lambda: f64,
    pub lk: LkSettings,
    pub augment: Option<Augment>,
    /// Rescale each batch gradient to at most this global L2 norm.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            lambda: 1e-3,
            lk: LkSettings::default(),
            augment: None,
            clip_grad_norm: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each optimizer step's batch, before the update.
    pub step_losses: Vec<f64>,
    /// Mean training loss over each epoch.
    pub epoch_losses: Vec<f64>,
    /// Samples dropped because their loss was not finite.
    pub skipped: usize,
}

/// `|G_est G_gt^{-1} - I|_F + lambda |phi_s - phi_t|^2`.
pub fn loss_total(g_est: &RigidTransform, g_gt: &RigidTransform, phi_s: &[f64], phi_t: &[f64], lambda: f64) -> f64 {
    let diff = g_est.to_matrix4() * g_gt.inverse().to_matrix4() - Matrix4::identity();
    let feat: f64 = phi_s.iter().zip(phi_t).map(|(a, b)| (a - b) * (a - b)).sum();
    diff.norm() + lambda * feat
}

/// Tape version of [`loss_total`] for a `[4, 4]` estimate.
pub fn loss_total_tape(
    tape: &mut Tape,
    g_est: Var,
    g_gt: &RigidTransform,
    phi_s: Var,
    phi_t: Var,
    lambda: f64,
) -> Result<Var> {
    let inv = tape.constant(matrix4_tensor(&g_gt.inverse().to_matrix4()));
    let eye = tape.constant(matrix4_tensor(&Matrix4::identity()));
    let prod = tape.matmul(g_est, inv)?;
    let diff = tape.sub(prod, eye)?;
    let geo = tape.l2_norm(diff);
    let d = tape.sub(phi_s, phi_t)?;
    let d = tape.square(d);
    let feat = tape.sum(d);
    let feat = tape.scale(feat, lambda);
    tape.add(geo, feat)
}

fn matrix4_tensor(m: &Matrix4<f64>) -> Tensor {
    let mut data = Vec::with_capacity(16);
    for i in 0..4 {
        for j in 0..4 {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![4, 4], data).expect("4x4")
}

/// Result of [`unrolled_iclk`]: handles into the tape.
#[derive(Clone, Copy, Debug)]
pub struct UnrolledLk {
    /// Final estimate as a `[4, 4]` homogeneous matrix.
    pub g_est: Var,
    /// Descriptor of the source moved by the final estimate.
    pub phi_s: Var,
    pub phi_t: Var,
    pub iterations: usize,
}

/// The IC-LK loop of [`crate::register::iclk_register`] recorded on a tape,
/// so that the final estimate is differentiable with respect to the encoder
/// parameters through every residual. The Jacobian and the normal-equation
/// solve are evaluated once outside the tape and enter as constants.
pub fn unrolled_iclk(
    model: &EncoderModel,
    tape: &mut Tape,
    vars: &[Var],
    source: &PointCloud,
    target: &PointCloud,
    lk: &LkSettings,
) -> Result<UnrolledLk> {
    lk.validate()?;
    let jac = jacobian_fd(model, target, lk.step_fd)?;
    let solver = lk_solver(&jac, lk.damping)?;
    let k = solver.ncols();
    let mut rows = Vec::with_capacity(6 * k);
    for i in 0..6 {
        for j in 0..k {
            rows.push(solver[(i, j)]);
        }
    }
    let solver = tape.constant(Tensor::new(vec![6, k], rows)?);

    let pt = tape.constant(points_tensor(target));
    let phi_t = model.forward_tape(tape, vars, pt)?;
    let ps = tape.constant(points_tensor(source));
    let mut rot = tape.constant(Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?);
    let mut trans = tape.constant(Tensor::zeros(&[3, 1]));

    let warp = |tape: &mut Tape, rot: Var, trans: Var| -> Result<Var> {
        let rt = tape.transpose(rot)?;
        let moved = tape.matmul(ps, rt)?;
        let t = tape.reshape(trans, &[3])?;
        tape.add(moved, t)
    };

    let mut iterations = 0;
    for _ in 0..lk.max_iters {
        let moved = warp(tape, rot, trans)?;
        let phi = model.forward_tape(tape, vars, moved)?;
        let r = tape.sub(phi, phi_t)?;
        let r = tape.reshape(r, &[k, 1])?;
        let dxi = tape.matmul(solver, r)?;
        let dxi = tape.reshape(dxi, &[6])?;
        let neg = tape.neg(dxi);
        let xi: [f64; 6] = tape.value(neg).data().try_into().expect("six entries");
        if !xi.iter().all(|v| v.is_finite()) {
            break;
        }
        let (vals, jac) = exp_twist_with_jacobian(&xi);
        let step = tape.mapped(neg, Tensor::from_vec(vals.to_vec()), jac.concat())?;
        let d_rot = tape.slice(step, 0, 0, 9)?;
        let d_rot = tape.reshape(d_rot, &[3, 3])?;
        let d_trans = tape.slice(step, 0, 9, 12)?;
        let d_trans = tape.reshape(d_trans, &[3, 1])?;
        rot = tape.matmul(d_rot, rot)?;
        let rotated = tape.matmul(d_rot, trans)?;
        trans = tape.add(rotated, d_trans)?;
        iterations += 1;
        if xi.iter().map(|v| v * v).sum::<f64>().sqrt() < lk.tol_dxi {
            break;
        }
    }
    let moved = warp(tape, rot, trans)?;
    let phi_s = model.forward_tape(tape, vars, moved)?;
    let top = tape.concat(&[rot, trans], 1)?;
    let bottom = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 1.0])?);
    let g_est = tape.concat(&[top, bottom], 0)?;
    Ok(UnrolledLk {
        g_est,
        phi_s,
        phi_t,
        iterations,
    })
}

fn augmented(sample: &TrainSample, aug: Option<Augment>, seed: u64) -> TrainSample {
    match aug {
        None => sample.clone(),
        Some(a) => {
            let p = sample_perturbation(a.max_angle_deg, a.max_trans, seed);
            TrainSample {
                source: apply(&p, &sample.source),
                target: sample.target.clone(),
                g_gt: sample.g_gt * p.inverse(),
            }
        }
    }
}

/// Loss of one sample and, when `grads` is given, its parameter gradients
/// added into `grads`.
fn sample_loss(
    model: &EncoderModel,
    sample: &TrainSample,
    settings: &TrainSettings,
    grads: Option<&mut [Vec<f64>]>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, grads.is_some());
    let run = unrolled_iclk(model, &mut tape, &vars, &sample.source, &sample.target, &settings.lk)?;
    let loss = loss_total_tape(&mut tape, run.g_est, &sample.g_gt, run.phi_s, run.phi_t, settings.lambda)?;
    let value = tape.value(loss).item();
    if let Some(grads) = grads {
        if value.is_finite() {
            tape.backward(loss)?;
            for (acc, v) in grads.iter_mut().zip(&vars) {
                if let Some(g) = tape.grad(*v) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Ok(value)
}

/// Mean loss over `data` without updating anything.
pub fn evaluate_loss(model: &EncoderModel, data: &[TrainSample], settings: &TrainSettings) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in data {
        total += sample_loss(model, s, settings, None)?;
    }
    Ok(total / data.len() as f64)
}

/// Mini-batch Adam on the unrolled IC-LK loss. The sample order is shuffled
/// every epoch from `settings.seed`; each batch averages per-sample
/// gradients. `on_epoch(epoch, mean_loss, model)` runs after every epoch.
pub fn train(
    model: &mut EncoderModel,
    data: &[TrainSample],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(usize, f64, &EncoderModel),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if settings.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
        return Err(Error::Config("clip_grad_norm must be positive".into()));
    }
    let mut adam = Adam::new(AdamConfig {
        lr: settings.lr,
        ..AdamConfig::default()
    });
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..settings.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(settings.seed, &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(settings.batch_size) {
            let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
            let mut batch_total = 0.0;
            let mut used = 0usize;
            for &i in batch {
                let seed = crate::derive_seed(settings.seed, &[epoch as u64, i as u64, 1]);
                let sample = augmented(&data[i], settings.augment, seed);
                let loss = sample_loss(model, &sample, settings, Some(&mut grads))?;
                if loss.is_finite() {
                    batch_total += loss;
                    used += 1;
                } else {
                    report.skipped += 1;
                }
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt() * inv;
            let scale = match settings.clip_grad_norm {
                Some(c) if norm > c => inv * c / norm,
                _ => inv,
            };
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            adam.step(model.params_mut(), &grads)?;
            report.step_losses.push(batch_total * inv);
            epoch_total += batch_total;
            epoch_count += used;
        }
        let mean = if epoch_count > 0 {
            epoch_total / epoch_count as f64
        } else {
            f64::NAN
        };
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean, model);
    }
    Ok(report)
}
