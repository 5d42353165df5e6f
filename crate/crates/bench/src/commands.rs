use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use lkreg::cloud::{chamfer_distance, hausdorff_distance, read_cloud};
use lkreg::encoder::{
    evaluate_loss, train, EncoderKind, EncoderModel, TrainReport, TrainSample, TrainSettings,
};
use lkreg::geom3d::{apply, perturbation_at_angle, rotation_error_deg, translation_error};
use lkreg::register::{iclk_register, icp_register, LkSettings, RegistrationResult};
use lkreg::{derive_seed, PointCloud, RigidTransform};

use crate::config::{Method, RunConfig};
use crate::dataset::{self, pose_from_rows, pose_rows, GtPose, Manifest, PairData};
use crate::metrics::{self, MetricsRow, PairRecord};

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            ensure!(n > 0, "--threads must be at least 1");
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        dataset::generate(&cfg.out, &cfg.gen, cfg.seed)
    })?
}

pub fn checkpoint_path(out: &Path, kind: EncoderKind) -> PathBuf {
    out.join(match kind {
        EncoderKind::Mlp => "iclk-mlp.json",
        EncoderKind::Mamba => "iclk-mamba.json",
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub epochs: Vec<EpochLog>,
    pub report: TrainReport,
    pub initial_val_loss: f64,
}

fn samples(pairs: &[PairData], idx: &[usize]) -> Vec<TrainSample> {
    idx.iter().map(|&i| pairs[i].sample()).collect()
}

/// Seed used to initialize the encoder of `kind` for a run seeded with `seed`.
pub fn encoder_seed(seed: u64, kind: EncoderKind) -> u64 {
    derive_seed(seed, &[0xE4C0, kind as u64])
}

/// Trains the encoder selected by `cfg.train.encoder.kind` on the training
/// split and writes `<out>/iclk-<kind>.json` (+ `.bin`) and
/// `<out>/iclk-<kind>_loss.csv` with per-epoch train and validation loss.
pub fn cmd_train(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = cfg.dataset()?;
    let pairs = dataset::load_dataset(dir)?;
    let (train_idx, val_idx) = dataset::split_indices(pairs.len(), cfg.split, cfg.seed);
    let train_set = samples(&pairs, &train_idx);
    let mut val_set = samples(&pairs, &val_idx);
    if let Some(cap) = cfg.train.val_max_pairs {
        val_set.truncate(cap);
    }
    ensure!(!train_set.is_empty(), lkreg::Error::EmptyDataset);

    let tc = &cfg.train;
    let kind = tc.encoder.kind;
    let mut model = EncoderModel::init(tc.encoder, encoder_seed(cfg.seed, kind))?;
    let settings = TrainSettings {
        epochs: tc.epochs,
        batch_size: tc.batch_size,
        lr: tc.lr,
        seed: cfg.seed,
        lambda: tc.lambda,
        lk: tc.lk,
        augment: tc.augment,
        clip_grad_norm: tc.clip_grad_norm,
    };
    let val_loss = |m: &EncoderModel| -> Result<f64> {
        if val_set.is_empty() {
            Ok(f64::NAN)
        } else {
            Ok(evaluate_loss(m, &val_set, &settings)?)
        }
    };

    fs::create_dir_all(&cfg.out)?;
    let checkpoint = checkpoint_path(&cfg.out, kind);
    let loss_csv = checkpoint.with_file_name(format!("iclk-{}_loss.csv", kind_name(kind)));

    let initial_val_loss = val_loss(&model)?;
    let mut epochs = Vec::new();
    let mut failure = None;
    let report = train(&mut model, &train_set, &settings, |epoch, train_loss, m| {
        if failure.is_some() {
            return;
        }
        match val_loss(m) {
            Ok(v) => {
                let log = EpochLog {
                    epoch: epoch + 1,
                    train_loss,
                    val_loss: v,
                };
                on_epoch(&log);
                epochs.push(log);
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.context("validation loss"));
    }

    model
        .save(&checkpoint)
        .with_context(|| format!("writing {}", checkpoint.display()))?;
    let mut w = csv::Writer::from_path(&loss_csv)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    w.write_record(["0".to_string(), String::new(), initial_val_loss.to_string()])?;
    for e in &epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(TrainOutcome {
        checkpoint,
        loss_csv,
        epochs,
        report,
        initial_val_loss,
    })
}

fn kind_name(kind: EncoderKind) -> &'static str {
    match kind {
        EncoderKind::Mlp => "mlp",
        EncoderKind::Mamba => "mamba",
    }
}

/// A ready-to-run registration method.
pub enum Solver {
    Icp { max_iters: usize, tol: f64 },
    Iclk { model: EncoderModel, lk: LkSettings },
}

impl Solver {
    pub fn run(
        &self,
        source: &PointCloud,
        target: &PointCloud,
    ) -> lkreg::Result<RegistrationResult> {
        match self {
            Solver::Icp { max_iters, tol } => icp_register(source, target, *max_iters, *tol),
            Solver::Iclk { model, lk } => iclk_register(model, source, target, lk),
        }
    }
}

/// Builds the solver for `method`; IC-LK methods load `checkpoint` and check
/// that it holds the matching encoder.
pub fn solver(method: Method, checkpoint: Option<&Path>, cfg: &RunConfig) -> Result<Solver> {
    match method.encoder() {
        None => Ok(Solver::Icp {
            max_iters: cfg.sweep.icp_max_iters,
            tol: cfg.sweep.icp_tol,
        }),
        Some(kind) => {
            let path = checkpoint
                .with_context(|| format!("method {method} needs an encoder checkpoint"))?;
            let model =
                EncoderModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            if model.config().kind != kind {
                bail!(
                    "checkpoint {} holds a {:?} encoder, method {method} needs {kind:?}",
                    path.display(),
                    model.config().kind
                );
            }
            Ok(Solver::Iclk {
                model,
                lk: cfg.sweep.lk,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterReport {
    pub method: Method,
    /// Row-major estimate mapping the source onto the target.
    pub pose: [[f64; 4]; 4],
    pub iterations: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
    pub wall_time: f64,
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
    pub cd_before: f64,
    pub cd_after: f64,
    pub hd_before: f64,
    pub hd_after: f64,
}

/// Reads a ground-truth pose: either a `gt_pose.json` or a bare 4x4 row list.
pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: [[f64; 4]; 4] = match serde_json::from_str::<GtPose>(&text) {
        Ok(gt) => gt.g_gt,
        Err(_) => serde_json::from_str(&text)
            .with_context(|| format!("parsing pose {}", path.display()))?,
    };
    pose_from_rows(&rows)
}

pub fn cmd_register(
    cfg: &RunConfig,
    method: Method,
    checkpoint: Option<&Path>,
    source: &Path,
    target: &Path,
    gt: Option<&Path>,
) -> Result<RegisterReport> {
    cfg.validate()?;
    let p_s = read_cloud(source).with_context(|| format!("reading {}", source.display()))?;
    let p_t = read_cloud(target).with_context(|| format!("reading {}", target.display()))?;
    let gt = gt.map(read_pose).transpose()?;
    let solver = solver(method, checkpoint, cfg)?;
    let res = solver.run(&p_s, &p_t)?;
    let moved = apply(&res.g_est, &p_s);
    Ok(RegisterReport {
        method,
        pose: pose_rows(&res.g_est),
        iterations: res.iterations,
        converged: res.converged,
        residual_history: res.residual_history,
        wall_time: res.wall_time,
        rotation_error_deg: gt.map(|g| rotation_error_deg(&res.g_est, &g)),
        translation_error: gt.map(|g| translation_error(&res.g_est, &g)),
        cd_before: chamfer_distance(&p_s, &p_t),
        cd_after: chamfer_distance(&moved, &p_t),
        hd_before: hausdorff_distance(&p_s, &p_t),
        hd_after: hausdorff_distance(&moved, &p_t),
    })
}

/// Perturbation applied to the aligned source of `pair` at `angle_deg`;
/// shared by all methods so they start from identical conditions.
pub fn sweep_perturbation(
    seed: u64,
    pair: usize,
    angle_deg: f64,
    max_trans: f64,
) -> RigidTransform {
    perturbation_at_angle(
        angle_deg,
        max_trans,
        derive_seed(seed, &[pair as u64, angle_deg.to_bits()]),
    )
}

fn evaluate(
    method: Method,
    solver: &Solver,
    pair: &PairData,
    aligned: &PointCloud,
    perturb: &RigidTransform,
    angle_deg: f64,
    timing: bool,
) -> PairRecord {
    let source = apply(perturb, aligned);
    let gt = perturb.inverse();
    let (g_est, iterations, converged, wall, error) = match solver.run(&source, &pair.target) {
        Ok(r) => (r.g_est, r.iterations, r.converged, r.wall_time, None),
        Err(e) => (
            RigidTransform::identity(),
            0,
            false,
            0.0,
            Some(e.to_string()),
        ),
    };
    let moved = apply(&g_est, &source);
    PairRecord {
        method,
        angle_deg,
        pair: pair.name.clone(),
        rot_err_deg: rotation_error_deg(&g_est, &gt),
        trans_err: translation_error(&g_est, &gt),
        cd: chamfer_distance(&moved, &pair.target),
        hd: hausdorff_distance(&moved, &pair.target),
        iterations,
        converged,
        wall_ms: if timing { wall * 1e3 } else { 0.0 },
        error,
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<PairRecord>,
    pub csv: PathBuf,
    pub markdown: PathBuf,
    pub jsonl: PathBuf,
}

/// Evaluates every requested method at every grid angle on the test split.
/// Pairs run in parallel; records are kept in (method, angle, pair) order so
/// the outputs do not depend on scheduling.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let sc = &cfg.sweep;
    ensure!(!sc.methods.is_empty(), "no methods to sweep");
    ensure!(!sc.angles.is_empty(), "empty angle grid");
    let dir = cfg.dataset()?;
    let pairs = dataset::load_dataset(dir)?;
    let (_, mut test_idx) = dataset::split_indices(pairs.len(), cfg.split, cfg.seed);
    if let Some(cap) = sc.max_pairs {
        test_idx.truncate(cap);
    }
    ensure!(!test_idx.is_empty(), "test split is empty");

    let solvers: Vec<Solver> = sc
        .methods
        .iter()
        .map(|&m| {
            let ckpt = match m {
                Method::Icp => None,
                Method::IclkMlp => sc.mlp_checkpoint.as_deref(),
                Method::IclkMamba => sc.mamba_checkpoint.as_deref(),
            };
            solver(m, ckpt, cfg)
        })
        .collect::<Result<_>>()?;
    let aligned: Vec<PointCloud> = test_idx
        .iter()
        .map(|&i| pairs[i].aligned_source())
        .collect();

    let mut tasks = Vec::new();
    for mi in 0..sc.methods.len() {
        for &angle in &sc.angles {
            for (k, &pi) in test_idx.iter().enumerate() {
                tasks.push((mi, angle, k, pi));
            }
        }
    }
    let records: Vec<PairRecord> = with_threads(cfg.threads, || {
        tasks
            .par_iter()
            .map(|&(mi, angle, k, pi)| {
                let perturb = sweep_perturbation(cfg.seed, pi, angle, sc.max_trans);
                evaluate(
                    sc.methods[mi],
                    &solvers[mi],
                    &pairs[pi],
                    &aligned[k],
                    &perturb,
                    angle,
                    sc.timing,
                )
            })
            .collect()
    })?;

    fs::create_dir_all(&cfg.out)?;
    let jsonl = cfg.out.join("pairs.jsonl");
    metrics::write_jsonl(&jsonl, &records)?;
    let rows = metrics::aggregate(&records, &sc.methods, &sc.angles);
    let csv = cfg.out.join("results.csv");
    fs::write(&csv, metrics::csv_string(&rows, cfg.extended)?)?;
    let markdown = cfg.out.join("results.md");
    fs::write(&markdown, metrics::markdown(&rows, &sc.methods))?;
    Ok(SweepOutcome {
        rows,
        records,
        csv,
        markdown,
        jsonl,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub pair: String,
    /// Largest distance between a ground-truth-moved source point and its
    /// target counterpart (same index).
    pub max_error: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidateReport {
    pub pairs: usize,
    pub failures: usize,
    pub tolerance: f64,
    pub checks: Vec<PairCheck>,
}

/// Checks that every pair satisfies `apply(G_gt, P_S) ≈ P_T` point by point.
/// Source noise widens the tolerance by `8 sqrt(3) sigma`.
pub fn cmd_validate(cfg: &RunConfig, tol: f64) -> Result<ValidateReport> {
    cfg.validate()?;
    let dir = cfg.dataset()?;
    let manifest = dataset::read_manifest(dir)?;
    let tolerance = tol + 8.0 * 3f64.sqrt() * manifest.config.pair.noise_sigma;
    let checks: Vec<PairCheck> = with_threads(cfg.threads, || {
        manifest
            .pairs
            .par_iter()
            .map(|name| -> Result<PairCheck> {
                let pair = dataset::load_pair(dir, name)?;
                let moved = pair.aligned_source();
                let max_error = if moved.len() == pair.target.len() {
                    moved
                        .points()
                        .iter()
                        .zip(pair.target.points())
                        .map(|(a, b)| (a - b).norm())
                        .fold(0.0, f64::max)
                } else {
                    f64::INFINITY
                };
                Ok(PairCheck {
                    pair: name.clone(),
                    max_error,
                    ok: max_error <= tolerance,
                })
            })
            .collect::<Result<_>>()
    })??;
    Ok(ValidateReport {
        pairs: checks.len(),
        failures: checks.iter().filter(|c| !c.ok).count(),
        tolerance,
        checks,
    })
}
