use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use lkreg::cloud::SubsampleMethod;
use lkreg::encoder::{Augment, EncoderKind, Ordering};
use lkreg::register::LkSettings;
use lkreg::synth::meshes::Scene;
use lkreg_bench::commands;
use lkreg_bench::{Method, RunConfig};

#[derive(Parser)]
#[command(
    name = "lkreg",
    version,
    about = "Point-cloud registration benchmark harness"
)]
struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Add mean rotation and translation error columns to results.csv.
    #[arg(long, global = true)]
    extended: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset of registration pairs.
    Gen(GenArgs),
    /// Train an encoder on the training split of a dataset.
    Train(TrainArgs),
    /// Register one source/target pair and print the result as JSON.
    Register(RegisterArgs),
    /// Evaluate methods over a grid of perturbation angles.
    Sweep(SweepArgs),
    /// Check every pair of a dataset against its ground truth.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Built-in scene: sphere, torus or bent-tube.
    #[arg(long)]
    scene: Option<Scene>,
    /// OFF/PLY mesh to use instead of a built-in scene.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// JSON camera list to use instead of the built-in trajectory.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Points per cloud.
    #[arg(long)]
    points: Option<usize>,
    /// Gaussian noise sigma on the source, normalized units.
    #[arg(long)]
    noise: Option<f64>,
    /// random or farthest-point.
    #[arg(long)]
    subsample: Option<SubsampleMethod>,
    #[arg(long)]
    max_angle: Option<f64>,
    #[arg(long)]
    max_trans: Option<f64>,
}

#[derive(Args, Default)]
struct LkArgs {
    #[arg(long)]
    lk_iters: Option<usize>,
    #[arg(long)]
    step_fd: Option<f64>,
    #[arg(long)]
    tol_dxi: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    /// Re-evaluate the Jacobian every iteration (debug).
    #[arg(long)]
    recompute_jacobian: bool,
}

impl LkArgs {
    fn apply(&self, lk: &mut LkSettings) {
        if let Some(v) = self.lk_iters {
            lk.max_iters = v;
        }
        if let Some(v) = self.step_fd {
            lk.step_fd = v;
        }
        if let Some(v) = self.tol_dxi {
            lk.tol_dxi = v;
        }
        if let Some(v) = self.damping {
            lk.damping = v;
        }
        if self.recompute_jacobian {
            lk.recompute_jacobian = true;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// mlp or mamba.
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Training fraction of the dataset.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_blocks: Option<usize>,
    #[arg(long)]
    d_state: Option<usize>,
    #[arg(long)]
    k_out: Option<usize>,
    #[arg(long)]
    m_max: Option<usize>,
    /// Point order for the mamba encoder: morton, radial or input.
    #[arg(long)]
    ordering: Option<Ordering>,
    /// Re-perturb training sources up to this angle every epoch.
    #[arg(long)]
    augment_angle: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    augment_trans: f64,
    /// Rescale batch gradients to at most this global norm.
    #[arg(long)]
    clip_grad_norm: Option<f64>,
    #[arg(long)]
    val_max_pairs: Option<usize>,
    #[command(flatten)]
    lk: LkArgs,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "icp")]
    method: Method,
    /// Encoder checkpoint for IC-LK methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ground-truth pose (`gt_pose.json` or a 4x4 row list).
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    icp_iters: Option<usize>,
    #[arg(long)]
    icp_tol: Option<f64>,
    #[command(flatten)]
    lk: LkArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Comma-separated list of icp, iclk-mlp, iclk-mamba.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated rotation angles in degrees.
    #[arg(long, value_delimiter = ',')]
    angles: Option<Vec<f64>>,
    #[arg(long)]
    max_trans: Option<f64>,
    #[arg(long)]
    mlp_checkpoint: Option<PathBuf>,
    #[arg(long)]
    mamba_checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    icp_iters: Option<usize>,
    #[arg(long)]
    icp_tol: Option<f64>,
    /// Write 0 for wall times so results.csv is reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    #[command(flatten)]
    lk: LkArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Allowed point distance at zero noise.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out, cli.out.clone());
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.extended |= cli.extended;

    match cli.command {
        Command::Gen(a) => {
            let g = &mut cfg.gen;
            set(&mut g.scene, a.scene);
            if a.mesh.is_some() {
                g.mesh = a.mesh;
            }
            if a.trajectory.is_some() {
                g.trajectory = a.trajectory;
            }
            set(&mut g.n_pairs, a.pairs);
            set(&mut g.pair.n_points, a.points);
            set(&mut g.pair.noise_sigma, a.noise);
            set(&mut g.pair.subsample, a.subsample);
            set(&mut g.max_angle_deg, a.max_angle);
            set(&mut g.max_trans, a.max_trans);
            let m = commands::cmd_gen(&cfg)?;
            eprintln!(
                "wrote {} pairs ({}-{} points) to {}",
                m.counts.pairs,
                m.counts.min_points,
                m.counts.max_points,
                cfg.out.display()
            );
        }
        Command::Train(a) => {
            if a.dataset.is_some() {
                cfg.dataset = a.dataset;
            }
            set(&mut cfg.split, a.split);
            let t = &mut cfg.train;
            set(&mut t.encoder.kind, a.encoder);
            set(&mut t.epochs, a.epochs);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.lr, a.lr);
            set(&mut t.lambda, a.lambda);
            set(&mut t.encoder.d_model, a.d_model);
            set(&mut t.encoder.n_blocks, a.n_blocks);
            set(&mut t.encoder.d_state, a.d_state);
            set(&mut t.encoder.k_out, a.k_out);
            set(&mut t.encoder.m_max, a.m_max);
            set(&mut t.encoder.ordering, a.ordering);
            if let Some(angle) = a.augment_angle {
                t.augment = Some(Augment {
                    max_angle_deg: angle,
                    max_trans: a.augment_trans,
                });
            }
            if a.val_max_pairs.is_some() {
                t.val_max_pairs = a.val_max_pairs;
            }
            if a.clip_grad_norm.is_some() {
                t.clip_grad_norm = a.clip_grad_norm;
            }
            a.lk.apply(&mut t.lk);
            let out = commands::cmd_train(&cfg, |e| {
                eprintln!(
                    "epoch {:>4}  train {:.6}  val {:.6}",
                    e.epoch, e.train_loss, e.val_loss
                );
            })?;
            eprintln!("checkpoint {}", out.checkpoint.display());
            eprintln!("loss curve {}", out.loss_csv.display());
        }
        Command::Register(a) => {
            set(&mut cfg.sweep.icp_max_iters, a.icp_iters);
            set(&mut cfg.sweep.icp_tol, a.icp_tol);
            a.lk.apply(&mut cfg.sweep.lk);
            let report = commands::cmd_register(
                &cfg,
                a.method,
                a.checkpoint.as_deref(),
                &a.source,
                &a.target,
                a.gt.as_deref(),
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sweep(a) => {
            if a.dataset.is_some() {
                cfg.dataset = a.dataset;
            }
            set(&mut cfg.split, a.split);
            let s = &mut cfg.sweep;
            set(&mut s.methods, a.methods);
            set(&mut s.angles, a.angles);
            set(&mut s.max_trans, a.max_trans);
            if a.mlp_checkpoint.is_some() {
                s.mlp_checkpoint = a.mlp_checkpoint;
            }
            if a.mamba_checkpoint.is_some() {
                s.mamba_checkpoint = a.mamba_checkpoint;
            }
            if a.max_pairs.is_some() {
                s.max_pairs = a.max_pairs;
            }
            set(&mut s.icp_max_iters, a.icp_iters);
            set(&mut s.icp_tol, a.icp_tol);
            if a.no_timing {
                s.timing = false;
            }
            a.lk.apply(&mut s.lk);
            let out = commands::cmd_sweep(&cfg)?;
            print!("{}", std::fs::read_to_string(&out.markdown)?);
            eprintln!(
                "wrote {}, {}, {}",
                out.csv.display(),
                out.markdown.display(),
                out.jsonl.display()
            );
        }
        Command::Validate(a) => {
            if a.dataset.is_some() {
                cfg.dataset = a.dataset;
            }
            let report = commands::cmd_validate(&cfg, a.tol)?;
            for c in report.checks.iter().filter(|c| !c.ok) {
                eprintln!("FAIL {}: max error {:e}", c.pair, c.max_error);
            }
            println!(
                "{} pairs checked, {} failed (tolerance {:e})",
                report.pairs, report.failures, report.tolerance
            );
            if report.failures > 0 {
                bail!("{} pairs failed validation", report.failures);
            }
        }
    }
    Ok(())
}
