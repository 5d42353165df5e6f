//! On-disk pair datasets.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/pair_00000/source.ply
//! <dir>/pair_00000/target.ply
//! <dir>/pair_00000/gt_pose.json
//! ```
//!
//! `gt_pose.json` holds the 4x4 transform mapping the source onto the target.

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use lkreg::cloud::{read_cloud, write_ply, Normalization};
use lkreg::encoder::TrainSample;
use lkreg::geom3d::{apply, sample_perturbation};
use lkreg::synth::{make_pair, read_trajectory, CameraModel, TriangleMesh};
use lkreg::{derive_seed, PointCloud, RigidTransform};

use crate::config::GenConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtPose {
    /// Row-major homogeneous matrix.
    pub g_gt: [[f64; 4]; 4],
    pub camera: usize,
    pub normalization: Normalization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub pairs: usize,
    pub min_points: usize,
    pub max_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: GenConfig,
    pub counts: Counts,
    pub pairs: Vec<String>,
}

pub fn pose_rows(g: &RigidTransform) -> [[f64; 4]; 4] {
    let flat: [f64; 16] = (*g).into();
    std::array::from_fn(|r| std::array::from_fn(|c| flat[4 * r + c]))
}

pub fn pose_from_rows(rows: &[[f64; 4]; 4]) -> Result<RigidTransform> {
    let flat: [f64; 16] = std::array::from_fn(|i| rows[i / 4][i % 4]);
    RigidTransform::try_from(flat).map_err(anyhow::Error::msg)
}

pub fn pair_name(i: usize) -> String {
    format!("pair_{i:05}")
}

#[derive(Clone, Debug)]
pub struct PairData {
    pub name: String,
    pub source: PointCloud,
    pub target: PointCloud,
    pub g_gt: RigidTransform,
}

impl PairData {
    pub fn sample(&self) -> TrainSample {
        TrainSample {
            source: self.source.clone(),
            target: self.target.clone(),
            g_gt: self.g_gt,
        }
    }

    /// Source moved onto the target by the stored ground truth.
    pub fn aligned_source(&self) -> PointCloud {
        apply(&self.g_gt, &self.source)
    }
}

fn load_mesh(cfg: &GenConfig) -> Result<TriangleMesh> {
    match &cfg.mesh {
        Some(p) => {
            TriangleMesh::from_file(p).with_context(|| format!("loading mesh {}", p.display()))
        }
        None => Ok(cfg.scene.mesh()),
    }
}

fn load_cameras(cfg: &GenConfig) -> Result<Vec<CameraModel>> {
    match &cfg.trajectory {
        Some(p) => {
            let cams = read_trajectory(p)
                .with_context(|| format!("loading trajectory {}", p.display()))?;
            ensure!(
                !cams.is_empty(),
                "trajectory {} has no cameras",
                p.display()
            );
            Ok(cams)
        }
        None => Ok(cfg.scene.trajectory(cfg.n_pairs)),
    }
}

/// Renders `cfg.n_pairs` pairs into `dir`. Pair `i` uses camera
/// `i mod cameras` and a perturbation seeded from `(seed, i)`, so the output
/// depends only on the seed and the config.
pub fn generate(dir: &Path, cfg: &GenConfig, seed: u64) -> Result<Manifest> {
    ensure!(cfg.n_pairs > 0, "n_pairs must be at least 1");
    let mesh = load_mesh(cfg)?;
    let cams = load_cameras(cfg)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let sizes: Vec<usize> = (0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let cam_index = i % cams.len();
            let perturb = sample_perturbation(
                cfg.max_angle_deg,
                cfg.max_trans,
                derive_seed(seed, &[i as u64, 1]),
            );
            let pair = make_pair(
                &mesh,
                &cams[cam_index],
                &cfg.pair,
                &perturb,
                derive_seed(seed, &[i as u64, 0]),
            )
            .with_context(|| format!("pair {i} (camera {cam_index})"))?;
            let pdir = dir.join(pair_name(i));
            fs::create_dir_all(&pdir)?;
            write_ply(pdir.join("source.ply"), &pair.source)?;
            write_ply(pdir.join("target.ply"), &pair.target)?;
            let gt = GtPose {
                g_gt: pose_rows(&pair.g_gt),
                camera: cam_index,
                normalization: pair.normalization,
            };
            fs::write(
                pdir.join("gt_pose.json"),
                serde_json::to_string_pretty(&gt)?,
            )?;
            Ok(pair.target.len())
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        counts: Counts {
            pairs: cfg.n_pairs,
            min_points: sizes.iter().copied().min().unwrap_or(0),
            max_points: sizes.iter().copied().max().unwrap_or(0),
        },
        pairs: (0..cfg.n_pairs).map(pair_name).collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_pair(dir: &Path, name: &str) -> Result<PairData> {
    let pdir: PathBuf = dir.join(name);
    let source = read_cloud(pdir.join("source.ply"))?;
    let target = read_cloud(pdir.join("target.ply"))?;
    let gt_path = pdir.join("gt_pose.json");
    let text =
        fs::read_to_string(&gt_path).with_context(|| format!("reading {}", gt_path.display()))?;
    let gt: GtPose =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", gt_path.display()))?;
    Ok(PairData {
        name: name.to_string(),
        source,
        target,
        g_gt: pose_from_rows(&gt.g_gt).with_context(|| format!("pose in {}", gt_path.display()))?,
    })
}

/// Every pair listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<PairData>> {
    let manifest = read_manifest(dir)?;
    if manifest.pairs.is_empty() {
        bail!("dataset {} is empty", dir.display());
    }
    manifest
        .pairs
        .par_iter()
        .map(|name| load_pair(dir, name))
        .collect()
}

/// Seeded shuffle of `0..n` cut into train and test index lists, each kept
/// in ascending order. Both sides get at least one pair when `n >= 2`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5151])));
    let n_train = if n >= 2 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        n
    };
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
