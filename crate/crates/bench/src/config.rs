use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use lkreg::encoder::{Augment, EncoderConfig, EncoderKind};
use lkreg::register::LkSettings;
use lkreg::synth::meshes::Scene;
use lkreg::synth::PairConfig;

/// Registration method compared by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Icp,
    IclkMlp,
    IclkMamba,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Icp => "icp",
            Method::IclkMlp => "iclk-mlp",
            Method::IclkMamba => "iclk-mamba",
        }
    }

    pub fn encoder(self) -> Option<EncoderKind> {
        match self {
            Method::Icp => None,
            Method::IclkMlp => Some(EncoderKind::Mlp),
            Method::IclkMamba => Some(EncoderKind::Mamba),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "icp" => Method::Icp,
            "iclk-mlp" | "mlp" => Method::IclkMlp,
            "iclk-mamba" | "mamba" => Method::IclkMamba,
            other => bail!("unknown method `{other}` (expected icp, iclk-mlp or iclk-mamba)"),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub scene: Scene,
    /// OFF/PLY mesh replacing the built-in scene.
    pub mesh: Option<PathBuf>,
    /// JSON camera list replacing the built-in orbit.
    pub trajectory: Option<PathBuf>,
    pub n_pairs: usize,
    pub pair: PairConfig,
    pub max_angle_deg: f64,
    pub max_trans: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            scene: Scene::BentTube,
            mesh: None,
            trajectory: None,
            n_pairs: 100,
            pair: PairConfig::default(),
            max_angle_deg: 90.0,
            max_trans: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub lk: LkSettings,
    pub augment: Option<Augment>,
    pub clip_grad_norm: Option<f64>,
    /// Cap on validation pairs scored after every epoch (all if unset).
    pub val_max_pairs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 200,
            batch_size: 16,
            lr: 1e-4,
            lambda: 1e-3,
            lk: LkSettings::default(),
            augment: None,
            clip_grad_norm: None,
            val_max_pairs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub angles: Vec<f64>,
    pub max_trans: f64,
    pub mlp_checkpoint: Option<PathBuf>,
    pub mamba_checkpoint: Option<PathBuf>,
    pub lk: LkSettings,
    pub icp_max_iters: usize,
    pub icp_tol: f64,
    /// Record wall time per call. Off makes `results.csv` reproducible
    /// byte for byte.
    pub timing: bool,
    /// Evaluate at most this many test pairs (all if unset).
    pub max_pairs: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Icp, Method::IclkMlp, Method::IclkMamba],
            angles: (0..=9).map(|i| 10.0 * i as f64).collect(),
            max_trans: 0.1,
            mlp_checkpoint: None,
            mamba_checkpoint: None,
            lk: LkSettings::default(),
            icp_max_iters: 50,
            icp_tol: 1e-9,
            timing: true,
            max_pairs: None,
        }
    }
}

/// Everything a run needs; loaded from `--config` and then overridden by
/// command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub dataset: Option<PathBuf>,
    /// Fraction of pairs used for training; the rest are the test split.
    pub split: f64,
    pub extended: bool,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            dataset: None,
            split: 0.8,
            extended: false,
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            bail!("split fraction must lie in (0, 1), got {}", self.split);
        }
        for &a in &self.sweep.angles {
            if !(0.0..=179.0).contains(&a) {
                bail!("sweep angle {a} outside [0, 179]");
            }
        }
        if !(0.0..=179.0).contains(&self.gen.max_angle_deg) {
            bail!(
                "generation angle {} outside [0, 179]",
                self.gen.max_angle_deg
            );
        }
        self.train.encoder.validate()?;
        self.train.lk.validate()?;
        self.sweep.lk.validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .context("no dataset given (use --dataset or set `dataset` in the config)")
    }
}
