//! Global point-cloud descriptors `phi: PointCloud -> R^K`.
//!
//! Two encoders share one parameter container:
//!
//! - `mlp`: shared per-point MLP 3 -> 64 -> 128 -> K, then max-pool.
//! - `mamba`: linear lift to `d_model`, learned absolute positions, a stack
//!   of selective state-space blocks over the serialized point sequence, a
//!   two-layer fusion MLP to K channels, then max-pool.
//!
//! All weight matrices are stored `[in, out]` so that a layer is `x W + b`
//! on row-major `[N, in]` inputs.

mod train;

pub use train::{
    evaluate_loss, loss_total, loss_total_tape, train, unrolled_iclk, Augment, TrainReport, TrainSample, TrainSettings,
    UnrolledLk,
};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, Checkpoint, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Mlp,
    Mamba,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "mamba" => Ok(Self::Mamba),
            other => Err(Error::Config(format!("unknown encoder kind `{other}`"))),
        }
    }
}

/// Order in which points are fed to a sequence encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ordering {
    Input,
    Morton,
    /// By distance to the centroid. Unlike `Morton`, the order does not
    /// change under rigid motion, so the descriptor stays smooth in pose.
    Radial,
}

impl std::str::FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(Self::Input),
            "morton" => Ok(Self::Morton),
            "radial" => Ok(Self::Radial),
            other => Err(Error::Config(format!("unknown ordering `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_state: usize,
    pub k_out: usize,
    pub m_max: usize,
    pub ordering: Ordering,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mamba,
            d_model: 64,
            n_blocks: 2,
            d_state: 8,
            k_out: 256,
            m_max: 1024,
            ordering: Ordering::Morton,
        }
    }
}

const MLP_HIDDEN: [usize; 2] = [64, 128];
const NORM_EPS: f64 = 1e-5;

impl EncoderConfig {
    pub fn mlp() -> Self {
        Self {
            kind: EncoderKind::Mlp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("d_state", self.d_state),
            ("k_out", self.k_out),
            ("m_max", self.m_max),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform(usize),
    Ones,
    /// `log(1..=d_state)` along the last axis.
    ALog,
    /// Inverse softplus of a log-uniform step in `[1e-3, 1e-1]`.
    DtBias,
    Normal(f64),
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    match cfg.kind {
        EncoderKind::Mlp => {
            let dims = [3, MLP_HIDDEN[0], MLP_HIDDEN[1], cfg.k_out];
            for l in 0..3 {
                push(format!("mlp.{l}.w"), vec![dims[l], dims[l + 1]], Init::Uniform(dims[l]));
                push(format!("mlp.{l}.b"), vec![dims[l + 1]], Init::Uniform(dims[l]));
            }
        }
        EncoderKind::Mamba => {
            let (d, s, k) = (cfg.d_model, cfg.d_state, cfg.k_out);
            push("in.w".into(), vec![3, d], Init::Uniform(3));
            push("in.b".into(), vec![d], Init::Uniform(3));
            push("pos".into(), vec![cfg.m_max, d], Init::Normal(0.02));
            for b in 0..cfg.n_blocks {
                let p = |n: &str| format!("blocks.{b}.{n}");
                push(p("norm"), vec![d], Init::Ones);
                push(p("in_a"), vec![d, d], Init::Uniform(d));
                push(p("in_b"), vec![d, d], Init::Uniform(d));
                push(p("dt.w"), vec![d, d], Init::Uniform(d));
                push(p("dt.b"), vec![d], Init::DtBias);
                push(p("b_proj"), vec![d, s], Init::Uniform(d));
                push(p("c_proj"), vec![d, s], Init::Uniform(d));
                push(p("a_log"), vec![d, s], Init::ALog);
                push(p("skip"), vec![d], Init::Ones);
                push(p("out"), vec![d, d], Init::Uniform(d));
            }
            push("fuse.0.w".into(), vec![d, k], Init::Uniform(d));
            push("fuse.0.b".into(), vec![k], Init::Uniform(d));
            push("fuse.1.w".into(), vec![k, k], Init::Uniform(k));
            push("fuse.1.b".into(), vec![k], Init::Uniform(k));
        }
    }
    out
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let last = *shape.last().unwrap_or(&1);
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        *x = match init {
            Init::Uniform(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                rng.random_range(-bound..bound)
            }
            Init::Ones => 1.0,
            Init::ALog => ((i % last + 1) as f64).ln(),
            Init::DtBias => {
                let dt = rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            }
            Init::Normal(sd) => rng.sample(Normal::new(0.0, sd).expect("positive sd")),
        };
    }
    t
}

/// Tape handles for one selective state-space block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub norm: Var,
    pub in_a: Var,
    pub in_b: Var,
    pub dt_w: Var,
    pub dt_b: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub a_log: Var,
    pub skip: Var,
    pub out: Var,
}

const BLOCK_PARAMS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl EncoderModel {
    /// Freshly initialized weights, deterministic in `seed`.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&config) {
            params.push(init_tensor(&shape, init, &mut rng));
            names.push(name);
        }
        Ok(Self { config, names, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf, in layout order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Handles of block `b` within the output of [`EncoderModel::bind`].
    pub fn block_vars(&self, vars: &[Var], b: usize) -> BlockVars {
        let v = &vars[3 + b * BLOCK_PARAMS..3 + (b + 1) * BLOCK_PARAMS];
        BlockVars {
            norm: v[0],
            in_a: v[1],
            in_b: v[2],
            dt_w: v[3],
            dt_b: v[4],
            b_proj: v[5],
            c_proj: v[6],
            a_log: v[7],
            skip: v[8],
            out: v[9],
        }
    }

    /// Descriptor of an `[N, 3]` point tensor recorded on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], points: Var) -> Result<Var> {
        let shape = tape.shape(points).to_vec();
        if shape.len() != 2 || shape[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "encoder input",
                lhs: shape,
                rhs: vec![0, 3],
            });
        }
        let n = shape[0];
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        if n > self.config.m_max {
            return Err(Error::TooManyPoints {
                points: n,
                max: self.config.m_max,
            });
        }
        match self.config.kind {
            EncoderKind::Mlp => {
                let mut h = points;
                for l in 0..3 {
                    h = linear(tape, h, vars[2 * l], Some(vars[2 * l + 1]))?;
                    if l < 2 {
                        h = tape.silu(h);
                    }
                }
                tape.max_axis(h, 0)
            }
            EncoderKind::Mamba => {
                let seq = match self.config.ordering {
                    Ordering::Input => points,
                    Ordering::Morton => {
                        let order = morton_order(&as_points(tape.value(points)));
                        tape.gather_rows(points, &order)?
                    }
                    Ordering::Radial => {
                        let order = radial_order(&as_points(tape.value(points)));
                        tape.gather_rows(points, &order)?
                    }
                };
                let mut h = linear(tape, seq, vars[0], Some(vars[1]))?;
                let pos = tape.slice(vars[2], 0, 0, n)?;
                h = tape.add(h, pos)?;
                for b in 0..self.config.n_blocks {
                    h = mamba_block(tape, h, &self.block_vars(vars, b))?;
                }
                let f = 3 + self.config.n_blocks * BLOCK_PARAMS;
                let z = linear(tape, h, vars[f], Some(vars[f + 1]))?;
                let z = tape.silu(z);
                let z = linear(tape, z, vars[f + 2], Some(vars[f + 3]))?;
                tape.max_axis(z, 0)
            }
        }
    }

    /// Descriptor of a cloud, evaluated without gradients.
    pub fn descriptor(&self, pc: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let pts = tape.constant(points_tensor(pc));
        let out = self.forward_tape(&mut tape, &vars, pts)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(self.config)?,
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_value(ckpt.config.clone())?;
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                ckpt.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&ckpt.tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: expected.into_iter().map(|(n, _, _)| n).collect(),
            params: ckpt.tensors.iter().map(|(_, t)| t.clone()).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

/// `[N, 3]` tensor of the cloud's coordinates.
pub fn points_tensor(pc: &PointCloud) -> Tensor {
    Tensor::new(vec![pc.len(), 3], pc.to_flat()).expect("N x 3 buffer")
}

fn as_points(t: &Tensor) -> Vec<Vector3<f64>> {
    t.data().chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

/// `x W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Residual selective-SSM block on an `[N, D]` sequence:
///
/// ```text
/// n     = rmsnorm(x) * scale
/// u     = silu(n A_in),  gate = silu(n B_in)
/// dt    = softplus(u W_dt + b_dt)             [N, D]
/// B, C  = u W_B, u W_C                        [N, S]
/// h_t   = exp(dt_t * A) h_{t-1} + dt_t u_t B_t  (per channel, A = -exp(a_log))
/// y_t   = h_t . C_t + skip * u_t
/// out   = x + (y * gate) W_out
/// ```
pub fn mamba_block(tape: &mut Tape, x: Var, p: &BlockVars) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_state = tape.shape(p.a_log)[1];
    let (n, d) = (shape[0], shape[1]);

    let sq = tape.square(x);
    let ms = tape.mean_axis(sq, 1)?;
    let ms = tape.offset(ms, NORM_EPS);
    let rms = tape.sqrt(ms);
    let normed = tape.div(x, rms)?;
    let normed = tape.mul(normed, p.norm)?;

    let u = linear(tape, normed, p.in_a, None)?;
    let u = tape.silu(u);
    let gate = linear(tape, normed, p.in_b, None)?;
    let gate = tape.silu(gate);

    let dt = linear(tape, u, p.dt_w, Some(p.dt_b))?;
    let dt = tape.softplus(dt);
    let b = linear(tape, u, p.b_proj, None)?;
    let c = linear(tape, u, p.c_proj, None)?;
    let a = tape.exp(p.a_log);
    let a = tape.neg(a);

    let dt3 = tape.reshape(dt, &[n, d, 1])?;
    let decay = tape.mul(dt3, a)?;
    let decay = tape.exp(decay);
    let du = tape.mul(dt, u)?;
    let du = tape.reshape(du, &[n, d, 1])?;
    let b3 = tape.reshape(b, &[n, 1, d_state])?;
    let drive = tape.mul(du, b3)?;
    let h = tape.scan(decay, drive)?;

    let c3 = tape.reshape(c, &[n, 1, d_state])?;
    let read = tape.mul(h, c3)?;
    let y = tape.sum_axis(read, 2)?;
    let y = tape.reshape(y, &[n, d])?;
    let skip = tape.mul(u, p.skip)?;
    let y = tape.add(y, skip)?;
    let y = tape.mul(y, gate)?;
    let y = linear(tape, y, p.out, None)?;
    tape.add(x, y)
}

fn quantize(c: f64) -> u32 {
    (((c + 1.0) * 512.0).floor()).clamp(0.0, 1023.0) as u32
}

/// Spreads the low 10 bits of `v` to every third bit.
fn spread_bits(v: u32) -> u32 {
    let mut x = v & 0x3ff;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    x = (x | (x << 2)) & 0x0924_9249;
    x
}

/// 30-bit Morton code of a point in the normalized cube `[-1, 1]^3`
/// (coordinates outside are clamped; 10 bits per axis, x in the lowest bit).
pub fn morton_code(p: &Vector3<f64>) -> u32 {
    spread_bits(quantize(p.x)) | (spread_bits(quantize(p.y)) << 1) | (spread_bits(quantize(p.z)) << 2)
}

fn morton_order(points: &[Vector3<f64>]) -> Vec<usize> {
    let mut keyed: Vec<(u32, usize)> = points.iter().enumerate().map(|(i, p)| (morton_code(p), i)).collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, i)| i).collect()
}

fn radial_order(points: &[Vector3<f64>]) -> Vec<usize> {
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut keyed: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| ((p - c).norm_squared(), i)).collect();
    keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Order in which the encoder consumes the points of `pc`. `Morton` and
/// `Radial` sort by their key with the input index as tie-break.
pub fn serialize_points(pc: &PointCloud, ordering: Ordering, m_max: usize) -> Result<Vec<usize>> {
    if pc.len() > m_max {
        return Err(Error::TooManyPoints {
            points: pc.len(),
            max: m_max,
        });
    }
    Ok(match ordering {
        Ordering::Input => (0..pc.len()).collect(),
        Ordering::Morton => morton_order(pc.points()),
        Ordering::Radial => radial_order(pc.points()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_bits_matches_loop() {
        for v in [0u32, 1, 2, 3, 0x155, 0x2aa, 0x3ff, 517] {
            let mut expect = 0u32;
            for bit in 0..10 {
                expect |= ((v >> bit) & 1) << (3 * bit);
            }
            assert_eq!(spread_bits(v), expect);
        }
    }

    #[test]
    fn layout_sizes() {
        let m = EncoderModel::init(EncoderConfig::default(), 0).unwrap();
        assert_eq!(m.param("pos").unwrap().shape(), &[1024, 64]);
        assert_eq!(m.param_names().len(), 3 + 2 * BLOCK_PARAMS + 4);
        let a = m.param("blocks.1.a_log").unwrap();
        assert_eq!(&a.data()[..8], &(1..=8).map(|s| (s as f64).ln()).collect::<Vec<_>>()[..]);
        let mlp = EncoderModel::init(EncoderConfig::mlp(), 0).unwrap();
        assert_eq!(mlp.param("mlp.2.w").unwrap().shape(), &[128, 256]);
    }

    #[test]
    fn dt_bias_in_range() {
        let m = EncoderModel::init(EncoderConfig::default(), 3).unwrap();
        for &b in m.param("blocks.0.dt.b").unwrap().data() {
            let dt = b.exp().ln_1p();
            assert!((1e-3..=1e-1).contains(&dt), "{dt}");
        }
    }
}
