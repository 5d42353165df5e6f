//! WebAssembly bindings behind `www/index.html`.
//!
//! [`DemoState`] holds the plain-Rust logic so it can be tested natively;
//! [`Demo`] wraps it for JavaScript.

use lkreg::encoder::{train, Augment, EncoderConfig, EncoderModel, Ordering, TrainSample, TrainSettings};
use lkreg::geom3d::{apply, perturbation_at_angle, rotation_error_deg, translation_error};
use lkreg::register::{iclk_register, icp_register, LkSettings};
use lkreg::synth::meshes::Scene;
use lkreg::synth::{make_pair, raycast_visible, CameraModel, DepthMap, PairConfig, TriangleMesh};
use lkreg::{derive_seed, PointCloud, RigidTransform};
use wasm_bindgen::prelude::*;

pub const VIEWS: usize = 12;

/// Outcome of one registration run.
#[wasm_bindgen(getter_with_clone)]
#[derive(Clone, Debug)]
pub struct Registration {
    /// Perturbed source, flat `x, y, z` triples.
    pub source_before: Vec<f64>,
    /// Source moved by the estimate.
    pub source_after: Vec<f64>,
    pub residual_history: Vec<f64>,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub struct DemoState {
    scene: Scene,
    mesh: TriangleMesh,
    cams: Vec<CameraModel>,
    view: usize,
    n_points: usize,
    depth: DepthMap,
    target: PointCloud,
    /// Source brought onto the target with the ground truth.
    aligned: PointCloud,
    model: EncoderModel,
    trained_steps: usize,
}

impl DemoState {
    pub fn new(scene: &str, n_points: usize) -> Result<Self, String> {
        let scene: Scene = scene.parse().map_err(|e: lkreg::Error| e.to_string())?;
        let mesh = scene.mesh();
        let cams = scene.trajectory(VIEWS);
        let config = EncoderConfig {
            d_model: 16,
            k_out: 64,
            m_max: n_points,
            ordering: Ordering::Radial,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::init(config, 0).map_err(|e| e.to_string())?;
        let placeholder = PointCloud::new(vec![Default::default()]).expect("one point");
        let mut state = Self {
            scene,
            mesh,
            cams,
            view: 0,
            n_points,
            depth: DepthMap {
                width: 0,
                height: 0,
                data: Vec::new(),
            },
            target: placeholder.clone(),
            aligned: placeholder,
            model,
            trained_steps: 0,
        };
        state.set_view(0)?;
        Ok(state)
    }

    pub fn scene(&self) -> &'static str {
        self.scene.name()
    }

    /// Ray-casts view `view` and rebuilds the registration pair from it.
    pub fn set_view(&mut self, view: usize) -> Result<(), String> {
        let cam = self.cams.get(view).ok_or_else(|| format!("view {view} out of range"))?;
        let cast = raycast_visible(&self.mesh, cam);
        let cfg = PairConfig {
            n_points: self.n_points,
            ..PairConfig::default()
        };
        let pair = make_pair(&self.mesh, cam, &cfg, &RigidTransform::identity(), view as u64).map_err(|e| e.to_string())?;
        self.depth = cast.depth;
        self.aligned = apply(&pair.g_gt, &pair.source);
        self.target = pair.target;
        self.view = view;
        Ok(())
    }

    pub fn view(&self) -> usize {
        self.view
    }

    pub fn depth(&self) -> &DepthMap {
        &self.depth
    }

    pub fn target(&self) -> &PointCloud {
        &self.target
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    /// Perturbs the source by `angle_deg` (and up to 0.05 translation) and
    /// registers it back with `icp` or `iclk`.
    pub fn register(&self, method: &str, angle_deg: f64, seed: u32) -> Result<Registration, String> {
        if !(0.0..=179.0).contains(&angle_deg) {
            return Err(format!("angle {angle_deg} outside [0, 179]"));
        }
        let p = perturbation_at_angle(angle_deg, 0.05, derive_seed(seed as u64, &[self.view as u64]));
        let source = apply(&p, &self.aligned);
        let result = match method {
            "icp" => icp_register(&source, &self.target, 50, 1e-9),
            "iclk" => iclk_register(
                &self.model,
                &source,
                &self.target,
                &LkSettings {
                    max_iters: 30,
                    ..LkSettings::default()
                },
            ),
            other => return Err(format!("unknown method `{other}`")),
        }
        .map_err(|e| e.to_string())?;
        let gt = p.inverse();
        Ok(Registration {
            source_before: source.to_flat(),
            source_after: apply(&result.g_est, &source).to_flat(),
            residual_history: result.residual_history,
            rotation_error_deg: rotation_error_deg(&result.g_est, &gt),
            translation_error: translation_error(&result.g_est, &gt),
            iterations: result.iterations,
            converged: result.converged,
        })
    }

    /// Runs `steps` optimizer steps of the IC-LK encoder on the current view,
    /// re-perturbing the source by up to 30 degrees each step. Returns the
    /// per-step losses.
    pub fn train_encoder(&mut self, steps: usize) -> Result<Vec<f64>, String> {
        let sample = TrainSample {
            source: self.aligned.clone(),
            target: self.target.clone(),
            g_gt: RigidTransform::identity(),
        };
        let settings = TrainSettings {
            epochs: steps,
            batch_size: 1,
            lr: 1e-3,
            seed: derive_seed(7, &[self.trained_steps as u64]),
            lk: LkSettings {
                max_iters: 5,
                ..LkSettings::default()
            },
            augment: Some(Augment {
                max_angle_deg: 30.0,
                max_trans: 0.05,
            }),
            clip_grad_norm: Some(1.0),
            ..TrainSettings::default()
        };
        let report = train(&mut self.model, &[sample], &settings, |_, _, _| {}).map_err(|e| e.to_string())?;
        self.trained_steps += report.step_losses.len();
        Ok(report.step_losses)
    }
}

#[wasm_bindgen]
pub struct Demo {
    state: DemoState,
}

#[wasm_bindgen]
impl Demo {
    /// `scene` is `sphere`, `torus` or `bent-tube`.
    #[wasm_bindgen(constructor)]
    pub fn new(scene: &str, n_points: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            state: DemoState::new(scene, n_points).map_err(|e| JsError::new(&e))?,
        })
    }

    pub fn scene(&self) -> String {
        self.state.scene().to_string()
    }

    pub fn view_count(&self) -> usize {
        VIEWS
    }

    pub fn set_view(&mut self, view: usize) -> Result<(), JsError> {
        self.state.set_view(view).map_err(|e| JsError::new(&e))
    }

    pub fn depth_width(&self) -> usize {
        self.state.depth().width
    }

    pub fn depth_height(&self) -> usize {
        self.state.depth().height
    }

    /// Row-major depth image; 0 where the ray missed.
    pub fn depth(&self) -> Vec<f64> {
        self.state.depth().data.clone()
    }

    pub fn target_points(&self) -> Vec<f64> {
        self.state.target().to_flat()
    }

    pub fn register(&self, method: &str, angle_deg: f64, seed: u32) -> Result<Registration, JsError> {
        self.state.register(method, angle_deg, seed).map_err(|e| JsError::new(&e))
    }

    pub fn train_encoder(&mut self, steps: usize) -> Result<Vec<f64>, JsError> {
        self.state.train_encoder(steps).map_err(|e| JsError::new(&e))
    }

    pub fn trained_steps(&self) -> usize {
        self.state.trained_steps()
    }
}
