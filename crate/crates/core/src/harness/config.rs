use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::grasping::GraspConfig;
use crate::oracle::{FlipNoise, SceneSpec};
use crate::planner::{CostParams, PlannerConfig, Reachability};
use crate::repose::ReposeConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ours,
    OursNoFlip,
    RandomView,
    FurthestView,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ours, Mode::OursNoFlip, Mode::RandomView, Mode::FurthestView];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Ours => "ours",
            Mode::OursNoFlip => "ours-no-flip",
            Mode::RandomView => "random-view",
            Mode::FurthestView => "furthest-view",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected one of ours, ours-no-flip, random-view, furthest-view")))
    }

    pub fn flips(&self) -> bool {
        *self != Mode::OursNoFlip
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, Mode::RandomView | Mode::FurthestView)
    }

    /// 3 when the flip is available, 2 otherwise.
    pub fn default_budget(&self) -> f64 {
        if self.flips() { 3.0 } else { 2.0 }
    }
}

/// Everything a run depends on. Serialized into each run directory as `config.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Master seed; every stochastic stage derives its stream from it.
    pub seed: u64,
    /// Cost budget; `None` uses the mode default.
    pub budget: Option<f64>,
    pub max_iterations: usize,
    /// Grasp score at or above which a flip becomes available.
    pub grasp_threshold: f64,
    pub image_size: usize,
    /// Resolution of the uncertainty renders used while planning.
    pub plan_image_size: usize,
    pub half_fov: f64,
    pub model_resolution: usize,
    pub gt_resolution: usize,
    /// Quadrature samples for oracle captures.
    pub capture_samples: usize,
    pub bootstrap_views: usize,
    pub bootstrap_elevation: f64,
    /// Views captured by the fixed workspace cameras after a flip, used for re-acquisition.
    pub post_flip_views: usize,
    /// Ablation switch: when off, post-flip views are fused as if the object had not moved.
    pub repose_enabled: bool,
    pub n_probe_poses: usize,
    pub validation_views: usize,
    pub surface_points: usize,
    pub fscore_threshold: f64,
    /// Density level of the extracted surface.
    pub mesh_iso: f64,
    /// Write the trained ensemble, mesh and preview images at the end of the run.
    pub write_artifacts: bool,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub cost: CostParams,
    pub grasp: GraspConfig,
    pub reach: Reachability,
    pub flip_noise: FlipNoise,
    pub repose: ReposeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Ours,
            seed: 0,
            budget: None,
            max_iterations: 20,
            grasp_threshold: 5000.0,
            image_size: 64,
            plan_image_size: 32,
            half_fov: 0.3,
            model_resolution: 64,
            gt_resolution: 96,
            capture_samples: 128,
            bootstrap_views: 3,
            bootstrap_elevation: 30f64.to_radians(),
            post_flip_views: 3,
            repose_enabled: true,
            n_probe_poses: 16,
            validation_views: 24,
            surface_points: 4000,
            fscore_threshold: 0.01,
            mesh_iso: 25.0,
            write_artifacts: true,
            scene: SceneSpec {
                supersample: 2,
                ..SceneSpec::composite_default()
            },
            train: TrainConfig {
                warm_start: true,
                ..TrainConfig::default()
            },
            planner: PlannerConfig::default(),
            cost: CostParams::default(),
            grasp: GraspConfig::default(),
            reach: Reachability::default(),
            flip_noise: FlipNoise::default(),
            repose: ReposeConfig {
                rejection_threshold: 0.25,
                ..ReposeConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// The same loop at reduced resolution and effort, for tests and quick looks.
    pub fn small_scale() -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            max_iterations: 8,
            image_size: 32,
            plan_image_size: 12,
            model_resolution: 24,
            gt_resolution: 48,
            capture_samples: 64,
            validation_views: 16,
            surface_points: 1000,
            write_artifacts: false,
            train: TrainConfig {
                steps: 120,
                batch_rays: 1024,
                n_samples: 48,
                ..d.train
            },
            planner: PlannerConfig {
                n_random: 96,
                k_subset: 4,
                refine_iters: 4,
                ..d.planner
            },
            grasp: GraspConfig {
                patch_size: 5,
                ..d.grasp
            },
            repose: ReposeConfig {
                optim: crate::repose::optim::OptimConfig {
                    max_evals: 150,
                    ..d.repose.optim
                },
                ..d.repose
            },
            ..d
        }
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn budget_total(&self) -> f64 {
        self.budget.unwrap_or(self.mode.default_budget())
    }

    /// Mode-dependent fields made explicit, so the copied config reproduces the run on its own.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        c.budget = Some(self.budget_total());
        c.planner.flip_enabled = self.mode.flips() && self.planner.flip_enabled;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.budget_total().is_finite() && self.budget_total() >= 0.0) {
            return bad(format!("budget must be finite and nonnegative, got {}", self.budget_total()));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        if !(self.grasp_threshold > 0.0) {
            return bad("grasp_threshold must be positive".into());
        }
        if self.image_size == 0 || self.plan_image_size == 0 {
            return bad("image sizes must be positive".into());
        }
        if !(self.half_fov > 0.0 && self.half_fov < 1.5) {
            return bad(format!("half_fov must lie in (0, 1.5) rad, got {}", self.half_fov));
        }
        if self.model_resolution < 2 || self.gt_resolution < 2 {
            return bad("grid resolutions must be at least 2".into());
        }
        if self.capture_samples < 2 {
            return bad("capture_samples must be at least 2".into());
        }
        if self.bootstrap_views == 0 {
            return bad("need at least one bootstrap view".into());
        }
        if self.mode.flips() && self.post_flip_views == 0 {
            return bad("flip modes need at least one post-flip view".into());
        }
        if self.n_probe_poses < 8 || self.validation_views == 0 || self.surface_points == 0 {
            return bad("need >= 8 probe poses and positive validation and surface sample counts".into());
        }
        if !(self.fscore_threshold > 0.0) || !(self.mesh_iso > 0.0) {
            return bad("fscore_threshold and mesh_iso must be positive".into());
        }
        if self.bootstrap_elevation.abs() >= std::f64::consts::FRAC_PI_2 {
            return bad("bootstrap_elevation must be inside (-pi/2, pi/2)".into());
        }
        self.scene.validate()?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.planner.validate()?;
        self.cost.validate()?;
        self.grasp.validate()?;
        self.reach.validate()?;
        self.flip_noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.repose.translation_scale > 0.0) {
            return bad("repose translation_scale must be positive".into());
        }
        Ok(())
    }

    pub fn capture_intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_half_fov(self.image_size, self.image_size, self.half_fov)
    }

    pub fn plan_intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_half_fov(self.plan_image_size, self.plan_image_size, self.half_fov)
    }
}
