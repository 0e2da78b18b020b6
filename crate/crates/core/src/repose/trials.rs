//! Seeded pose-recovery trials on the simulated oracle.
//!
//! The model is the ground truth baked in the model frame, so recovery error
//! isolates the optimizers and the SSD objective from reconstruction error.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orbit_pose, CameraIntrinsics, Pose, Quat, Vec3};
use crate::oracle::{bake_ground_truth, capture, SceneSpec};
use crate::radiance::SampleSpec;
use crate::trainer::{Ensemble, TrainConfig, ViewSample};

use super::{reacquire_pose_unchecked, PoseDelta, ReposeConfig, SsdObjective, TrialRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub trials: usize,
    /// Largest injected rotation away from the nominal flip, radians.
    pub max_rotation: f64,
    /// Largest injected translation, meters.
    pub max_translation: f64,
    pub image_size: usize,
    pub half_fov: f64,
    pub n_samples: usize,
    pub resolution: usize,
    /// Camera (azimuth, elevation) in radians; a trial with `v` views uses the first `v`.
    pub cameras: Vec<(f64, f64)>,
    pub seed: u64,
    pub repose: ReposeConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            trials: 25,
            max_rotation: 10f64.to_radians(),
            max_translation: 0.02,
            image_size: 32,
            half_fov: 0.3,
            n_samples: 48,
            resolution: 48,
            cameras: vec![(0.3, 0.5), (2.4, 0.4), (4.5, 0.6)],
            seed: 0,
            repose: ReposeConfig::default(),
        }
    }
}

impl TrialConfig {
    pub fn load(path: &Path) -> Result<TrialConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: TrialConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.cameras.is_empty() || self.image_size == 0 || self.resolution < 2 {
            return Err(Error::InvalidArgument("trial counts, cameras and sizes must be positive".into()));
        }
        if !(self.max_rotation >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::InvalidArgument("perturbation bounds must be non-negative".into()));
        }
        Ok(())
    }
}

/// The nominal flip: half a turn about the world x axis through the object centroid.
pub fn nominal_flip(scene: &SceneSpec) -> Pose {
    Pose::rotation_about(&scene.centroid(), Quat::from_axis_angle(&Vec3::x(), std::f64::consts::PI))
}

/// Perturbation of trial `trial`; independent of the view count so view counts compare pairwise.
pub fn trial_perturbation(cfg: &TrialConfig, trial: usize) -> PoseDelta {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let dir: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = rng.random::<f64>() * cfg.max_rotation;
    let dist = rng.random::<f64>() * cfg.max_translation;
    PoseDelta {
        translation: Vec3::from(dir) * dist,
        rotvec: Vec3::from(axis) * angle,
    }
}

/// Runs every trial with `views` cameras; one record per optimizer per trial.
pub fn run_trials(scene: &SceneSpec, views: usize, cfg: &TrialConfig) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    scene.validate()?;
    if views == 0 || views > cfg.cameras.len() {
        return Err(Error::InvalidArgument(format!(
            "view count must lie in 1..={}, got {views}",
            cfg.cameras.len()
        )));
    }
    let res = [cfg.resolution; 3];
    let model = bake_ground_truth(scene, res)?;
    let ensemble = Ensemble::from_members(vec![model.clone(), model], vec![0, 1], TrainConfig::default())?;
    let intr = CameraIntrinsics::from_half_fov(cfg.image_size, cfg.image_size, cfg.half_fov)?;
    let spec = SampleSpec::deterministic(cfg.n_samples);
    let center = scene.workspace_center;
    let radius = 0.5 * (scene.shell_radius_min + scene.shell_radius_max);
    let nominal = nominal_flip(scene);
    let pivot = scene.centroid();

    let mut records = Vec::new();
    for trial in 0..cfg.trials {
        let truth = trial_perturbation(cfg, trial).to_pose(&pivot).compose(&nominal);
        let mut moved = scene.clone();
        moved.object_pose = truth.compose(&scene.object_pose);
        let gt = bake_ground_truth(&moved, res)?;
        let captured = cfg.cameras[..views]
            .iter()
            .map(|(az, el)| capture(&moved, &gt, &orbit_pose(&center, radius, *az, *el)?, &intr, &spec))
            .collect::<Result<Vec<ViewSample>>>()?;
        let obj = SsdObjective::new(&captured, &ensemble, spec, nominal, pivot, &cfg.repose)?;
        let out = reacquire_pose_unchecked(&obj, &cfg.repose);
        records.extend(TrialRecord::from_outcome(trial, views, &obj, &out, &truth, &pivot));
    }
    Ok(records)
}

/// Winner errors of each trial, in trial order.
pub fn winner_errors(records: &[TrialRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.winner)
        .map(|r| (r.translation_error, r.rotation_error))
        .collect()
}
