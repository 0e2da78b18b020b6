//! Ensemble color-variance uncertainty, its model-agnostic normalization and
//! the masked termination-probability variant.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orbit_pose, CameraIntrinsics, Pose, Ray, Vec3};
use crate::imaging::write_gray_png;
use crate::radiance::{render_ray, RenderOutput, Rgb, SampleSpec};
use crate::trainer::{render_mean, Ensemble};

/// Population variance of member colors about their mean, summed over RGB.
///
/// Deviations are taken relative to the first member so identical inputs give exactly 0.
pub fn color_variance(colors: &[Rgb]) -> f64 {
    (0..3)
        .map(|k| {
            let c: Vec<f64> = colors.iter().map(|c| c[k]).collect();
            scalar_variance(&c)
        })
        .sum()
}

/// Population variance of scalar member values.
pub fn scalar_variance(values: &[f64]) -> f64 {
    let Some(first) = values.first() else {
        return 0.0;
    };
    let inv = 1.0 / values.len() as f64;
    let mu = values.iter().map(|v| v - first).sum::<f64>() * inv;
    values.iter().map(|v| (v - first - mu).powi(2)).sum::<f64>() * inv
}

pub fn ray_variance(ensemble: &Ensemble, ray: &Ray, spec: &SampleSpec) -> Result<f64> {
    let colors = ensemble
        .members
        .iter()
        .map(|m| render_ray(m, ray, spec).map(|o| o.color))
        .collect::<Result<Vec<_>>>()?;
    Ok(color_variance(&colors))
}

/// Per-pixel color variance of one camera pose, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub pose: Pose,
}

impl UncertaintyMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// Writes `path` as grayscale scaled by the map maximum and records that
    /// maximum in `<path>.max.txt`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let max = self.max();
        write_gray_png(path, &self.values, self.width, self.height, max)?;
        let mut side = path.as_os_str().to_owned();
        side.push(".max.txt");
        std::fs::write(side, format!("{max:.17e}\n"))?;
        Ok(())
    }
}

pub fn map_from_renders(renders: &[RenderOutput], pose: &Pose) -> UncertaintyMap {
    let (w, h) = (renders[0].width, renders[0].height);
    let mut colors = vec![[0.0; 3]; renders.len()];
    let values = (0..w * h)
        .map(|i| {
            for (c, r) in colors.iter_mut().zip(renders) {
                *c = r.color[i];
            }
            color_variance(&colors)
        })
        .collect();
    UncertaintyMap {
        width: w,
        height: h,
        values,
        pose: *pose,
    }
}

/// Total color variance `U` over every pixel of the view, with the map.
pub fn pose_uncertainty(
    ensemble: &Ensemble,
    pose: &Pose,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
) -> Result<(f64, UncertaintyMap)> {
    let renders = ensemble.render_members(pose, intr, spec)?;
    let map = map_from_renders(&renders, pose);
    Ok((map.total(), map))
}

/// Spherical shell of probe cameras looking at `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeShell {
    pub center: Vec3,
    pub radius_min: f64,
    pub radius_max: f64,
}

impl ProbeShell {
    /// Camera poses with directions uniform on the sphere and radii uniform in range.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Pose>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = if self.radius_max > self.radius_min {
                    rng.random_range(self.radius_min..=self.radius_max)
                } else {
                    self.radius_min
                };
                orbit_pose(&self.center, r, az, z.asin())
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationContext {
    pub mean_uncertainty: f64,
    pub n_probe_poses: usize,
    pub probe_seed: u64,
    pub shell: ProbeShell,
}

impl NormalizationContext {
    pub fn normalize(&self, u: f64) -> f64 {
        u / self.mean_uncertainty
    }
}

pub fn build_normalization(
    ensemble: &Ensemble,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
    n_probe_poses: usize,
    probe_seed: u64,
    shell: &ProbeShell,
) -> Result<NormalizationContext> {
    if n_probe_poses < 8 {
        return Err(Error::InvalidArgument(format!("need at least 8 probe poses, got {n_probe_poses}")));
    }
    let poses = shell.sample(n_probe_poses, probe_seed)?;
    let mut sum = 0.0;
    for p in &poses {
        sum += pose_uncertainty(ensemble, p, intr, spec)?.0;
    }
    let mean = sum / n_probe_poses as f64;
    if !(mean > 0.0) {
        return Err(Error::Degenerate("ensemble uncertainty is zero on every probe pose".into()));
    }
    Ok(NormalizationContext {
        mean_uncertainty: mean,
        n_probe_poses,
        probe_seed,
        shell: *shell,
    })
}

/// Sum over in-mask pixels of the residual termination probability `1 − Ô`.
pub fn masked_epistemic(
    ensemble: &Ensemble,
    pose: &Pose,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
    mask: &[bool],
) -> Result<f64> {
    if mask.len() != intr.pixel_count() {
        return Err(Error::InvalidArgument("mask size does not match intrinsics".into()));
    }
    let mean = render_mean(ensemble, pose, intr, spec)?;
    Ok(mean
        .opacity
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(o, _)| (1.0 - o).max(0.0))
        .sum())
}
