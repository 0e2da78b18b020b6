//! Post-interaction pose re-acquisition by multi-view image SSD.
//!
//! The unknown is the world motion `D` the object underwent since the model
//! frame was fixed. Cameras are moved into the model frame as `D⁻¹ ∘ C`.
//! Optimizers work in a local chart around a prior motion:
//! `D(x) = Perturb(x) ∘ prior`, where `Perturb` rotates by `x[3..6]` about a
//! pivot and then translates by `x[0..3] · translation_scale`.

pub mod optim;
pub mod trials;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray, Aabb, Pose, Quat, Vec3};
use crate::radiance::{render_ray, RadianceGrid, SampleSpec};
use crate::trainer::{Ensemble, ViewSample};
use optim::{cobyla_like, nelder_mead, powell, OptimConfig, OptimResult};

/// Rigid perturbation: translation in meters and rotation vector in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub translation: Vec3,
    pub rotvec: Vec3,
}

impl PoseDelta {
    pub const ZERO: PoseDelta = PoseDelta {
        translation: Vec3::new(0.0, 0.0, 0.0),
        rotvec: Vec3::new(0.0, 0.0, 0.0),
    };

    /// Chart coordinates to a delta; the rotation vector is canonicalized to norm ≤ π.
    pub fn from_x(x: &[f64], translation_scale: f64) -> PoseDelta {
        let rv = Vec3::new(x[3], x[4], x[5]);
        PoseDelta {
            translation: Vec3::new(x[0], x[1], x[2]) * translation_scale,
            rotvec: Quat::from_rotvec(&rv).to_rotvec(),
        }
    }

    pub fn to_x(&self, translation_scale: f64) -> [f64; 6] {
        let t = self.translation / translation_scale;
        [t.x, t.y, t.z, self.rotvec.x, self.rotvec.y, self.rotvec.z]
    }

    /// Rotation about `pivot` followed by the translation.
    pub fn to_pose(&self, pivot: &Vec3) -> Pose {
        Pose::from_translation(self.translation).compose(&Pose::rotation_about(pivot, Quat::from_rotvec(&self.rotvec)))
    }

    /// Delta that maps `from` onto `to` (`to = delta ∘ from`) about `pivot`.
    pub fn between(from: &Pose, to: &Pose, pivot: &Vec3) -> PoseDelta {
        let m = to.compose(&from.inverse());
        let rot = Pose::rotation_about(pivot, m.q);
        PoseDelta {
            translation: m.r - rot.r,
            rotvec: m.q.to_rotvec(),
        }
    }
}

/// Translation error at `reference` and rotation angle between two object motions.
pub fn motion_errors(estimate: &Pose, truth: &Pose, reference: &Vec3) -> (f64, f64) {
    let t = (estimate.transform_point(reference) - truth.transform_point(reference)).norm();
    (t, estimate.rotation_angle_to(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReposeConfig {
    pub optim: OptimConfig,
    /// Meters per chart unit of translation.
    pub translation_scale: f64,
    /// Per-pixel SSD above which a re-acquisition is rejected.
    pub rejection_threshold: f64,
    /// Chebyshev dilation of each captured mask, pixels.
    pub mask_dilation: usize,
    /// Compare every pixel instead of the dilated masks.
    pub full_frame: bool,
}

impl Default for ReposeConfig {
    fn default() -> Self {
        ReposeConfig {
            optim: OptimConfig {
                max_evals: 300,
                max_iters: 1_000_000,
                x_tol: 1e-3,
                f_tol: 1e-10,
                initial_step: 0.1,
            },
            translation_scale: 0.05,
            rejection_threshold: 0.05,
            mask_dilation: 2,
            full_frame: false,
        }
    }
}

pub fn dilate_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; mask.len()];
    for row in 0..height {
        for col in 0..width {
            if !mask[row * width + col] {
                continue;
            }
            for r in row.saturating_sub(radius)..=(row + radius).min(height - 1) {
                for c in col.saturating_sub(radius)..=(col + radius).min(width - 1) {
                    out[r * width + c] = true;
                }
            }
        }
    }
    out
}

struct Region {
    view: ViewSample,
    pixels: Vec<usize>,
}

/// Image SSD between captured views and ensemble-mean renders as a function of the object motion.
pub struct SsdObjective<'a> {
    regions: Vec<Region>,
    /// Distinct members with their weights in the mean.
    members: Vec<(&'a RadianceGrid, f64)>,
    bounds: Aabb,
    spec: SampleSpec,
    prior: Pose,
    pivot: Vec3,
    translation_scale: f64,
}

impl<'a> SsdObjective<'a> {
    /// `captured` carry world camera poses; `prior` is the nominal object motion and
    /// `pivot` the world point the chart rotates about.
    pub fn new(
        captured: &[ViewSample],
        ensemble: &'a Ensemble,
        spec: SampleSpec,
        prior: Pose,
        pivot: Vec3,
        cfg: &ReposeConfig,
    ) -> Result<SsdObjective<'a>> {
        if captured.is_empty() {
            return Err(Error::InvalidArgument("pose re-acquisition needs at least one captured view".into()));
        }
        if !(cfg.translation_scale > 0.0) {
            return Err(Error::InvalidArgument("translation scale must be positive".into()));
        }
        let regions = captured
            .iter()
            .map(|v| {
                let (w, h) = (v.intrinsics.width, v.intrinsics.height);
                let sel = if cfg.full_frame {
                    vec![true; w * h]
                } else {
                    dilate_mask(&v.mask, w, h, cfg.mask_dilation)
                };
                Region {
                    view: v.clone(),
                    pixels: (0..w * h).filter(|i| sel[*i]).collect(),
                }
            })
            .collect();
        let mut members: Vec<(&RadianceGrid, f64)> = Vec::new();
        let w = 1.0 / ensemble.size() as f64;
        for m in &ensemble.members {
            match members.iter_mut().find(|(g, _)| *g == m) {
                Some(e) => e.1 += w,
                None => members.push((m, w)),
            }
        }
        Ok(SsdObjective {
            regions,
            members,
            bounds: *ensemble.bounds(),
            spec,
            prior,
            pivot,
            translation_scale: cfg.translation_scale,
        })
    }

    pub fn prior(&self) -> &Pose {
        &self.prior
    }

    pub fn pixel_count(&self) -> usize {
        self.regions.iter().map(|r| r.pixels.len()).sum()
    }

    /// Object motion at chart coordinates `x`.
    pub fn motion(&self, x: &[f64]) -> Pose {
        PoseDelta::from_x(x, self.translation_scale).to_pose(&self.pivot).compose(&self.prior)
    }

    pub fn eval_x(&self, x: &[f64]) -> f64 {
        self.eval_motion(&self.motion(x))
    }

    pub fn eval_motion(&self, motion: &Pose) -> f64 {
        let inv = motion.inverse();
        let mut total = 0.0;
        for region in &self.regions {
            let v = &region.view;
            let cam = inv.compose(&v.pose);
            let w = v.intrinsics.width;
            for &i in &region.pixels {
                let ray = pixel_ray(&cam, &v.intrinsics, &self.bounds, i % w, i / w);
                let mut c = [0.0; 3];
                for (g, wt) in &self.members {
                    match render_ray(g, &ray, &self.spec) {
                        Ok(o) => {
                            for k in 0..3 {
                                c[k] += wt * o.color[k];
                            }
                        }
                        Err(_) => return f64::INFINITY,
                    }
                }
                total += (0..3).map(|k| (c[k] - v.image[i][k]).powi(2)).sum::<f64>();
            }
        }
        total
    }
}

/// SSD at a perturbation of the prior.
pub fn ssd(obj: &SsdObjective, delta: &PoseDelta) -> f64 {
    obj.eval_x(&delta.to_x(obj.translation_scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NelderMead,
    Powell,
    Cobyla,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::NelderMead, Method::Powell, Method::Cobyla];

    pub fn name(&self) -> &'static str {
        match self {
            Method::NelderMead => "nelder-mead",
            Method::Powell => "powell",
            Method::Cobyla => "cobyla",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub result: OptimResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReposeOutcome {
    /// Estimated object motion.
    pub motion: Pose,
    pub delta: PoseDelta,
    pub ssd: f64,
    pub ssd_per_pixel: f64,
    pub winner: Method,
    pub runs: Vec<MethodRun>,
}

impl ReposeOutcome {
    pub fn accepted(&self, cfg: &ReposeConfig) -> bool {
        self.ssd_per_pixel <= cfg.rejection_threshold
    }
}

/// Runs all three minimizers from the prior and keeps the lowest SSD.
pub fn reacquire_pose_unchecked(obj: &SsdObjective, cfg: &ReposeConfig) -> ReposeOutcome {
    let x0 = [0.0; 6];
    let f = |x: &[f64]| obj.eval_x(x);
    let (nm, (pw, cb)) = rayon::join(
        || nelder_mead(f, &x0, &cfg.optim),
        || rayon::join(|| powell(f, &x0, &cfg.optim), || cobyla_like(f, &x0, &cfg.optim)),
    );
    let runs = vec![
        MethodRun {
            method: Method::NelderMead,
            result: nm,
        },
        MethodRun {
            method: Method::Powell,
            result: pw,
        },
        MethodRun {
            method: Method::Cobyla,
            result: cb,
        },
    ];
    let best = runs
        .iter()
        .min_by(|a, b| a.result.f.total_cmp(&b.result.f))
        .expect("three runs");
    let delta = PoseDelta::from_x(&best.result.x, obj.translation_scale);
    let pixels = obj.pixel_count().max(1) as f64;
    ReposeOutcome {
        motion: obj.motion(&best.result.x),
        delta,
        ssd: best.result.f,
        ssd_per_pixel: best.result.f / pixels,
        winner: best.method,
        runs: runs.clone(),
    }
}

/// As [`reacquire_pose_unchecked`], rejecting results above the per-pixel SSD threshold.
pub fn reacquire_pose(obj: &SsdObjective, cfg: &ReposeConfig) -> Result<ReposeOutcome> {
    let out = reacquire_pose_unchecked(obj, cfg);
    if out.accepted(cfg) {
        Ok(out)
    } else {
        Err(Error::ReacquisitionRejected {
            per_pixel: out.ssd_per_pixel,
            threshold: cfg.rejection_threshold,
        })
    }
}

/// One method's result in a pose-recovery trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub views: usize,
    pub method: String,
    pub evals: usize,
    pub ssd: f64,
    pub translation_error: f64,
    pub rotation_error: f64,
    pub winner: bool,
}

impl TrialRecord {
    /// One record per method of an outcome, errors measured against `truth`.
    pub fn from_outcome(
        trial: usize,
        views: usize,
        obj: &SsdObjective,
        out: &ReposeOutcome,
        truth: &Pose,
        reference: &Vec3,
    ) -> Vec<TrialRecord> {
        out.runs
            .iter()
            .map(|r| {
                let (te, re) = motion_errors(&obj.motion(&r.result.x), truth, reference);
                TrialRecord {
                    trial,
                    views,
                    method: r.method.name().to_string(),
                    evals: r.result.evals,
                    ssd: r.result.f,
                    translation_error: te,
                    rotation_error: re,
                    winner: r.method == out.winner,
                }
            })
            .collect()
    }
}

pub fn write_trials_csv<W: Write>(records: &[TrialRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
