//! Ensemble training on captured views.
//!
//! Every member is trained independently with Adam on random ray batches
//! drawn from a per-member stream, so the ensemble is reproducible and
//! permutation-equivariant.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, Aabb, CameraIntrinsics, Pose, Ray};
use crate::radiance::{
    accumulate_ray_gradient, masked_target, render_image, RadianceGrid, RayScratch, RenderOutput, Rgb, SampleSpec,
};

/// A captured image with its exact object mask, camera pose and intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    pub image: Vec<Rgb>,
    pub mask: Vec<bool>,
    pub pose: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl ViewSample {
    pub fn new(image: Vec<Rgb>, mask: Vec<bool>, pose: Pose, intrinsics: CameraIntrinsics) -> Result<ViewSample> {
        let n = intrinsics.pixel_count();
        if image.len() != n || mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "view has {} pixels and {} mask entries, intrinsics expect {n}",
                image.len(),
                mask.len()
            )));
        }
        Ok(ViewSample {
            image,
            mask,
            pose,
            intrinsics,
        })
    }

    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Same image re-expressed with a different camera pose.
    pub fn with_pose(&self, pose: Pose) -> ViewSample {
        ViewSample {
            pose,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ensemble size M.
    pub members: usize,
    pub steps: usize,
    pub batch_rays: usize,
    /// Adam step size for the color fields.
    pub lr: f64,
    /// Adam step size for the density field; densities live on a much larger scale than colors.
    pub lr_density: f64,
    pub n_samples: usize,
    pub jitter: bool,
    /// Half-width of the uniform initialization of every raw field.
    pub init_scale: f64,
    /// Offset added to the initial raw densities.
    pub density_init_bias: f64,
    /// Half-width used for raw colors at initialization.
    pub color_init_scale: f64,
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            members: 5,
            steps: 400,
            batch_rays: 4096,
            lr: 0.05,
            lr_density: 4.0,
            n_samples: 64,
            jitter: true,
            init_scale: 0.1,
            density_init_bias: 0.0,
            color_init_scale: 0.1,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::InvalidArgument(format!("ensemble needs at least 2 members, got {}", self.members)));
        }
        if self.steps == 0 || self.batch_rays == 0 {
            return Err(Error::InvalidArgument("steps and batch_rays must be positive".into()));
        }
        let positive = [self.lr, self.lr_density, self.init_scale, self.color_init_scale];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("learning rates and init scales must be positive".into()));
        }
        if !self.density_init_bias.is_finite() {
            return Err(Error::InvalidArgument("density_init_bias must be finite".into()));
        }
        SampleSpec::new(self.n_samples, self.jitter, 0)?;
        Ok(())
    }

    /// Sampling used when rendering for evaluation and planning (no jitter).
    pub fn render_spec(&self) -> SampleSpec {
        SampleSpec::deterministic(self.n_samples)
    }
}

/// M independently initialized grids sharing resolution and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<RadianceGrid>,
    pub member_seeds: Vec<u64>,
    pub config: TrainConfig,
}

impl Ensemble {
    pub fn from_members(members: Vec<RadianceGrid>, member_seeds: Vec<u64>, config: TrainConfig) -> Result<Ensemble> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!("ensemble needs at least 2 members, got {}", members.len())));
        }
        if member_seeds.len() != members.len() {
            return Err(Error::InvalidArgument("one seed per member required".into()));
        }
        let (r, b) = (members[0].resolution(), *members[0].bounds());
        if members.iter().any(|m| m.resolution() != r || *m.bounds() != b) {
            return Err(Error::InvalidArgument("members must share resolution and bounds".into()));
        }
        Ok(Ensemble {
            members,
            member_seeds,
            config,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn bounds(&self) -> &Aabb {
        self.members[0].bounds()
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.members[0].resolution()
    }

    /// Renders every member; outputs are in member order.
    pub fn render_members(&self, pose: &Pose, intr: &CameraIntrinsics, spec: &SampleSpec) -> Result<Vec<RenderOutput>> {
        self.members.iter().map(|m| render_image(m, pose, intr, spec)).collect()
    }

    /// Member-mean of activated density at voxel `i`.
    pub fn mean_density(&self, i: usize) -> f64 {
        self.members.iter().map(|m| m.density(i)).sum::<f64>() / self.size() as f64
    }
}

fn member_grid(config: &TrainConfig, resolution: [usize; 3], bounds: Aabb, seed: u64) -> Result<RadianceGrid> {
    let mut g = RadianceGrid::new(resolution, bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, cs) = (config.init_scale, config.color_init_scale);
    for v in g.raw_mut() {
        v[0] = config.density_init_bias + rng.random_range(-s..=s);
        for c in &mut v[1..] {
            *c = rng.random_range(-cs..=cs);
        }
    }
    Ok(g)
}

/// Member `k` is seeded with `base_seed + k`.
pub fn init_ensemble(config: &TrainConfig, resolution: [usize; 3], bounds: Aabb, base_seed: u64) -> Result<Ensemble> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.members as u64).map(|k| base_seed.wrapping_add(k)).collect();
    let members = seeds
        .iter()
        .map(|s| member_grid(config, resolution, bounds, *s))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::from_members(members, seeds, config.clone())
}

/// Per-member loss curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub losses: Vec<Vec<f64>>,
}

impl TrainReport {
    pub fn final_losses(&self) -> Vec<f64> {
        self.losses.iter().map(|l| l.last().copied().unwrap_or(0.0)).collect()
    }

    pub fn mean_final_loss(&self) -> f64 {
        let f = self.final_losses();
        if f.is_empty() {
            0.0
        } else {
            f.iter().sum::<f64>() / f.len() as f64
        }
    }

    /// CSV with columns `step,member,loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "member", "loss"])?;
        for (m, curve) in self.losses.iter().enumerate() {
            for (s, l) in curve.iter().enumerate() {
                out.write_record([s.to_string(), m.to_string(), format!("{l:.12e}")])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Supervised rays of a dataset: non-empty rays with their masked targets.
#[derive(Debug, Clone, Default)]
pub struct RayPool {
    pub rays: Vec<Ray>,
    pub targets: Vec<Rgb>,
}

impl RayPool {
    pub fn build(dataset: &[ViewSample], bounds: &Aabb) -> RayPool {
        let mut pool = RayPool::default();
        for v in dataset {
            let rays = generate_rays(&v.pose, &v.intrinsics, bounds);
            for (i, r) in rays.into_iter().enumerate() {
                if r.is_empty() {
                    continue;
                }
                pool.rays.push(r);
                pool.targets.push(masked_target(&v.image[i], if v.mask[i] { 1.0 } else { 0.0 }));
            }
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

struct Adam {
    m: Vec<[f64; 4]>,
    v: Vec<[f64; 4]>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Adam {
        Adam {
            m: vec![[0.0; 4]; n],
            v: vec![[0.0; 4]; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [[f64; 4]], grad: &[[f64; 4]], lr: [f64; 4]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for k in 0..4 {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                p[k] -= lr[k] * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn train_member(grid: &mut RadianceGrid, seed: u64, pool: &RayPool, config: &TrainConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = Adam::new(grid.voxel_count());
    let mut grad = vec![[0.0; 4]; grid.voxel_count()];
    let mut scratch = RayScratch::default();
    let lr = [config.lr_density, config.lr, config.lr, config.lr];
    let batch = config.batch_rays.min(pool.len());
    let scale = 1.0 / batch as f64;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        for g in grad.iter_mut() {
            *g = [0.0; 4];
        }
        let spec = SampleSpec {
            n_samples: config.n_samples,
            jitter: config.jitter,
            seed: mix(seed, step as u64),
        };
        let mut total = 0.0;
        for _ in 0..batch {
            let j = rng.random_range(0..pool.len());
            total += accumulate_ray_gradient(grid, &pool.rays[j], j as u64, &spec, &pool.targets[j], scale, &mut grad, &mut scratch);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("member loss became non-finite at step {step}")));
        }
        curve.push(loss);
        adam.step(grid.raw_mut(), &grad, lr);
    }
    Ok(curve)
}

/// Trains every member from its current state on `dataset`.
pub fn fit(ensemble: &mut Ensemble, dataset: &[ViewSample]) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot fit on an empty dataset".into()));
    }
    ensemble.config.validate()?;
    let pool = RayPool::build(dataset, ensemble.bounds());
    if pool.is_empty() {
        return Err(Error::InvalidArgument("no dataset ray intersects the grid bounds".into()));
    }
    let config = ensemble.config.clone();
    let seeds = ensemble.member_seeds.clone();
    let losses = ensemble
        .members
        .par_iter_mut()
        .zip(seeds.par_iter())
        .map(|(grid, seed)| train_member(grid, *seed, &pool, &config))
        .collect::<Result<Vec<_>>>()?;
    if ensemble.members.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numerical("member parameters became non-finite".into()));
    }
    Ok(TrainReport { losses })
}

/// Pixelwise member-mean of color, depth and opacity.
pub fn render_mean(ensemble: &Ensemble, pose: &Pose, intr: &CameraIntrinsics, spec: &SampleSpec) -> Result<RenderOutput> {
    let renders = ensemble.render_members(pose, intr, spec)?;
    Ok(mean_of_renders(&renders, intr.width, intr.height))
}

pub fn mean_of_renders(renders: &[RenderOutput], width: usize, height: usize) -> RenderOutput {
    let mut out = RenderOutput::zeros(width, height);
    let inv = 1.0 / renders.len().max(1) as f64;
    for r in renders {
        for i in 0..out.depth.len() {
            for k in 0..3 {
                out.color[i][k] += r.color[i][k] * inv;
            }
            out.depth[i] += r.depth[i] * inv;
            out.opacity[i] += r.opacity[i] * inv;
        }
    }
    out
}
