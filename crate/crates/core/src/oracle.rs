//! Synthetic ground truth: procedural objects baked into a radiance grid,
//! exact captures and masks, noisy flips and analytic surface samples.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraIntrinsics, Pose, Quat, Vec3};
use crate::radiance::{logit, render_image, softplus_inv, RadianceGrid, Rgb, SampleSpec};
use crate::trainer::ViewSample;
use crate::uncertainty::ProbeShell;

/// Activated density inside ground-truth solids, per meter.
pub const GT_DENSITY: f64 = 400.0;
/// Raw density outside solids; its softplus is about 4e-18.
pub const GT_EMPTY_RAW: f64 = -40.0;
/// Captured pixels with ground-truth opacity above this are in the mask.
pub const MASK_THRESHOLD: f64 = 0.5;

const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectKind {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Capsule { radius: f64, half_length: f64 },
    /// Box with a rectangular pocket open at its −z face.
    CompositeWithCavity { half_extents: [f64; 3], wall: f64, cavity_depth: f64 },
}

/// Axis-aligned rectangle `center + s·u + t·v` with `s, t ∈ [−1, 1]`.
#[derive(Debug, Clone, Copy)]
struct Rect {
    center: Vec3,
    u: Vec3,
    v: Vec3,
}

impl Rect {
    fn area(&self) -> f64 {
        4.0 * self.u.norm() * self.v.norm()
    }
}

fn rect(c: [f64; 3], u: [f64; 3], v: [f64; 3]) -> Rect {
    Rect {
        center: Vec3::from(c),
        u: Vec3::from(u),
        v: Vec3::from(v),
    }
}

fn box_faces(h: [f64; 3]) -> Vec<Rect> {
    let [hx, hy, hz] = h;
    vec![
        rect([hx, 0.0, 0.0], [0.0, hy, 0.0], [0.0, 0.0, hz]),
        rect([-hx, 0.0, 0.0], [0.0, hy, 0.0], [0.0, 0.0, hz]),
        rect([0.0, hy, 0.0], [hx, 0.0, 0.0], [0.0, 0.0, hz]),
        rect([0.0, -hy, 0.0], [hx, 0.0, 0.0], [0.0, 0.0, hz]),
        rect([0.0, 0.0, hz], [hx, 0.0, 0.0], [0.0, hy, 0.0]),
        rect([0.0, 0.0, -hz], [hx, 0.0, 0.0], [0.0, hy, 0.0]),
    ]
}

impl ObjectKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ObjectKind::Sphere { radius } => radius > 0.0,
            ObjectKind::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            ObjectKind::Capsule { radius, half_length } => radius > 0.0 && half_length >= 0.0,
            ObjectKind::CompositeWithCavity {
                half_extents,
                wall,
                cavity_depth,
            } => {
                half_extents.iter().all(|h| *h > 0.0)
                    && wall > 0.0
                    && wall < half_extents[0].min(half_extents[1])
                    && cavity_depth > 0.0
                    && cavity_depth < 2.0 * half_extents[2]
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid object dimensions: {self:?}")))
        }
    }

    /// Inside test in the object frame.
    pub fn inside(&self, p: &Vec3) -> bool {
        match *self {
            ObjectKind::Sphere { radius } => p.norm_squared() < radius * radius,
            ObjectKind::Box { half_extents: h } => p.x.abs() < h[0] && p.y.abs() < h[1] && p.z.abs() < h[2],
            ObjectKind::Capsule { radius, half_length } => {
                let z = p.z.clamp(-half_length, half_length);
                (p - Vec3::new(0.0, 0.0, z)).norm_squared() < radius * radius
            }
            ObjectKind::CompositeWithCavity {
                half_extents: h,
                wall,
                cavity_depth,
            } => {
                let outer = p.x.abs() < h[0] && p.y.abs() < h[1] && p.z.abs() < h[2];
                outer && !self::in_cavity(p, h, wall, cavity_depth)
            }
        }
    }

    pub fn volume(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            ObjectKind::Box { half_extents: h } => 8.0 * h[0] * h[1] * h[2],
            ObjectKind::Capsule { radius, half_length } => {
                PI * radius * radius * 2.0 * half_length + 4.0 / 3.0 * PI * radius.powi(3)
            }
            ObjectKind::CompositeWithCavity {
                half_extents: h,
                wall,
                cavity_depth,
            } => 8.0 * h[0] * h[1] * h[2] - 4.0 * (h[0] - wall) * (h[1] - wall) * cavity_depth,
        }
    }

    /// Radius of the smallest origin-centered ball containing the object.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => radius,
            ObjectKind::Box { half_extents: h } | ObjectKind::CompositeWithCavity { half_extents: h, .. } => {
                Vec3::from(h).norm()
            }
            ObjectKind::Capsule { radius, half_length } => radius + half_length,
        }
    }

    pub fn region_count(&self) -> usize {
        match self {
            ObjectKind::Sphere { .. } | ObjectKind::Capsule { .. } => 8,
            ObjectKind::Box { .. } => 6,
            ObjectKind::CompositeWithCavity { .. } => 7,
        }
    }

    /// Albedo region of a point in the object frame.
    ///
    /// Boxes use faces `+x, −x, +y, −y, +z, −z`; the composite adds the cavity as
    /// region 6; round objects use octants `(x<0) + 2(y<0) + 4(z<0)`.
    pub fn region(&self, p: &Vec3) -> usize {
        match *self {
            ObjectKind::Sphere { .. } | ObjectKind::Capsule { .. } => {
                usize::from(p.x < 0.0) + 2 * usize::from(p.y < 0.0) + 4 * usize::from(p.z < 0.0)
            }
            ObjectKind::Box { half_extents: h } => box_face(p, h),
            ObjectKind::CompositeWithCavity {
                half_extents: h,
                wall,
                cavity_depth,
            } => {
                let face = box_face(p, h);
                let (ix, iy) = (h[0] - wall, h[1] - wall);
                let top = -h[2] + cavity_depth;
                let face_gap = (h[0] - p.x.abs()).min(h[1] - p.y.abs()).min(h[2] - p.z.abs());
                // distance to the pocket boundary, measured from its outside
                let pocket = (p.x.abs() - ix).max(p.y.abs() - iy).max(p.z - top);
                if pocket < face_gap && p.z < top + wall && p.x.abs() < ix + wall && p.y.abs() < iy + wall {
                    6
                } else {
                    face
                }
            }
        }
    }

    pub fn default_palette(&self) -> Vec<Rgb> {
        match self {
            ObjectKind::Sphere { .. } | ObjectKind::Capsule { .. } => vec![
                [0.85, 0.25, 0.2],
                [0.25, 0.7, 0.3],
                [0.2, 0.35, 0.85],
                [0.85, 0.8, 0.2],
                [0.9, 0.3, 0.85],
                [0.2, 0.85, 0.85],
                [0.95, 0.55, 0.1],
                [0.5, 0.2, 0.9],
            ],
            ObjectKind::Box { .. } | ObjectKind::CompositeWithCavity { .. } => vec![
                [0.85, 0.3, 0.25],
                [0.3, 0.7, 0.35],
                [0.25, 0.4, 0.85],
                [0.8, 0.75, 0.25],
                [0.4, 0.25, 0.45],
                // the underside is far from every blend of the other faces, so a guessed one shows
                [0.9, 0.9, 0.95],
                [0.95, 0.95, 0.9],
            ],
        }
    }

    fn rects(&self) -> Vec<Rect> {
        match *self {
            ObjectKind::Box { half_extents } => box_faces(half_extents),
            ObjectKind::CompositeWithCavity {
                half_extents: h,
                wall,
                cavity_depth: d,
            } => {
                let (hx, hy, hz) = (h[0], h[1], h[2]);
                let (ix, iy) = (hx - wall, hy - wall);
                let zc = -hz + d;
                let mut r = box_faces(h);
                r.pop();
                let sx = (hx - ix) / 2.0;
                let sy = (hy - iy) / 2.0;
                r.extend([
                    rect([ix + sx, 0.0, -hz], [sx, 0.0, 0.0], [0.0, hy, 0.0]),
                    rect([-ix - sx, 0.0, -hz], [sx, 0.0, 0.0], [0.0, hy, 0.0]),
                    rect([0.0, iy + sy, -hz], [ix, 0.0, 0.0], [0.0, sy, 0.0]),
                    rect([0.0, -iy - sy, -hz], [ix, 0.0, 0.0], [0.0, sy, 0.0]),
                    rect([0.0, 0.0, zc], [ix, 0.0, 0.0], [0.0, iy, 0.0]),
                    rect([ix, 0.0, -hz + d / 2.0], [0.0, iy, 0.0], [0.0, 0.0, d / 2.0]),
                    rect([-ix, 0.0, -hz + d / 2.0], [0.0, iy, 0.0], [0.0, 0.0, d / 2.0]),
                    rect([0.0, iy, -hz + d / 2.0], [ix, 0.0, 0.0], [0.0, 0.0, d / 2.0]),
                    rect([0.0, -iy, -hz + d / 2.0], [ix, 0.0, 0.0], [0.0, 0.0, d / 2.0]),
                ]);
                r
            }
            _ => Vec::new(),
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            ObjectKind::Sphere { radius } => 4.0 * PI * radius * radius,
            ObjectKind::Capsule { radius, half_length } => 4.0 * PI * radius * radius + 4.0 * PI * radius * half_length,
            _ => self.rects().iter().map(Rect::area).sum(),
        }
    }

    /// Uniform samples on the object surface, object frame.
    pub fn sample_surface(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        let unit = |rng: &mut ChaCha8Rng| loop {
            let v = Vec3::new(
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            );
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        };
        match *self {
            ObjectKind::Sphere { radius } => (0..n).map(|_| unit(rng) * radius).collect(),
            ObjectKind::Capsule { radius, half_length } => {
                let cyl = 4.0 * PI * radius * half_length;
                let total = cyl + 4.0 * PI * radius * radius;
                (0..n)
                    .map(|_| {
                        if rng.random::<f64>() * total < cyl {
                            let a: f64 = rng.random_range(0.0..TAU);
                            let z: f64 = rng.random_range(-half_length..=half_length);
                            Vec3::new(radius * a.cos(), radius * a.sin(), z)
                        } else {
                            let d = unit(rng);
                            d * radius + Vec3::new(0.0, 0.0, half_length.copysign(d.z))
                        }
                    })
                    .collect()
            }
            _ => {
                let rects = self.rects();
                let areas: Vec<f64> = rects.iter().map(Rect::area).collect();
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let mut pick = rng.random::<f64>() * total;
                        let mut k = 0;
                        while k + 1 < rects.len() && pick >= areas[k] {
                            pick -= areas[k];
                            k += 1;
                        }
                        let r = &rects[k];
                        let s: f64 = rng.random_range(-1.0..=1.0);
                        let t: f64 = rng.random_range(-1.0..=1.0);
                        r.center + r.u * s + r.v * t
                    })
                    .collect()
            }
        }
    }
}

fn in_cavity(p: &Vec3, h: [f64; 3], wall: f64, depth: f64) -> bool {
    p.x.abs() < h[0] - wall && p.y.abs() < h[1] - wall && p.z < -h[2] + depth
}

fn box_face(p: &Vec3, h: [f64; 3]) -> usize {
    let gaps = [h[0] - p.x.abs(), h[1] - p.y.abs(), h[2] - p.z.abs()];
    let axis = (0..3).min_by(|a, b| gaps[*a].total_cmp(&gaps[*b])).unwrap_or(0);
    2 * axis + usize::from(p[axis] < 0.0)
}

/// Synthetic world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub object: ObjectKind,
    /// Object frame in the world.
    #[serde(default)]
    pub object_pose: Pose,
    /// One albedo per region; empty selects the default palette.
    #[serde(default)]
    pub albedos: Vec<Rgb>,
    /// Amplitude of the smooth albedo texture, 0 for flat regions.
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
    #[serde(default = "default_texture_period")]
    pub texture_period: f64,
    #[serde(default)]
    pub workspace_center: Vec3,
    pub shell_radius_min: f64,
    pub shell_radius_max: f64,
    /// Half-size of the cubic reconstruction volume around the workspace center.
    pub bounds_half: f64,
    #[serde(default)]
    pub pixel_noise_std: f64,
    /// Inside-test samples per voxel axis when baking; 1 tests voxel centers only.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_texture_amplitude() -> f64 {
    0.15
}

fn default_texture_period() -> f64 {
    0.05
}

fn default_supersample() -> usize {
    1
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec::composite_default()
    }
}

impl SceneSpec {
    pub fn composite_default() -> SceneSpec {
        SceneSpec {
            object: ObjectKind::CompositeWithCavity {
                half_extents: [0.05, 0.04, 0.03],
                wall: 0.012,
                cavity_depth: 0.04,
            },
            object_pose: Pose::IDENTITY,
            albedos: Vec::new(),
            texture_amplitude: default_texture_amplitude(),
            texture_period: default_texture_period(),
            workspace_center: Vec3::zeros(),
            shell_radius_min: 0.3,
            shell_radius_max: 0.4,
            bounds_half: 0.1,
            pixel_noise_std: 0.0,
            supersample: 1,
            seed: 0,
        }
    }

    pub fn with_object(object: ObjectKind) -> SceneSpec {
        SceneSpec {
            object,
            ..SceneSpec::composite_default()
        }
    }

    /// Full validation, including the 10% bounds margin around the object.
    pub fn validate(&self) -> Result<()> {
        self.validate_config()?;
        let reach = (self.object_pose.r - self.workspace_center).norm() + self.object.bounding_radius();
        if reach * 1.1 > self.bounds_half {
            return Err(Error::Config(format!(
                "object reaches {reach:.4} m from the workspace center; bounds half-size {} leaves < 10% margin",
                self.bounds_half
            )));
        }
        Ok(())
    }

    /// Validation of everything except the object placement, which flips may change.
    pub fn validate_config(&self) -> Result<()> {
        self.object.validate()?;
        if !(self.shell_radius_min > 0.0 && self.shell_radius_max >= self.shell_radius_min) {
            return Err(Error::Config("shell radius range must satisfy 0 < min <= max".into()));
        }
        if !(self.bounds_half > 0.0) || self.shell_radius_min <= self.bounds_half * 3f64.sqrt() {
            return Err(Error::Config("bounds must be positive and lie inside the camera shell".into()));
        }
        if !self.albedos.is_empty() && self.albedos.len() != self.object.region_count() {
            return Err(Error::Config(format!(
                "expected {} albedos, got {}",
                self.object.region_count(),
                self.albedos.len()
            )));
        }
        if self.albedos.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("albedos must lie in [0, 1]".into()));
        }
        if !(self.texture_amplitude >= 0.0 && self.texture_amplitude < 1.0 && self.texture_period > 0.0) {
            return Err(Error::Config("texture amplitude must be in [0, 1) and period positive".into()));
        }
        if self.supersample == 0 || self.supersample > 8 {
            return Err(Error::Config("supersample must be in 1..=8".into()));
        }
        if !(self.pixel_noise_std >= 0.0) {
            return Err(Error::Config("pixel noise std must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::cube(self.workspace_center, self.bounds_half).expect("validated bounds")
    }

    pub fn shell(&self) -> ProbeShell {
        ProbeShell {
            center: self.workspace_center,
            radius_min: self.shell_radius_min,
            radius_max: self.shell_radius_max,
        }
    }

    pub fn palette(&self) -> Vec<Rgb> {
        if self.albedos.is_empty() {
            self.object.default_palette()
        } else {
            self.albedos.clone()
        }
    }

    /// World-frame inside test.
    pub fn inside(&self, p: &Vec3) -> bool {
        self.object.inside(&self.object_pose.inverse().transform_point(p))
    }

    /// Albedo at a world point, defined everywhere in space.
    pub fn albedo(&self, p: &Vec3) -> Rgb {
        let local = self.object_pose.inverse().transform_point(p);
        self.albedo_local(&local, &self.palette())
    }

    fn albedo_local(&self, local: &Vec3, palette: &[Rgb]) -> Rgb {
        let base = palette[self.object.region(local)];
        let k = TAU / self.texture_period;
        let m = 1.0 + self.texture_amplitude * ((k * local.x).sin() * (k * local.y).cos() + (k * local.z).sin()) * 0.5;
        [
            (base[0] * m).clamp(0.02, 0.98),
            (base[1] * m).clamp(0.02, 0.98),
            (base[2] * m).clamp(0.02, 0.98),
        ]
    }

    /// World-frame centroid of the object frame origin.
    pub fn centroid(&self) -> Vec3 {
        self.object_pose.r
    }
}

/// Voxelizes the scene: `GT_DENSITY` inside the solid, effectively zero outside.
///
/// With `supersample > 1` the density is scaled by the inside fraction of a
/// stratified sub-lattice, which removes pose-dependent staircase aliasing.
pub fn bake_ground_truth(scene: &SceneSpec, resolution: [usize; 3]) -> Result<RadianceGrid> {
    scene.validate_config()?;
    let mut grid = RadianceGrid::new(resolution, scene.bounds())?;
    let inv = scene.object_pose.inverse();
    let palette = scene.palette();
    let s = scene.supersample;
    let vs = grid.voxel_size();
    let offsets: Vec<Vec3> = (0..s * s * s)
        .map(|k| {
            let f = |j: usize| (j as f64 + 0.5) / s as f64 - 0.5;
            Vec3::new(f(k % s) * vs.x, f((k / s) % s) * vs.y, f(k / (s * s)) * vs.z)
        })
        .collect();
    for iz in 0..resolution[2] {
        for iy in 0..resolution[1] {
            for ix in 0..resolution[0] {
                let center = grid.voxel_center(ix, iy, iz);
                let local = inv.transform_point(&center);
                let d = if s == 1 {
                    if scene.object.inside(&local) {
                        softplus_inv(GT_DENSITY)
                    } else {
                        GT_EMPTY_RAW
                    }
                } else {
                    let n = offsets
                        .iter()
                        .filter(|o| scene.object.inside(&inv.transform_point(&(center + *o))))
                        .count();
                    if n == 0 {
                        GT_EMPTY_RAW
                    } else {
                        softplus_inv(GT_DENSITY * n as f64 / offsets.len() as f64)
                    }
                };
                let a = scene.albedo_local(&local, &palette);
                let i = grid.index(ix, iy, iz);
                grid.set_voxel(i, d, [logit(a[0]), logit(a[1]), logit(a[2])]);
            }
        }
    }
    Ok(grid)
}

/// Randomization of executed flips around the commanded transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipNoise {
    /// RMS rotation error, radians; the error axis is isotropic.
    pub rotation_std: f64,
    /// RMS translation error, meters; the error direction is isotropic.
    pub translation_std: f64,
    pub topple_probability: f64,
}

impl Default for FlipNoise {
    fn default() -> Self {
        FlipNoise {
            rotation_std: 5f64.to_radians(),
            translation_std: 0.01,
            topple_probability: 0.05,
        }
    }
}

impl FlipNoise {
    pub const NONE: FlipNoise = FlipNoise {
        rotation_std: 0.0,
        translation_std: 0.0,
        topple_probability: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.rotation_std >= 0.0 && self.translation_std >= 0.0) {
            return Err(Error::Config("flip noise stds must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.topple_probability) {
            return Err(Error::Config("topple probability must be in [0, 1]".into()));
        }
        Ok(())
    }
}

fn isotropic(rng: &mut ChaCha8Rng, rms: f64) -> Vec3 {
    if rms == 0.0 {
        return Vec3::zeros();
    }
    let n = Normal::new(0.0, rms / 3f64.sqrt()).expect("finite std");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

/// Applies `commanded` (a world-frame rigid motion of the object) followed by
/// noise about the new centroid; returns the new scene and the executed world motion.
pub fn execute_flip(scene: &SceneSpec, commanded: &Pose, noise: &FlipNoise, seed: u64) -> Result<(SceneSpec, Pose)> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let after = commanded.compose(&scene.object_pose);
    let c = after.r;
    let rot = Quat::from_rotvec(&isotropic(&mut rng, noise.rotation_std));
    let shift = isotropic(&mut rng, noise.translation_std);
    let mut perturb = Pose::from_translation(shift).compose(&Pose::rotation_about(&c, rot));
    if noise.topple_probability > 0.0 && rng.random::<f64>() < noise.topple_probability {
        let a: f64 = rng.random_range(0.0..TAU);
        let axis = Vec3::new(a.cos(), a.sin(), 0.0);
        let tip = Pose::rotation_about(&(c + shift), Quat::from_axis_angle(&axis, PI / 2.0));
        perturb = tip.compose(&perturb);
    }
    let delta = perturb.compose(commanded);
    let mut next = scene.clone();
    next.object_pose = delta.compose(&scene.object_pose);
    Ok((next, delta))
}

/// Ground-truth world with a cached baked grid.
#[derive(Debug, Clone)]
pub struct Oracle {
    scene: SceneSpec,
    resolution: [usize; 3],
    gt: RadianceGrid,
}

impl Oracle {
    pub fn new(scene: SceneSpec, resolution: [usize; 3]) -> Result<Oracle> {
        scene.validate()?;
        let gt = bake_ground_truth(&scene, resolution)?;
        Ok(Oracle { scene, resolution, gt })
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    pub fn ground_truth(&self) -> &RadianceGrid {
        &self.gt
    }

    pub fn capture(&self, pose: &Pose, intr: &CameraIntrinsics, spec: &SampleSpec) -> Result<ViewSample> {
        capture(&self.scene, &self.gt, pose, intr, spec)
    }

    /// Executes a flip and rebakes; the executed motion is returned to the caller only.
    pub fn flip(&mut self, commanded: &Pose, noise: &FlipNoise, seed: u64) -> Result<Pose> {
        let (scene, delta) = execute_flip(&self.scene, commanded, noise, seed)?;
        self.gt = bake_ground_truth(&scene, self.resolution)?;
        self.scene = scene;
        Ok(delta)
    }

    pub fn validation_set(&self, n: usize, seed: u64, intr: &CameraIntrinsics, spec: &SampleSpec) -> Result<Vec<ViewSample>> {
        validation_poses(&self.scene, n, seed)?
            .iter()
            .map(|p| self.capture(p, intr, spec))
            .collect()
    }
}

/// Renders the baked grid through the shared quadrature; the mask thresholds opacity.
pub fn capture(
    scene: &SceneSpec,
    gt: &RadianceGrid,
    pose: &Pose,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
) -> Result<ViewSample> {
    let out = render_image(gt, pose, intr, spec)?;
    let mask: Vec<bool> = out.opacity.iter().map(|o| *o > MASK_THRESHOLD).collect();
    let mut image = out.color;
    if scene.pixel_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ scene.seed);
        let n = Normal::new(0.0, scene.pixel_noise_std).expect("validated std");
        for px in image.iter_mut() {
            for c in px.iter_mut() {
                *c = (*c + n.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    ViewSample::new(image, mask, *pose, *intr)
}

/// Validation cameras uniform on the scene shell, from a stream disjoint from training.
pub fn validation_poses(scene: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::InvalidArgument("validation set needs at least one view".into()));
    }
    scene.shell().sample(n, seed ^ VALIDATION_STREAM)
}

pub fn validation_set(
    scene: &SceneSpec,
    n: usize,
    seed: u64,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
    resolution: [usize; 3],
) -> Result<Vec<ViewSample>> {
    Oracle::new(scene.clone(), resolution)?.validation_set(n, seed, intr, spec)
}

/// Uniform samples on the analytic surface, world frame.
pub fn surface_points(scene: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::InvalidArgument("surface sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(scene
        .object
        .sample_surface(n, &mut rng)
        .iter()
        .map(|p| scene.object_pose.transform_point(p))
        .collect())
}
