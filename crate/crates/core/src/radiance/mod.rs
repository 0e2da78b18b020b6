//! Dense voxel radiance grid, quadrature volume rendering and the analytic
//! backward pass of the photometric loss.
//!
//! Each voxel stores a pre-activation density and a pre-activation RGB
//! color at its center. Queries trilinearly interpolate the raw values and
//! then activate them: `σ = softplus(raw)`, `c = sigmoid(raw)`. Colors carry
//! no view dependence.

mod io;

pub use io::{read_grid, write_grid, GRID_MAGIC, GRID_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, Aabb, CameraIntrinsics, Pose, Ray, Vec3};

pub type Rgb = [f64; 3];

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Ray sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_samples: usize,
    pub jitter: bool,
    pub seed: u64,
}

impl SampleSpec {
    pub fn new(n_samples: usize, jitter: bool, seed: u64) -> Result<SampleSpec> {
        if n_samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_samples must be at least 2, got {n_samples}"
            )));
        }
        Ok(SampleSpec {
            n_samples,
            jitter,
            seed,
        })
    }

    pub fn deterministic(n_samples: usize) -> SampleSpec {
        SampleSpec {
            n_samples: n_samples.max(2),
            jitter: false,
            seed: 0,
        }
    }

    /// Sample distances `t_i` and spacings `δ_i` along the ray.
    ///
    /// Strata have width `(t_far - t_near) / N`; without jitter each sample sits at
    /// the start of its stratum so that `Σ δ_i = t_far - t_near` exactly.
    pub fn sample_points(&self, ray: &Ray, ray_id: u64, ts: &mut Vec<f64>, deltas: &mut Vec<f64>) {
        ts.clear();
        deltas.clear();
        let n = self.n_samples;
        let step = (ray.t_far - ray.t_near) / n as f64;
        if self.jitter {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(ray_id);
            for i in 0..n {
                let u: f64 = rng.random();
                ts.push(ray.t_near + (i as f64 + u) * step);
            }
        } else {
            for i in 0..n {
                ts.push(ray.t_near + i as f64 * step);
            }
        }
        for i in 0..n {
            let next = if i + 1 < n { ts[i + 1] } else { ray.t_far };
            deltas.push(next - ts[i]);
        }
    }
}

/// Per-ray quadrature result.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RayOutput {
    pub color: Rgb,
    pub depth: f64,
    pub opacity: f64,
}

/// Per-pixel render of an image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Rgb>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> RenderOutput {
        let n = width * height;
        RenderOutput {
            width,
            height,
            color: vec![[0.0; 3]; n],
            depth: vec![0.0; n],
            opacity: vec![0.0; n],
        }
    }

    pub fn from_rays(width: usize, height: usize, outputs: Vec<RayOutput>) -> RenderOutput {
        RenderOutput {
            width,
            height,
            color: outputs.iter().map(|o| o.color).collect(),
            depth: outputs.iter().map(|o| o.depth).collect(),
            opacity: outputs.iter().map(|o| o.opacity).collect(),
        }
    }
}

/// Trilinear stencil of one query point: eight voxel indices and weights.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    idx: [usize; 8],
    w: [f64; 8],
}

/// Dense grid of raw (density, r, g, b) values at voxel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceGrid {
    resolution: [usize; 3],
    bounds: Aabb,
    /// `[density_raw, r_raw, g_raw, b_raw]` per voxel, x fastest.
    data: Vec<[f64; 4]>,
}

impl RadianceGrid {
    pub fn new(resolution: [usize; 3], bounds: Aabb) -> Result<RadianceGrid> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid resolution must be positive, got {resolution:?}"
            )));
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        Ok(RadianceGrid {
            resolution,
            bounds,
            data: vec![[0.0; 4]; n],
        })
    }

    pub fn filled(resolution: [usize; 3], bounds: Aabb, density_raw: f64, color_raw: Rgb) -> Result<RadianceGrid> {
        let mut g = RadianceGrid::new(resolution, bounds)?;
        for v in g.data.iter_mut() {
            *v = [density_raw, color_raw[0], color_raw[1], color_raw[2]];
        }
        Ok(g)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    pub fn voxel_size(&self) -> Vec3 {
        let s = self.bounds.size();
        Vec3::new(
            s.x / self.resolution[0] as f64,
            s.y / self.resolution[1] as f64,
            s.z / self.resolution[2] as f64,
        )
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.resolution[0] * (iy + self.resolution[1] * iz)
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let s = self.voxel_size();
        self.bounds.min
            + Vec3::new(
                (ix as f64 + 0.5) * s.x,
                (iy as f64 + 0.5) * s.y,
                (iz as f64 + 0.5) * s.z,
            )
    }

    pub fn raw(&self) -> &[[f64; 4]] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [[f64; 4]] {
        &mut self.data
    }

    pub fn density_raw(&self, i: usize) -> f64 {
        self.data[i][0]
    }

    pub fn color_raw(&self, i: usize) -> Rgb {
        let v = self.data[i];
        [v[1], v[2], v[3]]
    }

    pub fn set_voxel(&mut self, i: usize, density_raw: f64, color_raw: Rgb) {
        self.data[i] = [density_raw, color_raw[0], color_raw[1], color_raw[2]];
    }

    /// Activated density at voxel `i`.
    pub fn density(&self, i: usize) -> f64 {
        softplus(self.data[i][0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn stencil(&self, p: &Vec3) -> Stencil {
        let size = self.bounds.size();
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let u = (p[a] - self.bounds.min[a]) / size[a] * n as f64 - 0.5;
            if n == 1 {
                continue;
            }
            let u = u.clamp(0.0, (n - 1) as f64);
            let lo = (u.floor() as usize).min(n - 2);
            i0[a] = lo;
            i1[a] = lo + 1;
            f[a] = u - lo as f64;
        }
        let nx = self.resolution[0];
        let nxy = nx * self.resolution[1];
        let mut s = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
        };
        for c in 0..8 {
            let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let ix = if bx == 1 { i1[0] } else { i0[0] };
            let iy = if by == 1 { i1[1] } else { i0[1] };
            let iz = if bz == 1 { i1[2] } else { i0[2] };
            let wx = if bx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if by == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if bz == 1 { f[2] } else { 1.0 - f[2] };
            s.idx[c] = ix + nx * iy + nxy * iz;
            s.w[c] = wx * wy * wz;
        }
        s
    }

    fn interp(&self, s: &Stencil) -> [f64; 4] {
        let mut out = [0.0; 4];
        for c in 0..8 {
            let v = &self.data[s.idx[c]];
            let w = s.w[c];
            out[0] += w * v[0];
            out[1] += w * v[1];
            out[2] += w * v[2];
            out[3] += w * v[3];
        }
        out
    }

    /// Interpolated raw values at a point.
    pub fn query_raw(&self, p: &Vec3) -> [f64; 4] {
        self.interp(&self.stencil(p))
    }

    /// Activated (density, color) at a point.
    pub fn query(&self, p: &Vec3) -> (f64, Rgb) {
        let r = self.query_raw(p);
        (softplus(r[0]), [sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])])
    }
}

/// Quadrature of the volume rendering integral along one ray.
pub fn render_ray(grid: &RadianceGrid, ray: &Ray, spec: &SampleSpec) -> Result<RayOutput> {
    render_ray_indexed(grid, ray, spec, 0)
}

/// [`render_ray`] with an explicit ray id feeding the jitter stream.
pub fn render_ray_indexed(grid: &RadianceGrid, ray: &Ray, spec: &SampleSpec, ray_id: u64) -> Result<RayOutput> {
    if ray.is_empty() {
        return Ok(RayOutput::default());
    }
    let mut ts = Vec::with_capacity(spec.n_samples);
    let mut deltas = Vec::with_capacity(spec.n_samples);
    spec.sample_points(ray, ray_id, &mut ts, &mut deltas);
    let mut out = RayOutput::default();
    let mut trans = 1.0;
    for (t, delta) in ts.iter().zip(deltas.iter()) {
        let (sigma, c) = grid.query(&ray.at(*t));
        if !sigma.is_finite() || !c.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite grid value at t = {t}")));
        }
        let e = (-sigma * delta).exp();
        let alpha = trans * (1.0 - e);
        out.color[0] += alpha * c[0];
        out.color[1] += alpha * c[1];
        out.color[2] += alpha * c[2];
        out.depth += alpha * t;
        out.opacity += alpha;
        trans *= e;
    }
    Ok(out)
}

/// Renders every ray of a list, ray ids are list positions.
pub fn render_rays(grid: &RadianceGrid, rays: &[Ray], spec: &SampleSpec) -> Result<Vec<RayOutput>> {
    rays.iter()
        .enumerate()
        .map(|(i, r)| render_ray_indexed(grid, r, spec, i as u64))
        .collect()
}

pub fn render_image(grid: &RadianceGrid, pose: &Pose, intr: &CameraIntrinsics, spec: &SampleSpec) -> Result<RenderOutput> {
    let rays = generate_rays(pose, intr, grid.bounds());
    let out = render_rays(grid, &rays, spec)?;
    Ok(RenderOutput::from_rays(intr.width, intr.height, out))
}

/// Gradient of a scalar loss with respect to the raw grid fields.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    pub density: Vec<f64>,
    pub color: Vec<Rgb>,
}

impl GridGradient {
    pub fn from_packed(packed: &[[f64; 4]]) -> GridGradient {
        GridGradient {
            density: packed.iter().map(|v| v[0]).collect(),
            color: packed.iter().map(|v| [v[1], v[2], v[3]]).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.density
            .iter()
            .chain(self.color.iter().flatten())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Reusable per-ray buffers for the backward pass.
#[derive(Default)]
pub(crate) struct RayScratch {
    ts: Vec<f64>,
    deltas: Vec<f64>,
    stencils: Vec<Stencil>,
    sig: Vec<f64>,
    dsig: Vec<f64>,
    col: Vec<Rgb>,
    alpha: Vec<f64>,
    trans_next: Vec<f64>,
}

/// Adds `scale * ∂‖Ĉ − target‖²/∂raw` into `grad` and returns `‖Ĉ − target‖²`.
pub(crate) fn accumulate_ray_gradient(
    grid: &RadianceGrid,
    ray: &Ray,
    ray_id: u64,
    spec: &SampleSpec,
    target: &Rgb,
    scale: f64,
    grad: &mut [[f64; 4]],
    s: &mut RayScratch,
) -> f64 {
    if ray.is_empty() {
        return target.iter().map(|t| t * t).sum();
    }
    spec.sample_points(ray, ray_id, &mut s.ts, &mut s.deltas);
    let n = s.ts.len();
    s.stencils.clear();
    s.sig.clear();
    s.dsig.clear();
    s.col.clear();
    s.alpha.clear();
    s.trans_next.clear();
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for i in 0..n {
        let st = grid.stencil(&ray.at(s.ts[i]));
        let raw = grid.interp(&st);
        let sigma = softplus(raw[0]);
        let c = [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])];
        let e = (-sigma * s.deltas[i]).exp();
        let a = trans * (1.0 - e);
        trans *= e;
        for k in 0..3 {
            color[k] += a * c[k];
        }
        s.stencils.push(st);
        s.sig.push(sigma);
        s.dsig.push(sigmoid(raw[0]));
        s.col.push(c);
        s.alpha.push(a);
        s.trans_next.push(trans);
    }
    let resid = [color[0] - target[0], color[1] - target[1], color[2] - target[2]];
    let loss = resid.iter().map(|r| r * r).sum::<f64>();
    let g = [2.0 * scale * resid[0], 2.0 * scale * resid[1], 2.0 * scale * resid[2]];
    // suffix = Σ_{j>i} α_j (g · c_j)
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let c = s.col[i];
        let gc = g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
        let d_sigma = s.deltas[i] * (s.trans_next[i] * gc - suffix);
        suffix += s.alpha[i] * gc;
        let d_density_raw = d_sigma * s.dsig[i];
        let a = s.alpha[i];
        let d_col = [
            a * g[0] * c[0] * (1.0 - c[0]),
            a * g[1] * c[1] * (1.0 - c[1]),
            a * g[2] * c[2] * (1.0 - c[2]),
        ];
        let st = &s.stencils[i];
        for k in 0..8 {
            let w = st.w[k];
            if w == 0.0 {
                continue;
            }
            let cell = &mut grad[st.idx[k]];
            cell[0] += w * d_density_raw;
            cell[1] += w * d_col[0];
            cell[2] += w * d_col[1];
            cell[3] += w * d_col[2];
        }
    }
    let _ = &s.sig;
    loss
}

/// Target color of a supervised pixel: the captured color inside the mask, black outside.
pub fn masked_target(color: &Rgb, mask: f64) -> Rgb {
    [color[0] * mask, color[1] * mask, color[2] * mask]
}

/// Mean squared photometric loss over `rays` and its exact gradient.
pub fn backprop_photometric(
    grid: &RadianceGrid,
    rays: &[Ray],
    target_colors: &[Rgb],
    target_masks: &[f64],
    spec: &SampleSpec,
) -> Result<(f64, GridGradient)> {
    if rays.len() != target_colors.len() || rays.len() != target_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "rays ({}), colors ({}) and masks ({}) differ in length",
            rays.len(),
            target_colors.len(),
            target_masks.len()
        )));
    }
    let mut grad = vec![[0.0; 4]; grid.voxel_count()];
    if rays.is_empty() {
        return Ok((0.0, GridGradient::from_packed(&grad)));
    }
    let scale = 1.0 / rays.len() as f64;
    let mut scratch = RayScratch::default();
    let mut total = 0.0;
    for (i, ray) in rays.iter().enumerate() {
        let target = masked_target(&target_colors[i], target_masks[i]);
        total += accumulate_ray_gradient(grid, ray, i as u64, spec, &target, scale, &mut grad, &mut scratch);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Numerical("photometric loss is not finite".into()));
    }
    Ok((loss, GridGradient::from_packed(&grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_at;
    use rand::Rng;

    fn unit_box() -> Aabb {
        Aabb::cube(Vec3::zeros(), 0.5).unwrap()
    }

    fn random_grid(res: [usize; 3], seed: u64) -> RadianceGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = RadianceGrid::new(res, unit_box()).unwrap();
        for v in g.raw_mut() {
            *v = [
                rng.random_range(-1.0..2.5),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ];
        }
        g
    }

    #[test]
    fn zero_density_renders_black() {
        // softplus(-40) is ~4e-18, indistinguishable from zero at these tolerances
        let g = RadianceGrid::filled([4, 4, 4], unit_box(), -40.0, [3.0, 3.0, 3.0]).unwrap();
        let ray = Ray::clipped(Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0), g.bounds());
        let o = render_ray(&g, &ray, &SampleSpec::deterministic(32)).unwrap();
        assert!(o.opacity < 1e-15 && o.color.iter().all(|c| *c < 1e-15));
    }

    #[test]
    fn homogeneous_slab_matches_transmittance() {
        let g = RadianceGrid::filled([3, 3, 3], unit_box(), softplus_inv(2.0), [0.0; 3]).unwrap();
        let ray = Ray {
            o: Vec3::new(-0.25, 0.0, 0.0),
            d: Vec3::x(),
            t_near: 0.0,
            t_far: 0.5,
        };
        let o = render_ray(&g, &ray, &SampleSpec::deterministic(256)).unwrap();
        let expected = 1.0 - (-1.0f64).exp();
        assert!((o.opacity - expected).abs() < 1e-3, "{} vs {expected}", o.opacity);
    }

    #[test]
    fn two_sample_hand_evaluation() {
        // voxel 0 red, voxel 1 green, both σ = 1; samples land exactly on the voxel centers
        let bounds = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let mut g = RadianceGrid::new([2, 1, 1], bounds).unwrap();
        let big = 40.0;
        g.set_voxel(0, softplus_inv(1.0), [big, -big, -big]);
        g.set_voxel(1, softplus_inv(1.0), [-big, big, -big]);
        let ray = Ray {
            o: Vec3::new(0.25, 0.5, 0.5),
            d: Vec3::x(),
            t_near: 0.0,
            t_far: 1.0,
        };
        let o = render_ray(&g, &ray, &SampleSpec::deterministic(2)).unwrap();
        let a1 = 1.0 - (-0.5f64).exp();
        let a2 = (-0.5f64).exp() * (1.0 - (-0.5f64).exp());
        assert!((a1 - 0.39347).abs() < 1e-5 && (a2 - 0.23865).abs() < 1e-5);
        assert!((o.color[0] - a1).abs() < 1e-12);
        assert!((o.color[1] - a2).abs() < 1e-12);
        assert!(o.color[2].abs() < 1e-12);
        assert!((o.depth - (a1 * 0.0 + a2 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn empty_ray_is_zero() {
        let g = random_grid([3, 3, 3], 1);
        let ray = Ray::clipped(Vec3::new(0.0, 0.0, 2.0), Vec3::z(), g.bounds());
        assert_eq!(render_ray(&g, &ray, &SampleSpec::deterministic(8)).unwrap(), RayOutput::default());
    }

    #[test]
    fn non_finite_grid_is_reported() {
        let mut g = random_grid([2, 2, 2], 2);
        g.raw_mut()[3][0] = f64::NAN;
        let ray = Ray::clipped(Vec3::new(0.0, 0.0, 2.0), -Vec3::z(), g.bounds());
        assert!(matches!(render_ray(&g, &ray, &SampleSpec::deterministic(8)), Err(Error::Numerical(_))));
    }

    #[test]
    fn opacity_telescopes() {
        let g = random_grid([5, 4, 6], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = SampleSpec::new(17, true, 5).unwrap();
        for id in 0..200u64 {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let ray = Ray::clipped(-2.0 * d + Vec3::new(0.1, -0.05, 0.02), d, g.bounds());
            let o = render_ray_indexed(&g, &ray, &spec, id).unwrap();
            let (mut ts, mut ds) = (Vec::new(), Vec::new());
            spec.sample_points(&ray, id, &mut ts, &mut ds);
            let tau: f64 = ts.iter().zip(&ds).map(|(t, dl)| g.query(&ray.at(*t)).0 * dl).sum();
            assert!((o.opacity - (1.0 - (-tau).exp())).abs() < 1e-10);
            for c in o.color {
                assert!(c <= o.opacity + 1e-6);
            }
        }
    }

    #[test]
    fn render_image_is_deterministic() {
        let g = random_grid([4, 4, 4], 4);
        let intr = CameraIntrinsics::from_half_fov(6, 5, 0.5).unwrap();
        let pose = look_at(&Vec3::new(1.0, 1.2, 0.8), &Vec3::zeros(), &Vec3::z()).unwrap();
        let spec = SampleSpec::new(16, true, 77).unwrap();
        let a = render_image(&g, &pose, &intr, &spec).unwrap();
        let b = render_image(&g, &pose, &intr, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.color.len(), 30);
    }

    #[test]
    fn target_equal_to_render_has_zero_loss() {
        let g = random_grid([3, 3, 3], 5);
        let spec = SampleSpec::deterministic(12);
        let rays: Vec<Ray> = (0..6)
            .map(|i| {
                let d = Vec3::new(0.1 * i as f64 - 0.3, 0.2, -1.0).normalize();
                Ray::clipped(Vec3::new(0.0, 0.0, 2.0), d, g.bounds())
            })
            .collect();
        let colors: Vec<Rgb> = render_rays(&g, &rays, &spec).unwrap().iter().map(|o| o.color).collect();
        let (loss, grad) = backprop_photometric(&g, &rays, &colors, &vec![1.0; rays.len()], &spec).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.max_abs() < 1e-10);
    }

    #[test]
    fn loss_is_quadratic_in_residual() {
        let g = random_grid([3, 3, 3], 6);
        let spec = SampleSpec::deterministic(12);
        let rays: Vec<Ray> = (0..5)
            .map(|i| Ray::clipped(Vec3::new(0.05 * i as f64, 0.0, 2.0), -Vec3::z(), g.bounds()))
            .collect();
        let rendered = render_rays(&g, &rays, &spec).unwrap();
        let offsets = [0.1, -0.05, 0.2];
        let shifted = |k: f64| -> Vec<Rgb> {
            rendered
                .iter()
                .map(|o| [o.color[0] + k * offsets[0], o.color[1] + k * offsets[1], o.color[2] + k * offsets[2]])
                .collect()
        };
        let masks = vec![1.0; rays.len()];
        let (l1, _) = backprop_photometric(&g, &rays, &shifted(1.0), &masks, &spec).unwrap();
        let (l2, _) = backprop_photometric(&g, &rays, &shifted(2.0), &masks, &spec).unwrap();
        assert!((l2 - 4.0 * l1).abs() < 1e-12 * l2.max(1.0));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let g = random_grid([2, 2, 2], 7);
        let rays = vec![Ray::clipped(Vec3::new(0.0, 0.0, 2.0), -Vec3::z(), g.bounds())];
        assert!(backprop_photometric(&g, &rays, &[], &[], &SampleSpec::deterministic(4)).is_err());
    }

    #[test]
    fn opacity_is_monotone_in_density() {
        let g = random_grid([4, 4, 4], 8);
        let spec = SampleSpec::deterministic(24);
        let ray = Ray::clipped(Vec3::new(0.05, -0.02, 2.0), Vec3::new(0.1, 0.05, -1.0).normalize(), g.bounds());
        let base = render_ray(&g, &ray, &spec).unwrap().opacity;
        for i in 0..g.voxel_count() {
            let mut h = g.clone();
            h.raw_mut()[i][0] += 0.7;
            assert!(render_ray(&h, &ray, &spec).unwrap().opacity >= base - 1e-15);
        }
    }

    fn fd_check(g: &RadianceGrid, rays: &[Ray], colors: &[Rgb], masks: &[f64], spec: &SampleSpec) -> f64 {
        let (_, grad) = backprop_photometric(g, rays, colors, masks, spec).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..g.voxel_count() {
            for k in 0..4 {
                let mut gp = g.clone();
                gp.raw_mut()[i][k] += h;
                let mut gm = g.clone();
                gm.raw_mut()[i][k] -= h;
                let lp = backprop_photometric(&gp, rays, colors, masks, spec).unwrap().0;
                let lm = backprop_photometric(&gm, rays, colors, masks, spec).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = if k == 0 { grad.density[i] } else { grad.color[i][k - 1] };
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn single_voxel_gradient_matches_finite_difference() {
        let mut g = RadianceGrid::new([1, 1, 1], unit_box()).unwrap();
        g.set_voxel(0, 0.8, [0.3, -0.4, 1.1]);
        let rays = vec![Ray::clipped(Vec3::new(0.1, 0.0, 2.0), -Vec3::z(), g.bounds())];
        let err = fd_check(&g, &rays, &[[0.2, 0.9, 0.1]], &[1.0], &SampleSpec::deterministic(16));
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn random_grid_gradient_matches_finite_difference() {
        for seed in 0..3u64 {
            let g = random_grid([3, 4, 3], 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rays: Vec<Ray> = (0..4)
                .map(|_| {
                    let d = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0).normalize();
                    Ray::clipped(Vec3::new(0.0, 0.0, 2.0), d, g.bounds())
                })
                .collect();
            let colors: Vec<Rgb> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let masks = vec![1.0, 0.0, 1.0, 1.0];
            let spec = SampleSpec::new(10, true, seed).unwrap();
            let err = fd_check(&g, &rays, &colors, &masks, &spec);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn thin_shell_depth_converges() {
        // an opaque shell at x = 0.3 inside a 1 m box along +x
        let bounds = Aabb::new(Vec3::new(0.0, -0.5, -0.5), Vec3::new(1.0, 0.5, 0.5)).unwrap();
        let mut g = RadianceGrid::filled([100, 1, 1], bounds, -40.0, [0.0; 3]).unwrap();
        g.set_voxel(30, softplus_inv(5000.0), [0.0; 3]);
        let ray = Ray { o: Vec3::new(0.0, 0.0, 0.0), d: Vec3::x(), t_near: 0.0, t_far: 1.0 };
        let mut errs = Vec::new();
        for n in [64, 256, 1024] {
            let o = render_ray(&g, &ray, &SampleSpec::deterministic(n)).unwrap();
            errs.push((o.depth / o.opacity - 0.305).abs());
        }
        assert!(errs[2] < 0.01, "{errs:?}");
        assert!(errs[2] <= errs[0]);
    }
}
