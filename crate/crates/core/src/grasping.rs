//! Lateral grasp candidates from mean-ensemble depth views, pruning and the
//! `(1 − θ) / U_d` grasp score.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orbit_pose, pixel_ray, CameraIntrinsics, Pose, Quat, Ray, Vec3};
use crate::radiance::{render_ray, SampleSpec};
use crate::trainer::{render_mean, Ensemble};
use crate::uncertainty::scalar_variance;

/// Inclusive pixel rectangle `[col0, col1] × [row0, row1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub col0: usize,
    pub row0: usize,
    pub col1: usize,
    pub row1: usize,
}

impl Patch {
    /// `size × size` window centered on a pixel, shifted to stay inside the image.
    pub fn centered(col: usize, row: usize, size: usize, width: usize, height: usize) -> Patch {
        let sw = size.min(width).max(1);
        let sh = size.min(height).max(1);
        let c0 = col.saturating_sub(sw / 2).min(width - sw);
        let r0 = row.saturating_sub(sh / 2).min(height - sh);
        Patch {
            col0: c0,
            row0: r0,
            col1: c0 + sw - 1,
            row1: r0 + sh - 1,
        }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.col0 <= self.col1 && self.row0 <= self.row1 && self.col1 < width && self.row1 < height
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..=self.row1).flat_map(move |r| (self.col0..=self.col1).map(move |c| (c, r)))
    }

    pub fn len(&self) -> usize {
        (self.col1 - self.col0 + 1) * (self.row1 - self.row0 + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A lateral pinch proposed on one rendered depth view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    /// Gripper frame: origin at the contact point, +Z along the approach, +X along the closing axis.
    pub pose: Pose,
    pub approach_dir: Vec3,
    pub patch: Patch,
    /// Angle between the reversed approach and the surface normal, radians in `[0, π/2]`.
    pub theta: f64,
    /// Pinch width between the silhouette contacts, meters.
    pub width: f64,
    /// Ray parameter of the contact along the center pixel ray.
    pub contact_t: f64,
    pub camera: Pose,
    pub intrinsics: CameraIntrinsics,
}

impl GraspCandidate {
    pub fn position(&self) -> Vec3 {
        self.pose.r
    }

    /// Patch rays clipped to the model bounds and cut `margin` past the contact.
    pub fn patch_rays(&self, ensemble: &Ensemble, margin: f64) -> Vec<Ray> {
        let bounds = ensemble.bounds();
        self.patch
            .pixels()
            .map(|(c, r)| {
                let mut ray = pixel_ray(&self.camera, &self.intrinsics, bounds, c, r);
                ray.t_far = ray.t_far.min(self.contact_t + margin);
                if ray.t_far < ray.t_near {
                    ray.t_far = ray.t_near;
                }
                ray
            })
            .collect()
    }
}

/// Candidates with the centroid of the point cloud they were taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<GraspCandidate>,
    pub centroid: Vec3,
    /// Half the diagonal of the cloud's axis-aligned bounding box.
    pub half_diagonal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    pub n_views: usize,
    pub view_radius: f64,
    pub view_elevation: f64,
    /// Opacity above which a pixel joins the point cloud.
    pub opacity_threshold: f64,
    pub patch_size: usize,
    pub max_per_view: usize,
    /// Distance past the contact at which patch rays stop, meters. `None` uses three voxel edges.
    pub patch_depth_margin: Option<f64>,
    /// `None` uses half the point-cloud bounding-box diagonal.
    pub max_center_dist: Option<f64>,
    pub max_theta: f64,
    pub min_opacity: f64,
    pub epsilon_d: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        GraspConfig {
            n_views: 4,
            view_radius: 0.35,
            view_elevation: 0.0,
            opacity_threshold: 0.5,
            patch_size: 9,
            max_per_view: 12,
            patch_depth_margin: None,
            max_center_dist: None,
            max_theta: 0.6,
            min_opacity: 0.5,
            epsilon_d: 1e-8,
        }
    }
}

impl GraspConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_views >= 1
            && self.view_radius > 0.0
            && self.view_elevation.abs() < 1.5
            && (0.0..1.0).contains(&self.opacity_threshold)
            && self.patch_size >= 1
            && self.max_per_view >= 1
            && self.patch_depth_margin.is_none_or(|m| m > 0.0)
            && self.max_center_dist.is_none_or(|d| d >= 0.0)
            && (0.0..=std::f64::consts::FRAC_PI_2).contains(&self.max_theta)
            && (0.0..=1.0).contains(&self.min_opacity)
            && self.epsilon_d > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid grasp config {self:?}")))
        }
    }

    pub fn depth_margin(&self, ensemble: &Ensemble) -> f64 {
        self.patch_depth_margin.unwrap_or_else(|| 3.0 * voxel_edge(ensemble))
    }

    pub fn limits(&self, set: &CandidateSet) -> PruneLimits {
        PruneLimits {
            max_center_dist: self.max_center_dist.unwrap_or(set.half_diagonal),
            max_theta: self.max_theta,
            min_opacity: self.min_opacity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneLimits {
    pub max_center_dist: f64,
    pub max_theta: f64,
    pub min_opacity: f64,
}

/// Longest voxel edge of the model lattice.
fn voxel_edge(ensemble: &Ensemble) -> f64 {
    let size = ensemble.bounds().size();
    let res = ensemble.resolution();
    (0..3).map(|i| size[i] / res[i] as f64).fold(0.0, f64::max)
}

/// Unprojected depth view: termination point per pixel where the opacity clears the threshold.
struct DepthView {
    camera: Pose,
    width: usize,
    height: usize,
    points: Vec<Option<Vec3>>,
    ts: Vec<f64>,
}

impl DepthView {
    fn at(&self, c: isize, r: isize) -> Option<Vec3> {
        if c < 0 || r < 0 || c >= self.width as isize || r >= self.height as isize {
            return None;
        }
        self.points[r as usize * self.width + c as usize]
    }

    /// Central-difference normal, oriented toward the camera.
    ///
    /// Needs a valid 5×5 neighborhood: silhouette pixels carry partial-opacity depth bias.
    fn normal(&self, c: usize, r: usize) -> Option<Vec3> {
        let (c, r) = (c as isize, r as isize);
        for dr in -2..=2 {
            for dc in -2..=2 {
                self.at(c + dc, r + dr)?;
            }
        }
        let p = self.at(c, r)?;
        let dx = self.at(c + 1, r)? - self.at(c - 1, r)?;
        let dy = self.at(c, r - 1)? - self.at(c, r + 1)?;
        let n = dx.cross(&dy);
        let len = n.norm();
        if !(len > 1e-15) {
            return None;
        }
        let n = n / len;
        Some(if n.dot(&(self.camera.r - p)) < 0.0 { -n } else { n })
    }
}

fn depth_view(ensemble: &Ensemble, camera: Pose, intr: &CameraIntrinsics, spec: &SampleSpec, tau: f64) -> Result<DepthView> {
    let out = render_mean(ensemble, &camera, intr, spec)?;
    let n = intr.pixel_count();
    let mut points = vec![None; n];
    let mut ts = vec![0.0; n];
    for row in 0..intr.height {
        for col in 0..intr.width {
            let i = row * intr.width + col;
            if out.opacity[i] > tau {
                let t = out.depth[i] / out.opacity[i];
                let d = camera.transform_vector(&intr.pixel_direction(col, row));
                points[i] = Some(camera.r + t * d);
                ts[i] = t;
            }
        }
    }
    Ok(DepthView {
        camera,
        width: intr.width,
        height: intr.height,
        points,
        ts,
    })
}

/// Longest run of valid pixels in a row.
fn longest_run(view: &DepthView, row: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for c in 0..=view.width {
        let valid = c < view.width && view.points[row * view.width + c].is_some();
        match (valid, start) {
            (true, None) => start = Some(c),
            (false, Some(s)) => {
                if best.is_none_or(|(a, b)| c - 1 - s > b - a) {
                    best = Some((s, c - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    best
}

fn gripper_pose(contact: Vec3, approach: Vec3, closing: Vec3) -> Pose {
    let z = approach;
    let mut x = closing - z * closing.dot(&z);
    if x.norm() < 1e-9 {
        x = z.cross(&Vec3::z());
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let m = nalgebra::Matrix3::from_columns(&[x, y, z]);
    Pose::new(contact, Quat::from_matrix(&m))
}

/// Lateral depth views around the model, unprojected to a cloud, with pinches at local width minima of horizontal scanlines.
pub fn generate_candidates(
    ensemble: &Ensemble,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
    cfg: &GraspConfig,
) -> Result<CandidateSet> {
    cfg.validate()?;
    let center = ensemble.bounds().center();
    let voxel = voxel_edge(ensemble);
    let views = (0..cfg.n_views)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / cfg.n_views as f64;
            let cam = orbit_pose(&center, cfg.view_radius, az, cfg.view_elevation)?;
            depth_view(ensemble, cam, intr, spec, cfg.opacity_threshold)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    let mut sum = Vec3::zeros();
    let mut count = 0usize;
    for p in views.iter().flat_map(|v| v.points.iter().flatten()) {
        lo = lo.inf(p);
        hi = hi.sup(p);
        sum += p;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyModel(format!(
            "no pixel above opacity {} in {} lateral views",
            cfg.opacity_threshold, cfg.n_views
        )));
    }

    let mut candidates = Vec::new();
    for view in &views {
        let approach = {
            let f = view.camera.forward();
            let h = Vec3::new(f.x, f.y, 0.0);
            if h.norm() > 1e-9 { h.normalize() } else { f }
        };
        let widths: Vec<Option<(usize, usize, f64)>> = (0..view.height)
            .map(|r| {
                let (a, b) = longest_run(view, r)?;
                if b < a + 2 {
                    return None;
                }
                let pa = view.points[r * view.width + a]?;
                let pb = view.points[r * view.width + b]?;
                Some((a, b, (pb - pa).norm()))
            })
            .collect();
        let w_at = |r: isize| -> f64 {
            if r < 0 || r as usize >= widths.len() {
                f64::INFINITY
            } else {
                widths[r as usize].map_or(f64::INFINITY, |w| w.2)
            }
        };
        // widths are quantized by the model lattice, so minima are taken up to one voxel edge
        let rows: Vec<usize> = (0..view.height)
            .filter(|&r| {
                let (c, ok) = match widths[r] {
                    Some((a, b, w)) => ((a + b) / 2, w <= w_at(r as isize - 1) + voxel && w <= w_at(r as isize + 1) + voxel),
                    None => (0, false),
                };
                ok && view.normal(c, r).is_some()
            })
            .collect();
        let picked: Vec<usize> = if rows.len() <= cfg.max_per_view {
            rows
        } else {
            (0..cfg.max_per_view)
                .map(|i| rows[(i * (rows.len() - 1) + (cfg.max_per_view - 1) / 2) / (cfg.max_per_view - 1).max(1)])
                .collect()
        };
        for r in picked {
            let (a, b, w) = widths[r].expect("picked rows have runs");
            let c = (a + b) / 2;
            let Some(contact) = view.points[r * view.width + c] else {
                continue;
            };
            let Some(n) = view.normal(c, r) else {
                continue;
            };
            let theta = n.dot(&(-approach)).clamp(-1.0, 1.0).acos().min(std::f64::consts::FRAC_PI_2);
            let closing = view.points[r * view.width + b].unwrap() - view.points[r * view.width + a].unwrap();
            candidates.push(GraspCandidate {
                pose: gripper_pose(contact, approach, closing),
                approach_dir: approach,
                patch: Patch::centered(c, r, cfg.patch_size, view.width, view.height),
                theta,
                width: w,
                contact_t: view.ts[r * view.width + c],
                camera: view.camera,
                intrinsics: *intr,
            });
        }
    }
    Ok(CandidateSet {
        candidates,
        centroid: sum / count as f64,
        half_diagonal: 0.5 * (hi - lo).norm(),
    })
}

/// Mean mean-ensemble opacity over the contact-truncated patch rays.
pub fn patch_opacity(c: &GraspCandidate, ensemble: &Ensemble, spec: &SampleSpec, margin: f64) -> Result<f64> {
    let rays = c.patch_rays(ensemble, margin);
    let mut sum = 0.0;
    for ray in &rays {
        for m in &ensemble.members {
            sum += render_ray(m, ray, spec)?.opacity;
        }
    }
    Ok(sum / (rays.len() * ensemble.size()) as f64)
}

/// Keeps candidates near the cloud centroid, close to normal incidence and over opaque patches.
pub fn prune_candidates(
    cands: &[GraspCandidate],
    centroid: &Vec3,
    ensemble: &Ensemble,
    spec: &SampleSpec,
    limits: &PruneLimits,
    depth_margin: f64,
) -> Result<Vec<GraspCandidate>> {
    let keep = cands
        .par_iter()
        .map(|c| {
            if (c.position() - centroid).norm() > limits.max_center_dist || c.theta > limits.max_theta {
                return Ok(false);
            }
            if limits.min_opacity <= 0.0 {
                return Ok(true);
            }
            Ok(patch_opacity(c, ensemble, spec, depth_margin)? >= limits.min_opacity)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(cands.iter().zip(keep).filter(|(_, k)| *k).map(|(c, _)| *c).collect())
}

/// Sum over rays of the population variance of member depths.
pub fn depth_variance(ensemble: &Ensemble, rays: &[Ray], spec: &SampleSpec) -> Result<f64> {
    let mut total = 0.0;
    let mut depths = Vec::with_capacity(ensemble.size());
    for ray in rays {
        depths.clear();
        for m in &ensemble.members {
            depths.push(render_ray(m, ray, spec)?.depth);
        }
        total += scalar_variance(&depths);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspScore {
    pub g: f64,
    /// Depth variance after the floor, so `g == (1 − theta) / u_d`.
    pub u_d: f64,
    pub theta: f64,
}

impl GraspScore {
    pub fn new(theta: f64, u_d: f64, epsilon_d: f64) -> GraspScore {
        let u_d = u_d.max(epsilon_d);
        GraspScore {
            g: (1.0 - theta) / u_d,
            u_d,
            theta,
        }
    }
}

/// Highest-scoring candidate; the first index wins ties.
pub fn score_and_select(
    cands: &[GraspCandidate],
    ensemble: &Ensemble,
    spec: &SampleSpec,
    epsilon_d: f64,
    depth_margin: f64,
) -> Result<Option<(GraspCandidate, GraspScore)>> {
    if !(epsilon_d > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon_d must be positive, got {epsilon_d}")));
    }
    let scores = cands
        .par_iter()
        .map(|c| {
            let u = depth_variance(ensemble, &c.patch_rays(ensemble, depth_margin), spec)?;
            Ok(GraspScore::new(c.theta, u, epsilon_d))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s.g > scores[b].g) {
            best = Some(i);
        }
    }
    Ok(best.map(|i| (cands[i], scores[i])))
}

/// Inclusive threshold test.
pub fn grasp_feasible(score: &GraspScore, threshold: f64) -> Result<bool> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("grasp threshold must be positive, got {threshold}")));
    }
    Ok(score.g >= threshold)
}

/// Outcome of the whole candidate pipeline for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspDecision {
    pub generated: usize,
    pub kept: usize,
    pub best: Option<(GraspCandidate, GraspScore)>,
    pub centroid: Vec3,
}

pub fn evaluate_grasps(
    ensemble: &Ensemble,
    intr: &CameraIntrinsics,
    spec: &SampleSpec,
    cfg: &GraspConfig,
) -> Result<GraspDecision> {
    let set = generate_candidates(ensemble, intr, spec, cfg)?;
    let margin = cfg.depth_margin(ensemble);
    let kept = prune_candidates(&set.candidates, &set.centroid, ensemble, spec, &cfg.limits(&set), margin)?;
    let best = score_and_select(&kept, ensemble, spec, cfg.epsilon_d, margin)?;
    Ok(GraspDecision {
        generated: set.candidates.len(),
        kept: kept.len(),
        best,
        centroid: set.centroid,
    })
}

/// One selected grasp per iteration, serialized as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspRecord {
    pub iteration: usize,
    pub pose: Pose,
    pub theta: f64,
    pub u_d: f64,
    pub g: f64,
    pub feasible: bool,
}

impl GraspRecord {
    pub fn new(iteration: usize, c: &GraspCandidate, s: &GraspScore, feasible: bool) -> GraspRecord {
        GraspRecord {
            iteration,
            pose: c.pose,
            theta: s.theta,
            u_d: s.u_d,
            g: s.g,
            feasible,
        }
    }

    pub fn write_line<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::oracle::{bake_ground_truth, ObjectKind, SceneSpec};
    use crate::radiance::{softplus, softplus_inv, RadianceGrid};
    use crate::trainer::TrainConfig;
    use proptest::prelude::*;

    fn box_scene() -> SceneSpec {
        SceneSpec::with_object(ObjectKind::Box {
            half_extents: [0.04, 0.03, 0.05],
        })
    }

    fn ensemble_of(grids: Vec<RadianceGrid>) -> Ensemble {
        let seeds = (0..grids.len() as u64).collect();
        Ensemble::from_members(grids, seeds, TrainConfig::default()).unwrap()
    }

    /// Ground-truth box with density scaled up so the surface is resolved within a few millimeters.
    fn box_ensemble(res: usize) -> Ensemble {
        let mut s = box_scene();
        s.supersample = 2;
        let mut g = bake_ground_truth(&s, [res; 3]).unwrap();
        for v in g.raw_mut() {
            v[0] = softplus_inv((8.0 * softplus(v[0])).max(1e-12));
        }
        ensemble_of(vec![g.clone(), g])
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::from_half_fov(32, 32, 0.3).unwrap()
    }

    fn candidate_at(theta: f64) -> GraspCandidate {
        GraspCandidate {
            pose: Pose::IDENTITY,
            approach_dir: Vec3::x(),
            patch: Patch::centered(4, 4, 3, 8, 8),
            theta,
            width: 0.05,
            contact_t: 0.3,
            camera: orbit_pose(&Vec3::zeros(), 0.35, 0.0, 0.0).unwrap(),
            intrinsics: CameraIntrinsics::from_half_fov(8, 8, 0.3).unwrap(),
        }
    }

    #[test]
    fn transparent_model_is_empty() {
        let b = Aabb::cube(Vec3::zeros(), 0.1).unwrap();
        let g = RadianceGrid::filled([6; 3], b, -30.0, [0.0; 3]).unwrap();
        let e = ensemble_of(vec![g.clone(), g]);
        let r = generate_candidates(&e, &intr(), &SampleSpec::deterministic(16), &GraspConfig::default());
        assert!(matches!(r, Err(Error::EmptyModel(_))));
    }

    #[test]
    fn box_faces_give_near_normal_candidates() {
        let e = box_ensemble(40);
        let spec = SampleSpec::deterministic(64);
        let set = generate_candidates(&e, &intr(), &spec, &GraspConfig::default()).unwrap();
        assert!(!set.candidates.is_empty());
        let mut views_seen = std::collections::BTreeSet::new();
        for c in &set.candidates {
            assert!(c.patch.within(32, 32));
            // faces are aligned with the lateral views, so the finite-difference normal opposes the approach
            assert!(c.theta < 0.1, "theta {}", c.theta);
            let axis = if c.approach_dir.x.abs() > 0.5 { 0 } else { 1 };
            let half = [0.04, 0.03][axis];
            assert!((c.position()[axis].abs() - half).abs() < 0.006, "contact {:?}", c.position());
            views_seen.insert(((c.approach_dir.x * 2.0).round() as i64, (c.approach_dir.y * 2.0).round() as i64));
        }
        assert_eq!(views_seen.len(), 4);
        assert!(set.centroid.norm() < 0.01);
    }

    #[test]
    fn loose_limits_are_identity_and_pruning_is_idempotent() {
        let e = box_ensemble(24);
        let spec = SampleSpec::deterministic(32);
        let cfg = GraspConfig::default();
        let set = generate_candidates(&e, &intr(), &spec, &cfg).unwrap();
        let loose = PruneLimits {
            max_center_dist: 1e9,
            max_theta: std::f64::consts::FRAC_PI_2,
            min_opacity: 0.0,
        };
        let m = cfg.depth_margin(&e);
        assert_eq!(prune_candidates(&set.candidates, &set.centroid, &e, &spec, &loose, m).unwrap(), set.candidates);
        let tight = PruneLimits {
            max_center_dist: 0.045,
            max_theta: 0.3,
            min_opacity: 0.9,
        };
        let once = prune_candidates(&set.candidates, &set.centroid, &e, &spec, &tight, m).unwrap();
        let twice = prune_candidates(&once, &set.centroid, &e, &spec, &tight, m).unwrap();
        assert_eq!(once, twice);
        assert!(once.len() < set.candidates.len());
    }

    #[test]
    fn faded_face_candidates_are_removed() {
        let e = box_ensemble(32);
        let spec = SampleSpec::deterministic(48);
        let cfg = GraspConfig::default();
        let set = generate_candidates(&e, &intr(), &spec, &cfg).unwrap();
        let m = cfg.depth_margin(&e);
        let limits = PruneLimits {
            max_center_dist: 1e9,
            max_theta: std::f64::consts::FRAC_PI_2,
            min_opacity: 0.5,
        };
        assert_eq!(prune_candidates(&set.candidates, &set.centroid, &e, &spec, &limits, m).unwrap().len(), set.candidates.len());

        // fade the outer 2 cm of the +x face
        let mut g = e.members[0].clone();
        for iz in 0..32 {
            for iy in 0..32 {
                for ix in 0..32 {
                    if g.voxel_center(ix, iy, iz).x > 0.02 {
                        let i = g.index(ix, iy, iz);
                        g.raw_mut()[i][0] = -30.0;
                    }
                }
            }
        }
        let faded = ensemble_of(vec![g.clone(), g]);
        let kept = prune_candidates(&set.candidates, &set.centroid, &faded, &spec, &limits, m).unwrap();
        let on_face = |c: &GraspCandidate| c.approach_dir.x < -0.9;
        let removed: Vec<_> = set.candidates.iter().filter(|c| !kept.contains(c)).collect();
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|c| on_face(c)));
        assert_eq!(kept.len() + set.candidates.iter().filter(|c| on_face(c)).count(), set.candidates.len());
    }

    #[test]
    fn depth_variance_hand_case_and_identity() {
        let b = Aabb::cube(Vec3::zeros(), 2.0).unwrap();
        // one voxel-wide lattice, so opaque slabs at chosen depths come from per-member constants
        let far = RadianceGrid::filled([2; 3], b, -30.0, [0.0; 3]).unwrap();
        let e = ensemble_of(vec![far.clone(), far]);
        let ray = Ray::clipped(Vec3::new(0.0, 0.0, 3.0), -Vec3::z(), &b);
        assert_eq!(depth_variance(&e, &[ray; 4], &SampleSpec::deterministic(8)).unwrap(), 0.0);

        // M = 2 with depths 1 and 2: mean 1.5, variance 0.25
        assert_eq!(scalar_variance(&[1.0, 2.0]), 0.25);
    }

    #[test]
    fn depth_variance_is_additive_over_patch_partitions() {
        let b = Aabb::cube(Vec3::zeros(), 0.1).unwrap();
        let cfg = TrainConfig {
            members: 2,
            init_scale: 2.0,
            density_init_bias: 3.0,
            ..TrainConfig::default()
        };
        let e = crate::trainer::init_ensemble(&cfg, [5; 3], b, 11).unwrap();
        let cam = orbit_pose(&Vec3::zeros(), 0.35, 0.3, 0.2).unwrap();
        let i = CameraIntrinsics::from_half_fov(6, 6, 0.3).unwrap();
        let rays = crate::geometry::generate_rays(&cam, &i, &b);
        let spec = SampleSpec::deterministic(12);
        let whole = depth_variance(&e, &rays, &spec).unwrap();
        let parts = depth_variance(&e, &rays[..17], &spec).unwrap() + depth_variance(&e, &rays[17..], &spec).unwrap();
        assert!((whole - parts).abs() < 1e-12);
        let swapped = ensemble_of(vec![e.members[1].clone(), e.members[0].clone()]);
        assert_eq!(depth_variance(&swapped, &rays, &spec).unwrap(), whole);
    }

    #[test]
    fn score_hand_cases() {
        assert_eq!(GraspScore::new(0.0, 1.0, 1e-8).g, 1.0);
        assert_eq!(GraspScore::new(0.5, 0.25, 1e-8).g, 2.0);
        let floored = GraspScore::new(0.2, 0.0, 1e-8);
        assert_eq!(floored.u_d, 1e-8);
        assert_eq!(floored.g, 0.8 / 1e-8);
        let s = GraspScore::new(0.3, 2.0, 1e-8);
        assert!(grasp_feasible(&s, s.g).unwrap());
        assert!(!grasp_feasible(&s, s.g * (1.0 + 1e-12)).unwrap());
        assert!(grasp_feasible(&s, 0.0).is_err());
    }

    #[test]
    fn lower_depth_variance_wins() {
        let b = Aabb::cube(Vec3::zeros(), 0.1).unwrap();
        let g = RadianceGrid::filled([4; 3], b, 2.0, [0.0; 3]).unwrap();
        let e = ensemble_of(vec![g.clone(), g]);
        let spec = SampleSpec::deterministic(8);
        assert!(score_and_select(&[], &e, &spec, 1e-8, 0.01).unwrap().is_none());
        // identical members floor U_d for both, so the smaller angle wins
        let (best, s) = score_and_select(&[candidate_at(0.4), candidate_at(0.1)], &e, &spec, 1e-8, 0.01)
            .unwrap()
            .unwrap();
        assert_eq!(best.theta, 0.1);
        assert_eq!(s.u_d, 1e-8);
        assert!(score_and_select(&[candidate_at(0.1)], &e, &spec, 0.0, 0.01).is_err());
    }

    #[test]
    fn record_is_one_json_line() {
        let c = candidate_at(0.2);
        let s = GraspScore::new(0.2, 0.5, 1e-8);
        let mut buf = Vec::new();
        GraspRecord::new(3, &c, &s, true).write_line(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with('\n'));
        let back: GraspRecord = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back.iteration, 3);
        assert_eq!(back.g, s.g);
    }

    #[test]
    fn patches_stay_in_image() {
        for (c, r) in [(0, 0), (31, 31), (0, 31), (15, 2)] {
            let p = Patch::centered(c, r, 9, 32, 32);
            assert!(p.within(32, 32));
            assert_eq!(p.len(), 81);
        }
        assert_eq!(Patch::centered(1, 1, 9, 4, 3).len(), 12);
    }

    proptest! {
        #[test]
        fn score_decreases_in_theta_and_variance(t in 0.0..0.99f64, dt in 1e-6..0.5f64, u in 1e-6..10.0f64, du in 1e-6..10.0f64) {
            let t2 = (t + dt).min(0.999_999);
            prop_assume!(t2 > t);
            prop_assert!(GraspScore::new(t2, u, 1e-8).g < GraspScore::new(t, u, 1e-8).g);
            prop_assert!(GraspScore::new(t, u + du, 1e-8).g < GraspScore::new(t, u, 1e-8).g);
        }
    }
}
