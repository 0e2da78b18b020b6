//! Cost-aware next-best-action search: `L(a) = λΓ(a) − U(p) / Ū`, sampled on a
//! reachable shell, thinned to a diverse subset and refined by pattern search.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orbit_pose, quat_distance, CameraIntrinsics, Pose, Quat, Vec3};
use crate::radiance::SampleSpec;
use crate::trainer::Ensemble;
use crate::uncertainty::{pose_uncertainty, NormalizationContext};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Action {
    Move { target: Pose },
    Flip,
    Capture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            lambda: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.alpha1, self.alpha2, self.alpha3].iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("cost parameters must be finite and nonnegative: {self:?}")))
        }
    }
}

/// `α1 (1 − |⟨q1,q2⟩|) + α2 ‖r1 − r2‖` for moves, `α3` for flips, 0 for captures.
pub fn action_cost(a: &Action, current: &Pose, params: &CostParams) -> f64 {
    match a {
        Action::Move { target } => move_cost(current, target, params),
        Action::Flip => params.alpha3,
        Action::Capture => 0.0,
    }
}

pub fn move_cost(from: &Pose, to: &Pose, params: &CostParams) -> f64 {
    params.alpha1 * (1.0 - quat_distance(&from.q, &to.q)) + params.alpha2 * from.translation_distance(to)
}

/// Cost budget; `spent` never exceeds `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub total: f64,
    pub spent: f64,
}

impl Budget {
    pub fn new(total: f64) -> Result<Budget> {
        if !(total.is_finite() && total >= 0.0) {
            return Err(Error::Config(format!("budget must be finite and nonnegative, got {total}")));
        }
        Ok(Budget { total, spent: 0.0 })
    }

    pub fn remaining(&self) -> f64 {
        self.total - self.spent
    }

    pub fn can_afford(&self, cost: f64) -> bool {
        self.spent + cost <= self.total
    }

    pub fn charge(&self, cost: f64) -> Result<Budget> {
        if !(cost >= 0.0 && cost.is_finite()) {
            return Err(Error::InvalidArgument(format!("action cost must be finite and nonnegative, got {cost}")));
        }
        if !self.can_afford(cost) {
            return Err(Error::BudgetExhausted {
                spent: self.spent,
                cost,
                total: self.total,
            });
        }
        Ok(Budget {
            total: self.total,
            spent: self.spent + cost,
        })
    }
}

/// Camera on a sphere around the workspace center, always looking at it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellPoint {
    pub radius: f64,
    pub azimuth: f64,
    pub elevation: f64,
}

impl ShellPoint {
    pub fn pose(&self, center: &Vec3) -> Result<Pose> {
        orbit_pose(center, self.radius, self.azimuth, self.elevation)
    }

    pub fn of_position(p: &Vec3, center: &Vec3) -> ShellPoint {
        let v = p - center;
        let radius = v.norm();
        ShellPoint {
            radius,
            azimuth: v.y.atan2(v.x).rem_euclid(TAU),
            elevation: (v.z / radius.max(1e-300)).clamp(-1.0, 1.0).asin(),
        }
    }
}

/// Two arms at opposite azimuths, each reaching a shell sector above a minimum elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Reachability {
    pub center: Vec3,
    pub radius_min: f64,
    pub radius_max: f64,
    pub min_elevation: f64,
    pub max_elevation: f64,
    /// Azimuth of the first arm base; the second sits opposite.
    pub arm_azimuth: f64,
    /// Half-width of the azimuth sector each arm reaches; `π/2` covers the full circle.
    pub arm_half_angle: f64,
}

impl Default for Reachability {
    fn default() -> Self {
        Reachability {
            center: Vec3::zeros(),
            radius_min: 0.3,
            radius_max: 0.4,
            min_elevation: 10f64.to_radians(),
            max_elevation: 85f64.to_radians(),
            arm_azimuth: 0.0,
            arm_half_angle: FRAC_PI_2,
        }
    }
}

impl Reachability {
    pub fn validate(&self) -> Result<()> {
        let ok = self.radius_min > 0.0
            && self.radius_max >= self.radius_min
            && self.min_elevation <= self.max_elevation
            && self.max_elevation < FRAC_PI_2
            && self.min_elevation > -FRAC_PI_2
            && (0.0..=FRAC_PI_2).contains(&self.arm_half_angle);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid reachability {self:?}")))
        }
    }

    pub fn reachable_point(&self, s: &ShellPoint) -> bool {
        const TOL: f64 = 1e-9;
        if s.radius < self.radius_min - TOL || s.radius > self.radius_max + TOL {
            return false;
        }
        if s.elevation < self.min_elevation - TOL || s.elevation > self.max_elevation + TOL {
            return false;
        }
        let off = |base: f64| {
            let d = (s.azimuth - base).rem_euclid(TAU);
            d.min(TAU - d)
        };
        off(self.arm_azimuth) <= self.arm_half_angle + TOL || off(self.arm_azimuth + PI) <= self.arm_half_angle + TOL
    }

    /// Position test plus the look-at orientation every candidate carries.
    pub fn reachable(&self, p: &Pose) -> bool {
        let s = ShellPoint::of_position(&p.r, &self.center);
        if !self.reachable_point(&s) {
            return false;
        }
        let to_center = (self.center - p.r).normalize();
        p.forward().dot(&to_center) > 1.0 - 1e-6
    }

    fn clamp(&self, s: ShellPoint) -> ShellPoint {
        ShellPoint {
            radius: s.radius.clamp(self.radius_min, self.radius_max),
            azimuth: s.azimuth.rem_euclid(TAU),
            elevation: s.elevation.clamp(self.min_elevation, self.max_elevation),
        }
    }

    /// Uniform over directions and radii of the reachable region, by rejection.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<ShellPoint> {
        let (z0, z1) = (self.min_elevation.sin(), self.max_elevation.sin());
        for _ in 0..64 {
            let s = ShellPoint {
                radius: if self.radius_max > self.radius_min {
                    rng.random_range(self.radius_min..=self.radius_max)
                } else {
                    self.radius_min
                },
                azimuth: rng.random_range(0.0..TAU),
                elevation: rng.random_range(z0..=z1).asin(),
            };
            if self.reachable_point(&s) {
                return Some(s);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefineMethod {
    PatternSearch,
    /// Central-difference gradient steps with backtracking.
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub n_random: usize,
    pub k_subset: usize,
    pub refine_iters: usize,
    /// Initial refinement steps: radius in meters, then azimuth/elevation in radians.
    pub refine_step: [f64; 2],
    pub refine: RefineMethod,
    pub flip_enabled: bool,
    /// Weight of rotation in the diversity metric; `None` uses the mean shell radius.
    pub diversity_weight: Option<f64>,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            n_random: 256,
            k_subset: 8,
            refine_iters: 10,
            refine_step: [0.02, 0.2],
            refine: RefineMethod::PatternSearch,
            flip_enabled: true,
            diversity_weight: None,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_random >= 1
            && self.k_subset >= 1
            && self.k_subset <= self.n_random
            && self.refine_step.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.diversity_weight.is_none_or(|w| w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid planner config {self:?}")))
        }
    }

    pub fn weight(&self, reach: &Reachability) -> f64 {
        self.diversity_weight.unwrap_or(0.5 * (reach.radius_min + reach.radius_max))
    }
}

/// `d(r, r') + w (1 − |⟨q, q'⟩|)`.
pub fn pose_metric(a: &Pose, b: &Pose, w: f64) -> f64 {
    a.translation_distance(b) + w * (1.0 - quat_distance(&a.q, &b.q))
}

/// Greedy farthest-point subset seeded with the lowest objective; returns indices.
pub fn select_diverse_subset(candidates: &[Pose], objectives: &[f64], k: usize, w: f64) -> Result<Vec<usize>> {
    if k > candidates.len() || objectives.len() != candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot pick {k} of {} candidates with {} objectives",
            candidates.len(),
            objectives.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = (0..candidates.len())
        .min_by(|&a, &b| objectives[a].total_cmp(&objectives[b]))
        .expect("nonempty");
    let mut picked = vec![first];
    let mut dist: Vec<f64> = candidates.iter().map(|c| pose_metric(c, &candidates[first], w)).collect();
    let mut taken = vec![false; candidates.len()];
    taken[first] = true;
    while picked.len() < k {
        let next = (0..candidates.len())
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
            .expect("k <= len");
        taken[next] = true;
        picked.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(pose_metric(&candidates[i], &candidates[next], w));
        }
    }
    Ok(picked)
}

/// Everything the objective needs apart from the action.
#[derive(Clone, Copy)]
pub struct PlanContext<'a> {
    pub ensemble: &'a Ensemble,
    /// Maps world cameras into the frame the ensemble was trained in.
    pub model_from_world: Pose,
    pub norm: &'a NormalizationContext,
    pub current: Pose,
    pub params: CostParams,
    pub intr: &'a CameraIntrinsics,
    pub spec: &'a SampleSpec,
    /// When set, actions the budget cannot pay for are not candidates.
    pub budget: Option<Budget>,
}

impl PlanContext<'_> {
    fn affordable(&self, gamma: f64) -> bool {
        self.budget.is_none_or(|b| b.can_afford(gamma))
    }
}

/// One objective evaluation split into its terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub gamma: f64,
    pub u_normalized: f64,
    pub value: f64,
}

impl PlanContext<'_> {
    /// `λΓ − U(view)/Ū`, with `view` a world camera of the current object state.
    fn evaluate_terms(&self, gamma: f64, view: &Pose) -> Result<Evaluation> {
        if !(self.norm.mean_uncertainty > 0.0) {
            return Err(Error::Degenerate("normalization mean uncertainty is not positive".into()));
        }
        let model_view = self.model_from_world.compose(view);
        let (u, _) = pose_uncertainty(self.ensemble, &model_view, self.intr, self.spec)?;
        let u_normalized = self.norm.normalize(u);
        Ok(Evaluation {
            gamma,
            u_normalized,
            value: self.params.lambda * gamma - u_normalized,
        })
    }
}

/// `L(a) = λΓ(a) − U(p)/Ū` for the pose `p` the action leaves the camera at.
pub fn objective(ctx: &PlanContext, a: &Action) -> Result<Evaluation> {
    let gamma = action_cost(a, &ctx.current, &ctx.params);
    let view = match a {
        Action::Move { target } => *target,
        Action::Flip | Action::Capture => ctx.current,
    };
    ctx.evaluate_terms(gamma, &view)
}

/// Frame change applied by a flip branch: the object is rotated by `flip` in the world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipFrame {
    pub flip: Pose,
}

impl FlipFrame {
    /// 180° about a horizontal axis through `centroid`.
    pub fn about(centroid: &Vec3, axis: &Vec3) -> Result<FlipFrame> {
        let h = Vec3::new(axis.x, axis.y, 0.0);
        if !(h.norm() > 1e-9) {
            return Err(Error::Degenerate("flip axis has no horizontal component".into()));
        }
        Ok(FlipFrame {
            flip: Pose::rotation_about(centroid, Quat::from_axis_angle(&h.normalize(), PI)),
        })
    }

    /// Model-frame camera equivalent to a world camera after the flip.
    pub fn model_view(&self, world_camera: &Pose) -> Pose {
        self.flip.inverse().compose(world_camera)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub branch: &'static str,
    pub candidate: usize,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub gamma: f64,
    pub u_normalized: f64,
    pub l: f64,
    pub selected: bool,
}

impl TraceRow {
    fn new(branch: &'static str, candidate: usize, pose: &Pose, e: &Evaluation) -> TraceRow {
        TraceRow {
            iteration: 0,
            branch,
            candidate,
            rx: pose.r.x,
            ry: pose.r.y,
            rz: pose.r.z,
            qw: pose.q.w,
            qx: pose.q.x,
            qy: pose.q.y,
            qz: pose.q.z,
            gamma: e.gamma,
            u_normalized: e.u_normalized,
            l: e.value,
            selected: false,
        }
    }
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewChoice {
    pub pose: Pose,
    pub eval: Evaluation,
    pub trace: Vec<TraceRow>,
}

/// Search branch: the extra cost and the world-to-model view change it implies.
#[derive(Debug, Clone, Copy)]
struct Branch {
    name: &'static str,
    extra_cost: f64,
    frame: Option<FlipFrame>,
}

impl Branch {
    fn cost(&self, ctx: &PlanContext, reach: &Reachability, s: &ShellPoint) -> Result<f64> {
        Ok(self.extra_cost + move_cost(&ctx.current, &s.pose(&reach.center)?, &ctx.params))
    }

    fn admissible(&self, ctx: &PlanContext, reach: &Reachability, s: &ShellPoint) -> Result<bool> {
        Ok(reach.reachable_point(s) && ctx.affordable(self.cost(ctx, reach, s)?))
    }

    fn evaluate(&self, ctx: &PlanContext, reach: &Reachability, s: &ShellPoint) -> Result<(Pose, Evaluation)> {
        let pose = s.pose(&reach.center)?;
        let gamma = self.extra_cost + move_cost(&ctx.current, &pose, &ctx.params);
        let view = self.frame.map_or(pose, |f| f.model_view(&pose));
        Ok((pose, ctx.evaluate_terms(gamma, &view)?))
    }
}

fn refine(
    ctx: &PlanContext,
    reach: &Reachability,
    cfg: &PlannerConfig,
    branch: &Branch,
    start: ShellPoint,
    start_eval: Evaluation,
) -> Result<(ShellPoint, Evaluation)> {
    let mut best = (start, start_eval);
    let mut step = [cfg.refine_step[0], cfg.refine_step[1], cfg.refine_step[1]];
    let shifted = |s: &ShellPoint, axis: usize, h: f64| {
        let mut v = *s;
        match axis {
            0 => v.radius += h,
            1 => v.azimuth += h,
            _ => v.elevation += h,
        }
        reach.clamp(v)
    };
    for _ in 0..cfg.refine_iters {
        let mut moved = false;
        match cfg.refine {
            RefineMethod::PatternSearch => {
                for axis in 0..3 {
                    for sign in [1.0, -1.0] {
                        let s = shifted(&best.0, axis, sign * step[axis]);
                        if !branch.admissible(ctx, reach, &s)? {
                            continue;
                        }
                        let (_, e) = branch.evaluate(ctx, reach, &s)?;
                        if e.value < best.1.value {
                            best = (s, e);
                            moved = true;
                            break;
                        }
                    }
                }
            }
            RefineMethod::FiniteDifference => {
                let mut g = [0.0; 3];
                for axis in 0..3 {
                    let h = 0.25 * step[axis];
                    let p = shifted(&best.0, axis, h);
                    let m = shifted(&best.0, axis, -h);
                    let fp = branch.evaluate(ctx, reach, &p)?.1.value;
                    let fm = branch.evaluate(ctx, reach, &m)?.1.value;
                    g[axis] = (fp - fm) / (2.0 * h);
                }
                let gn = g.iter().zip(&step).map(|(gi, si)| (gi * si).powi(2)).sum::<f64>().sqrt();
                if gn > 0.0 {
                    let mut scale = 1.0;
                    for _ in 0..4 {
                        let mut s = best.0;
                        s.radius -= scale * g[0] * step[0] * step[0] / gn;
                        s.azimuth -= scale * g[1] * step[1] * step[1] / gn;
                        s.elevation -= scale * g[2] * step[2] * step[2] / gn;
                        let s = reach.clamp(s);
                        if branch.admissible(ctx, reach, &s)? {
                            let (_, e) = branch.evaluate(ctx, reach, &s)?;
                            if e.value < best.1.value {
                                best = (s, e);
                                moved = true;
                                break;
                            }
                        }
                        scale *= 0.5;
                    }
                }
            }
        }
        if !moved {
            for s in step.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    Ok(best)
}

fn search(
    ctx: &PlanContext,
    reach: &Reachability,
    cfg: &PlannerConfig,
    branch: Branch,
) -> Result<ViewChoice> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reachable: Vec<ShellPoint> = (0..cfg.n_random).filter_map(|_| reach.sample(&mut rng)).collect();
    if reachable.is_empty() {
        return Err(Error::NoReachablePose);
    }
    let mut points = Vec::with_capacity(reachable.len());
    let mut cheapest = f64::INFINITY;
    for s in reachable {
        let c = branch.cost(ctx, reach, &s)?;
        cheapest = cheapest.min(c);
        if ctx.affordable(c) {
            points.push(s);
        }
    }
    if points.is_empty() {
        let b = ctx.budget.expect("only a budget rejects reachable points");
        return Err(Error::BudgetExhausted {
            spent: b.spent,
            cost: cheapest,
            total: b.total,
        });
    }
    let evals = points
        .par_iter()
        .map(|s| branch.evaluate(ctx, reach, s))
        .collect::<Result<Vec<_>>>()?;
    let poses: Vec<Pose> = evals.iter().map(|e| e.0).collect();
    let values: Vec<f64> = evals.iter().map(|e| e.1.value).collect();
    let k = cfg.k_subset.min(points.len());
    let subset = select_diverse_subset(&poses, &values, k, cfg.weight(reach))?;
    let refined = subset
        .par_iter()
        .map(|&i| refine(ctx, reach, cfg, &branch, points[i], evals[i].1))
        .collect::<Result<Vec<_>>>()?;

    let mut trace: Vec<TraceRow> = evals
        .iter()
        .enumerate()
        .map(|(i, (p, e))| TraceRow::new(branch.name, i, p, e))
        .collect();
    let mut best: Option<(Pose, Evaluation)> = None;
    let mut best_row = 0;
    for (j, (s, e)) in refined.iter().enumerate() {
        let pose = s.pose(&reach.center)?;
        trace.push(TraceRow::new(branch.name, points.len() + j, &pose, e));
        if best.is_none_or(|b| e.value < b.1.value) {
            best = Some((pose, *e));
            best_row = trace.len() - 1;
        }
    }
    trace[best_row].selected = true;
    let (pose, eval) = best.expect("subset is nonempty");
    Ok(ViewChoice { pose, eval, trace })
}

/// Level 1 samples the reachable shell; level 2 refines a diverse subset locally.
pub fn next_best_view(ctx: &PlanContext, reach: &Reachability, cfg: &PlannerConfig) -> Result<ViewChoice> {
    search(
        ctx,
        reach,
        cfg,
        Branch {
            name: "move",
            extra_cost: 0.0,
            frame: None,
        },
    )
}

/// Best view after a flip, paying `α3` on top of the move.
pub fn next_best_view_after_flip(
    ctx: &PlanContext,
    reach: &Reachability,
    cfg: &PlannerConfig,
    frame: FlipFrame,
) -> Result<ViewChoice> {
    search(
        ctx,
        reach,
        cfg,
        Branch {
            name: "flip",
            extra_cost: ctx.params.alpha3,
            frame: Some(frame),
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Plan {
    Move { target: Pose },
    FlipThenMove { flip: Pose, target: Pose },
}

impl Plan {
    pub fn target(&self) -> Pose {
        match self {
            Plan::Move { target } | Plan::FlipThenMove { target, .. } => *target,
        }
    }

    pub fn flips(&self) -> bool {
        matches!(self, Plan::FlipThenMove { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanDecision {
    pub plan: Plan,
    pub eval: Evaluation,
    pub trace: Vec<TraceRow>,
}

/// Re-evaluates a plan from scratch; the search must agree with this.
pub fn evaluate_plan(ctx: &PlanContext, plan: &Plan) -> Result<Evaluation> {
    match plan {
        Plan::Move { target } => objective(ctx, &Action::Move { target: *target }),
        Plan::FlipThenMove { flip, target } => {
            let gamma = ctx.params.alpha3 + move_cost(&ctx.current, target, &ctx.params);
            ctx.evaluate_terms(gamma, &FlipFrame { flip: *flip }.model_view(target))
        }
    }
}

/// Moves without a flip versus flip-then-move; the flip branch runs only when enabled and a grasp is available.
pub fn plan_with_flip(
    ctx: &PlanContext,
    reach: &Reachability,
    cfg: &PlannerConfig,
    flip: Option<FlipFrame>,
) -> Result<PlanDecision> {
    let stay = next_best_view(ctx, reach, cfg)?;
    let Some(frame) = flip.filter(|_| cfg.flip_enabled) else {
        return Ok(PlanDecision {
            plan: Plan::Move { target: stay.pose },
            eval: stay.eval,
            trace: stay.trace,
        });
    };
    let flipped = match next_best_view_after_flip(ctx, reach, cfg, frame) {
        Ok(v) => v,
        Err(Error::BudgetExhausted { .. }) => {
            return Ok(PlanDecision {
                plan: Plan::Move { target: stay.pose },
                eval: stay.eval,
                trace: stay.trace,
            })
        }
        Err(e) => return Err(e),
    };
    let mut trace = stay.trace;
    let flip_wins = flipped.eval.value < stay.eval.value;
    if flip_wins {
        for r in trace.iter_mut() {
            r.selected = false;
        }
    }
    let offset = trace.len();
    trace.extend(flipped.trace.into_iter().map(|mut r| {
        r.candidate += offset;
        r.selected &= flip_wins;
        r
    }));
    Ok(if flip_wins {
        PlanDecision {
            plan: Plan::FlipThenMove {
                flip: frame.flip,
                target: flipped.pose,
            },
            eval: flipped.eval,
            trace,
        }
    } else {
        PlanDecision {
            plan: Plan::Move { target: stay.pose },
            eval: stay.eval,
            trace,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Aabb};
    use crate::radiance::RadianceGrid;
    use crate::trainer::{init_ensemble, TrainConfig};
    use proptest::prelude::*;

    fn reach() -> Reachability {
        Reachability::default()
    }

    fn random_ensemble(seed: u64) -> Ensemble {
        let cfg = TrainConfig {
            members: 3,
            init_scale: 3.0,
            density_init_bias: 2.0,
            color_init_scale: 2.0,
            ..TrainConfig::default()
        };
        init_ensemble(&cfg, [6; 3], Aabb::cube(Vec3::zeros(), 0.1).unwrap(), seed).unwrap()
    }

    fn norm_of(mean: f64) -> NormalizationContext {
        NormalizationContext {
            mean_uncertainty: mean,
            n_probe_poses: 8,
            probe_seed: 0,
            shell: crate::uncertainty::ProbeShell {
                center: Vec3::zeros(),
                radius_min: 0.3,
                radius_max: 0.4,
            },
        }
    }

    fn small_cfg() -> PlannerConfig {
        PlannerConfig {
            n_random: 24,
            k_subset: 4,
            refine_iters: 6,
            ..PlannerConfig::default()
        }
    }

    struct Fixture {
        e: Ensemble,
        norm: NormalizationContext,
        intr: CameraIntrinsics,
        spec: SampleSpec,
        current: Pose,
    }

    impl Fixture {
        fn new(seed: u64) -> Fixture {
            Fixture {
                e: random_ensemble(seed),
                norm: norm_of(1.0),
                intr: CameraIntrinsics::from_half_fov(6, 6, 0.3).unwrap(),
                spec: SampleSpec::deterministic(8),
                current: orbit_pose(&Vec3::zeros(), 0.35, 0.5, 0.4).unwrap(),
            }
        }

        fn ctx(&self, params: CostParams) -> PlanContext<'_> {
            PlanContext {
                ensemble: &self.e,
                model_from_world: Pose::IDENTITY,
                norm: &self.norm,
                current: self.current,
                params,
                intr: &self.intr,
                spec: &self.spec,
                budget: None,
            }
        }
    }

    #[test]
    fn cost_hand_cases() {
        let p = CostParams::default();
        let a = orbit_pose(&Vec3::zeros(), 0.35, 0.2, 0.3).unwrap();
        assert_eq!(action_cost(&Action::Move { target: a }, &a, &p), 0.0);
        let p3 = CostParams {
            alpha3: 0.7,
            ..p
        };
        assert_eq!(action_cost(&Action::Flip, &a, &p3), 0.7);
        assert_eq!(action_cost(&Action::Capture, &a, &p3), 0.0);
        let from = Pose::IDENTITY;
        let to = Pose::new(Vec3::new(0.2, 0.0, 0.0), Quat::from_axis_angle(&Vec3::z(), PI));
        assert!((action_cost(&Action::Move { target: to }, &from, &p) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn budget_accounting() {
        let mut b = Budget::new(3.0).unwrap();
        for _ in 0..3 {
            b = b.charge(1.0).unwrap();
        }
        assert_eq!(b.spent, 3.0);
        assert!(matches!(b.charge(1.0), Err(Error::BudgetExhausted { .. })));
        assert_eq!(b.charge(0.0).unwrap(), b);
        let two = Budget::new(2.0).unwrap().charge(1.5).unwrap();
        assert!(two.charge(0.6).is_err());
        assert!(two.charge(0.5).is_ok());
        assert!(Budget::new(1.0).unwrap().charge(-0.1).is_err());
    }

    #[test]
    fn reachability_sectors() {
        let r = reach();
        assert!(r.reachable(&orbit_pose(&Vec3::zeros(), 0.35, 1.0, 0.5).unwrap()));
        assert!(!r.reachable(&orbit_pose(&Vec3::zeros(), 0.35, 1.0, -0.3).unwrap()));
        assert!(!r.reachable(&orbit_pose(&Vec3::zeros(), 0.5, 1.0, 0.5).unwrap()));
        let looking_away = look_at(&Vec3::new(0.35, 0.0, 0.1), &Vec3::new(1.0, 0.0, 0.1), &Vec3::z()).unwrap();
        assert!(!r.reachable(&looking_away));
        let narrow = Reachability {
            arm_half_angle: 0.5,
            ..r
        };
        assert!(narrow.reachable_point(&ShellPoint { radius: 0.35, azimuth: 0.4, elevation: 0.5 }));
        assert!(narrow.reachable_point(&ShellPoint { radius: 0.35, azimuth: PI - 0.4, elevation: 0.5 }));
        assert!(!narrow.reachable_point(&ShellPoint { radius: 0.35, azimuth: FRAC_PI_2, elevation: 0.5 }));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let s = narrow.sample(&mut rng).unwrap();
            assert!(narrow.reachable(&s.pose(&Vec3::zeros()).unwrap()));
        }
    }

    #[test]
    fn diverse_subset_cases() {
        let line: Vec<Pose> = [0.0, 0.1, 0.2].iter().map(|x| Pose::from_translation(Vec3::new(*x, 0.0, 0.0))).collect();
        // seed is the middle (lowest objective); the next pick is one extreme, then the other
        let picked = select_diverse_subset(&line, &[1.0, 0.0, 2.0], 2, 0.35).unwrap();
        assert_eq!(picked[0], 1);
        let from_end = select_diverse_subset(&line, &[0.0, 1.0, 2.0], 2, 0.35).unwrap();
        assert_eq!(from_end, vec![0, 2]);
        let mut all = select_diverse_subset(&line, &[0.0, 1.0, 2.0], 3, 0.35).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        let dup = vec![line[0], line[0], line[2], line[2]];
        let p = select_diverse_subset(&dup, &[0.0, 0.0, 1.0, 1.0], 2, 0.35).unwrap();
        assert_ne!(dup[p[0]], dup[p[1]]);
        assert!(select_diverse_subset(&line, &[0.0; 3], 4, 0.35).is_err());
    }

    #[test]
    fn objective_terms() {
        let f = Fixture::new(1);
        let target = orbit_pose(&Vec3::zeros(), 0.33, 2.0, 0.6).unwrap();
        let info = objective(&f.ctx(CostParams { lambda: 0.0, ..CostParams::default() }), &Action::Move { target }).unwrap();
        assert_eq!(info.value, -info.u_normalized);
        assert!(info.u_normalized > 0.0);

        let ctx = f.ctx(CostParams::default());
        let other = PlanContext {
            current: orbit_pose(&Vec3::zeros(), 0.38, 4.0, 0.2).unwrap(),
            ..ctx
        };
        let a = objective(&ctx, &Action::Move { target }).unwrap();
        let b = objective(&other, &Action::Move { target }).unwrap();
        assert_eq!(a.u_normalized, b.u_normalized);
        assert!(((a.value - b.value) - (a.gamma - b.gamma)).abs() < 1e-12);
    }

    #[test]
    fn zero_uncertainty_picks_cheapest_candidate() {
        let b = Aabb::cube(Vec3::zeros(), 0.1).unwrap();
        let g = RadianceGrid::filled([4; 3], b, 1.0, [0.3, 0.1, -0.2]).unwrap();
        let e = Ensemble::from_members(vec![g.clone(), g], vec![0, 1], TrainConfig::default()).unwrap();
        let mut f = Fixture::new(0);
        f.e = e;
        let ctx = f.ctx(CostParams::default());
        let cfg = PlannerConfig {
            refine_iters: 0,
            ..small_cfg()
        };
        let out = next_best_view(&ctx, &reach(), &cfg).unwrap();
        assert_eq!(out.eval.u_normalized, 0.0);
        let min_gamma = out.trace.iter().map(|r| r.gamma).fold(f64::INFINITY, f64::min);
        assert_eq!(out.eval.gamma, min_gamma);
    }

    #[test]
    fn unreachable_everywhere_errors() {
        let f = Fixture::new(2);
        let never = Reachability {
            min_elevation: 1.0,
            max_elevation: 1.0,
            arm_half_angle: 0.0,
            ..reach()
        };
        // a zero-width azimuth sector admits no samples
        assert!(matches!(
            next_best_view(&f.ctx(CostParams::default()), &never, &small_cfg()),
            Err(Error::NoReachablePose)
        ));
    }

    #[test]
    fn returned_value_matches_reevaluation_and_refinement_is_monotone() {
        let f = Fixture::new(3);
        let ctx = f.ctx(CostParams::default());
        let cfg = small_cfg();
        let out = next_best_view(&ctx, &reach(), &cfg).unwrap();
        let again = objective(&ctx, &Action::Move { target: out.pose }).unwrap();
        assert!((again.value - out.eval.value).abs() < 1e-9);
        let level1_best = out.trace[..cfg.n_random].iter().map(|r| r.l).fold(f64::INFINITY, f64::min);
        assert!(out.eval.value <= level1_best);
        assert_eq!(out.trace.iter().filter(|r| r.selected).count(), 1);

        let fd = PlannerConfig {
            refine: RefineMethod::FiniteDifference,
            ..cfg
        };
        let out_fd = next_best_view(&ctx, &reach(), &fd).unwrap();
        assert!(out_fd.eval.value <= level1_best);
    }

    #[test]
    fn flip_gating() {
        let f = Fixture::new(4);
        let ctx = f.ctx(CostParams::default());
        let cfg = small_cfg();
        let frame = FlipFrame::about(&Vec3::zeros(), &Vec3::x()).unwrap();
        let plain = next_best_view(&ctx, &reach(), &cfg).unwrap();
        let gated = plan_with_flip(&ctx, &reach(), &cfg, None).unwrap();
        assert_eq!(gated.plan, Plan::Move { target: plain.pose });
        let disabled = PlannerConfig {
            flip_enabled: false,
            ..cfg
        };
        assert_eq!(plan_with_flip(&ctx, &reach(), &disabled, Some(frame)).unwrap().plan, gated.plan);

        let huge = f.ctx(CostParams {
            alpha3: 1e9,
            ..CostParams::default()
        });
        assert!(!plan_with_flip(&huge, &reach(), &cfg, Some(frame)).unwrap().plan.flips());

        let d = plan_with_flip(&ctx, &reach(), &cfg, Some(frame)).unwrap();
        let re = evaluate_plan(&ctx, &d.plan).unwrap();
        assert!((re.value - d.eval.value).abs() < 1e-9);
    }

    #[test]
    fn flip_frame_views_the_underside() {
        let frame = FlipFrame::about(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.3)).unwrap();
        let above = orbit_pose(&Vec3::zeros(), 0.35, 0.0, 1.2).unwrap();
        let v = frame.model_view(&above);
        assert!(v.r.z < -0.3);
        assert!(FlipFrame::about(&Vec3::zeros(), &Vec3::z()).is_err());
    }

    #[test]
    fn trace_csv_has_header() {
        let f = Fixture::new(5);
        let out = next_best_view(&f.ctx(CostParams::default()), &reach(), &small_cfg()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&out.trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,branch,candidate,rx,ry,rz,qw,qx,qy,qz,gamma,u_normalized,l,selected"));
        assert_eq!(text.lines().count(), out.trace.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn argmin_is_scale_invariant(seed in 0u64..1000, c in 0.1..10.0f64) {
            let mut f = Fixture::new(seed);
            let cfg = PlannerConfig { n_random: 12, k_subset: 3, refine_iters: 3, seed, ..PlannerConfig::default() };
            let base = next_best_view(&f.ctx(CostParams::default()), &reach(), &cfg).unwrap();
            // scaling λ by c and Ū by 1/c scales every value by c
            f.norm = norm_of(1.0 / c);
            let scaled = next_best_view(&f.ctx(CostParams { lambda: c, ..CostParams::default() }), &reach(), &cfg).unwrap();
            prop_assert_eq!(base.pose, scaled.pose);
        }

        #[test]
        fn pose_metric_is_symmetric(a in 0.0..TAU, b in 0.0..TAU, e1 in 0.2..1.2f64, e2 in 0.2..1.2f64) {
            let p = orbit_pose(&Vec3::zeros(), 0.35, a, e1).unwrap();
            let q = orbit_pose(&Vec3::zeros(), 0.31, b, e2).unwrap();
            prop_assert!((pose_metric(&p, &q, 0.35) - pose_metric(&q, &p, 0.35)).abs() < 1e-12);
            prop_assert!(pose_metric(&p, &p, 0.35).abs() < 1e-12);
        }
    }
}
