use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orbit_pose, spherical_point, CameraIntrinsics, Pose, Vec3};
use crate::grasping::{evaluate_grasps, GraspDecision, GraspRecord};
use crate::harness::config::{Mode, RunConfig};
use crate::harness::vault::{Purpose, TruthAudit, TruthVault};
use crate::metrics::{ensemble_mesh, mesh_fscore, psnr};
use crate::oracle::{surface_points, validation_poses, Oracle};
use crate::planner::{
    evaluate_plan, move_cost, plan_with_flip, pose_metric, write_trace_csv, Budget, FlipFrame, Plan, PlanContext, ShellPoint,
    TraceRow,
};
use crate::radiance::write_grid;
use crate::radiance::{Rgb, SampleSpec};
use crate::repose::{motion_errors, reacquire_pose, SsdObjective};
use crate::trainer::{fit, init_ensemble, render_mean, Ensemble, TrainReport, ViewSample};
use crate::uncertainty::{build_normalization, pose_uncertainty, NormalizationContext};
use crate::imaging::write_rgb_png;

/// Independent stream for one purpose of one run.
pub fn sub_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_PROBE: u64 = 2;
const STREAM_VALIDATION: u64 = 3;
const STREAM_SURFACE: u64 = 4;
const STREAM_FLIP: u64 = 5;
const STREAM_PLAN: u64 = 1 << 16;
const STREAM_BASELINE: u64 = 2 << 16;

/// One row of `iterations.csv`. Row 0 is the bootstrap; metrics are measured after each row's action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub action: String,
    pub gamma: f64,
    pub u_normalized: f64,
    pub cumulative_cost: f64,
    pub psnr: f64,
    pub psnr_bottom: f64,
    pub fscore: f64,
    pub flip: bool,
    pub grasp_score: Option<f64>,
    pub repose_accepted: Option<bool>,
    pub repose_translation_error: Option<f64>,
    pub repose_rotation_error: Option<f64>,
    pub views: usize,
    pub train_loss: f64,
    pub target_x: f64,
    pub target_y: f64,
    pub target_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub budget_total: f64,
    pub budget_spent: f64,
    pub final_psnr: f64,
    pub final_psnr_bottom: f64,
    pub final_fscore: f64,
    pub flipped: bool,
    pub flip_iteration: Option<usize>,
    pub repose_accepted: Option<bool>,
    pub repose_translation_error: Option<f64>,
    pub repose_rotation_error: Option<f64>,
    pub truth_reads_for_metrics: usize,
    pub truth_reads_for_control: usize,
}

impl RunSummary {
    /// Ended on the budget before reaching the iteration cap.
    pub fn exhausted_early(&self, max_iterations: usize) -> bool {
        self.stop_reason == StopReason::BudgetExhausted && self.iterations < max_iterations
    }

    pub fn load(run_dir: &Path) -> Result<RunSummary> {
        let f = File::open(run_dir.join("summary.json"))?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Oracle-rendered references in the model frame, fixed for the whole run.
struct Evaluator {
    full: Vec<ViewSample>,
    bottom: Vec<ViewSample>,
    surface: Vec<Vec3>,
    intr: CameraIntrinsics,
    fscore_threshold: f64,
    mesh_iso: f64,
}

#[derive(Debug, Clone, Copy)]
struct Scores {
    psnr: f64,
    psnr_bottom: f64,
    fscore: f64,
}

/// Lowest and highest elevation of the underside validation cameras.
pub const BOTTOM_ELEVATION: [f64; 2] = [-80.0 * PI / 180.0, -45.0 * PI / 180.0];

/// Validation cameras looking up at the underside: the full-sphere azimuths, with
/// elevation remapped monotonically into [`BOTTOM_ELEVATION`].
pub fn bottom_validation_poses(scene: &crate::oracle::SceneSpec, n: usize, seed: u64) -> Result<Vec<Pose>> {
    let [lo, hi] = BOTTOM_ELEVATION;
    validation_poses(scene, n, seed)?
        .iter()
        .map(|p| {
            let s = ShellPoint::of_position(&p.r, &scene.workspace_center);
            let t = (s.elevation + FRAC_PI_2) / PI;
            orbit_pose(&scene.workspace_center, s.radius, s.azimuth, hi + t * (lo - hi))
        })
        .collect()
}

impl Evaluator {
    fn new(cfg: &RunConfig, vault: &TruthVault) -> Result<Evaluator> {
        let scene = vault.initial_scene(Purpose::Metrics).clone();
        let reference = Oracle::new(scene.clone(), [cfg.gt_resolution; 3])?;
        let intr = cfg.capture_intrinsics()?;
        let spec = SampleSpec::deterministic(cfg.capture_samples);
        let vseed = sub_seed(cfg.seed, STREAM_VALIDATION);
        let capture_all = |poses: Vec<Pose>| -> Result<Vec<ViewSample>> {
            poses.iter().map(|p| reference.capture(p, &intr, &spec)).collect()
        };
        Ok(Evaluator {
            full: capture_all(validation_poses(&scene, cfg.validation_views, vseed)?)?,
            bottom: capture_all(bottom_validation_poses(&scene, cfg.validation_views, vseed)?)?,
            surface: surface_points(&scene, cfg.surface_points, sub_seed(cfg.seed, STREAM_SURFACE))?,
            intr,
            fscore_threshold: cfg.fscore_threshold,
            mesh_iso: cfg.mesh_iso,
        })
    }

    fn mean_psnr(&self, e: &Ensemble, views: &[ViewSample]) -> Result<f64> {
        let spec = e.config.render_spec();
        let mut sum = 0.0;
        for v in views {
            let out = render_mean(e, &v.pose, &self.intr, &spec)?;
            sum += psnr(&out.color, &v.image)?;
        }
        Ok(sum / views.len() as f64)
    }

    fn score(&self, e: &Ensemble) -> Result<Scores> {
        let mesh = ensemble_mesh(e, self.mesh_iso);
        Ok(Scores {
            psnr: self.mean_psnr(e, &self.full)?,
            psnr_bottom: self.mean_psnr(e, &self.bottom)?,
            fscore: mesh_fscore(&mesh, &self.surface, self.fscore_threshold)?.fscore,
        })
    }
}

/// Fixed workspace cameras on a ring at the bootstrap elevation.
pub fn ring_cameras(cfg: &RunConfig, n: usize, phase: f64) -> Result<Vec<Pose>> {
    let r = 0.5 * (cfg.reach.radius_min + cfg.reach.radius_max);
    (0..n)
        .map(|k| {
            let az = phase + std::f64::consts::TAU * k as f64 / n as f64;
            orbit_pose(&cfg.reach.center, r, az, cfg.bootstrap_elevation)
        })
        .collect()
}

/// Files written incrementally so an aborted run keeps its partial record.
struct RunFiles {
    dir: PathBuf,
    iterations: csv::Writer<BufWriter<File>>,
    grasps: BufWriter<File>,
    trace: Vec<TraceRow>,
    losses: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<RunFiles> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.resolved().to_toml()?)?;
        let mut losses = BufWriter::new(File::create(dir.join("train_loss.csv"))?);
        writeln!(losses, "iteration,step,member,loss")?;
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            iterations: csv::Writer::from_writer(BufWriter::new(File::create(dir.join("iterations.csv"))?)),
            grasps: BufWriter::new(File::create(dir.join("grasps.jsonl"))?),
            trace: Vec::new(),
            losses,
        })
    }

    fn log(&mut self, row: &IterationLog) -> Result<()> {
        self.iterations.serialize(row)?;
        self.iterations.flush()?;
        Ok(())
    }

    fn losses(&mut self, iteration: usize, report: &TrainReport) -> Result<()> {
        for (m, curve) in report.losses.iter().enumerate() {
            for (s, l) in curve.iter().enumerate() {
                writeln!(self.losses, "{iteration},{s},{m},{l}")?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.iterations.flush()?;
        self.grasps.flush()?;
        self.losses.flush()?;
        write_trace_csv(&self.trace, BufWriter::new(File::create(self.dir.join("planner_trace.csv"))?))?;
        Ok(())
    }
}

/// Mutable state of the loop.
struct Loop<'c> {
    cfg: &'c RunConfig,
    oracle: Oracle,
    vault: TruthVault,
    dataset: Vec<ViewSample>,
    ensemble: Option<Ensemble>,
    /// Estimated object motion since the start: world = estimate ∘ model.
    estimate: Pose,
    current: Pose,
    budget: Budget,
    flipped: bool,
    /// World point the next flip rotates about.
    flip_pivot: Vec3,
    capture_intr: CameraIntrinsics,
    capture_spec: SampleSpec,
}

struct Outcome {
    gamma: f64,
    u_normalized: f64,
    flip: bool,
    repose: Option<(Option<bool>, f64, f64)>,
    target: Pose,
    action: &'static str,
}

impl<'c> Loop<'c> {
    fn new(cfg: &'c RunConfig) -> Result<Loop<'c>> {
        let oracle = Oracle::new(cfg.scene.clone(), [cfg.gt_resolution; 3])?;
        Ok(Loop {
            cfg,
            vault: TruthVault::new(cfg.scene.clone()),
            oracle,
            dataset: Vec::new(),
            ensemble: None,
            estimate: Pose::IDENTITY,
            current: Pose::IDENTITY,
            budget: Budget::new(cfg.budget_total())?,
            flipped: false,
            flip_pivot: cfg.reach.center,
            capture_intr: cfg.capture_intrinsics()?,
            capture_spec: SampleSpec::deterministic(cfg.capture_samples),
        })
    }

    fn capture_into_dataset(&mut self, world_camera: &Pose) -> Result<ViewSample> {
        let v = self.oracle.capture(world_camera, &self.capture_intr, &self.capture_spec)?;
        self.dataset.push(v.with_pose(self.estimate.inverse().compose(world_camera)));
        Ok(v)
    }

    fn fit(&mut self) -> Result<TrainReport> {
        let cfg = self.cfg;
        let fresh = || {
            init_ensemble(
                &cfg.train,
                [cfg.model_resolution; 3],
                cfg.scene.bounds(),
                sub_seed(cfg.seed, STREAM_INIT),
            )
        };
        let mut e = match self.ensemble.take() {
            Some(e) if cfg.train.warm_start => e,
            _ => fresh()?,
        };
        let report = fit(&mut e, &self.dataset)?;
        self.ensemble = Some(e);
        Ok(report)
    }

    fn ensemble(&self) -> &Ensemble {
        self.ensemble.as_ref().expect("fitted before use")
    }

    fn grasp(&self, spec: &SampleSpec) -> Result<Option<GraspDecision>> {
        if !self.cfg.mode.flips() || !self.cfg.planner.flip_enabled || self.flipped {
            return Ok(None);
        }
        match evaluate_grasps(self.ensemble(), &self.capture_intr, spec, &self.cfg.grasp) {
            Ok(d) => Ok(Some(d)),
            Err(Error::EmptyModel(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Flip about the selected grasp's closing axis through the cloud centroid, in world coordinates.
    fn flip_frame(&self, d: &GraspDecision) -> Result<Option<FlipFrame>> {
        let Some((best, score)) = &d.best else {
            return Ok(None);
        };
        if !crate::grasping::grasp_feasible(score, self.cfg.grasp_threshold)? {
            return Ok(None);
        }
        let centroid = self.estimate.transform_point(&d.centroid);
        let closing = self.estimate.transform_vector(&best.pose.q.rotate(&Vec3::x()));
        let axis = if Vec3::new(closing.x, closing.y, 0.0).norm() > 0.1 { closing } else { Vec3::x() };
        Ok(Some(FlipFrame::about(&centroid, &axis)?))
    }

    /// Baseline view for this iteration among the poses the budget can still pay for.
    fn baseline_target(&self, k: usize, frame: Option<&FlipFrame>) -> Result<Option<Pose>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, STREAM_BASELINE + k as u64));
        let reach = &self.cfg.reach;
        let extra = if frame.is_some() { self.cfg.cost.alpha3 } else { 0.0 };
        let mut affordable = Vec::new();
        for _ in 0..self.cfg.planner.n_random {
            let Some(s) = reach.sample(&mut rng) else { continue };
            let p = s.pose(&reach.center)?;
            if self.budget.can_afford(extra + move_cost(&self.current, &p, &self.cfg.cost)) {
                affordable.push(p);
            }
        }
        if self.cfg.mode == Mode::RandomView {
            return Ok(affordable.first().copied());
        }
        let w = self.cfg.planner.weight(reach);
        let world_model = frame.map_or(self.estimate, |f| f.flip.compose(&self.estimate));
        let to_model = world_model.inverse();
        let mut best: Option<(f64, Pose)> = None;
        for p in affordable {
            let m = to_model.compose(&p);
            let score: f64 = self.dataset.iter().map(|v| pose_metric(&m, &v.pose, w)).sum();
            if best.is_none_or(|b| score > b.0) {
                best = Some((score, p));
            }
        }
        Ok(best.map(|b| b.1))
    }

    /// On rejection, captures one extra view between the ring cameras and retries once.
    fn repose(&mut self, views: &mut Vec<ViewSample>, prior: Pose, pivot: Vec3) -> Result<Option<Pose>> {
        let spec = self.ensemble().config.render_spec();
        let attempt = |views: &[ViewSample]| -> Result<Option<Pose>> {
            let obj = SsdObjective::new(views, self.ensemble(), spec, prior, pivot, &self.cfg.repose)?;
            match reacquire_pose(&obj, &self.cfg.repose) {
                Ok(out) => Ok(Some(out.motion)),
                Err(Error::ReacquisitionRejected { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        };
        if let Some(m) = attempt(views)? {
            return Ok(Some(m));
        }
        let n = self.cfg.post_flip_views;
        let extra = ring_cameras(self.cfg, n, PI / n as f64)?[0];
        views.push(self.oracle.capture(&extra, &self.capture_intr, &self.capture_spec)?);
        attempt(views)
    }

    fn execute(&mut self, plan: &Plan, eval_gamma: f64, eval_u: f64) -> Result<Outcome> {
        let target = plan.target();
        match *plan {
            Plan::Move { .. } => {
                self.capture_into_dataset(&target)?;
                self.current = target;
                Ok(Outcome {
                    gamma: eval_gamma,
                    u_normalized: eval_u,
                    flip: false,
                    repose: None,
                    target,
                    action: "move",
                })
            }
            Plan::FlipThenMove { flip, .. } => {
                let executed = self.oracle.flip(&flip, &self.cfg.flip_noise, sub_seed(self.cfg.seed, STREAM_FLIP))?;
                self.vault.record_motion(&executed);
                self.flipped = true;
                let prior = flip.compose(&self.estimate);
                let ring = ring_cameras(self.cfg, self.cfg.post_flip_views, 0.0)?;
                let mut views = ring
                    .iter()
                    .map(|p| self.oracle.capture(p, &self.capture_intr, &self.capture_spec))
                    .collect::<Result<Vec<_>>>()?;
                views.push(self.oracle.capture(&target, &self.capture_intr, &self.capture_spec)?);
                let (fuse, accepted) = if self.cfg.repose_enabled {
                    match self.repose(&mut views, prior, self.flip_pivot)? {
                        Some(m) => {
                            self.estimate = m;
                            (true, Some(true))
                        }
                        None => {
                            self.estimate = prior;
                            (false, Some(false))
                        }
                    }
                } else {
                    (true, None)
                };
                let truth = self.vault.true_motion(Purpose::Metrics);
                let reference = truth.transform_point(&self.vault.true_centroid(Purpose::Metrics));
                let (te, re) = motion_errors(&self.estimate, &truth, &reference);
                if fuse {
                    let to_model = self.estimate.inverse();
                    for v in &views {
                        let p = to_model.compose(&v.pose);
                        self.dataset.push(v.with_pose(p));
                    }
                }
                self.current = target;
                Ok(Outcome {
                    gamma: eval_gamma,
                    u_normalized: eval_u,
                    flip: true,
                    repose: Some((accepted, te, re)),
                    target,
                    action: "flip-move",
                })
            }
        }
    }
}

fn write_artifacts(dir: &Path, e: &Ensemble, cfg: &RunConfig) -> Result<()> {
    let edir = dir.join("ensemble");
    fs::create_dir_all(&edir)?;
    for (k, m) in e.members.iter().enumerate() {
        write_grid(m, BufWriter::new(File::create(edir.join(format!("member_{k}.rgrd")))?))?;
    }
    ensemble_mesh(e, cfg.mesh_iso).write_stl(BufWriter::new(File::create(dir.join("final_mesh.stl"))?))?;
    let intr = cfg.capture_intrinsics()?;
    let spec = e.config.render_spec();
    let pose = orbit_pose(&cfg.reach.center, 0.5 * (cfg.reach.radius_min + cfg.reach.radius_max), 0.7, 0.4)?;
    let out = render_mean(e, &pose, &intr, &spec)?;
    write_rgb_png(&dir.join("final_render.png"), &out.color, intr.width, intr.height)?;
    let under = orbit_pose(&cfg.reach.center, 0.5 * (cfg.reach.radius_min + cfg.reach.radius_max), 0.7, -0.6)?;
    let out = render_mean(e, &under, &intr, &spec)?;
    write_rgb_png(&dir.join("final_render_below.png"), &out.color, intr.width, intr.height)?;
    let (_, map) = pose_uncertainty(e, &pose, &intr, &spec)?;
    map.write_png(&dir.join("final_uncertainty.png"))?;
    Ok(())
}

fn log_row(
    files: &mut RunFiles,
    k: usize,
    o: &Outcome,
    budget: &Budget,
    s: &Scores,
    grasp: Option<f64>,
    views: usize,
    loss: f64,
) -> Result<()> {
    files.log(&IterationLog {
        iteration: k,
        action: o.action.to_string(),
        gamma: o.gamma,
        u_normalized: o.u_normalized,
        cumulative_cost: budget.spent,
        psnr: s.psnr,
        psnr_bottom: s.psnr_bottom,
        fscore: s.fscore,
        flip: o.flip,
        grasp_score: grasp,
        repose_accepted: o.repose.and_then(|r| r.0),
        repose_translation_error: o.repose.map(|r| r.1),
        repose_rotation_error: o.repose.map(|r| r.2),
        views,
        train_loss: loss,
        target_x: o.target.r.x,
        target_y: o.target.r.y,
        target_z: o.target.r.z,
    })
}

/// Runs any mode into `out_dir`; see [`run_active_loop`] and [`run_baseline`].
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = &cfg.resolved();
    let mut files = RunFiles::create(out_dir, cfg)?;
    let mut st = Loop::new(cfg)?;
    let evaluator = Evaluator::new(cfg, &st.vault)?;
    let plan_intr = cfg.plan_intrinsics()?;

    let boot = ring_cameras(cfg, cfg.bootstrap_views, 0.0)?;
    for p in &boot {
        st.capture_into_dataset(p)?;
    }
    st.current = *boot.last().expect("at least one bootstrap view");
    let report = st.fit()?;
    files.losses(0, &report)?;
    let mut scores = evaluator.score(st.ensemble())?;
    let boot_outcome = Outcome {
        gamma: 0.0,
        u_normalized: 0.0,
        flip: false,
        repose: None,
        target: st.current,
        action: "bootstrap",
    };
    log_row(&mut files, 0, &boot_outcome, &st.budget, &scores, None, st.dataset.len(), report.mean_final_loss())?;

    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let mut flip_iteration = None;
    let mut repose_info = None;
    for k in 1..=cfg.max_iterations {
        let spec = st.ensemble().config.render_spec();
        let norm: NormalizationContext = build_normalization(
            st.ensemble(),
            &plan_intr,
            &spec,
            cfg.n_probe_poses,
            sub_seed(cfg.seed, STREAM_PROBE),
            &cfg.scene.shell(),
        )?;
        let decision = st.grasp(&spec)?;
        if let Some((c, s)) = decision.as_ref().and_then(|d| d.best.as_ref()) {
            GraspRecord::new(k, c, s, crate::grasping::grasp_feasible(s, cfg.grasp_threshold)?).write_line(&mut files.grasps)?;
        }
        let frame = match &decision {
            Some(d) => {
                st.flip_pivot = st.estimate.transform_point(&d.centroid);
                st.flip_frame(d)?
            }
            None => None,
        };
        let ctx = PlanContext {
            ensemble: st.ensemble(),
            model_from_world: st.estimate.inverse(),
            norm: &norm,
            current: st.current,
            params: cfg.cost,
            intr: &plan_intr,
            spec: &spec,
            budget: Some(st.budget),
        };
        let planned = if cfg.mode.is_baseline() {
            let flip_target = match &frame {
                Some(f) => st.baseline_target(k, Some(f))?.map(|target| Plan::FlipThenMove { flip: f.flip, target }),
                None => None,
            };
            let plan = match flip_target {
                Some(p) => Some(p),
                None => st.baseline_target(k, None)?.map(|target| Plan::Move { target }),
            };
            match plan {
                Some(plan) => evaluate_plan(&ctx, &plan).map(|eval| (plan, eval)),
                None => Err(Error::BudgetExhausted {
                    spent: st.budget.spent,
                    cost: f64::NAN,
                    total: st.budget.total,
                }),
            }
        } else {
            let mut pcfg = cfg.planner;
            pcfg.seed = sub_seed(cfg.seed ^ cfg.planner.seed, STREAM_PLAN + k as u64);
            plan_with_flip(&ctx, &cfg.reach, &pcfg, frame).map(|d| {
                files.trace.extend(d.trace.iter().map(|r| TraceRow { iteration: k, ..*r }));
                (d.plan, d.eval)
            })
        };
        let (plan, eval) = match planned {
            Ok(p) => p,
            Err(Error::BudgetExhausted { .. }) => {
                stop = StopReason::BudgetExhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        let outcome = st.execute(&plan, eval.gamma, eval.u_normalized)?;
        st.budget = st.budget.charge(eval.gamma)?;
        if outcome.flip {
            flip_iteration = Some(k);
            repose_info = outcome.repose;
        }
        let report = st.fit()?;
        files.losses(k, &report)?;
        scores = evaluator.score(st.ensemble())?;
        let g = decision.as_ref().and_then(|d| d.best.map(|b| b.1.g));
        log_row(&mut files, k, &outcome, &st.budget, &scores, g, st.dataset.len(), report.mean_final_loss())?;
        iterations = k;
        if st.budget.remaining() <= 0.0 {
            stop = StopReason::BudgetExhausted;
            break;
        }
    }

    if cfg.write_artifacts {
        write_artifacts(out_dir, st.ensemble(), cfg)?;
    }
    let audit: TruthAudit = st.vault.audit();
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        iterations,
        stop_reason: stop,
        budget_total: st.budget.total,
        budget_spent: st.budget.spent,
        final_psnr: scores.psnr,
        final_psnr_bottom: scores.psnr_bottom,
        final_fscore: scores.fscore,
        flipped: st.flipped,
        flip_iteration,
        repose_accepted: repose_info.and_then(|r| r.0),
        repose_translation_error: repose_info.map(|r| r.1),
        repose_rotation_error: repose_info.map(|r| r.2),
        truth_reads_for_metrics: audit.metric_reads,
        truth_reads_for_control: audit.control_reads,
    };
    if !audit.clean() {
        return Err(Error::Numerical(format!("oracle truth was read {} times outside metrics", audit.control_reads)));
    }
    let mut f = BufWriter::new(File::create(out_dir.join("summary.json"))?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    f.flush()?;
    files.finish()?;
    Ok(summary)
}

/// The uncertainty-driven loop, with or without the flip.
pub fn run_active_loop(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    if cfg.mode.is_baseline() {
        return Err(Error::Config(format!("{} is a baseline mode", cfg.mode.name())));
    }
    run(cfg, out_dir)
}

/// Random-view or furthest-view selection in the same loop skeleton.
pub fn run_baseline(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    if !cfg.mode.is_baseline() {
        return Err(Error::Config(format!("{} is not a baseline mode", cfg.mode.name())));
    }
    run(cfg, out_dir)
}

/// Pixel colors of a run's final ensemble seen from `pose`.
pub fn render_saved(ensemble: &Ensemble, pose: &Pose, intr: &CameraIntrinsics) -> Result<Vec<Rgb>> {
    Ok(render_mean(ensemble, pose, intr, &ensemble.config.render_spec())?.color)
}

/// Reads `ensemble/member_*.rgrd` written by a run.
pub fn load_ensemble(run_dir: &Path) -> Result<Ensemble> {
    let dir = run_dir.join("ensemble");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rgrd"))
        .collect();
    paths.sort_by_key(|p| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("member_"))
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(usize::MAX)
    });
    if paths.is_empty() {
        return Err(Error::Format(format!("no member grids in {}", dir.display())));
    }
    let members = paths
        .iter()
        .map(|p| crate::radiance::read_grid(std::io::BufReader::new(File::open(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfig::load(&run_dir.join("config.toml")).map(|c| c.train).unwrap_or_default();
    let seeds = (0..members.len() as u64).collect();
    Ensemble::from_members(members, seeds, cfg)
}

/// Position of a shell camera, for callers that want to plot targets.
pub fn shell_position(center: &Vec3, radius: f64, azimuth: f64, elevation: f64) -> Vec3 {
    spherical_point(center, radius, azimuth, elevation)
}
