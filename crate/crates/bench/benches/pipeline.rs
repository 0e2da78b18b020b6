use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use objacq_core::geometry::{generate_rays, orbit_pose, CameraIntrinsics, Pose, Vec3};
use objacq_core::metrics::marching_cubes;
use objacq_core::oracle::{Oracle, SceneSpec};
use objacq_core::planner::{next_best_view, CostParams, PlanContext, PlannerConfig, Reachability};
use objacq_core::radiance::{backprop_photometric, render_image, SampleSpec};
use objacq_core::repose::{ReposeConfig, SsdObjective};
use objacq_core::trainer::{fit, init_ensemble, Ensemble, TrainConfig, ViewSample};
use objacq_core::uncertainty::{build_normalization, pose_uncertainty};

struct Fixture {
    oracle: Oracle,
    views: Vec<ViewSample>,
    intr: CameraIntrinsics,
    spec: SampleSpec,
    ensemble: Ensemble,
}

fn fixture() -> Fixture {
    let scene = SceneSpec::composite_default();
    let oracle = Oracle::new(scene, [32; 3]).unwrap();
    let intr = CameraIntrinsics::from_half_fov(24, 24, 0.3).unwrap();
    let spec = SampleSpec::deterministic(48);
    let views: Vec<ViewSample> = [0.0, 2.1, 4.2]
        .iter()
        .map(|az| oracle.capture(&orbit_pose(&Vec3::zeros(), 0.35, *az, 0.5).unwrap(), &intr, &spec).unwrap())
        .collect();
    let cfg = TrainConfig {
        members: 3,
        steps: 40,
        batch_rays: 512,
        n_samples: 32,
        ..TrainConfig::default()
    };
    let mut ensemble = init_ensemble(&cfg, [16; 3], oracle.scene().bounds(), 0).unwrap();
    fit(&mut ensemble, &views).unwrap();
    Fixture {
        oracle,
        views,
        intr,
        spec,
        ensemble,
    }
}

fn benches(c: &mut Criterion) {
    let f = fixture();
    let gt = f.oracle.ground_truth();
    let pose = orbit_pose(&Vec3::zeros(), 0.35, 1.0, 0.6).unwrap();

    c.bench_function("render_image 24x24", |b| {
        b.iter(|| render_image(black_box(gt), &pose, &f.intr, &f.spec).unwrap())
    });

    let rays = generate_rays(&pose, &f.intr, gt.bounds());
    let colors: Vec<_> = f.views[0].image.clone();
    let masks = vec![1.0; rays.len()];
    c.bench_function("backprop_photometric 576 rays", |b| {
        b.iter(|| backprop_photometric(black_box(gt), &rays, &colors, &masks, &f.spec).unwrap())
    });

    let plan_intr = CameraIntrinsics::from_half_fov(12, 12, 0.3).unwrap();
    let render_spec = f.ensemble.config.render_spec();
    c.bench_function("pose_uncertainty 12x12", |b| {
        b.iter(|| pose_uncertainty(black_box(&f.ensemble), &pose, &plan_intr, &render_spec).unwrap())
    });

    let norm = build_normalization(&f.ensemble, &plan_intr, &render_spec, 8, 0, &f.oracle.scene().shell()).unwrap();
    let ctx = PlanContext {
        ensemble: &f.ensemble,
        model_from_world: Pose::IDENTITY,
        norm: &norm,
        current: pose,
        params: CostParams::default(),
        intr: &plan_intr,
        spec: &render_spec,
        budget: None,
    };
    let planner = PlannerConfig {
        n_random: 32,
        k_subset: 4,
        refine_iters: 2,
        ..PlannerConfig::default()
    };
    c.bench_function("next_best_view 32 candidates", |b| {
        b.iter(|| next_best_view(black_box(&ctx), &Reachability::default(), &planner).unwrap())
    });

    let truth = Ensemble::from_members(vec![gt.clone(), gt.clone()], vec![0, 1], TrainConfig::default()).unwrap();
    let obj = SsdObjective::new(&f.views, &truth, f.spec, Pose::IDENTITY, Vec3::zeros(), &ReposeConfig::default()).unwrap();
    c.bench_function("ssd objective 3 views", |b| b.iter(|| obj.eval_x(black_box(&[0.01, 0.0, 0.0, 0.0, 0.02, 0.0]))));

    c.bench_function("marching_cubes 32^3", |b| b.iter(|| marching_cubes(black_box(gt), 25.0)));
}

criterion_group! {
    name = pipeline;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(pipeline);
