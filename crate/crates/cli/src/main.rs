use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use objacq_core::geometry::orbit_pose;
use objacq_core::harness::{load_ensemble, render_saved, Mode, RunConfig};
use objacq_core::imaging::write_rgb_png;
use objacq_core::repose::trials::{run_trials, winner_errors, TrialConfig};
use objacq_core::repose::write_trials_csv;
use objacq_core::{compare_runs, CameraIntrinsics, Error};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_BUDGET: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "objacq", version, about = "Active object acquisition with a radiance-field ensemble")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one acquisition loop against the simulated oracle.
    Run {
        /// TOML run configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// ours, ours-no-flip, random-view or furthest-view.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<f64>,
        /// Start from the reduced-resolution preset instead of the full defaults.
        #[arg(long)]
        small: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Align run directories by iteration and plot their metrics against cost.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved ensemble from a shell camera to PNG.
    Render {
        /// Run directory holding `ensemble/` and `config.toml`.
        #[arg(long)]
        run: PathBuf,
        /// Degrees.
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Degrees.
        #[arg(long, default_value_t = 30.0)]
        elevation: f64,
        /// Meters from the reachable-shell center; defaults to the middle of the shell.
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded pose-recovery trials around the nominal flip.
    ReposeBench {
        /// TOML trial configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// View counts to compare.
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        views: Vec<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Inside-test samples per voxel axis for the oracle scene.
        #[arg(long, default_value_t = 3)]
        supersample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::BudgetExhausted { .. } => EXIT_BUDGET,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run {
            config,
            mode,
            seed,
            budget,
            small,
            out,
        } => cmd_run(config.as_deref(), mode.as_deref(), seed, budget, small, &out),
        Command::Compare { runs, out } => cmd_compare(&runs, &out),
        Command::Render {
            run,
            azimuth,
            elevation,
            radius,
            size,
            out,
        } => cmd_render(&run, azimuth, elevation, radius, size, &out),
        Command::ReposeBench {
            config,
            views,
            trials,
            seed,
            supersample,
            out,
        } => cmd_repose_bench(config.as_deref(), &views, trials, seed, supersample, &out),
    };
    match res {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

fn cmd_run(
    config: Option<&Path>,
    mode: Option<&str>,
    seed: Option<u64>,
    budget: Option<f64>,
    small: bool,
    out: &Path,
) -> objacq_core::Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None if small => RunConfig::small_scale(),
        None => RunConfig::default(),
    };
    if let Some(m) = mode {
        cfg.mode = Mode::parse(m)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if budget.is_some() {
        cfg.budget = budget;
    }
    cfg.validate()?;
    let summary = objacq_core::run(&cfg, out)?;
    println!(
        "{} seed {}: {} iterations, spent {:.3} of {:.3}, psnr {:.2} dB, bottom {:.2} dB, f-score {:.3}, flipped {}",
        summary.mode.name(),
        summary.seed,
        summary.iterations,
        summary.budget_spent,
        summary.budget_total,
        summary.final_psnr,
        summary.final_psnr_bottom,
        summary.final_fscore,
        summary.flipped
    );
    if summary.exhausted_early(cfg.max_iterations) {
        eprintln!("budget exhausted before the iteration limit; partial results written");
        return Ok(ExitCode::from(EXIT_BUDGET));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(runs: &[PathBuf], out: &Path) -> objacq_core::Result<ExitCode> {
    let (_, finals) = compare_runs(runs, out)?;
    for f in &finals {
        println!(
            "{}: {} iterations, spent {:.3}, psnr {:.2} dB, bottom {:.2} dB, f-score {:.3}",
            f.run, f.iterations, f.budget_spent, f.final_psnr, f.final_psnr_bottom, f.final_fscore
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(
    run: &Path,
    azimuth: f64,
    elevation: f64,
    radius: Option<f64>,
    size: usize,
    out: &Path,
) -> objacq_core::Result<ExitCode> {
    let cfg = RunConfig::load(&run.join("config.toml"))?;
    let ensemble = load_ensemble(run)?;
    let reach = &cfg.reach;
    let r = radius.unwrap_or(0.5 * (reach.radius_min + reach.radius_max));
    let pose = orbit_pose(&reach.center, r, azimuth.to_radians(), elevation.to_radians())?;
    let intr = CameraIntrinsics::from_half_fov(size, size, cfg.half_fov)?;
    let pixels = render_saved(&ensemble, &pose, &intr)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_rgb_png(out, &pixels, size, size)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_repose_bench(
    config: Option<&Path>,
    views: &[usize],
    trials: Option<usize>,
    seed: Option<u64>,
    supersample: usize,
    out: &Path,
) -> objacq_core::Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => TrialConfig::load(p)?,
        None => TrialConfig::default(),
    };
    if let Some(t) = trials {
        cfg.trials = t;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut scene = RunConfig::default().scene;
    scene.supersample = supersample;
    scene.validate_config()?;

    fs::create_dir_all(out)?;
    let mut all = Vec::new();
    for &v in views {
        let recs = run_trials(&scene, v, &cfg)?;
        let w = winner_errors(&recs);
        let n = w.len() as f64;
        let within = w
            .iter()
            .filter(|(te, re)| *te <= 0.002 && *re <= 1f64.to_radians())
            .count();
        println!(
            "{v} view(s): mean translation error {:.2} mm, mean rotation error {:.3} deg, {within}/{} within 1 deg and 2 mm",
            1e3 * w.iter().map(|e| e.0).sum::<f64>() / n,
            w.iter().map(|e| e.1.to_degrees()).sum::<f64>() / n,
            w.len()
        );
        all.extend(recs);
    }
    write_trials_csv(&all, BufWriter::new(File::create(out.join("trials.csv"))?))?;
    Ok(ExitCode::SUCCESS)
}
