use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::run::{IterationLog, RunSummary};
use crate::imaging::line_plot;

/// Per-iteration metrics of one run next to the first (reference) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub iteration: usize,
    pub cumulative_cost: f64,
    pub psnr: f64,
    pub fscore: f64,
    pub psnr_delta: Option<f64>,
    pub fscore_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub run: String,
    pub mode: String,
    pub iterations: usize,
    pub budget_spent: f64,
    pub final_psnr: f64,
    pub final_psnr_bottom: f64,
    pub final_fscore: f64,
    pub flipped: bool,
}

pub fn read_iterations(run_dir: &Path) -> Result<Vec<IterationLog>> {
    let path = run_dir.join("iterations.csv");
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!("{} is not a run directory", run_dir.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<IterationLog>, _>>()?)
}

fn label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Aligns runs by iteration index against `runs[0]`, writes tables and plots into `out_dir`.
pub fn compare_runs(runs: &[PathBuf], out_dir: &Path) -> Result<(Vec<ComparisonRow>, Vec<FinalRow>)> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two runs to compare".into()));
    }
    let logs = runs.iter().map(|d| read_iterations(d)).collect::<Result<Vec<_>>>()?;
    let summaries = runs.iter().map(|d| RunSummary::load(d)).collect::<Result<Vec<_>>>()?;
    let reference = &logs[0];

    let mut rows = Vec::new();
    for (dir, log) in runs.iter().zip(&logs) {
        for l in log {
            let base = reference.iter().find(|b| b.iteration == l.iteration);
            rows.push(ComparisonRow {
                run: label(dir),
                iteration: l.iteration,
                cumulative_cost: l.cumulative_cost,
                psnr: l.psnr,
                fscore: l.fscore,
                psnr_delta: base.map(|b| l.psnr - b.psnr),
                fscore_delta: base.map(|b| l.fscore - b.fscore),
            });
        }
    }
    let finals: Vec<FinalRow> = runs
        .iter()
        .zip(&summaries)
        .map(|(d, s)| FinalRow {
            run: label(d),
            mode: s.mode.name().to_string(),
            iterations: s.iterations,
            budget_spent: s.budget_spent,
            final_psnr: s.final_psnr,
            final_psnr_bottom: s.final_psnr_bottom,
            final_fscore: s.final_fscore,
            flipped: s.flipped,
        })
        .collect();

    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out_dir.join("comparison.csv"))?));
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out_dir.join("final.csv"))?));
    for r in &finals {
        w.serialize(r)?;
    }
    w.flush()?;

    let series = |f: fn(&IterationLog) -> f64| -> Vec<Vec<(f64, f64)>> {
        logs.iter().map(|log| log.iter().map(|l| (l.cumulative_cost, f(l))).collect()).collect()
    };
    line_plot(&series(|l| l.psnr), 480, 320)?.save(out_dir.join("psnr.png"))?;
    line_plot(&series(|l| l.fscore), 480, 320)?.save(out_dir.join("fscore.png"))?;
    Ok((rows, finals))
}
