//! Grid runs over λ_g × λ_a × mode × seed on the toy dataset.
//!
//! Run `j` of every grid cell uses seed `base + j` and dataset item
//! `j mod n`, so cells are paired run by run. Runs execute on a worker pool
//! of `INV2INV_THREADS` threads at most; each owns its noise streams and,
//! when images are saved, its own `runs/<index>/` directory.
//!
//! Long CSV columns: `run,lambda_g,lambda_a,mode,seed,item,shape_l2,psnr,appearance_l2,error`.
//! `shape_l2` compares the sketch of the output with the input sketch, `psnr`
//! and `appearance_l2` (`|Omega(out) - Omega(exemplar)|^2`) compare it with the
//! exemplar. Failed runs carry NaN metrics and a message in `error`.
//!
//! Aggregate CSV columns: `lambda_g,lambda_a,mode,runs,failed,mean_shape_l2,std_shape_l2,
//! mean_psnr,std_psnr,mean_appearance_l2,std_appearance_l2`, over successful runs.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::energy::EnergySuite;
use crate::error::{Error, Result};
use crate::metrics::{mean_std, psnr, shape_l2};
use crate::sampler::{Sampler, SamplerConfig, StageMode};
use crate::score::ScoreModel;
use crate::sde::SdeSchedule;

use super::dataset::ToyItem;
use super::io::write_image_ivit;

pub const THREADS_ENV: &str = "INV2INV_THREADS";
pub const LONG_COLUMNS: [&str; 10] = [
    "run",
    "lambda_g",
    "lambda_a",
    "mode",
    "seed",
    "item",
    "shape_l2",
    "psnr",
    "appearance_l2",
    "error",
];
pub const AGGREGATE_COLUMNS: [&str; 11] = [
    "lambda_g",
    "lambda_a",
    "mode",
    "runs",
    "failed",
    "mean_shape_l2",
    "std_shape_l2",
    "mean_psnr",
    "std_psnr",
    "mean_appearance_l2",
    "std_appearance_l2",
];

/// Worker count: available parallelism, capped by `INV2INV_THREADS` when set.
pub fn worker_threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => cap.min(avail),
        _ => avail,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub lambda_g: Vec<f64>,
    pub lambda_a: Vec<f64>,
    pub modes: Vec<StageMode>,
    pub seeds: usize,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_g.is_empty() || self.lambda_a.is_empty() || self.modes.is_empty() || self.seeds == 0 {
            return Err(Error::Config("ablation grid has an empty axis".into()));
        }
        Ok(())
    }

    /// Grid cells in output order: λ_g outermost, then λ_a, then mode.
    pub fn cells(&self) -> Vec<(f64, f64, StageMode)> {
        let mut out = Vec::new();
        for &g in &self.lambda_g {
            for &a in &self.lambda_a {
                for &m in &self.modes {
                    out.push((g, a, m));
                }
            }
        }
        out
    }

    pub fn runs(&self) -> usize {
        self.cells().len() * self.seeds
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub run: usize,
    pub lambda_g: f64,
    pub lambda_a: f64,
    pub mode: StageMode,
    pub seed: u64,
    pub item: usize,
    pub shape_l2: f64,
    pub psnr: f64,
    pub appearance_l2: f64,
    pub error: String,
}

impl AblationRow {
    pub fn ok(&self) -> bool {
        self.error.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub lambda_g: f64,
    pub lambda_a: f64,
    pub mode: StageMode,
    pub runs: usize,
    pub failed: usize,
    pub mean_shape_l2: f64,
    pub std_shape_l2: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_appearance_l2: f64,
    pub std_appearance_l2: f64,
}

/// Shared read-only state of an ablation.
pub struct AblationContext<'a> {
    pub sched: &'a SdeSchedule,
    pub score: &'a dyn ScoreModel,
    pub energies: &'a EnergySuite,
    pub items: &'a [ToyItem],
    /// Everything except λ, mode and seed is taken from here.
    pub base: &'a SamplerConfig,
}

fn one_run(
    ctx: &AblationContext<'_>,
    cfg: &SamplerConfig,
    item: &ToyItem,
    save: Option<&Path>,
) -> Result<(f64, f64, f64)> {
    let sampler = Sampler::new(ctx.sched, ctx.score, ctx.energies);
    let rec = sampler.run_variant(&item.sketch, &item.exemplar, cfg, false)?;
    if let Some(dir) = save {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_image_ivit(&dir.join("output.ivit"), &rec.output)?;
    }
    let en = ctx.energies;
    let sk = en.edge.phi_sketch(&rec.output)?;
    let shape = shape_l2(&sk, &item.sketch)?;
    let p = psnr(&rec.output, &item.exemplar)?;
    let app = en
        .lowpass
        .omega(&rec.output)?
        .sq_dist(&en.lowpass.omega(&item.exemplar)?)?;
    Ok((shape, p, app))
}

/// Run every grid cell for every seed. Per-run failures are recorded in the
/// row, not returned.
pub fn run_ablation(
    ctx: &AblationContext<'_>,
    grid: &AblationGrid,
    threads: usize,
    save_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    if ctx.items.is_empty() {
        return Err(Error::Config("ablation needs at least one dataset item".into()));
    }
    let mut jobs = Vec::with_capacity(grid.runs());
    for (g, a, m) in grid.cells() {
        for j in 0..grid.seeds {
            jobs.push((jobs.len(), g, a, m, j));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|&(run, g, a, mode, j)| {
                let mut cfg = ctx.base.clone();
                cfg.weights.lambda_g = g;
                cfg.weights.lambda_a = a;
                cfg.mode = mode;
                cfg.seed = ctx.base.seed.wrapping_add(j as u64);
                let item = j % ctx.items.len();
                let dir = save_dir.map(|d| d.join("runs").join(format!("{run:04}")));
                let (shape_l2, psnr, appearance_l2, error) = match one_run(ctx, &cfg, &ctx.items[item], dir.as_deref())
                {
                    Ok((s, p, a)) => (s, p, a, String::new()),
                    Err(e) => (f64::NAN, f64::NAN, f64::NAN, e.to_string()),
                };
                AblationRow {
                    run,
                    lambda_g: g,
                    lambda_a: a,
                    mode,
                    seed: cfg.seed,
                    item,
                    shape_l2,
                    psnr,
                    appearance_l2,
                    error,
                }
            })
            .collect()
    });
    Ok(rows)
}

/// Per-cell means and standard deviations over successful runs, in the order
/// cells first appear.
pub fn aggregate(rows: &[AblationRow]) -> Vec<AggregateRow> {
    let mut keys: Vec<(f64, f64, StageMode)> = Vec::new();
    for r in rows {
        let k = (r.lambda_g, r.lambda_a, r.mode);
        if !keys
            .iter()
            .any(|q| q.0.to_bits() == k.0.to_bits() && q.1.to_bits() == k.1.to_bits() && q.2 == k.2)
        {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(g, a, m)| {
            let cell: Vec<&AblationRow> = rows
                .iter()
                .filter(|r| r.lambda_g.to_bits() == g.to_bits() && r.lambda_a.to_bits() == a.to_bits() && r.mode == m)
                .collect();
            let good: Vec<&&AblationRow> = cell.iter().filter(|r| r.ok()).collect();
            let stat = |f: fn(&AblationRow) -> f64| mean_std(&good.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (mean_shape_l2, std_shape_l2) = stat(|r| r.shape_l2);
            let (mean_psnr, std_psnr) = stat(|r| r.psnr);
            let (mean_appearance_l2, std_appearance_l2) = stat(|r| r.appearance_l2);
            AggregateRow {
                lambda_g: g,
                lambda_a: a,
                mode: m,
                runs: cell.len(),
                failed: cell.len() - good.len(),
                mean_shape_l2,
                std_shape_l2,
                mean_psnr,
                std_psnr,
                mean_appearance_l2,
                std_appearance_l2,
            }
        })
        .collect()
}

/// Metric values of the runs in one cell, in seed order.
pub fn cell_values(
    rows: &[AblationRow],
    lambda_g: f64,
    lambda_a: f64,
    mode: StageMode,
    f: fn(&AblationRow) -> f64,
) -> Vec<f64> {
    rows.iter()
        .filter(|r| r.lambda_g == lambda_g && r.lambda_a == lambda_a && r.mode == mode)
        .map(f)
        .collect()
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_long_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LONG_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.run.to_string(),
            num(r.lambda_g),
            num(r.lambda_a),
            r.mode.to_string(),
            r.seed.to_string(),
            r.item.to_string(),
            num(r.shape_l2),
            num(r.psnr),
            num(r.appearance_l2),
            r.error.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec[i].parse().map_err(|_| {
        Error::Config(format!(
            "{}: bad `{}` value `{}`",
            path.display(),
            LONG_COLUMNS[i],
            &rec[i]
        ))
    })
}

pub fn read_long_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(LONG_COLUMNS) {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(AblationRow {
            run: field(&rec, 0, path)?,
            lambda_g: field(&rec, 1, path)?,
            lambda_a: field(&rec, 2, path)?,
            mode: rec[3].parse()?,
            seed: field(&rec, 4, path)?,
            item: field(&rec, 5, path)?,
            shape_l2: field(&rec, 6, path)?,
            psnr: field(&rec, 7, path)?,
            appearance_l2: field(&rec, 8, path)?,
            error: rec[9].to_string(),
        });
    }
    Ok(rows)
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_COLUMNS)?;
    for r in rows {
        w.write_record([
            num(r.lambda_g),
            num(r.lambda_a),
            r.mode.to_string(),
            r.runs.to_string(),
            r.failed.to_string(),
            num(r.mean_shape_l2),
            num(r.std_shape_l2),
            num(r.mean_psnr),
            num(r.std_psnr),
            num(r.mean_appearance_l2),
            num(r.std_appearance_l2),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(AGGREGATE_COLUMNS) {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let bad = |i: usize, v: &str| {
        Error::Config(format!(
            "{}: bad `{}` value `{v}`",
            path.display(),
            AGGREGATE_COLUMNS[i]
        ))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(i, &rec[i]));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(i, &rec[i]));
        rows.push(AggregateRow {
            lambda_g: f(0)?,
            lambda_a: f(1)?,
            mode: rec[2].parse()?,
            runs: u(3)?,
            failed: u(4)?,
            mean_shape_l2: f(5)?,
            std_shape_l2: f(6)?,
            mean_psnr: f(7)?,
            std_psnr: f(8)?,
            mean_appearance_l2: f(9)?,
            std_appearance_l2: f(10)?,
        });
    }
    Ok(rows)
}
