//! The CLI subcommands as library calls. Each writes its outputs plus a
//! [`RunManifest`] into its output directory; [`replay`] reruns a manifest
//! and checks the outputs come out byte-identical.
//!
//! Relative paths (in configs and arguments) resolve against the working
//! directory; manifests record them canonicalized.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};

use crate::energy::{EdgeExtractor, EnergySuite, PYRAMID_CHANNELS, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::metrics::{psnr, shape_l2, MetricReport, MetricRow};
use crate::sampler::{Sampler, StageMode};
use crate::score::{train_dsm_with, GaussianMixture, NetArch, ScoreModel, ScoreNet};
use crate::tensor::{Image, Shape};

use super::ablate::{aggregate, run_ablation, write_aggregate_csv, write_long_csv, AblationContext, AblationGrid};
use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{Config, ScoreBackend};
use super::dataset::{load_dataset, write_dataset};
use super::io::{read_image, read_sketch, write_image_ivit, write_pnm};
use super::manifest::{RunManifest, MANIFEST_FILE};

pub const LOSS_CSV: &str = "loss.csv";
pub const TRACE_CSV: &str = "energy_trace.csv";
pub const ABLATION_RUNS_CSV: &str = "ablation_runs.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";

/// A loaded score model and the photo shape it works on.
pub enum ScoreSource {
    Net(Box<ScoreNet>),
    Gmm(GaussianMixture, Shape),
}

impl ScoreSource {
    /// Load from `paths.checkpoint` (net) or `paths.dataset` (gmm).
    pub fn load(cfg: &Config) -> Result<Self> {
        match cfg.backend {
            ScoreBackend::Net => Ok(ScoreSource::Net(Box::new(load_checkpoint(cfg.path("checkpoint")?)?))),
            ScoreBackend::Gmm => {
                let items = load_dataset(cfg.path("dataset")?)?;
                let shape = items[0].photo.shape();
                let points = items.iter().map(|i| i.photo.data().to_vec()).collect();
                Ok(ScoreSource::Gmm(
                    GaussianMixture::from_points(points, cfg.gmm_variance)?,
                    shape,
                ))
            }
        }
    }

    /// The `paths.*` key the model was loaded from.
    pub fn path_key(backend: ScoreBackend) -> &'static str {
        match backend {
            ScoreBackend::Net => "checkpoint",
            ScoreBackend::Gmm => "dataset",
        }
    }

    pub fn photo_shape(&self) -> Shape {
        match self {
            ScoreSource::Net(n) => n.arch().shape,
            ScoreSource::Gmm(_, s) => *s,
        }
    }

    pub fn model(&self) -> &dyn ScoreModel {
        match self {
            ScoreSource::Net(n) => n.as_ref(),
            ScoreSource::Gmm(g, _) => g,
        }
    }
}

fn canonical(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::io(path, e))
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn record_extractors(m: &mut RunManifest, en: &EnergySuite) {
    m.setting("extractor.edge_epsilon", format!("{:?}", en.edge.epsilon()));
    m.setting("extractor.lowpass_factor", en.lowpass.factor());
    m.setting("extractor.pyramid_seed", en.pyramid.seed());
    m.setting("extractor.pyramid_levels", PYRAMID_LEVELS);
    m.setting("extractor.pyramid_channels", PYRAMID_CHANNELS);
    m.setting("extractor.similarity", en.similarity);
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    /// Effective configuration, with any `--mode`/`--seed` overrides applied.
    pub config: Config,
    pub sketch: PathBuf,
    /// Required unless the mode is `sdedit`.
    pub exemplar: Option<PathBuf>,
    pub out: PathBuf,
    pub save_stage1: bool,
    pub trace_energy: bool,
}

/// Sample one photo. Writes `output.ppm`/`output.ivit`, optionally
/// `stage1.ppm`/`stage1.ivit` and the energy trace, and the manifest.
pub fn cmd_sample(args: &SampleArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = args.config.clone();
    cfg.validate()?;
    let key = ScoreSource::path_key(cfg.backend);
    let score_path = canonical(cfg.path(key)?)?;
    cfg.paths.insert(key.to_string(), score_path.clone());
    let sketch_path = canonical(&args.sketch)?;
    let mode = cfg.sampler.mode;

    let source = ScoreSource::load(&cfg)?;
    let photo = source.photo_shape();
    let x_sk = read_sketch(&sketch_path)?;
    if (x_sk.height(), x_sk.width()) != (photo.height, photo.width) {
        return Err(Error::shape(Shape::new(1, photo.height, photo.width), x_sk.shape()));
    }
    let exemplar_path = match &args.exemplar {
        Some(p) => Some(canonical(p)?),
        None if mode.uses_exemplar() => {
            return Err(Error::Config(format!("mode {mode} needs an exemplar")));
        }
        None => None,
    };
    let x_ex = match &exemplar_path {
        Some(p) if mode.uses_exemplar() => read_image(p)?,
        Some(_) => {
            warn!("mode sdedit ignores the exemplar");
            Image::zeros(photo)
        }
        None => Image::zeros(photo),
    };
    if args.save_stage1 && mode != StageMode::TwoStage {
        warn!("--save-stage1 has no effect in mode {mode}: there is no intermediate photo");
    }

    let energies = cfg.energies(photo.channels, photo.height)?;
    let sampler = Sampler::new(&cfg.schedule, source.model(), &energies);
    let rec = sampler.run_variant(&x_sk, &x_ex, &cfg.sampler, args.trace_energy)?;

    let out = &args.out;
    make_dir(out)?;
    let mut m = RunManifest::new("sample", cfg.clone());
    m.setting("save_stage1", args.save_stage1);
    m.setting("trace_energy", args.trace_energy);
    record_extractors(&mut m, &energies);
    m.add_input("sketch", &sketch_path)?;
    if let Some(p) = &exemplar_path {
        m.add_input("exemplar", p)?;
    }
    m.add_input("score", &score_path)?;

    write_pnm(&out.join("output.ppm"), &rec.output)?;
    write_image_ivit(&out.join("output.ivit"), &rec.output)?;
    m.add_output(out, "output.ppm")?;
    m.add_output(out, "output.ivit")?;
    if args.save_stage1 {
        if let Some(s1) = &rec.stage1 {
            write_pnm(&out.join("stage1.ppm"), s1)?;
            write_image_ivit(&out.join("stage1.ivit"), s1)?;
            m.add_output(out, "stage1.ppm")?;
            m.add_output(out, "stage1.ivit")?;
        }
    }
    if args.trace_energy {
        let path = out.join(TRACE_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["stage", "step", "time", "shape_similarity", "appearance_similarity"])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for p in &rec.trace {
            w.write_record([
                p.stage.to_string(),
                p.step.to_string(),
                format!("{:?}", p.time),
                opt(p.shape),
                opt(p.appearance),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        m.add_output(out, TRACE_CSV)?;
    }
    for (i, s) in rec.stage_seconds.iter().enumerate() {
        m.timing(&format!("stage{}_seconds", i + 1), *s);
    }
    m.timing("total_seconds", start.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: Config,
    /// Dataset directory; falls back to `paths.dataset`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
}

/// Train a score network on the dataset photos and write the checkpoint,
/// `loss.csv` (`iteration,loss`, one row per logging interval) and the manifest.
pub fn cmd_train_score(args: &TrainArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = args.config.clone();
    if let Some(d) = &args.dataset {
        cfg.paths.insert("dataset".into(), d.clone());
    }
    cfg.validate()?;
    let data_dir = canonical(cfg.path("dataset")?)?;
    cfg.paths.insert("dataset".into(), data_dir.clone());
    let items = load_dataset(&data_dir)?;
    let shape = items[0].photo.shape();
    let data: Vec<Vec<f64>> = items.iter().map(|i| i.photo.data().to_vec()).collect();
    let arch = NetArch {
        output: cfg.output,
        ..NetArch::for_shape(shape)
    };
    let mut net = ScoreNet::new(arch, cfg.train.seed).with_schedule(cfg.schedule);
    let total = cfg.train.iterations;
    let log = train_dsm_with(&mut net, &cfg.schedule, &data, &cfg.train, |it, _| {
        if it % (cfg.train.log_interval * 10).max(1) == 0 || it == total {
            info!("iteration {it}/{total}");
        }
    })?;

    let out = &args.out;
    make_dir(out)?;
    let mut m = RunManifest::new("train-score", cfg.clone());
    m.setting("net.shape", shape);
    m.setting("net.hidden", arch.hidden);
    m.setting("net.time_features", arch.time_features);
    m.add_input("dataset", &data_dir)?;
    for f in save_checkpoint(out, &net)? {
        m.add_output(out, &f)?;
    }
    let path = out.join(LOSS_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["iteration", "loss"])?;
    for p in &log {
        w.write_record([p.iteration.to_string(), format!("{:?}", p.loss)])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    m.add_output(out, LOSS_CSV)?;
    m.timing("total_seconds", start.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Generate the toy dataset from the `dataset.*` keys.
pub fn cmd_gen_dataset(config: &Config, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    config.validate()?;
    let items = write_dataset(out, &config.dataset)?;
    let mut m = RunManifest::new("gen-dataset", config.clone());
    m.setting("items", items.len());
    let mut files: Vec<String> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(out, e))?;
    files.retain(|f| f != MANIFEST_FILE);
    files.sort();
    for f in &files {
        m.add_output(out, f)?;
    }
    m.timing("total_seconds", start.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    /// Base configuration; λ, mode and seed come from the grid.
    pub config: Config,
    pub grid: AblationGrid,
    pub out: PathBuf,
    pub save_images: bool,
    pub threads: usize,
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad {what} `{v}`"))))
        .collect()
}

/// Run the grid on the dataset at `paths.dataset` and write the long and
/// aggregate CSVs.
pub fn cmd_ablate(args: &AblateArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = args.config.clone();
    cfg.validate()?;
    args.grid.validate()?;
    let data_dir = canonical(cfg.path("dataset")?)?;
    cfg.paths.insert("dataset".into(), data_dir.clone());
    let key = ScoreSource::path_key(cfg.backend);
    let score_path = canonical(cfg.path(key)?)?;
    cfg.paths.insert(key.to_string(), score_path.clone());

    let source = ScoreSource::load(&cfg)?;
    let items = load_dataset(&data_dir)?;
    let photo = source.photo_shape();
    let energies = cfg.energies(photo.channels, photo.height)?;
    let ctx = AblationContext {
        sched: &cfg.schedule,
        score: source.model(),
        energies: &energies,
        items: &items,
        base: &cfg.sampler,
    };
    let out = &args.out;
    make_dir(out)?;
    info!("{} runs on {} worker(s)", args.grid.runs(), args.threads);
    let rows = run_ablation(
        &ctx,
        &args.grid,
        args.threads,
        args.save_images.then_some(out.as_path()),
    )?;
    for r in rows.iter().filter(|r| !r.ok()) {
        warn!("run {} failed: {}", r.run, r.error);
    }
    write_long_csv(&out.join(ABLATION_RUNS_CSV), &rows)?;
    write_aggregate_csv(&out.join(ABLATION_SUMMARY_CSV), &aggregate(&rows))?;

    let mut m = RunManifest::new("ablate", cfg.clone());
    m.setting(
        "grid.lambda_g",
        list(&args.grid.lambda_g.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()),
    );
    m.setting(
        "grid.lambda_a",
        list(&args.grid.lambda_a.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>()),
    );
    m.setting("grid.modes", list(&args.grid.modes));
    m.setting("grid.seeds", args.grid.seeds);
    m.setting("save_images", args.save_images);
    record_extractors(&mut m, &energies);
    m.add_input("dataset", &data_dir)?;
    if key != "dataset" {
        m.add_input("score", &score_path)?;
    }
    m.add_output(out, ABLATION_RUNS_CSV)?;
    m.add_output(out, ABLATION_SUMMARY_CSV)?;
    if args.save_images {
        for r in &rows {
            let f = format!("runs/{:04}/output.ivit", r.run);
            if out.join(&f).exists() {
                m.add_output(out, &f)?;
            }
        }
    }
    m.timing("total_seconds", start.elapsed().as_secs_f64());
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(m)
}

/// Rerun the command recorded in `manifest` into `out`, then check every
/// recorded output digest. The inputs must be unchanged.
pub fn replay(manifest: &Path, out: &Path, threads: usize) -> Result<RunManifest> {
    let rec = RunManifest::read(manifest)?;
    rec.verify_inputs()?;
    let cfg = rec.config.clone();
    let flag = |k: &str| -> Result<bool> {
        rec.get_setting(k)?
            .parse()
            .map_err(|_| Error::Config(format!("manifest setting `{k}` is not a bool")))
    };
    let fresh = match rec.command.as_str() {
        "sample" => cmd_sample(&SampleArgs {
            config: cfg,
            sketch: rec.input("sketch")?.path.clone(),
            exemplar: rec.input("exemplar").ok().map(|i| i.path.clone()),
            out: out.to_path_buf(),
            save_stage1: flag("save_stage1")?,
            trace_energy: flag("trace_energy")?,
        })?,
        "train-score" => cmd_train_score(&TrainArgs {
            config: cfg,
            dataset: None,
            out: out.to_path_buf(),
        })?,
        "gen-dataset" => cmd_gen_dataset(&cfg, out)?,
        "ablate" => cmd_ablate(&AblateArgs {
            config: cfg,
            grid: AblationGrid {
                lambda_g: parse_list(rec.get_setting("grid.lambda_g")?, "lambda_g")?,
                lambda_a: parse_list(rec.get_setting("grid.lambda_a")?, "lambda_a")?,
                modes: parse_list(rec.get_setting("grid.modes")?, "mode")?,
                seeds: parse_list::<usize>(rec.get_setting("grid.seeds")?, "seeds")?[0],
            },
            out: out.to_path_buf(),
            save_images: flag("save_images")?,
            threads,
        })?,
        other => return Err(Error::Config(format!("cannot replay command `{other}`"))),
    };
    fresh.verify_outputs_match(&rec)?;
    Ok(fresh)
}

/// One row of the metrics command input: an output photo and its conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsInput {
    pub output: PathBuf,
    pub sketch: PathBuf,
    pub exemplar: PathBuf,
}

/// Read `output,sketch,exemplar` rows; relative paths resolve against the
/// list file's directory.
pub fn read_metrics_list(path: &Path) -> Result<Vec<MetricsInput>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(["output", "sketch", "exemplar"]) {
        return Err(Error::Config(format!(
            "{}: header must be output,sketch,exemplar",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(MetricsInput {
            output: base.join(&rec[0]),
            sketch: base.join(&rec[1]),
            exemplar: base.join(&rec[2]),
        });
    }
    Ok(out)
}

/// shape_l2 of each output's sketch against the input sketch, and PSNR
/// against the exemplar.
pub fn compute_metrics(inputs: &[MetricsInput]) -> Result<MetricReport> {
    let edge = EdgeExtractor::default();
    let mut rows = Vec::with_capacity(inputs.len());
    for i in inputs {
        let out = read_image(&i.output)?;
        let sk = read_sketch(&i.sketch)?;
        let ex = read_image(&i.exemplar)?;
        rows.push(MetricRow {
            shape_l2: shape_l2(&edge.phi_sketch(&out)?, &sk)?,
            psnr: psnr(&out, &ex)?,
        });
    }
    Ok(MetricReport::from_rows(rows))
}

/// CSV schema `row,shape_l2,psnr`: one line per input (`row` = 0-based
/// index), then `mean` and `std` lines.
pub fn write_metric_report(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "shape_l2", "psnr"])?;
    for (i, r) in report.rows.iter().enumerate() {
        w.write_record([i.to_string(), format!("{:?}", r.shape_l2), format!("{:?}", r.psnr)])?;
    }
    w.write_record([
        "mean".into(),
        format!("{:?}", report.mean_shape_l2),
        format!("{:?}", report.mean_psnr),
    ])?;
    w.write_record([
        "std".into(),
        format!("{:?}", report.std_shape_l2),
        format!("{:?}", report.std_psnr),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_report(path: &Path) -> Result<MetricReport> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |v: &str| Error::Config(format!("{}: bad value `{v}`", path.display()));
    let mut rows = Vec::new();
    let mut mean = None;
    let mut std = None;
    for rec in r.records() {
        let rec = rec?;
        let s: f64 = rec[1].parse().map_err(|_| bad(&rec[1]))?;
        let p: f64 = rec[2].parse().map_err(|_| bad(&rec[2]))?;
        match &rec[0] {
            "mean" => mean = Some((s, p)),
            "std" => std = Some((s, p)),
            _ => rows.push(MetricRow { shape_l2: s, psnr: p }),
        }
    }
    let ((ms, mp), (ss, sp)) = mean.zip(std).ok_or_else(|| bad("missing mean/std rows"))?;
    Ok(MetricReport {
        rows,
        mean_shape_l2: ms,
        std_shape_l2: ss,
        mean_psnr: mp,
        std_psnr: sp,
    })
}
