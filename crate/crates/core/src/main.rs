use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use inv2inv::metrics::MetricReport;
use inv2inv::pipeline::ablate::{worker_threads, AblationGrid};
use inv2inv::pipeline::commands::{
    cmd_ablate, cmd_gen_dataset, cmd_sample, cmd_train_score, compute_metrics, read_metrics_list, replay,
    write_metric_report, AblateArgs, MetricsInput, SampleArgs, TrainArgs,
};
use inv2inv::pipeline::config::Config;
use inv2inv::pipeline::gradcheck::{run_gradcheck, GradcheckOptions};
use inv2inv::pipeline::manifest::RunManifest;
use inv2inv::sampler::StageMode;
use inv2inv::{Error, Result};

/// Two-stage energy-guided sketch-to-photo sampling on toy data.
#[derive(Parser)]
#[command(name = "inv2inv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy photo/sketch/exemplar dataset.
    GenDataset {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Train the score network on dataset photos.
    TrainScore {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory (default: paths.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Translate one sketch, or replay a sample manifest.
    Sample(SampleCli),
    /// Run a λ_g × λ_a × mode × seed grid and write CSV tables.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated (default: energy.lambda_g).
        #[arg(long, value_delimiter = ',')]
        lambda_g: Vec<f64>,
        /// Comma-separated (default: energy.lambda_a).
        #[arg(long, value_delimiter = ',')]
        lambda_a: Vec<f64>,
        /// Comma-separated (default: sampler.mode).
        #[arg(long, value_delimiter = ',')]
        modes: Vec<StageMode>,
        /// Runs per grid cell.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Keep each run's output tensor under runs/.
        #[arg(long)]
        save_images: bool,
    },
    /// Check every analytic gradient and adjoint against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        probes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// shape_l2 and PSNR of outputs against their sketches and exemplars.
    Metrics {
        /// CSV with columns output,sketch,exemplar.
        #[arg(long, conflicts_with_all = ["output", "sketch", "exemplar"])]
        list: Option<PathBuf>,
        #[arg(long, requires_all = ["sketch", "exemplar"])]
        output: Option<PathBuf>,
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long)]
        exemplar: Option<PathBuf>,
        /// Report CSV path (printed summary only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun any recorded manifest and verify its outputs.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (all keys optional).
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(p) => Config::load(p),
            None => Ok(Config::default()),
        }
    }
}

#[derive(Args)]
struct SampleCli {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, required_unless_present = "replay")]
    sketch: Option<PathBuf>,
    #[arg(long)]
    exemplar: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<StageMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    save_stage1: bool,
    #[arg(long)]
    trace_energy: bool,
    /// Rerun a recorded sample manifest instead.
    #[arg(long, conflicts_with_all = ["sketch", "exemplar", "mode", "seed", "save_stage1", "trace_energy", "config"])]
    replay: Option<PathBuf>,
}

fn report(m: &RunManifest, out: &Path) {
    println!("{}: {} output file(s) in {}", m.command, m.outputs.len(), out.display());
    println!("config hash {}", m.config_hash());
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenDataset {
            config,
            out,
            size,
            count,
            seed,
            jitter,
        } => {
            let mut c = config.load()?;
            c.dataset.size = size.unwrap_or(c.dataset.size);
            c.dataset.count = count.unwrap_or(c.dataset.count);
            c.dataset.seed = seed.unwrap_or(c.dataset.seed);
            c.dataset.jitter = jitter.unwrap_or(c.dataset.jitter);
            report(&cmd_gen_dataset(&c, &out)?, &out);
        }
        Command::TrainScore {
            config,
            dataset,
            out,
            iterations,
            seed,
        } => {
            let mut c = config.load()?;
            c.train.iterations = iterations.unwrap_or(c.train.iterations);
            c.train.seed = seed.unwrap_or(c.train.seed);
            report(
                &cmd_train_score(&TrainArgs {
                    config: c,
                    dataset,
                    out: out.clone(),
                })?,
                &out,
            );
        }
        Command::Sample(s) => {
            if let Some(m) = s.replay {
                report(&replay(&m, &s.out, worker_threads())?, &s.out);
                println!("replay matches the recorded outputs");
                return Ok(true);
            }
            let mut c = s.config.load()?;
            c.sampler.mode = s.mode.unwrap_or(c.sampler.mode);
            c.sampler.seed = s.seed.unwrap_or(c.sampler.seed);
            let args = SampleArgs {
                config: c,
                sketch: s.sketch.expect("required by clap"),
                exemplar: s.exemplar,
                out: s.out.clone(),
                save_stage1: s.save_stage1,
                trace_energy: s.trace_energy,
            };
            report(&cmd_sample(&args)?, &s.out);
        }
        Command::Ablate {
            config,
            out,
            lambda_g,
            lambda_a,
            modes,
            seeds,
            save_images,
        } => {
            let c = config.load()?;
            let or = |v: Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v };
            let grid = AblationGrid {
                lambda_g: or(lambda_g, c.sampler.weights.lambda_g),
                lambda_a: or(lambda_a, c.sampler.weights.lambda_a),
                modes: if modes.is_empty() { vec![c.sampler.mode] } else { modes },
                seeds,
            };
            let args = AblateArgs {
                config: c,
                grid,
                out: out.clone(),
                save_images,
                threads: worker_threads(),
            };
            report(&cmd_ablate(&args)?, &out);
        }
        Command::Gradcheck { seed, probes, size } => {
            let r = run_gradcheck(&GradcheckOptions {
                seed,
                probes,
                size,
                ..GradcheckOptions::default()
            })?;
            print!("{r}");
            return Ok(r.passed());
        }
        Command::Metrics {
            list,
            output,
            sketch,
            exemplar,
            out,
        } => {
            let inputs = match (list, output, sketch, exemplar) {
                (Some(l), ..) => read_metrics_list(&l)?,
                (None, Some(output), Some(sketch), Some(exemplar)) => vec![MetricsInput {
                    output,
                    sketch,
                    exemplar,
                }],
                _ => return Err(Error::Config("give --list or --output/--sketch/--exemplar".into())),
            };
            let r: MetricReport = compute_metrics(&inputs)?;
            if let Some(p) = out {
                write_metric_report(&p, &r)?;
            }
            println!(
                "{} run(s): shape_l2 {:.6} ± {:.6}, psnr {:.4} ± {:.4} dB",
                r.count(),
                r.mean_shape_l2,
                r.std_shape_l2,
                r.mean_psnr,
                r.std_psnr
            );
        }
        Command::Replay { manifest, out } => {
            report(&replay(&manifest, &out, worker_threads())?, &out);
            println!("replay matches the recorded outputs");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
