use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use terasense::bench::benchmark_search_space;
use terasense::error::{AtStage, StageError, StageResult};
use terasense::stages::{run_stage, MetricsReport};
use terasense::{io, plot, run_pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "terasense", version, about = "Delay-angle scan reconstruction and material identification")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scene JSON.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Only the first N TRx positions.
    #[arg(long)]
    max_trx: Option<usize>,
    /// Per-frequency noise power, dB.
    #[arg(long)]
    noise_db: Option<f64>,
    #[arg(long)]
    no_noise: bool,
    /// Estimate over every delay bin instead of the segmented regions.
    #[arg(long)]
    full_grid: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ground truth and channel frequency responses.
    Simulate(Common),
    /// Power-angle-delay profiles.
    Padp(Common),
    /// Threshold, closing and connected-component regions.
    Segment(Common),
    /// Region-restricted SAGE, tracking and de-embedding.
    Estimate(Common),
    /// Structure fitting, point cloud and error metrics.
    Map(Common),
    /// Reflection loss and material ranking per region.
    Identify(Common),
    /// All stages, plots and a manifest.
    Pipeline(Common),
    /// Region-restricted versus full-grid estimation.
    Bench {
        #[command(flatten)]
        common: Common,
        /// TRx index to benchmark.
        #[arg(long, default_value_t = 0)]
        trx: usize,
    },
    /// PNG plots from an output directory.
    Plot(Common),
}

impl Common {
    fn resolve(&self) -> StageResult<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.out {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.scene {
            cfg.scene = Some(v.clone());
        }
        if let Some(v) = self.max_trx {
            cfg.max_trx = Some(v);
        }
        if let Some(v) = self.noise_db {
            cfg.noise.power_db = v;
        }
        if self.no_noise {
            cfg.noise.enabled = false;
        }
        if self.full_grid {
            cfg.full_grid = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> StageResult<serde_json::Value> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().at("config")?;
    }
    let stage = |name: &str, common: &Common| -> StageResult<serde_json::Value> {
        let cfg = common.resolve()?;
        run_stage(name, &cfg)?;
        Ok(json!({ "stage": name, "output_dir": cfg.output_dir }))
    };
    match cli.command {
        Command::Simulate(c) => stage("simulate", &c),
        Command::Padp(c) => stage("padp", &c),
        Command::Segment(c) => stage("segment", &c),
        Command::Estimate(c) => stage("estimate", &c),
        Command::Map(c) => stage("map", &c),
        Command::Identify(c) => stage("identify", &c),
        Command::Pipeline(c) => {
            let cfg = c.resolve()?;
            let manifest = run_pipeline(&cfg)?;
            let metrics: MetricsReport = io::read_json(&cfg.output_dir.join("metrics.json")).at("map")?;
            let summary = |m: &Option<terasense::stages::PointSetMetrics>| {
                m.as_ref().map(|m| json!({ "n_points": m.n_points, "mde_m": m.metrics.mde_m, "rmse_m": m.metrics.rmse_m }))
            };
            Ok(json!({
                "output_dir": cfg.output_dir,
                "config_hash": manifest.config_hash,
                "timings": manifest.timings,
                "filtered": summary(&metrics.filtered),
                "raw": summary(&metrics.raw),
                "baseline": summary(&metrics.baseline),
            }))
        }
        Command::Bench { common, trx } => {
            let cfg = common.resolve()?;
            let report = benchmark_search_space(&cfg, trx)?;
            io::create_dir(&cfg.output_dir).at("bench")?;
            io::write_json(&cfg.output_dir.join("bench.json"), &report).at("bench")?;
            Ok(serde_json::to_value(report).at("bench")?)
        }
        Command::Plot(c) => {
            let cfg = c.resolve()?;
            Ok(serde_json::to_value(plot::emit_plots(&cfg.output_dir)?).at("plot")?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            eprintln!("{}", StageError::new("cli", e.to_string().trim_end()).to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
