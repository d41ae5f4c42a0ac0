use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use vosap_core::harness::{
    cli_bench_metrics, cli_compare, cli_render, cli_simulate, resolve_out_dir, ExperimentConfig, ExperimentReport,
    Overrides,
};
use vosap_core::planner::Mode;
use vosap_core::prediction::MetricKind;
use vosap_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vosap", version, about = "Perception-aware mast planning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment and write its log, belief rasters and trajectory plot.
    Simulate(Common),
    /// Paired active vs passive runs over several seeds.
    Compare(Common),
    /// Time the planner under each metric and tree size.
    BenchMetrics(Common),
    /// Export the world texture and the starting camera view as PGM.
    Render {
        #[command(flatten)]
        common: Common,
        /// Texel stride of the world raster.
        #[arg(long, default_value_t = 5)]
        stride: usize,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for `compare`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    #[arg(long)]
    nodes: Option<usize>,
    /// Output directory; falls back to VOSAP_OUT, then ./vosap-out.
    #[arg(long, env = "VOSAP_OUT")]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn load(&self) -> vosap_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            scenario: self.scenario.clone(),
            seed: self.seed,
            seeds: self.seeds.clone(),
            mode: self.mode,
            metric: self.metric,
            nodes: self.nodes,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::UnknownScenario(_) => ExitCode::from(2),
        Error::MaxStepsExceeded(_) => ExitCode::from(3),
        _ => ExitCode::from(1),
    }
}

fn print_report(report: &ExperimentReport) {
    print!("{}", report.to_csv());
    println!(
        "active better in {}/{} seeds; median improvement {}",
        report.active_better_count(),
        report.rows.len(),
        report.median_improvement().map_or_else(|| "-".to_string(), |m| format!("{:.1}%", 100.0 * m))
    );
}

fn run(cli: Cli) -> vosap_core::Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let out = resolve_out_dir(&cfg);
            let art = cli_simulate(&cfg, &out)?;
            info!("wrote {} and {}", art.run_csv.display(), art.trajectory_svg.display());
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            let out = resolve_out_dir(&cfg);
            let report = cli_compare(&cfg, &cfg.seeds, &out)?;
            print_report(&report);
        }
        Command::BenchMetrics(c) => {
            let cfg = c.load()?;
            let out = resolve_out_dir(&cfg);
            let report = cli_bench_metrics(&cfg, &out)?;
            print!("{}", report.to_csv());
            for v in &report.violations {
                warn!("ordering violation: {v}");
            }
        }
        Command::Render { common, stride } => {
            let cfg = common.load()?;
            let out = resolve_out_dir(&cfg);
            for p in cli_render(&cfg, &out, stride)? {
                info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            exit_code(&e)
        }
    }
}
