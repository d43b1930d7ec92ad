use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use stagecache_harness::report::{
    ablate, compare, export_plots, parse_ns, run, sweep_n, write_artifacts,
};
use stagecache_harness::{HarnessError, RunConfig};

#[derive(Parser)]
#[command(
    name = "stagecache",
    version,
    about = "Staged latent-diffusion inference experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one configuration against its all-off baseline.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied after the config file
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Artifact directory (overrides `output.dir`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a variant against a baseline with the same seed.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        /// applied to both configs
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Remove each memory optimization in turn and tabulate stage peaks.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Speed-up and quality across cache intervals.
    SweepN {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "1,2,3,4,8")]
        n: String,
    },
    /// Per-frame metric CSVs for each cache interval.
    ExportPlots {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value = "1,2,3,4,8")]
        n: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig, HarnessError> {
    match path {
        Some(p) => RunConfig::load(p, sets),
        None => {
            let mut c = RunConfig::default();
            for s in sets {
                c.set_pair(s)?;
            }
            Ok(c)
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).context("serializing output")
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run { config, sets, out } => {
            let cfg = load(config.as_deref(), &sets)?;
            let result = run(&cfg)?;
            if let Some(dir) = out.or(cfg.output_dir.clone()) {
                write_artifacts(&dir, &result)
                    .with_context(|| format!("writing {}", dir.display()))?;
            }
            println!("{}", json(&result.report)?);
        }
        Cmd::Compare {
            baseline,
            variant,
            sets,
        } => {
            let b = RunConfig::load(&baseline, &sets)?;
            let v = RunConfig::load(&variant, &sets)?;
            let (row, _) = compare(&b, &v)?;
            println!("{}", json(&row)?);
        }
        Cmd::Ablate { config, sets } => {
            let cfg = load(config.as_deref(), &sets)?;
            print!("{}", ablate(&cfg)?.to_csv());
        }
        Cmd::SweepN { config, sets, n } => {
            let cfg = load(config.as_deref(), &sets)?;
            let table = sweep_n(&cfg, &parse_ns(&n)?)?;
            print!("{}", table.to_csv());
            for f in &table.trend_flags {
                eprintln!("trend: {f}");
            }
        }
        Cmd::ExportPlots {
            config,
            sets,
            n,
            out,
        } => {
            let cfg = load(config.as_deref(), &sets)?;
            let table = export_plots(&cfg, &parse_ns(&n)?, &out)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<HarnessError>()
                .map_or(1, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
