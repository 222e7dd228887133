use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mscs_cli::config::{Overrides, RollingSection, RunConfig};
use mscs_cli::output::write_atomic;
use mscs_cli::synth::{reproduction_universe, LoadLike};
use mscs_cli::Command;

#[derive(Parser)]
#[command(name = "mscs", version, about = "Model selection confidence sets for ARMAX models")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Screen every candidate against the full model and write the confidence set
    Set(RunArgs),
    /// Confidence set plus lower boundary models and inclusion importance
    Boundary(RunArgs),
    /// Monte Carlo study over the configured grid of processes and sample sizes
    Mc(RunArgs),
    /// Rolling one-step-ahead forecasts of every candidate, split by set membership
    Forecast(RunArgs),
    /// AIC/BIC/RMSE selections next to inclusion importance
    Audit(RunArgs),
    /// Write a synthetic hourly load CSV and a matching config
    Synth {
        #[arg(long, default_value_t = 1600)]
        days: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated significance levels, e.g. 0.01,0.05
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
}

fn execute(cmd: Command, args: &RunArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply(&Overrides {
        seed: args.seed,
        threads: args.threads,
        out_dir: args.out.clone(),
        alphas: args.alpha.clone(),
    });
    let meta = mscs_cli::run(cmd, &cfg)?;
    for f in &meta.outputs {
        println!("{}", cfg.out_dir.join(f).display());
    }
    Ok(())
}

fn synth(days: usize, seed: u64, out: &std::path::Path) -> Result<()> {
    let g = LoadLike::new(days, seed);
    write_atomic(&out.join("load.csv"), g.csv().as_bytes())?;
    let mut data = g.data_config("load.csv");
    // last ~17% of days scored; estimation ends 20 days before scoring starts
    let n_forecasts = days * 7 / 40;
    let evaluation_start = days - n_forecasts;
    let rolling = (evaluation_start >= 100 && n_forecasts > 0).then(|| {
        let estimation_len = evaluation_start - 20;
        data.estimation_end = Some((g.start + chrono::Duration::days(estimation_len as i64 - 1)).to_string());
        RollingSection {
            window_length: estimation_len - 20,
            n_forecasts,
            refit_every: 28,
            evaluation_start: Some(evaluation_start),
            evaluation_start_date: None,
        }
    });
    let cfg = RunConfig {
        seed,
        threads: None,
        out_dir: "results".into(),
        alphas: vec![0.01],
        data: Some(data),
        universe: Some(reproduction_universe()),
        fit: Default::default(),
        rolling,
        montecarlo: None,
    };
    let text = toml::to_string_pretty(&cfg).context("serializing config")?;
    write_atomic(&out.join("config.toml"), text.as_bytes())?;
    println!("{}", out.join("load.csv").display());
    println!("{}", out.join("config.toml").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, result) = match &cli.command {
        Cmd::Set(a) => ("set", execute(Command::Set, a)),
        Cmd::Boundary(a) => ("boundary", execute(Command::Boundary, a)),
        Cmd::Mc(a) => ("mc", execute(Command::Mc, a)),
        Cmd::Forecast(a) => ("forecast", execute(Command::Forecast, a)),
        Cmd::Audit(a) => ("audit", execute(Command::Audit, a)),
        Cmd::Synth { days, seed, out } => ("synth", synth(*days, *seed, out)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "status": "error",
                "command": name,
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
