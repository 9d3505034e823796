use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use loft::data::FewShot;
use loft::engine::{
    run_bench, run_evaluate, run_phase1, run_phase2, run_predict, run_verify, run_verify_with,
    skewed_dft, PipelineConfig,
};
use loft::mock_llm::{serve_forever, MockMode};

#[derive(Parser)]
#[command(name = "loft", about = "Frequency-decomposed time series forecasting pipeline", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML pipeline configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed for both phases.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, forecasts, and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Chat-completion endpoint URL; enables calibration.
    #[arg(long)]
    endpoint_url: Option<String>,
    /// Keep only the most recent part of the train split: a fraction in
    /// (0,1) or an absolute window count.
    #[arg(long)]
    few_shot: Option<String>,
}

impl RunArgs {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.phase1.seed = seed;
            cfg.phase2.seed = seed;
        }
        if let Some(url) = &self.endpoint_url {
            let mut ep = cfg.endpoint.take().unwrap_or_default();
            ep.base_url = url.clone();
            cfg.endpoint = Some(ep);
        }
        if let Some(raw) = &self.few_shot {
            cfg.split.few_shot = Some(parse_few_shot(raw)?);
        }
        Ok(cfg)
    }

    fn plfm_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join("plfm.json"))
    }

    fn resid_path(&self, explicit: &Option<PathBuf>) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join("resid.json"))
    }
}

fn parse_few_shot(raw: &str) -> anyhow::Result<FewShot> {
    if let Ok(n) = raw.parse::<usize>() {
        return Ok(FewShot::Windows(n));
    }
    let f: f64 = raw.parse().context("--few-shot takes a fraction or a window count")?;
    if !(0.0..=1.0).contains(&f) {
        bail!("--few-shot fraction must be in [0, 1], got {f}");
    }
    Ok(FewShot::Fraction(f))
}

#[derive(Subcommand)]
enum Cmd {
    /// Phase 1: train the low-frequency learner.
    TrainPlfm(RunArgs),
    /// Phase 2: train the residual learner against a phase-1 checkpoint.
    TrainResidual {
        #[command(flatten)]
        run: RunArgs,
        /// Phase-1 checkpoint (defaults to <out>/plfm.json).
        #[arg(long)]
        plfm: Option<PathBuf>,
    },
    /// Forecast the most recent test window and write forecast.csv.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        plfm: Option<PathBuf>,
        /// Phase-2 checkpoint (defaults to <out>/resid.json).
        #[arg(long)]
        resid: Option<PathBuf>,
    },
    /// Metrics over the full test split.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        plfm: Option<PathBuf>,
        #[arg(long)]
        resid: Option<PathBuf>,
    },
    /// Run the configured benchmark grid and write bench.csv.
    Bench(RunArgs),
    /// Check the Parseval and MAE-bound identities on random signals.
    VerifyTheorems {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swap in a deliberately wrong transform to confirm the checks bite.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Dump the effective configuration as TOML.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the deterministic local mock endpoint.
    MockLlm {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, value_enum, default_value_t = MockModeArg::Echo)]
        mode: MockModeArg,
        /// Canned reply for --mode fixed, comma-separated.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MockModeArg {
    Echo,
    Garbage,
    Fixed,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::TrainPlfm(run) => {
            let path = run_phase1(&run.config()?, &run.out)?;
            println!("wrote {}", path.display());
        }
        Cmd::TrainResidual { run, plfm } => {
            let path = run_phase2(&run.config()?, &run.plfm_path(&plfm), &run.out)?;
            println!("wrote {}", path.display());
        }
        Cmd::Predict { run, plfm, resid } => {
            let report = run_predict(
                &run.config()?,
                &run.plfm_path(&plfm),
                &run.resid_path(&resid),
                &run.out,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Evaluate { run, plfm, resid } => {
            let report = run_evaluate(
                &run.config()?,
                &run.plfm_path(&plfm),
                &run.resid_path(&resid),
                &run.out,
            )?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Bench(run) => {
            let rows = run_bench(&run.config()?, &run.out)?;
            println!("wrote {} rows to {}", rows.len(), run.out.join("bench.csv").display());
        }
        Cmd::VerifyTheorems { cases, seed, inject_bug } => {
            let report = if inject_bug {
                run_verify_with(cases, seed, skewed_dft)?
            } else {
                run_verify(cases, seed)?
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                std::process::exit(1);
            }
        }
        Cmd::PrintConfig { config } => {
            let cfg = match config {
                Some(path) => PipelineConfig::load(&path)?,
                None => PipelineConfig::default(),
            };
            print!("{}", cfg.to_toml());
        }
        Cmd::MockLlm { port, mode, values } => {
            let mode = match mode {
                MockModeArg::Echo => MockMode::Echo,
                MockModeArg::Garbage => MockMode::Garbage,
                MockModeArg::Fixed => {
                    if values.is_empty() {
                        bail!("--mode fixed requires --values");
                    }
                    MockMode::Fixed(values)
                }
            };
            serve_forever(mode, port)?;
        }
    }
    Ok(())
}
