use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use entropy_lab::harness::{
    default_output_dir, run_experiment, run_quant_audit, run_sequential, summarize, sweep,
    AuditConfig, ExperimentConfig, OUT_DIR_ENV,
};
use entropy_lab::quantize::QuantMode;

#[derive(Parser)]
#[command(name = "entlab", version, about = "Tabular policy-gradient entropy laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write one metrics file pair per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Train on config A, carry the best checkpoint over, then train on config B.
    Sequential {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Ratio-bias and clip-fraction audit of 16-bit casting.
    Audit {
        #[arg(long, default_value = "bf16")]
        format: QuantMode,
        #[arg(long, default_value_t = 1_000_000)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Full audit config in TOML; overrides the defaults above.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
    /// Per-run best reward, entropy ratio, and the entropy/reward rank correlation.
    Summarize {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a config once per value of a dotted parameter key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, env = OUT_DIR_ENV)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> entropy_lab::Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.first_seed = s;
                cfg.seeds = 1;
            }
            let dir = cfg.output_dir(out.as_deref());
            for p in run_experiment(&cfg, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Sequential { config_a, config_b, out } => {
            let a = ExperimentConfig::load(&config_a)?;
            let b = ExperimentConfig::load(&config_b)?;
            let dir = a.output_dir(out.as_deref());
            for run in run_sequential(&a, &b, &dir)? {
                let reached = b
                    .reward_threshold
                    .and_then(|t| run.iterations_to_threshold(t))
                    .map_or_else(|| "NA".to_string(), |i| i.to_string());
                println!(
                    "seed {} checkpoint {} entropy {:.6} threshold_iteration {reached}",
                    run.seed, run.selected_iteration, run.handoff_entropy
                );
            }
        }
        Command::Audit {
            format,
            samples,
            seed,
            config,
            out,
        } => {
            let cfg = match config {
                Some(path) => AuditConfig::load(&path)?,
                None => {
                    let mut c = AuditConfig::default_for(format, samples);
                    c.seed = seed;
                    c
                }
            };
            let dir = out.unwrap_or_else(default_output_dir);
            let report = run_quant_audit(&cfg, &dir)?;
            for p in report.files {
                println!("{}", p.display());
            }
        }
        Command::Summarize { files, out } => {
            let summary = summarize(&files)?;
            let text = summary.to_csv_string()?;
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text).map_err(|e| entropy_lab::Error::Io { path, source: e })?;
            }
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = cfg.output_dir(out.as_deref());
            for p in sweep(&cfg, &param, &values, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
