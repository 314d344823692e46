use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edgefail::experiment::{
    compare, load_summaries, resolve_out_dir, run_experiment, write_artifacts, ConfigError, ExperimentConfig,
    ExperimentError,
};
use log::info;

#[derive(Parser)]
#[command(name = "edgefail", version, about = "Vehicle-to-edge failover experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every requested policy and write metrics.csv, summary.csv and manifest.json.
    Run(RunArgs),
    /// Put two or more summary files side by side.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or `trace:<path>`.
    #[arg(long)]
    dataset: Option<String>,
    /// Comma separated subset of lb-psvm, psvm, br.
    #[arg(long)]
    policies: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "attack-every")]
    attack_every: Option<String>,
    /// Output directory (falls back to EDGEFAIL_OUT_DIR, then ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Any config key, e.g. `--set lbpsvm.k1=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Also write a gnuplot script.
    #[arg(long)]
    plot: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// summary.csv files or run directories.
    #[arg(required = true, num_args = 1..)]
    summaries: Vec<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::Flag { flag: "--set".into(), message: format!("expected KEY=VALUE, got '{kv}'") })?;
        cfg.set(k, v).map_err(|message| ConfigError::Flag { flag: format!("--set {k}"), message })?;
    }
    let flags = [
        ("--dataset", "dataset", &args.dataset),
        ("--policies", "policies", &args.policies),
        ("--horizon", "horizon", &args.horizon),
        ("--seed", "seed", &args.seed),
        ("--attack-every", "attack_every", &args.attack_every),
    ];
    for (flag, key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v).map_err(|message| ConfigError::Flag { flag: flag.into(), message })?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), ExperimentError> {
    let cfg = load_config(&args)?;
    let out = resolve_out_dir(args.out.clone());
    info!("config {} -> {}", cfg.hash(), out.display());
    let exp = run_experiment(&cfg, args.jobs)?;
    let written = write_artifacts(&exp, &out, args.plot)?;
    for s in exp.summaries() {
        println!(
            "{:<8} rows {:>5}  delay {:>9.3} ms  elf@attack {:>10.3} %  fairness {:.4}",
            s.policy, s.rows, s.avg_delay_ms, s.avg_elf_attack_pct, s.mean_fairness
        );
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn compare_cmd(args: CompareArgs) -> Result<(), ExperimentError> {
    let rows = load_summaries(&args.summaries)?;
    println!("{}", compare(&rows)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
