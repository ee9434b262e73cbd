use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dipscan_cli::{read_config, run_all, CliError, Experiment};

const THREADS_VAR: &str = "TOOL_THREADS";

#[derive(Parser)]
#[command(name = "dipscan", version, about = "Seeded dipole-scan and beamformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment section of a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
        /// Any config key, as `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// List available experiments.
    List,
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_VAR}=`{raw}` is not a nonnegative integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("{THREADS_VAR}: {e}"))
}

fn overrides(
    seed: Option<u64>,
    experiment: Option<String>,
    out_dir: Option<PathBuf>,
    format: Option<String>,
    set: Vec<String>,
) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for item in set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| format!("--set `{item}`: expected KEY=VALUE"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(e) = experiment {
        out.push(("experiment".into(), e));
    }
    if let Some(dir) = out_dir {
        let dir = std::path::absolute(&dir).map_err(|e| format!("--out-dir: {e}"))?;
        out.push(("out_dir".into(), dir.display().to_string()));
    }
    if let Some(f) = format {
        out.push(("format".into(), f));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match cli.command {
        Command::List => {
            for e in Experiment::ALL {
                println!("{:<18} {}", e.name(), e.description());
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            seed,
            experiment,
            out_dir,
            format,
            set,
        } => {
            let overrides = match overrides(seed, experiment, out_dir, format, set) {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match read_config(&config, &overrides).and_then(|cfgs| run_all(&cfgs)) {
                Ok(records) => {
                    let mut pass = true;
                    for r in &records {
                        println!("[{}] {}", r.label, r.outcome.summary_line());
                        let failed = r.outcome.failed_seeds();
                        if !failed.is_empty() {
                            let seeds: Vec<_> = failed.iter().map(u64::to_string).collect();
                            println!("[{}] failing instance seeds: {}", r.label, seeds.join(" "));
                        }
                        pass &= r.outcome.pass();
                    }
                    if pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    report_error(&e);
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn report_error(e: &CliError) {
    eprintln!("error: {e}");
}
