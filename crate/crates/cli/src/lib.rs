//! Config-driven experiment runner on top of [`dipscan`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{read_config, ConfigError, Experiment, ExperimentConfig, OutputFormat};
pub use experiments::{instance_seed, run_experiment, Outcome};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] dipscan::Error),
    #[error("runs `{first}` and `{second}` would both write `{stem}`")]
    OutputCollision {
        first: String,
        second: String,
        stem: String,
    },
}

/// Writes `<experiment>-<seed>.<ext>` into `out_dir` for each extension of
/// `format`, overwriting existing files.
pub fn emit_report(
    outcome: &Outcome,
    stem: &str,
    format: OutputFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for ext in format.extensions() {
        let body = match *ext {
            "json" => outcome.to_json_string()?,
            _ => outcome.to_csv_string()?,
        };
        let path = out_dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// One finished run.
#[derive(Debug)]
pub struct RunRecord {
    pub label: String,
    pub outcome: Outcome,
    pub files: Vec<PathBuf>,
}

/// Runs every config in order and writes its reports.
///
/// Configuration and I/O errors abort; certification failures do not.
pub fn run_all(configs: &[ExperimentConfig]) -> Result<Vec<RunRecord>, CliError> {
    for (i, a) in configs.iter().enumerate() {
        if let Some(b) = configs[i + 1..]
            .iter()
            .find(|b| b.out_dir == a.out_dir && b.stem() == a.stem())
        {
            return Err(CliError::OutputCollision {
                first: a.label.clone(),
                second: b.label.clone(),
                stem: a.stem(),
            });
        }
    }
    configs
        .iter()
        .map(|cfg| {
            let outcome = run_experiment(cfg)?;
            let files = emit_report(&outcome, &cfg.stem(), cfg.format, &cfg.out_dir)?;
            Ok(RunRecord {
                label: cfg.label.clone(),
                outcome,
                files,
            })
        })
        .collect()
}
