//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # shared by every run below
//! sensors = 8
//! seed = 1
//!
//! [thm1]
//! grid_size = 20
//!
//! [noisy-scan]
//! experiment = scan
//! noise = white(0.5)
//! ```
//!
//! Keys before the first section are defaults for all sections. A section
//! without an `experiment` key runs the experiment named by its header. A file
//! without sections describes a single run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dipscan::scan::MetricKind;
use dipscan::Mat;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("{section}: missing field `{field}`")]
    Missing { section: String, field: String },
    #[error("override `{field}`: {message}")]
    Override { field: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Thm1,
    Thm2Sufficiency,
    Thm2Witness,
    Thm4,
    Thm5,
    Gradcheck,
    Eloreta,
    Scan,
    Simulate,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Self::Thm1,
        Self::Thm2Sufficiency,
        Self::Thm2Witness,
        Self::Thm4,
        Self::Thm5,
        Self::Gradcheck,
        Self::Eloreta,
        Self::Scan,
        Self::Simulate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Thm1 => "thm1",
            Self::Thm2Sufficiency => "thm2-sufficiency",
            Self::Thm2Witness => "thm2-witness",
            Self::Thm4 => "thm4",
            Self::Thm5 => "thm5",
            Self::Gradcheck => "gradcheck",
            Self::Eloreta => "eloreta",
            Self::Scan => "scan",
            Self::Simulate => "simulate",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Self::Thm1 => "sLORETA power equals data norm times GOF for every candidate",
            Self::Thm2Sufficiency => "pre-whitened expected-residual scan recovers the true leadfield",
            Self::Thm2Witness => "non-whitening metrics admit a leadfield beating the truth",
            Self::Thm4 => "NAI/SAM powers are increasing functions of GOF",
            Self::Thm5 => "trace-ratio NAI bias construction and refinement",
            Self::Gradcheck => "noise-distortion derivative against finite differences",
            Self::Eloreta => "eLORETA fixed-point weights and residuals",
            Self::Scan => "GOF/sLORETA/beamformer scan of one scenario",
            Self::Simulate => "sampled data and sample covariance of one scenario",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|e| e.name()).collect();
                format!("unknown experiment `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    /// `σ²I` for the given standard deviation `σ`.
    White(f64),
    RandomSpd,
    Explicit(PathBuf),
}

impl NoiseSpec {
    fn parse(s: &str, base: &Path) -> Result<Self, String> {
        if s == "random_spd" {
            return Ok(Self::RandomSpd);
        }
        if let Some(inner) = call_arg(s, "white") {
            let sigma: f64 = inner
                .parse()
                .map_err(|_| format!("white noise level `{inner}` is not a number"))?;
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(format!("white noise level must be positive, got {sigma}"));
            }
            return Ok(Self::White(sigma));
        }
        if let Some(inner) = call_arg(s, "explicit") {
            return existing_path(inner, base).map(Self::Explicit);
        }
        Err(format!(
            "expected white(<sigma>), random_spd or explicit(<path>), got `{s}`"
        ))
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::White(s) => write!(f, "white({s})"),
            Self::RandomSpd => f.write_str("random_spd"),
            Self::Explicit(p) => write!(f, "explicit({})", p.display()),
        }
    }
}

fn call_arg<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?
        .trim_start()
        .strip_prefix('(')?
        .strip_suffix(')')
        .map(str::trim)
}

fn existing_path(raw: &str, base: &Path) -> Result<PathBuf, String> {
    let p = Path::new(raw);
    let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !p.is_file() {
        return Err(format!("file `{}` does not exist", p.display()));
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

impl OutputFormat {
    pub fn extensions(self) -> &'static [&'static str] {
        match self {
            Self::Csv => &["csv"],
            Self::Json => &["json"],
            Self::Both => &["csv", "json"],
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "both" => Ok(Self::Both),
            _ => Err(format!("expected csv, json or both, got `{s}`")),
        }
    }
}

/// Metric choice as written in a config; `explicit` carries its file.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricSpec {
    Identity,
    InverseNoise,
    ClassicSloreta,
    SekiharaSloreta,
    Eloreta,
    Explicit(PathBuf),
}

impl MetricSpec {
    fn parse(s: &str, base: &Path) -> Result<Self, String> {
        Ok(match s {
            "identity" => Self::Identity,
            "inverse_noise" => Self::InverseNoise,
            "classic_sloreta" => Self::ClassicSloreta,
            "sekihara_sloreta" => Self::SekiharaSloreta,
            "eloreta" => Self::Eloreta,
            _ => match call_arg(s, "explicit") {
                Some(inner) => Self::Explicit(existing_path(inner, base)?),
                None => {
                    return Err(format!(
                        "expected identity, inverse_noise, classic_sloreta, sekihara_sloreta, \
                         eloreta or explicit(<path>), got `{s}`"
                    ))
                }
            },
        })
    }

    /// Library metric kind; `explicit` needs the matrix read from its file.
    pub fn kind(&self, alpha: f64, explicit: Option<Mat>) -> MetricKind {
        match self {
            Self::Identity => MetricKind::Identity,
            Self::InverseNoise => MetricKind::InverseNoise,
            Self::ClassicSloreta => MetricKind::ClassicSloreta { alpha },
            Self::SekiharaSloreta => MetricKind::SekiharaSloreta { alpha },
            Self::Eloreta => MetricKind::Eloreta { alpha },
            Self::Explicit(_) => MetricKind::Explicit(explicit.unwrap_or_else(|| Mat::zeros(0, 0))),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::InverseNoise => f.write_str("inverse_noise"),
            Self::ClassicSloreta => f.write_str("classic_sloreta"),
            Self::SekiharaSloreta => f.write_str("sekihara_sloreta"),
            Self::Eloreta => f.write_str("eloreta"),
            Self::Explicit(p) => write!(f, "explicit({})", p.display()),
        }
    }
}

/// One fully resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub label: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub sensors: usize,
    pub grid_size: usize,
    pub k: usize,
    pub metric: MetricSpec,
    pub alpha: f64,
    pub noise: NoiseSpec,
    pub samples: usize,
    pub instances: usize,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    pub write_samples: bool,
    /// `tol.<name>` overrides.
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn tolerance(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }

    /// `<experiment>-<seed>`.
    pub fn stem(&self) -> String {
        format!("{}-{}", self.experiment, self.seed)
    }
}

pub const KEYS: [&str; 14] = [
    "experiment",
    "seed",
    "sensors",
    "grid_size",
    "k",
    "metric",
    "alpha",
    "noise",
    "samples",
    "instances",
    "out_dir",
    "format",
    "write_samples",
    "tol.<name>",
];

#[derive(Debug, Clone, Default)]
struct RawSection {
    name: Option<String>,
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

/// Parses config text; relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let raw = split_sections(text)?;
    resolve_all(raw, base, &[])
}

/// Parses config text, applying `overrides` (`key`, `value`) to every run.
pub fn parse_config_with(
    text: &str,
    base: &Path,
    overrides: &[(String, String)],
) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let raw = split_sections(text)?;
    resolve_all(raw, base, overrides)
}

pub fn read_config(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<Vec<ExperimentConfig>, crate::CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(parse_config_with(&text, base, overrides)?)
}

fn split_sections(text: &str) -> Result<(RawSection, Vec<RawSection>), ConfigError> {
    let mut global = RawSection::default();
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').map(str::trim).ok_or(ConfigError::Syntax {
                line,
                message: format!("unterminated section header `{content}`"),
            })?;
            if name.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    message: "empty section name".into(),
                });
            }
            sections.push(RawSection {
                name: Some(name.to_string()),
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: "empty key".into(),
            });
        }
        if !is_known_key(key) {
            return Err(ConfigError::Field {
                line,
                field: key.to_string(),
                message: "unknown key".into(),
            });
        }
        let target = sections.last_mut().unwrap_or(&mut global);
        if target.entries.contains_key(key) {
            return Err(ConfigError::Field {
                line,
                field: key.to_string(),
                message: "duplicate key".into(),
            });
        }
        target.entries.insert(key.to_string(), (line, value.to_string()));
    }
    Ok((global, sections))
}

fn is_known_key(key: &str) -> bool {
    KEYS[..KEYS.len() - 1].contains(&key)
        || key.strip_prefix("tol.").is_some_and(|n| !n.is_empty())
}

fn resolve_all(
    (global, sections): (RawSection, Vec<RawSection>),
    base: &Path,
    overrides: &[(String, String)],
) -> Result<Vec<ExperimentConfig>, ConfigError> {
    for (key, _) in overrides {
        if !is_known_key(key) {
            return Err(ConfigError::Override {
                field: key.clone(),
                message: "unknown key".into(),
            });
        }
    }
    let sections = if sections.is_empty() {
        vec![RawSection {
            name: None,
            line: 0,
            entries: BTreeMap::new(),
        }]
    } else {
        sections
    };
    sections
        .into_iter()
        .map(|s| resolve(&global, s, base, overrides))
        .collect()
}

/// Looks up a key: override, then section, then global.
struct Lookup<'a> {
    global: &'a RawSection,
    section: &'a RawSection,
    overrides: &'a [(String, String)],
    base: &'a Path,
}

impl Lookup<'_> {
    /// `(line, value)`; line 0 marks a command-line override.
    fn get(&self, key: &str) -> Option<(usize, &str)> {
        if let Some((_, v)) = self.overrides.iter().rev().find(|(k, _)| k == key) {
            return Some((0, v.as_str()));
        }
        self.section
            .entries
            .get(key)
            .or_else(|| self.global.entries.get(key))
            .map(|(l, v)| (*l, v.as_str()))
    }

    fn fail(&self, line: usize, field: &str, message: String) -> ConfigError {
        if line == 0 {
            ConfigError::Override {
                field: field.to_string(),
                message,
            }
        } else {
            ConfigError::Field {
                line,
                field: field.to_string(),
                message,
            }
        }
    }

    fn parse<T>(
        &self,
        key: &str,
        f: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, v)) => f(v).map(Some).map_err(|m| self.fail(line, key, m)),
        }
    }

    fn count(&self, key: &str, default: usize, min: usize) -> Result<usize, ConfigError> {
        Ok(self
            .parse(key, |v| {
                let n: usize = v
                    .parse()
                    .map_err(|_| format!("expected a nonnegative integer, got `{v}`"))?;
                if n < min {
                    return Err(format!("must be at least {min}, got {n}"));
                }
                Ok(n)
            })?
            .unwrap_or(default))
    }
}

fn resolve(
    global: &RawSection,
    section: RawSection,
    base: &Path,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, ConfigError> {
    let lk = Lookup {
        global,
        section: &section,
        overrides,
        base,
    };
    let label = section.name.clone().unwrap_or_else(|| "config".into());

    let experiment = match lk.parse("experiment", |v| v.parse::<Experiment>())? {
        Some(e) => e,
        None => match &section.name {
            Some(name) => name.parse::<Experiment>().map_err(|m| ConfigError::Field {
                line: section.line,
                field: "experiment".into(),
                message: format!("section has no `experiment` key and {m}"),
            })?,
            None => {
                return Err(ConfigError::Missing {
                    section: label,
                    field: "experiment".into(),
                })
            }
        },
    };

    let sensors = lk.count("sensors", 0, 3)?;
    if lk.get("sensors").is_none() {
        return Err(ConfigError::Missing {
            section: label,
            field: "sensors".into(),
        });
    }
    let seed = lk
        .parse("seed", |v| {
            v.parse::<u64>()
                .map_err(|_| format!("expected a nonnegative integer, got `{v}`"))
        })?
        .unwrap_or(0);
    let grid_size = lk.count("grid_size", 20, 1)?;
    let k = lk.count("k", 3, 1)?;
    if k > sensors {
        let line = lk.get("k").map(|(l, _)| l).unwrap_or(section.line.max(1));
        return Err(lk.fail(line, "k", format!("k = {k} exceeds sensors = {sensors}")));
    }
    let samples = lk.count("samples", 10_000, 1)?;
    let instances = lk.count("instances", 20, 1)?;
    let metric = lk
        .parse("metric", |v| MetricSpec::parse(v, lk.base))?
        .unwrap_or(MetricSpec::Identity);
    let alpha = lk
        .parse("alpha", |v| {
            let a: f64 = v.parse().map_err(|_| format!("expected a number, got `{v}`"))?;
            if !(a >= 0.0) || !a.is_finite() {
                return Err(format!("must be nonnegative, got {a}"));
            }
            Ok(a)
        })?
        .unwrap_or(0.05);
    let noise = lk
        .parse("noise", |v| NoiseSpec::parse(v, lk.base))?
        .unwrap_or(NoiseSpec::RandomSpd);
    let out_dir = lk
        .parse("out_dir", |v| {
            if v.is_empty() {
                return Err("empty path".into());
            }
            let p = Path::new(v);
            Ok(if p.is_absolute() { p.to_path_buf() } else { lk.base.join(p) })
        })?
        .unwrap_or_else(|| lk.base.to_path_buf());
    let format = lk
        .parse("format", |v| v.parse::<OutputFormat>())?
        .unwrap_or(OutputFormat::Both);
    let write_samples = lk
        .parse("write_samples", |v| {
            v.parse::<bool>()
                .map_err(|_| format!("expected true or false, got `{v}`"))
        })?
        .unwrap_or(false);

    let mut tolerances = BTreeMap::new();
    let mut tol_keys: Vec<&String> = global
        .entries
        .keys()
        .chain(section.entries.keys())
        .chain(overrides.iter().map(|(k, _)| k))
        .filter(|k| k.starts_with("tol."))
        .collect();
    tol_keys.sort();
    tol_keys.dedup();
    for key in tol_keys {
        let value = lk
            .parse(key, |v| {
                let t: f64 = v.parse().map_err(|_| format!("expected a number, got `{v}`"))?;
                if !(t >= 0.0) || !t.is_finite() {
                    return Err(format!("must be nonnegative, got {t}"));
                }
                Ok(t)
            })?
            .expect("key is present");
        tolerances.insert(key["tol.".len()..].to_string(), value);
    }

    Ok(ExperimentConfig {
        label,
        experiment,
        seed,
        sensors,
        grid_size,
        k,
        metric,
        alpha,
        noise,
        samples,
        instances,
        out_dir,
        format,
        write_samples,
        tolerances,
    })
}
