use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A failed run. Validation failures exit with 2, everything else with 1.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<nnslicer::Error> for Failure {
    fn from(e: nnslicer::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(format!("cannot write CSV: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(format!("cannot write JSON: {e}"))
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Validation(msg.into()))
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// Worker threads [default: $NNSLICER_WORKERS, else 1]
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed for every random choice [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts and reports [default: .]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON object of option values keyed by flag name with underscores
    /// (e.g. {"theta": 0.1, "batch_size": 64}); flags win on conflict
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl Common {
    pub fn workers(&self) -> Outcome<nnslicer::parallel::Workers> {
        let count = match self.workers {
            Some(n) => n,
            None => match std::env::var("NNSLICER_WORKERS") {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Failure::Validation(format!("NNSLICER_WORKERS must be a positive integer, got {v:?}")))?,
                Err(_) => 1,
            },
        };
        if count == 0 {
            return invalid("--workers must be at least 1");
        }
        Ok(nnslicer::parallel::Workers::new(count)?)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> Outcome<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

/// Fills options missing from the command line with values from the JSON
/// config file. Unset flags serialize as null or false and never override.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>) -> Outcome<T> {
    let Some(path) = config else { return Ok(flags) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    let mut merged: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::Validation(format!("config {} is not valid JSON: {e}", path.display())))?;
    let Value::Object(base) = &mut merged else {
        return invalid(format!("config {} must hold a JSON object", path.display()));
    };
    if let Value::Object(given) = serde_json::to_value(&flags)? {
        for (key, value) in given {
            let unset = matches!(&value, Value::Null | Value::Bool(false)) || value.as_array().is_some_and(|a| a.is_empty());
            if !unset {
                base.insert(key, value);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
}

pub fn need<T: Clone>(value: &Option<T>, flag: &str) -> Outcome<T> {
    value.clone().ok_or_else(|| Failure::Validation(format!("{flag} is required")))
}

/// A required input file that must exist.
pub fn existing(value: &Option<PathBuf>, flag: &str) -> Outcome<PathBuf> {
    let path = need(value, flag)?;
    check_exists(&path, flag)?;
    Ok(path)
}

pub fn check_exists(path: &Path, flag: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        invalid(format!("{flag}: no such file {}", path.display()))
    }
}

/// Parses a comma list of class indices such as `3,8`.
pub fn parse_classes(text: &str, class_count: usize) -> Outcome<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c: usize = part
            .parse()
            .map_err(|_| Failure::Validation(format!("--outputs: {part:?} is not a class index")))?;
        if c >= class_count {
            return invalid(format!("--outputs: class {c} is out of range for {class_count} classes"));
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    if out.is_empty() {
        return invalid("--outputs needs at least one class index");
    }
    out.sort_unstable();
    Ok(out)
}

/// Accepts plain numbers and fractions such as `8/256`.
pub fn parse_amount(text: &str, flag: &str) -> Outcome<f32> {
    let bad = || Failure::Validation(format!("{flag}: {text:?} is not a number or fraction"));
    let value = match text.split_once('/') {
        Some((a, b)) => {
            let a: f32 = a.trim().parse().map_err(|_| bad())?;
            let b: f32 = b.trim().parse().map_err(|_| bad())?;
            if b == 0.0 {
                return Err(bad());
            }
            a / b
        }
        None => text.trim().parse().map_err(|_| bad())?,
    };
    if !value.is_finite() || value < 0.0 {
        return invalid(format!("{flag} must be finite and non-negative, got {text}"));
    }
    Ok(value)
}

pub fn check_theta(theta: f32) -> Outcome<f32> {
    if theta.is_finite() && theta >= 0.0 {
        Ok(theta)
    } else {
        invalid(format!("--theta must be finite and non-negative, got {theta}"))
    }
}

pub fn check_unit(value: f64, flag: &str) -> Outcome<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        invalid(format!("{flag} must lie in [0, 1], got {value}"))
    }
}
