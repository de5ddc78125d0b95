use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use dadt::distill::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub const TOOL_VERSION: &str = concat!("dadt ", env!("CARGO_PKG_VERSION"));

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "i/o failure: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<dadt::Error> for CliError {
    fn from(e: dadt::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Run configuration file. Missing keys take their defaults, unknown keys are
/// rejected. Paths given on the command line win over the ones in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    /// Checkpoint path, or "none".
    pub teacher: Option<String>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            data: None,
            teacher: None,
            out: None,
        }
    }
}

/// A parsed config plus the raw document it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub raw: serde_json::Value,
}

impl LoadedConfig {
    /// True when the document sets either similarity weight explicitly.
    pub fn sets_lambdas(&self) -> bool {
        let loss = &self.raw["train"]["loss"];
        loss.get("lambda_c").is_some() || loss.get("lambda_o").is_some()
    }
}

pub fn parse_config(text: &str) -> CliResult<LoadedConfig> {
    let raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    let config: RunConfig = serde_json::from_value(raw.clone())
        .map_err(|e| CliError::Validation(format!("config: {e}")))?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(CliError::Validation(format!(
            "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
            config.schema_version
        )));
    }
    config.train.validate()?;
    Ok(LoadedConfig { config, raw })
}

pub fn load_config(path: Option<&Path>) -> CliResult<LoadedConfig> {
    match path {
        None => Ok(LoadedConfig {
            config: RunConfig::default(),
            raw: serde_json::json!({}),
        }),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            parse_config(&text)
        }
    }
}

/// Parses a JSON document into a type that rejects unknown keys.
pub fn parse_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord<'a, T: Serialize> {
    pub tool_version: &'static str,
    pub command: &'a str,
    pub config: &'a T,
}

/// `<dir>/run.json` for directory outputs, `<stem>.run.json` beside a file.
pub fn record_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        out.with_extension("run.json")
    }
}
