use std::fmt;
use std::path::Path;

use bartree_core::{BarParams, Check, ExperimentConfig, InitSpec, NoiseSpec, Tolerances};
use serde::Deserialize;

/// Run configuration as read from disk. Unknown keys are rejected.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigDocument {
    pub params: BarParams,
    #[serde(alias = "spec")]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub init: InitSpec,
    pub n_generations: Option<u32>,
    pub replicates: Option<usize>,
    pub master_seed: Option<u64>,
    pub checks: Option<Vec<Check>>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// A config file that could not be parsed, with its position.
#[derive(Debug)]
pub struct ConfigParseError {
    pub path: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ConfigParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.path, self.line, self.column, self.message)
    }
}

impl std::error::Error for ConfigParseError {}

/// A required key missing from an otherwise valid config.
#[derive(Debug)]
pub struct MissingKey(pub &'static str, pub &'static str);

impl fmt::Display for MissingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}` is required by `{}`", self.0, self.1)
    }
}

impl std::error::Error for MissingKey {}

impl RunConfigDocument {
    pub fn parse(text: &str, path: &str) -> Result<Self, ConfigParseError> {
        serde_json::from_str(text).map_err(|e| ConfigParseError {
            path: path.to_string(),
            line: e.line(),
            column: e.column(),
            message: strip_position(&e.to_string()),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("cannot read {}", path.display())))?;
        Ok(Self::parse(&text, &path.display().to_string())?)
    }

    pub fn seed(&self, command: &'static str) -> Result<u64, MissingKey> {
        self.master_seed.ok_or(MissingKey("master_seed", command))
    }

    pub fn generations(&self, command: &'static str) -> Result<u32, MissingKey> {
        self.n_generations.ok_or(MissingKey("n_generations", command))
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, MissingKey> {
        Ok(ExperimentConfig {
            params: self.params.clone(),
            noise: self.noise,
            init: self.init.clone(),
            n_generations: self.generations("verify")?,
            replicates: self.replicates.ok_or(MissingKey("replicates", "verify"))?,
            master_seed: self.seed("verify")?,
            checks: self.checks.clone().unwrap_or_else(|| Check::ALL.to_vec()),
            tolerances: self.tolerances.clone(),
        })
    }
}

/// serde_json appends " at line L column C"; the position is reported
/// separately.
fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}
