//! Run configuration: profile defaults, a TOML file, `--set` overrides and
//! the flat flags, merged in that order into one [`RunConfig`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};
use tutor_core::agent::AgentConfig;
use tutor_core::env::EnvConfig;
use tutor_core::train::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-size network and the 40/16-class datasets.
    Paper,
    /// Small network and the 8/4-class datasets, for one CPU core.
    #[default]
    Desk,
}

impl FromStr for Profile {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(CliError::Config(format!("profile: unknown value `{s}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

/// Where the two concept pools come from. A value is either a manifest
/// path or `preset:<name>` for a built-in dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: String,
    pub test: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl DataConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (train, test) = match profile {
            Profile::Paper => ("preset:animal", "preset:fruit"),
            Profile::Desk => ("preset:desk-train", "preset:desk-test"),
        };
        DataConfig {
            train: train.into(),
            test: test.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (agent, train) = match profile {
            Profile::Paper => (AgentConfig::paper(), TrainConfig::default()),
            Profile::Desk => (AgentConfig::desk(), TrainConfig::desk()),
        };
        RunConfig {
            profile,
            checkpoint_every: 0,
            data: DataConfig::for_profile(profile),
            env: EnvConfig {
                variation_ratio: 0.5,
                ..EnvConfig::default()
            },
            agent,
            train,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim_end().to_string();
            match e.span().and_then(|s| field_at(text, s.start)) {
                Some(field) => CliError::Config(format!("{field}: {msg}")),
                None => CliError::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.env.validate().map_err(|e| CliError::Config(format!("env: {e}")))?;
        self.agent.validate().map_err(|e| CliError::Config(format!("agent: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(())
    }
}

/// Dotted key of the `key = value` line containing byte `pos`.
fn field_at(text: &str, pos: usize) -> Option<String> {
    let mut section = String::new();
    let mut offset = 0;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
        }
        if pos < offset + line.len() + 1 {
            let key = trimmed.split_once('=')?.0.trim();
            return Some(if section.is_empty() { key.to_string() } else { format!("{section}.{key}") });
        }
        offset += line.len() + 1;
    }
    None
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything the command line can say about a run.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub profile: Option<Profile>,
    /// `key=value` pairs; keys are dotted paths such as `train.gamma`.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub task: Option<String>,
}

impl Overrides {
    /// Profile defaults, then the file, then `--set`, then the flat flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => Some(read_table(path)?),
            None => None,
        };
        let profile = match (self.profile, file.as_ref().and_then(|t| t.get("profile"))) {
            (Some(p), _) => p,
            (None, Some(Value::String(s))) => s.parse()?,
            (None, Some(_)) => return Err(CliError::Config("profile: expected a string".into())),
            (None, None) => Profile::Desk,
        };
        let mut root = Table::try_from(RunConfig::for_profile(profile)).expect("run config is a table");
        if let Some(file) = file {
            merge(&mut root, file);
        }
        root.insert("profile".into(), Value::String(profile.to_string()));
        for pair in &self.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set `{pair}`: expected key=value")))?;
            set_path(&mut root, key.trim(), parse_value(value.trim()))?;
        }
        if let Some(seed) = self.seed {
            set_path(&mut root, "train.seed", Value::Integer(seed as i64))?;
        }
        if let Some(mode) = &self.mode {
            set_path(&mut root, "train.mode", Value::String(mode.clone()))?;
        }
        if let Some(task) = &self.task {
            set_path(&mut root, "env.task", Value::String(task.clone()))?;
        }
        let text = toml::to_string(&root).map_err(|e| CliError::Config(e.to_string()))?;
        RunConfig::from_toml(&text)
    }
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("config {}: {}", path.display(), e.message())))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set: malformed key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for (i, p) in parents.iter().enumerate() {
        table = match table.get_mut(*p) {
            Some(Value::Table(t)) => t,
            _ => return Err(CliError::Config(format!("unknown field `{}`", parts[..=i].join(".")))),
        };
    }
    if !table.contains_key(*last) {
        return Err(CliError::Config(format!("unknown field `{key}`")));
    }
    table.insert((*last).to_string(), value);
    Ok(())
}
