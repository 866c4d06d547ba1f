//! Run configuration: defaults, then the config file, then the fixer
//! environment override, then flags.

use std::path::Path;
use std::time::Duration;

use gsfix::evalx::EvalProtocol;
use gsfix::fixer::ClientConfig;
use gsfix::pipeline::PipelineConfig;
use gsfix::synth::DegradeProfile;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::CliError;

/// Environment variable holding the fixer endpoint.
pub const FIXER_ENV: &str = "GSFIX_FIXER";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixerConfig {
    /// Builtin backend used when no endpoint is set: identity,
    /// median-denoise, or oracle (synthetic datasets only).
    pub backend: String,
    /// Remote fixer: `tcp://host:port` or a command line to spawn.
    pub endpoint: String,
    pub timeout_s: f64,
    pub max_in_flight: usize,
    pub retries: u32,
}

impl Default for FixerConfig {
    fn default() -> Self {
        Self {
            backend: "oracle".into(),
            endpoint: String::new(),
            timeout_s: 120.0,
            max_in_flight: 4,
            retries: 1,
        }
    }
}

impl FixerConfig {
    pub fn client(&self) -> ClientConfig {
        ClientConfig {
            max_in_flight: self.max_in_flight,
            timeout: Duration::from_secs_f64(self.timeout_s),
            retries: self.retries,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seeds initialization and degradation; nested seed keys are derived
    /// from it.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub fixer: FixerConfig,
    pub eval: EvalProtocol,
    pub degrade: DegradeProfile,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            fixer: FixerConfig::default(),
            eval: EvalProtocol::default(),
            degrade: DegradeProfile::default(),
        }
    }
}

/// Overrides collected from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub fixer: Option<String>,
    pub fixer_endpoint: Option<String>,
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), CliError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad config key `{path}`")));
    }
    let mut t = table;
    for k in &keys[..keys.len() - 1] {
        t = match t.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(CliError::Usage(format!("`{k}` in `{path}` is not a section"))),
        };
    }
    t.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Parses `key.path=value`. Values are TOML; anything that does not parse
/// is taken as a string.
fn parse_set(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{s}`")))?;
    let value = toml::from_str::<Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn has_path(t: &Table, path: &[&str]) -> bool {
    match path {
        [] => true,
        [k, rest @ ..] => match t.get(*k) {
            Some(Value::Table(inner)) => has_path(inner, rest),
            Some(_) => rest.is_empty(),
            None => false,
        },
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: Config,
    /// The resolved configuration as TOML; hashed into the manifest.
    pub text: String,
}

impl Resolved {
    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.text.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies the layers in order. `env_endpoint` is the value of
/// [`FIXER_ENV`], passed in so callers control the environment.
pub fn resolve(file: Option<&Path>, env_endpoint: Option<String>, flags: &Overrides) -> Result<Resolved, CliError> {
    let mut table = Table::try_from(Config::default()).expect("defaults serialize");
    let mut user = Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        let t: Table = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
        merge(&mut user, t);
    }
    if let Some(ep) = env_endpoint.filter(|e| !e.trim().is_empty()) {
        set_path(&mut user, "fixer.endpoint", Value::String(ep))?;
    }
    for s in &flags.sets {
        let (k, v) = parse_set(s)?;
        set_path(&mut user, &k, v)?;
    }
    if let Some(seed) = flags.seed {
        set_path(&mut user, "seed", Value::Integer(seed as i64))?;
    }
    if let Some(b) = &flags.fixer {
        // A builtin chosen on the command line beats an endpoint from the
        // file or environment.
        set_path(&mut user, "fixer.backend", Value::String(b.clone()))?;
        set_path(&mut user, "fixer.endpoint", Value::String(String::new()))?;
    }
    if let Some(ep) = &flags.fixer_endpoint {
        set_path(&mut user, "fixer.endpoint", Value::String(ep.clone()))?;
    }
    for nested in [&["pipeline", "init", "seed"][..], &["degrade", "seed"][..]] {
        if has_path(&user, nested) {
            return Err(CliError::Usage(format!(
                "`{}` is derived from the top-level `seed`; set that instead",
                nested.join(".")
            )));
        }
    }
    merge(&mut table, user);
    let mut config: Config = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {e}")))?;
    config.pipeline.init.seed = config.seed;
    config.degrade.seed = config.seed;
    config
        .pipeline
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    config.eval.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config.degrade.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(config.fixer.timeout_s.is_finite() && config.fixer.timeout_s > 0.0) || config.fixer.max_in_flight == 0 {
        return Err(CliError::Usage("fixer.timeout_s must be positive and fixer.max_in_flight ≥ 1".into()));
    }
    let text = toml::to_string(&config).expect("config serializes");
    Ok(Resolved { config, text })
}
