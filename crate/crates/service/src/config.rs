//! Engine configuration: built-in defaults, then an optional TOML file, then
//! `PROGUIDE_*` environment variables, then command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use proguide_core::click::CeHyperparams;
use proguide_core::dbs::DbsConfig;
use proguide_core::objectives::DEFAULT_BETA;
use proguide_core::rank::DEFAULT_LAMBDA;
use proguide_core::{DEFAULT_K, DEFAULT_SUMMARY_CAP};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "PROGUIDE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("environment variable {name}: cannot parse `{value}`")]
    Env { name: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Remote model endpoints. Unset entries fall back to local stand-ins.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub goal: Option<String>,
    pub answer: Option<String>,
    pub teacher: Option<String>,
    pub ce: Option<String>,
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub k: usize,
    pub dbs: DbsConfig,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub summary_cap: usize,
    pub gaa_retries: usize,
    /// Store each turn's scored candidate matrix in the event log.
    pub persist_matrix: bool,
    /// Stamp events with their sequence number instead of wall-clock time.
    pub logical_clock: bool,
    /// Next-token table for the decoder; a built-in corpus model otherwise.
    pub scorer_table: Option<PathBuf>,
    /// Log-probability bonus for words that occur in the guidance prompt.
    pub prompt_bonus: f64,
    /// Trained click-estimator weights.
    pub ce_model: Option<PathBuf>,
    pub ce_training: CeHyperparams,
    /// Teacher candidates per conversation; must exceed `k`.
    pub distill_n: usize,
    pub endpoints: Endpoints,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            dbs: DbsConfig::default(),
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            seed: 0,
            data_dir: PathBuf::from("data"),
            summary_cap: DEFAULT_SUMMARY_CAP,
            gaa_retries: 1,
            persist_matrix: true,
            logical_clock: false,
            scorer_table: None,
            prompt_bonus: 2.0,
            ce_model: None,
            ce_training: CeHyperparams::default(),
            distill_n: 5,
            endpoints: Endpoints {
                timeout_ms: 5_000,
                ..Endpoints::default()
            },
        }
    }
}

fn parse_env<T: FromStr>(name: &str, value: &str) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Env {
        name: name.to_owned(),
        value: value.to_owned(),
    })
}

fn parse_bool(name: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::Env {
            name: name.to_owned(),
            value: value.to_owned(),
        }),
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Applies `PROGUIDE_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        macro_rules! num {
            ($name:literal, $field:expr) => {
                if let Some(v) = lookup($name) {
                    $field = parse_env($name, &v)?;
                }
            };
        }
        num!("PROGUIDE_K", self.k);
        num!("PROGUIDE_SEED", self.seed);
        num!("PROGUIDE_LAMBDA", self.lambda);
        num!("PROGUIDE_BETA", self.beta);
        num!("PROGUIDE_GROUPS", self.dbs.num_groups);
        num!("PROGUIDE_BEAMS", self.dbs.beams_per_group);
        num!("PROGUIDE_DIVERSITY_WEIGHT", self.dbs.diversity_weight);
        num!("PROGUIDE_NGRAM_ORDER", self.dbs.ngram_order);
        num!("PROGUIDE_MAX_LENGTH", self.dbs.max_length);
        num!("PROGUIDE_SUMMARY_CAP", self.summary_cap);
        num!("PROGUIDE_GAA_RETRIES", self.gaa_retries);
        num!("PROGUIDE_PROMPT_BONUS", self.prompt_bonus);
        num!("PROGUIDE_DISTILL_N", self.distill_n);
        num!("PROGUIDE_TIMEOUT_MS", self.endpoints.timeout_ms);
        if let Some(v) = lookup("PROGUIDE_PERSIST_MATRIX") {
            self.persist_matrix = parse_bool("PROGUIDE_PERSIST_MATRIX", &v)?;
        }
        if let Some(v) = lookup("PROGUIDE_LOGICAL_CLOCK") {
            self.logical_clock = parse_bool("PROGUIDE_LOGICAL_CLOCK", &v)?;
        }
        if let Some(v) = lookup("PROGUIDE_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = lookup("PROGUIDE_SCORER_TABLE") {
            self.scorer_table = Some(v.into());
        }
        if let Some(v) = lookup("PROGUIDE_CE_MODEL") {
            self.ce_model = Some(v.into());
        }
        for (name, slot) in [
            ("PROGUIDE_GOAL_URL", &mut self.endpoints.goal),
            ("PROGUIDE_ANSWER_URL", &mut self.endpoints.answer),
            ("PROGUIDE_TEACHER_URL", &mut self.endpoints.teacher),
            ("PROGUIDE_CE_URL", &mut self.endpoints.ce),
        ] {
            if let Some(v) = lookup(name) {
                *slot = Some(v);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        self.dbs.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        if self.distill_n <= self.k {
            return bad(format!("distill_n {} must exceed k {}", self.distill_n, self.k));
        }
        if !self.prompt_bonus.is_finite() {
            return bad("prompt_bonus must be finite".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }
}
