//! Experiment configuration: one TOML document, strictly parsed.

use std::path::PathBuf;

use pairlim_core::limits::{critical_equilibrium, overloaded_equilibrium, profile_at};
use pairlim_core::model::ModelError;
use pairlim_core::pipelines::canonical_params;
use pairlim_core::ssa::Timescale;
use pairlim_core::{build_finite, FiniteModel, ModelParams, RegimeRequest, State};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub c: Vec<f64>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub beta: f64,
    pub delta: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = canonical_params();
        Self {
            c: p.c,
            lambda: p.lambda,
            eta: p.eta,
            beta: p.beta,
            delta: p.delta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawRegime", into = "RawRegime")]
pub enum RegimeSection {
    #[default]
    Dynamic,
    Overloaded {
        r: f64,
    },
    Critical,
}

// Flat form on disk; an internally tagged enum would let unit variants
// swallow unknown keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegime {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
}

impl TryFrom<RawRegime> for RegimeSection {
    type Error = String;

    fn try_from(raw: RawRegime) -> Result<Self, String> {
        match (raw.kind.as_str(), raw.r) {
            ("dynamic", None) => Ok(Self::Dynamic),
            ("critical", None) => Ok(Self::Critical),
            ("overloaded", Some(r)) => Ok(Self::Overloaded { r }),
            ("overloaded", None) => Err("overloaded regime needs `r`".into()),
            ("dynamic" | "critical", Some(_)) => Err(format!("`r` is not a parameter of the {} regime", raw.kind)),
            (k, _) => Err(format!("unknown regime `{k}`")),
        }
    }
}

impl From<RegimeSection> for RawRegime {
    fn from(r: RegimeSection) -> Self {
        let kind = r.name().to_string();
        match r {
            RegimeSection::Overloaded { r } => Self { kind, r: Some(r) },
            _ => Self { kind, r: None },
        }
    }
}

impl RegimeSection {
    pub fn request(&self) -> RegimeRequest {
        match *self {
            RegimeSection::Dynamic => RegimeRequest::Dynamic,
            RegimeSection::Overloaded { r } => RegimeRequest::Overloaded { r },
            RegimeSection::Critical => RegimeRequest::Critical,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RegimeSection::Dynamic => "dynamic",
            RegimeSection::Overloaded { .. } => "overloaded",
            RegimeSection::Critical => "critical",
        }
    }
}

/// Initial free particles. In the critical regime values live on the
/// `sqrt(N)` scale, otherwise they are fractions of `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Fractions {
        f0: Vec<f64>,
        #[serde(default)]
        z0: u64,
    },
    /// `f0_j = value * c_j`.
    FreeFraction {
        value: f64,
        #[serde(default)]
        z0: u64,
    },
    // braces so that stray keys are rejected
    Equilibrium {},
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::Equilibrium {}
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueSection {
    pub gamma: f64,
    pub mu: f64,
    pub level: u64,
    #[serde(default)]
    pub init: u64,
}

fn default_horizon() -> f64 {
    1.0
}
fn default_grid_points() -> usize {
    101
}
fn default_windows() -> usize {
    20
}
fn default_replications() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_windows")]
    pub windows: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u64>>,
    /// Defaults to the natural timescale of the regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timescale: Option<Timescale>,
    /// Free-mass level `a` of the stopping time, dynamic regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_level: Option<f64>,
    /// Jump budget for long stationary runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<u64>,
    /// Truncation level of the free agents for exact dynamic laws.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_cap: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub regime: RegimeSection,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<QueueSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, framed like a git blob.
    pub fn hash(&self) -> String {
        let body = self.to_toml();
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", body.len()).as_bytes());
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn params(&self) -> Result<ModelParams, ConfigError> {
        let m = &self.model;
        Ok(ModelParams::new(
            m.c.clone(),
            m.lambda.clone(),
            m.eta.clone(),
            m.beta,
            m.delta,
        )?)
    }

    pub fn timescale(&self) -> Timescale {
        self.timescale.unwrap_or(match self.regime {
            RegimeSection::Dynamic => Timescale::Scaled,
            RegimeSection::Overloaded { .. } => Timescale::Raw,
            RegimeSection::Critical => Timescale::Critical,
        })
    }

    /// `n`, or the single entry of `n_list`.
    pub fn single_n(&self) -> Result<u64, ConfigError> {
        match (self.n, self.n_list.as_deref()) {
            (Some(n), _) => Ok(n),
            (None, Some([n])) => Ok(*n),
            _ => invalid("this command needs `n`"),
        }
    }

    pub fn n_values(&self) -> Result<Vec<u64>, ConfigError> {
        match (&self.n_list, self.n) {
            (Some(list), _) if list.is_empty() => invalid("`n_list` is empty"),
            (Some(list), _) => Ok(list.clone()),
            (None, Some(n)) => Ok(vec![n]),
            (None, None) => invalid("this command needs `n_list`"),
        }
    }

    pub fn z0(&self) -> u64 {
        match self.init {
            InitSpec::Fractions { z0, .. } | InitSpec::FreeFraction { z0, .. } => z0,
            InitSpec::Equilibrium {} => 0,
        }
    }

    /// Initial free particles as fractions of `N` (or on the `sqrt(N)` scale
    /// in the critical regime).
    pub fn initial_fractions(&self) -> Result<Vec<f64>, ConfigError> {
        let p = self.params()?;
        let f0 = match &self.init {
            InitSpec::Fractions { f0, .. } => f0.clone(),
            InitSpec::FreeFraction { value, .. } => p.c.iter().map(|c| c * value).collect(),
            InitSpec::Equilibrium {} => match self.regime {
                RegimeSection::Dynamic => profile_at(&p.rhos(), &p.c, p.rho0()),
                RegimeSection::Overloaded { r } => overloaded_equilibrium(&p, r)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                RegimeSection::Critical => critical_equilibrium(&p),
            },
        };
        if f0.len() != p.num_types() {
            return invalid(format!(
                "initial condition has {} entries for {} types",
                f0.len(),
                p.num_types()
            ));
        }
        if let Some(x) = f0.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return invalid(format!("initial value {x} must be finite and non-negative"));
        }
        if self.regime != RegimeSection::Critical {
            for (j, (x, c)) in f0.iter().zip(&p.c).enumerate() {
                if *x > c + 1e-12 {
                    return invalid(format!("f0[{j}] = {x} exceeds c[{j}] = {c}"));
                }
            }
        }
        if let RegimeSection::Overloaded { r } = self.regime {
            let sum: f64 = f0.iter().sum();
            if (sum - (1.0 - r)).abs() > 1e-9 {
                return invalid(format!(
                    "overloaded start needs total free fraction 1 - r = {}, got {sum}",
                    1.0 - r
                ));
            }
        }
        Ok(f0)
    }

    /// Checks that apply to every command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.grid_points < 2 {
            return invalid("grid_points must be at least 2");
        }
        if self.windows == 0 {
            return invalid("windows must be positive");
        }
        if self.replications == 0 {
            return invalid("replications must be positive");
        }
        if let RegimeSection::Overloaded { r } = self.regime {
            if !(r > 0.0 && r < 1.0) {
                return invalid(format!("r must lie in (0, 1), got {r}"));
            }
        }
        if let Some(a) = self.stop_level {
            if !(a > 0.0 && a < 1.0) {
                return invalid(format!("stop_level must lie in (0, 1), got {a}"));
            }
        }
        if let Some(list) = &self.n_list {
            if list.is_empty() {
                return invalid("`n_list` is empty");
            }
            if list.contains(&0) {
                return invalid("`n_list` entries must be positive");
            }
        }
        if self.n == Some(0) {
            return invalid("n must be positive");
        }
        self.initial_fractions()?;
        Ok(())
    }

    pub fn model(&self, n: u64) -> Result<FiniteModel, ConfigError> {
        Ok(build_finite(self.params()?, n, self.regime.request())?)
    }

    /// The integer start state for `model`.
    pub fn initial_state(&self, model: &FiniteModel) -> Result<State, ConfigError> {
        let f0 = self.initial_fractions()?;
        if self.regime == RegimeSection::Critical {
            let root = (model.n as f64).sqrt();
            let f = f0
                .iter()
                .zip(&model.capacities)
                .map(|(x, &cap)| ((x * root).round() as u64).min(cap))
                .collect();
            Ok(model.fixed_state(f)?)
        } else {
            Ok(model.state_from_fractions(&f0, self.z0())?)
        }
    }
}
