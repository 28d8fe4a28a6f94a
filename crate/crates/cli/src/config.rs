//! Experiment configuration files.
//!
//! ```toml
//! x0 = [0.0]
//! y0 = 1
//! T = 1.0
//! dt = 0.001
//!
//! [model]
//! name = "two-state-constant"
//! params = { q12 = 1.0, q21 = 2.0 }
//!
//! [mc]
//! eps_grid = [0.08, 0.04]
//! a = 1.0
//! n_paths = 10000
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use switching_mdp::mc::{DtRule, TailEvent};
use switching_mdp::model::{build_builtin, RegimeModel};
use switching_mdp::simulate::TimeGrid;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub x0: Vec<f64>,
    /// One-based initial regime.
    #[serde(default = "one")]
    pub y0: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    /// Where output files go, relative to the config file. Not part of the
    /// config hash.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub analyze: Option<AnalyzeBlock>,
    #[serde(default)]
    pub simulate: Option<SimulateBlock>,
    #[serde(default)]
    pub rate: Option<RateBlock>,
    #[serde(default)]
    pub mc: Option<McBlock>,
    #[serde(default)]
    pub validate: Option<ValidateBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Knots {
    /// Evenly spaced knots on `[0, T]`.
    Count(usize),
    Times(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeBlock {
    #[serde(default = "default_knots")]
    pub knots: Knots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta")]
    pub h_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateBlock {
    /// CSV with columns `t, eta_1..eta_d`, or a simulated `t, x_1..x_d[, y]`
    /// path that is turned into a deviation with the `[simulate]` scaling.
    pub path_file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSpec {
    Terminal,
    Sup,
}

impl From<EventSpec> for TailEvent {
    fn from(e: EventSpec) -> Self {
        match e {
            EventSpec::Terminal => TailEvent::Terminal,
            EventSpec::Sup => TailEvent::Sup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtRuleSpec {
    /// `min(1e-3, eps / 10)` per `eps`.
    Default,
    /// The top-level `dt` for every `eps`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_beta")]
    pub h_exponent: f64,
    pub a: f64,
    #[serde(default = "default_event")]
    pub event: EventSpec,
    pub n_paths: u64,
    #[serde(default)]
    pub seed: u64,
    /// Append the minimal rate of the terminal event as `target_rate`.
    #[serde(default)]
    pub target_rate: bool,
    #[serde(default = "default_target_knots")]
    pub target_knots: usize,
    #[serde(default = "default_dt_rule")]
    pub dt_rule: DtRuleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateBlock {
    #[serde(default = "default_grid_min")]
    pub grid_min: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    /// Points per coordinate; the sample set is the tensor grid.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for ValidateBlock {
    fn default() -> Self {
        Self {
            grid_min: default_grid_min(),
            grid_max: default_grid_max(),
            grid_points: default_grid_points(),
        }
    }
}

fn one() -> usize {
    1
}
fn default_knots() -> Knots {
    Knots::Count(11)
}
fn default_beta() -> f64 {
    0.3
}
fn default_event() -> EventSpec {
    EventSpec::Terminal
}
fn default_target_knots() -> usize {
    256
}
fn default_dt_rule() -> DtRuleSpec {
    DtRuleSpec::Default
}
fn default_grid_min() -> f64 {
    -3.0
}
fn default_grid_max() -> f64 {
    3.0
}
fn default_grid_points() -> usize {
    101
}

const MAX_SAMPLES: usize = 1_000_000;
const MAX_STEPS: usize = 100_000_000;

/// Line of `key` inside `[section]` (or the root table when `section` is
/// empty), found by a plain scan of the source.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_end_matches(']').trim().to_string();
            if current == section {
                section_line = Some(n + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(n + 1);
                }
            }
        }
    }
    section_line
}

fn bad(text: &str, section: &str, key: &str, message: String) -> CliError {
    CliError::Config {
        message,
        line: locate(text, section, key),
    }
}

fn check_beta(text: &str, section: &str, beta: f64) -> CliResult<()> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(bad(
            text,
            section,
            "h_exponent",
            format!("h_exponent must lie in (0, 0.5), got {beta}"),
        ));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and range-checks a config. Model-dependent checks happen in
    /// [`Experiment::from_config`].
    pub fn parse(text: &str) -> CliResult<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            message: e.message().to_string(),
            line: e
                .span()
                .map(|s| text.as_bytes()[..s.start.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1),
        })?;
        config.check(text)?;
        Ok(config)
    }

    fn check(&self, text: &str) -> CliResult<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(bad(text, "", "T", format!("T must be positive, got {}", self.t_end)));
        }
        match TimeGrid::new(self.t_end, self.dt) {
            Err(e) => return Err(bad(text, "", "dt", e.to_string())),
            Ok(g) if g.steps() > MAX_STEPS => {
                return Err(bad(text, "", "dt", format!("{} steps exceed {MAX_STEPS}", g.steps())))
            }
            Ok(_) => {}
        }
        if self.x0.is_empty() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(bad(text, "", "x0", "x0 must be a non-empty finite vector".into()));
        }
        if self.y0 == 0 {
            return Err(bad(text, "", "y0", "y0 is one-based".into()));
        }
        if let Some(a) = &self.analyze {
            match &a.knots {
                Knots::Count(0) => {
                    return Err(bad(text, "analyze", "knots", "need at least one knot".into()))
                }
                Knots::Count(n) if *n > 1_000_000 => {
                    return Err(bad(text, "analyze", "knots", format!("too many knots: {n}")))
                }
                Knots::Times(ts) => {
                    if ts.is_empty()
                        || ts.iter().any(|t| !(*t >= 0.0 && *t <= self.t_end))
                        || ts.windows(2).any(|w| w[1] < w[0])
                    {
                        return Err(bad(
                            text,
                            "analyze",
                            "knots",
                            "knot times must be sorted and lie in [0, T]".into(),
                        ));
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = &self.simulate {
            if !(s.eps > 0.0 && s.eps.is_finite()) {
                return Err(bad(text, "simulate", "eps", format!("eps must be positive, got {}", s.eps)));
            }
            check_beta(text, "simulate", s.h_exponent)?;
        }
        if let Some(m) = &self.mc {
            if m.eps_grid.is_empty() || m.eps_grid.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                return Err(bad(
                    text,
                    "mc",
                    "eps_grid",
                    "eps_grid must hold positive values".into(),
                ));
            }
            if m.eps_grid.windows(2).any(|w| w[1] > w[0]) {
                return Err(bad(text, "mc", "eps_grid", "eps_grid must be decreasing".into()));
            }
            check_beta(text, "mc", m.h_exponent)?;
            if m.a.is_nan() {
                return Err(bad(text, "mc", "a", "a is NaN".into()));
            }
            if m.n_paths == 0 {
                return Err(bad(text, "mc", "n_paths", "n_paths must be positive".into()));
            }
            if m.target_rate && m.event != EventSpec::Terminal {
                return Err(bad(
                    text,
                    "mc",
                    "target_rate",
                    "target_rate is only available for the terminal event".into(),
                ));
            }
            if m.target_knots < 8 {
                return Err(bad(text, "mc", "target_knots", "target_knots must be at least 8".into()));
            }
        }
        if let Some(v) = &self.validate {
            if !(v.grid_min.is_finite() && v.grid_max.is_finite() && v.grid_min < v.grid_max) {
                return Err(bad(text, "validate", "grid_min", "need grid_min < grid_max".into()));
            }
            if v.grid_points < 2 {
                return Err(bad(text, "validate", "grid_points", "need at least 2 points".into()));
            }
            let total = (v.grid_points as f64).powi(self.x0.len() as i32);
            if total > MAX_SAMPLES as f64 {
                return Err(bad(
                    text,
                    "validate",
                    "grid_points",
                    format!("tensor grid of {total} points exceeds {MAX_SAMPLES}"),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. Defaults are filled in and the
    /// output directory is excluded, so formatting, key order and spelled
    /// out defaults do not change the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Replaces every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = &mut self.simulate {
            s.seed = seed;
        }
        if let Some(m) = &mut self.mc {
            m.seed = seed;
        }
    }

    pub fn dt_rule(&self) -> DtRule {
        match self.mc.as_ref().map(|m| m.dt_rule) {
            Some(DtRuleSpec::Fixed) => DtRule::Fixed(self.dt),
            _ => DtRule::Default,
        }
    }
}

/// A checked config together with its model.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: RegimeModel,
    /// Directory that relative paths in the config are resolved against.
    pub base_dir: PathBuf,
    pub hash: String,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("config", &self.config)
            .field("model", &self.model.name())
            .field("hash", &self.hash)
            .finish()
    }
}

impl Experiment {
    pub fn from_str(text: &str, base_dir: &Path, seed: Option<u64>) -> CliResult<Self> {
        let mut config = ExperimentConfig::parse(text)?;
        if let Some(seed) = seed {
            config.override_seed(seed);
        }
        Self::from_config(config, text, base_dir)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &base_dir, seed)
    }

    fn from_config(config: ExperimentConfig, text: &str, base_dir: &Path) -> CliResult<Self> {
        let model = build_builtin(&config.model.name, &config.model.params).map_err(|e| {
            CliError::Config {
                message: e.to_string(),
                line: locate(text, "model", "name"),
            }
        })?;
        if config.x0.len() != model.dim() {
            return Err(bad(
                text,
                "",
                "x0",
                format!("x0 has {} entries, model dimension is {}", config.x0.len(), model.dim()),
            ));
        }
        if config.y0 > model.regimes() {
            return Err(bad(
                text,
                "",
                "y0",
                format!("y0 = {} but the model has {} regimes", config.y0, model.regimes()),
            ));
        }
        let hash = config.hash();
        Ok(Self {
            config,
            model,
            base_dir: base_dir.to_path_buf(),
            hash,
        })
    }

    /// Zero-based initial regime.
    pub fn y0(&self) -> usize {
        self.config.y0 - 1
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(self.config.output_dir.as_deref().unwrap_or("."))
    }
}
