//! Experiment configuration: a single TOML file, round-trip safe.

use serde::{Deserialize, Serialize};
use solwave::geometry::{BoostedMinkowski, Bump, MetricField, Minkowski, Scaled};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(String),
    #[error("unknown preset '{0}'; available: {1}")]
    UnknownPreset(String, String),
    #[error("bad config value: {0}")]
    BadValue(String),
}

pub const PRESETS: [&str; 6] = [
    "ground_state_suite",
    "soliton_exactness",
    "fermi_build",
    "conservation",
    "stability_minkowski",
    "geodesic_tracking",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    pub grid: GridConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub m: f64,
    pub p: f64,
    pub omega0: f64,
    #[serde(default)]
    pub u0_guess: [f64; 3],
    #[serde(default = "default_eps")]
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricConfig {
    Minkowski,
    BoostedMinkowski { speed: f64 },
    Bump { amplitude: f64, width: f64, center: [f64; 3] },
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig::Minkowski
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent: f64,
    pub n: usize,
    /// dt = dt_factor · h.
    #[serde(default = "default_dt_factor")]
    pub dt_factor: f64,
    #[serde(default = "default_sponge")]
    pub sponge_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_end: f64,
    /// Record every this many steps.
    #[serde(default = "default_cadence")]
    pub cadence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_fit_tol")]
    pub fit_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { fit_tol: default_fit_tol() }
    }
}

fn default_out_dir() -> String {
    "out".into()
}
fn default_eps() -> f64 {
    0.1
}
fn default_dt_factor() -> f64 {
    0.4
}
fn default_sponge() -> usize {
    8
}
fn default_cadence() -> usize {
    4
}
fn default_fit_tol() -> f64 {
    1e-8
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(ConfigError::UnknownPreset(self.preset.clone(), PRESETS.join(", ")));
        }
        if self.grid.extent <= 0.0 || self.grid.n == 0 {
            return Err(ConfigError::BadValue("grid.extent and grid.n must be positive".into()));
        }
        if !(self.model.m > 0.0 && self.model.p > 1.0) {
            return Err(ConfigError::BadValue("need m > 0 and p > 1".into()));
        }
        Ok(())
    }

    /// Instantiate the metric, scaled by ε when the preset calls for a slowly
    /// varying background.
    pub fn build_metric(&self, scaled: bool) -> Box<dyn MetricField + Send + Sync> {
        match &self.metric {
            MetricConfig::Minkowski => Box::new(Minkowski),
            MetricConfig::BoostedMinkowski { speed } => Box::new(BoostedMinkowski::along_x(*speed)),
            MetricConfig::Bump { amplitude, width, center } => {
                let bump = Bump { amplitude: *amplitude, width: *width, center: *center };
                if scaled {
                    Box::new(Scaled { base: bump, eps: self.model.eps })
                } else {
                    Box::new(bump)
                }
            }
        }
    }
}

/// Default config for `verify <preset>`.
pub fn default_config(preset: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig {
        preset: preset.to_string(),
        out_dir: default_out_dir(),
        model: ModelConfig { m: 1.0, p: 2.0, omega0: 0.8, u0_guess: [0.0; 3], eps: 0.1 },
        metric: MetricConfig::Minkowski,
        grid: GridConfig { extent: 24.0, n: 48, dt_factor: 0.4, sponge_cells: 8 },
        schedule: ScheduleConfig { t_end: 5.0, cadence: 4 },
        tolerances: Tolerances::default(),
    };
    match preset {
        "ground_state_suite" | "soliton_exactness" => {}
        "fermi_build" | "geodesic_tracking" => {
            cfg.metric = MetricConfig::Bump { amplitude: 0.01, width: 4.0, center: [0.0; 3] };
            cfg.schedule.t_end = 4.0;
        }
        "conservation" => {
            // the 1e-4 drift target needs h = 0.25
            cfg.grid.n = 96;
            cfg.schedule.t_end = 12.5;
        }
        "stability_minkowski" => {
            cfg.schedule.t_end = 5.0;
        }
        other => return Err(ConfigError::UnknownPreset(other.to_string(), PRESETS.join(", "))),
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const SCHEMA: &str = r#"# experiment config schema (TOML)
preset = "conservation"        # one of: ground_state_suite, soliton_exactness,
                               # fermi_build, conservation, stability_minkowski,
                               # geodesic_tracking
out_dir = "out"                # artifact directory

[model]
m = 1.0                        # field mass
p = 2.0                        # nonlinearity exponent, 1 < p < 7/3
omega0 = 0.8                   # soliton frequency
u0_guess = [0.0, 0.0, 0.0]     # initial velocity guess
eps = 0.1                      # slow-variation parameter of the background

[metric]
name = "minkowski"             # minkowski | boosted_minkowski | bump
# speed = 0.3                  # boosted_minkowski only
# amplitude = 0.01             # bump only
# width = 4.0                  # bump only
# center = [0.0, 0.0, 0.0]     # bump only

[grid]
extent = 24.0                  # box side length
n = 48                         # cells per axis
dt_factor = 0.4                # dt = dt_factor * h
sponge_cells = 8               # boundary sponge width (>= 8)

[schedule]
t_end = 12.5                   # evolution horizon
cadence = 4                    # record every this many steps

[tolerances]
fit_tol = 1e-8                 # Newton tolerance of the lambda fit
"#;
