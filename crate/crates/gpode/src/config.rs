//! Experiment configuration: a flat, fail-closed TOML schema covering data
//! generation, model shape, training, and evaluation.
//!
//! Unknown keys are rejected so typos cannot silently fall back to defaults.
//! Exactly one data source must be configured: a known system name (the data
//! is simulated) or a CSV file of observations. Relative CSV paths resolve
//! against the config file's directory.

use crate::data::{system_by_name, GridKind};
use crate::error::{Error, Result};
use crate::metrics::CoverageMode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_noise_var() -> f64 {
    0.05
}
fn default_grid_kind() -> String {
    "regular".into()
}
fn default_n_train() -> usize {
    50
}
fn default_t_train_end() -> f64 {
    7.0
}
fn default_n_test() -> usize {
    50
}
fn default_t_test_end() -> f64 {
    14.0
}
fn default_substeps() -> usize {
    5
}
fn default_inducing() -> usize {
    16
}
fn default_fourier_features() -> usize {
    256
}
fn default_steps() -> usize {
    1000
}
fn default_step_size() -> f64 {
    0.01
}
fn default_n_mc() -> usize {
    5
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_n_mc_eval() -> usize {
    50
}
fn default_coverage_level() -> f64 {
    0.95
}
fn default_coverage_mode() -> String {
    "quantile".into()
}

/// One experiment, as a flat key-value file. Defaults follow the standard
/// two-dimensional oscillator protocol; `seed` is always explicit.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    // ---- data source (exactly one of `system`, `data_csv`) ----
    /// Known dynamical system to simulate ("vdp" or "fhn").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Observation CSV to load instead of simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
    /// Initial state for simulation (state units); defaults to the system's
    /// standard starting point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Observation noise variance (state units squared).
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    /// Observation spacing: "regular" or "irregular-uniform".
    #[serde(default = "default_grid_kind")]
    pub grid_kind: String,
    /// Training observations on [0, t_train_end].
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    /// End of the training window (time units).
    #[serde(default = "default_t_train_end")]
    pub t_train_end: f64,
    /// Forecast observations on (t_train_end, t_test_end]; 0 disables the
    /// forecast split.
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// End of the forecast window (time units).
    #[serde(default = "default_t_test_end")]
    pub t_test_end: f64,
    /// Integrator substeps per observation interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,

    // ---- model shape ----
    /// Inducing point count.
    #[serde(default = "default_inducing")]
    pub inducing: usize,
    /// Planar layers warping the vector field.
    #[serde(default)]
    pub prior_depth: usize,
    /// Planar layers warping the posterior over inducing outputs.
    #[serde(default)]
    pub posterior_depth: usize,
    /// Random Fourier features for pathwise prior draws.
    #[serde(default = "default_fourier_features")]
    pub fourier_features: usize,
    /// Latent dimension for the PCA front end; 0 trains in data space.
    #[serde(default)]
    pub pca_dim: usize,
    /// Multiple-shooting segment count; 0 integrates in one piece.
    #[serde(default)]
    pub shooting_segments: usize,

    // ---- training ----
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// Monte-Carlo samples per training step.
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    pub seed: u64,

    // ---- evaluation ----
    /// Monte-Carlo samples for prediction and scoring.
    #[serde(default = "default_n_mc_eval")]
    pub n_mc_eval: usize,
    /// Central credible-interval mass for coverage, in (0, 1).
    #[serde(default = "default_coverage_level")]
    pub coverage_level: f64,
    /// "quantile" or "stddev".
    #[serde(default = "default_coverage_mode")]
    pub coverage_mode: String,
}

impl ExperimentConfig {
    /// A valid baseline configuration for the given seed; callers override
    /// fields from there.
    pub fn standard(system: &str, seed: u64) -> Self {
        ExperimentConfig {
            system: Some(system.to_string()),
            data_csv: None,
            x0: None,
            noise_var: default_noise_var(),
            grid_kind: default_grid_kind(),
            n_train: default_n_train(),
            t_train_end: default_t_train_end(),
            n_test: default_n_test(),
            t_test_end: default_t_test_end(),
            substeps: default_substeps(),
            inducing: default_inducing(),
            prior_depth: 0,
            posterior_depth: 0,
            fourier_features: default_fourier_features(),
            pca_dim: 0,
            shooting_segments: 0,
            steps: default_steps(),
            step_size: default_step_size(),
            n_mc: default_n_mc(),
            clip_norm: default_clip_norm(),
            seed,
            n_mc_eval: default_n_mc_eval(),
            coverage_level: default_coverage_level(),
            coverage_mode: default_coverage_mode(),
        }
    }

    pub fn grid_kind(&self) -> Result<GridKind> {
        self.grid_kind.parse()
    }

    pub fn coverage_mode(&self) -> Result<CoverageMode> {
        self.coverage_mode.parse()
    }

    /// Check internal consistency. File existence is checked at load time,
    /// not here.
    pub fn validate(&self) -> Result<()> {
        match (&self.system, &self.data_csv) {
            (None, None) => {
                return Err(Error::Config(
                    "configure exactly one data source: `system` or `data_csv` (got neither)".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "configure exactly one data source: `system` or `data_csv` (got both)".into(),
                ))
            }
            _ => {}
        }
        if let Some(name) = &self.system {
            let sys = system_by_name(name)?;
            if let Some(x0) = &self.x0 {
                if x0.len() != sys.dim() {
                    return Err(Error::Config(format!(
                        "x0 has {} entries but system `{name}` has dimension {}",
                        x0.len(),
                        sys.dim()
                    )));
                }
            }
            if !(self.noise_var > 0.0) {
                return Err(Error::Config(format!(
                    "noise_var must be positive, got {}",
                    self.noise_var
                )));
            }
            if self.n_train < 2 {
                return Err(Error::Config(format!(
                    "n_train must be at least 2, got {}",
                    self.n_train
                )));
            }
            if !(self.t_train_end > 0.0) {
                return Err(Error::Config(format!(
                    "t_train_end must be positive, got {}",
                    self.t_train_end
                )));
            }
            if self.n_test > 0 && !(self.t_test_end > self.t_train_end) {
                return Err(Error::Config(format!(
                    "t_test_end ({}) must exceed t_train_end ({}) when n_test > 0",
                    self.t_test_end, self.t_train_end
                )));
            }
            if self.shooting_segments > 0 && self.shooting_segments > self.n_train - 1 {
                return Err(Error::Config(format!(
                    "shooting_segments ({}) exceeds the {} training intervals",
                    self.shooting_segments,
                    self.n_train - 1
                )));
            }
        } else if self.x0.is_some() {
            return Err(Error::Config(
                "x0 applies only to simulated data; remove it when using data_csv".into(),
            ));
        }
        self.grid_kind()?;
        self.coverage_mode()?;
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if self.inducing == 0 {
            return Err(Error::Config("inducing must be at least 1".into()));
        }
        if self.fourier_features == 0 {
            return Err(Error::Config("fourier_features must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if self.n_mc == 0 || self.n_mc_eval == 0 {
            return Err(Error::Config(format!(
                "n_mc ({}) and n_mc_eval ({}) must be at least 1",
                self.n_mc, self.n_mc_eval
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.coverage_level > 0.0 && self.coverage_level < 1.0) {
            return Err(Error::Config(format!(
                "coverage_level must lie in (0, 1), got {}",
                self.coverage_level
            )));
        }
        Ok(())
    }

    /// Parse from TOML text (no path resolution or file checks).
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }
}

/// Load, validate, resolve the CSV path against the config's directory, and
/// check that every referenced file exists.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut config = ExperimentConfig::from_toml(&text)?;
    if let Some(csv) = &config.data_csv {
        let resolved = if csv.is_relative() {
            path.parent().unwrap_or_else(|| Path::new(".")).join(csv)
        } else {
            csv.clone()
        };
        if !resolved.is_file() {
            return Err(Error::Config(format!(
                "data_csv `{}` does not exist",
                resolved.display()
            )));
        }
        config.data_csv = Some(resolved);
    }
    Ok(config)
}
