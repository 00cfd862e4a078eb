//! Run configuration: a sectioned `key = value` file (TOML), every key named,
//! unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{JitterKind, TemperingConfig};
use crate::grid::{Decomposition, GridSpec};
use crate::localization::LocalizationConfig;
use crate::observations::{scaled_strip_cycle, ObservationSchedule, ScheduleKind};
use crate::swe::{ModelParams, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub regime: Regime,
    pub d: usize,
    pub noise_modes: usize,
    pub noise_p: f64,
    pub sigma_noise: f64,
    /// Overrides the regime's time step.
    pub dt: Option<f64>,
    pub viscosity: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { regime: Regime::S, d: 128, noise_modes: 25, noise_p: 2.0, sigma_noise: 0.1, dt: None, viscosity: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JitterChoice {
    None,
    Roughening,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub particles: usize,
    /// ESS threshold as a fraction of the ensemble size.
    pub n_ess_fraction: f64,
    pub tempering: bool,
    pub bisection_tol: f64,
    pub ess_tol_fraction: f64,
    pub max_temper_iters: usize,
    pub jitter: JitterChoice,
    pub sigma_jit: f64,
    pub jitter_modes: usize,
    pub mcmc_rho: f64,
    pub mcmc_steps: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            particles: 50,
            n_ess_fraction: 0.8,
            tempering: true,
            bisection_tol: 1e-4,
            ess_tol_fraction: 0.01,
            max_temper_iters: 5000,
            jitter: JitterChoice::Roughening,
            sigma_jit: 0.005,
            jitter_modes: 50,
            mcmc_rho: 0.99,
            mcmc_steps: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationChoice {
    Grid,
    Strip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSection {
    pub kind: ObservationChoice,
    pub d_obs: usize,
    pub strip_width: usize,
    /// Strip x-indices visited cyclically; defaults to the standard cycle
    /// scaled to the grid.
    pub strip_positions: Option<Vec<usize>>,
    pub r: usize,
    pub sigma_obs: f64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self { kind: ObservationChoice::Grid, d_obs: 32, strip_width: 2, strip_positions: None, r: 10, sigma_obs: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationSection {
    pub n_loc: usize,
    pub alpha: f64,
    pub overlap_halfwidth: usize,
    pub wrap_ew: bool,
}

impl Default for LocalizationSection {
    fn default() -> Self {
        Self { n_loc: 4, alpha: 500.0, overlap_halfwidth: 6, wrap_ew: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub assimilations: usize,
    pub burn_in_deterministic: usize,
    pub burn_in_stochastic: usize,
    /// Model steps between sampled RB/EMRE values; 0 disables sampling.
    pub sample_every: usize,
    /// Assimilations between state snapshots; 0 disables snapshots.
    pub snapshot_every: usize,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            assimilations: 100,
            burn_in_deterministic: 2000,
            burn_in_stochastic: 500,
            sample_every: 10,
            snapshot_every: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub signal: u64,
    pub ensemble: u64,
    pub observation: u64,
    pub filter: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(0)
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self { signal: seed, ensemble: seed, observation: seed, filter: seed }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub filter: FilterSection,
    pub observations: ObservationSection,
    /// Absent means the global particle filter.
    pub localization: Option<LocalizationSection>,
    pub run: RunSection,
    pub seeds: Seeds,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parse a `section.key=value` override. The value is read as a TOML literal
/// when possible and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| cfg_err(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(cfg_err(format!("bad key `{path}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| cfg_err(format!("`{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parse `text`, then apply `section.key=value` overrides before
    /// validation.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.params().validate()?;
        self.tempering().validate()?;
        let m = &self.model;
        if m.noise_modes == 0 || !(m.noise_p > 0.0) || !(m.sigma_noise >= 0.0) {
            return Err(cfg_err("model noise needs modes > 0, p > 0 and sigma >= 0"));
        }
        let f = &self.filter;
        if f.particles < 2 {
            return Err(cfg_err("filter.particles must be at least 2"));
        }
        if !(f.sigma_jit >= 0.0) || f.jitter_modes == 0 {
            return Err(cfg_err("jitter needs sigma_jit >= 0 and jitter_modes > 0"));
        }
        let o = &self.observations;
        if !(o.sigma_obs > 0.0) || o.r == 0 {
            return Err(cfg_err("observations need sigma_obs > 0 and r > 0"));
        }
        self.schedule().locations_at(&grid, 1)?;
        if let Some(loc) = self.localization()? {
            if !(loc.alpha >= 0.0) {
                return Err(cfg_err("localization.alpha must be >= 0"));
            }
        }
        if self.run.assimilations == 0 {
            return Err(cfg_err("run.assimilations must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.model.d)
    }

    pub fn params(&self) -> ModelParams {
        let mut p = ModelParams::preset(self.model.regime);
        if let Some(dt) = self.model.dt {
            p.dt = dt;
        }
        if let Some(nu) = self.model.viscosity {
            p.viscosity = nu;
        }
        p
    }

    pub fn schedule(&self) -> ObservationSchedule {
        let o = &self.observations;
        let kind = match o.kind {
            ObservationChoice::Grid => ScheduleKind::FixedGrid { d_obs: o.d_obs },
            ObservationChoice::Strip => ScheduleKind::MovingStrip {
                width: o.strip_width,
                x_positions: o.strip_positions.clone().unwrap_or_else(|| scaled_strip_cycle(self.model.d)),
            },
        };
        ObservationSchedule { kind, r: o.r, sigma_obs: o.sigma_obs }
    }

    pub fn jitter_kind(&self) -> JitterKind {
        let f = &self.filter;
        match f.jitter {
            JitterChoice::None => JitterKind::None,
            JitterChoice::Roughening => JitterKind::Roughening,
            JitterChoice::Mcmc => JitterKind::Mcmc { rho: f.mcmc_rho, m_jit: f.mcmc_steps },
        }
    }

    pub fn tempering(&self) -> TemperingConfig {
        let f = &self.filter;
        let n = f.particles as f64;
        TemperingConfig {
            n_ess: f.n_ess_fraction * n,
            tempering: f.tempering,
            bisection_tol: f.bisection_tol,
            ess_tol: f.ess_tol_fraction * n,
            max_iters: f.max_temper_iters,
            jitter: self.jitter_kind(),
        }
    }

    pub fn localization(&self) -> Result<Option<LocalizationConfig>> {
        let Some(l) = &self.localization else { return Ok(None) };
        let dec = Decomposition::new(self.grid()?, l.n_loc, l.overlap_halfwidth, l.wrap_ew)?;
        Ok(Some(LocalizationConfig { alpha: l.alpha, decomposition: dec }))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds::all(seed);
        self
    }
}
