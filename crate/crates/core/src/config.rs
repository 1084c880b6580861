//! Scenario configuration: flat key-value sections, strict validation,
//! defaults recorded in the run manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physics {
    pub mass: f64,
    pub omega: f64,
    /// single-photon damping rate
    pub kappa: f64,
    /// two-photon channel strength (quartic-kerr scenario)
    pub two_photon: f64,
    /// quartic Hamiltonian perturbation strength
    pub lambda_quartic: f64,
    /// inverse temperature of the thermal reference state
    pub beta: f64,
    pub hbar: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            mass: 1.0,
            omega: 1.0,
            kappa: 1.0,
            two_photon: 0.25,
            lambda_quartic: 0.1,
            beta: 1.0,
            hbar: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hilbert {
    /// dimension of the position-basis space used for Wigner transforms
    pub dim: usize,
    /// dimension of the Fock space used for the Petz reversal
    pub petz_dim: usize,
}

impl Default for Hilbert {
    fn default() -> Self {
        Self { dim: 64, petz_dim: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub n_q: usize,
    pub n_p: usize,
    /// half-extent of the Q axis: the box is [-l_q, l_q)
    pub l_q: f64,
    pub l_p: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        // box sized so the shipped states decay below 1e-12 at the boundary
        // and the displacement-lattice tails stay under the trace tolerance
        Self { n_q: 256, n_p: 256, l_q: 8.0, l_p: 8.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSpec {
    /// quantum integrator step
    pub dt: f64,
    pub t_end: f64,
    /// trajectory storage stride
    pub stride: usize,
    /// Fokker-Planck step (0 = auto from the CFL bound)
    pub fp_dt: f64,
    pub fp_t_end: f64,
    /// Petz reversal step and horizon
    pub petz_dt: f64,
    pub petz_t_end: f64,
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 2.0,
            stride: 50,
            fp_dt: 0.0,
            fp_t_end: 1.0,
            petz_dt: 1e-4,
            petz_t_end: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSpec {
    pub particles: usize,
    pub seed: u64,
    /// SDE step
    pub sde_dt: f64,
    /// transitions for the Bayes identity check
    pub bayes_particles: usize,
    pub bayes_horizon: f64,
    pub bayes_bins: usize,
    pub bayes_box: f64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            particles: 100_000,
            seed: 7,
            sde_dt: 2e-3,
            bayes_particles: 1_000_000,
            bayes_horizon: 0.5,
            bayes_bins: 8,
            bayes_box: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialState {
    /// center of the initial coherent state / Gaussian density
    pub q0: f64,
    pub p0: f64,
    /// classical Gaussian variance (0 = coherent-state variance hbar/2)
    pub var: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { q0: 1.2, p0: -0.6, var: 0.0 }
    }
}

/// Acceptance thresholds; all config-overridable, defaults recorded in the
/// run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub trace_drift: f64,
    pub wigner_reality: f64,
    pub mass_drift: f64,
    pub fp_negativity: f64,
    pub petz_recovery: f64,
    pub petz_order_min: f64,
    pub wigner_fp_l2: f64,
    pub fp_round_trip_l1: f64,
    pub sde_round_trip_l1: f64,
    pub two_route_exact: f64,
    pub slope_target: f64,
    pub slope_tol: f64,
    pub bayes_violation: f64,
    pub psd_floor: f64,
    /// relative floor for score/reverse-drift divisions
    pub score_floor: f64,
    /// practical floor when the reversed drift feeds a solver
    pub reverse_floor: f64,
    /// below this, a residual sweep is flagged floor-limited
    pub sweep_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            trace_drift: 1e-10,
            wigner_reality: 1e-10,
            mass_drift: 1e-8,
            fp_negativity: -1e-6,
            petz_recovery: 1e-6,
            petz_order_min: 1.0,
            wigner_fp_l2: 1e-3,
            fp_round_trip_l1: 1e-2,
            sde_round_trip_l1: 5e-2,
            two_route_exact: 1e-8,
            slope_target: 2.0,
            slope_tol: 0.3,
            bayes_violation: 0.1,
            psd_floor: -1e-12,
            score_floor: 1e-12,
            // the FP tails are only accurate to the negativity tolerance, so
            // the solver-facing reversed drift floors the density well above
            // that noise level
            reverse_floor: 1e-5,
            sweep_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub hbars: Vec<f64>,
    /// variance of the fixed Gaussian test distribution (hbar-independent)
    pub gaussian_var: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { hbars: vec![0.2, 0.1, 0.05, 0.025], gaussian_var: 0.5 }
    }
}

/// Full scenario configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: String,
    /// pipeline to execute; empty = the scenario's default
    pub pipeline: String,
    pub physics: Physics,
    pub hilbert: Hilbert,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub ensemble: EnsembleSpec,
    pub initial: InitialState,
    pub tolerances: Tolerances,
    pub sweep: SweepSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: "damped-harmonic-oscillator".into(),
            pipeline: String::new(),
            physics: Physics::default(),
            hilbert: Hilbert::default(),
            grid: GridSpec::default(),
            time: TimeSpec::default(),
            ensemble: EnsembleSpec::default(),
            initial: InitialState::default(),
            tolerances: Tolerances::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl ScenarioConfig {
    /// Classical initial Gaussian variance (defaults to hbar/2).
    pub fn initial_var(&self) -> f64 {
        if self.initial.var > 0.0 {
            self.initial.var
        } else {
            self.physics.hbar / 2.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |cond: bool, msg: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(CoreError::Config(ConfigError::Constraint(msg.into())))
            }
        };
        let p = &self.physics;
        c(p.mass > 0.0, "physics.mass must be positive")?;
        c(p.omega > 0.0, "physics.omega must be positive")?;
        c(p.kappa >= 0.0, "physics.kappa must be nonnegative")?;
        c(p.two_photon >= 0.0, "physics.two_photon must be nonnegative")?;
        c(p.beta > 0.0, "physics.beta must be positive")?;
        c(p.hbar > 0.0, "physics.hbar must be positive")?;
        c(self.hilbert.dim >= 2, "hilbert.dim must be >= 2")?;
        c(self.hilbert.petz_dim >= 2, "hilbert.petz_dim must be >= 2")?;
        c(
            self.grid.n_q.is_power_of_two() && self.grid.n_p.is_power_of_two(),
            "grid point counts must be powers of two",
        )?;
        c(self.grid.l_q > 0.0 && self.grid.l_p > 0.0, "grid extents must be positive")?;
        c(self.time.dt > 0.0, "time.dt must be positive")?;
        c(self.time.t_end > 0.0, "time.t_end must be positive")?;
        c(self.time.petz_dt > 0.0, "time.petz_dt must be positive")?;
        c(self.time.fp_dt >= 0.0, "time.fp_dt must be nonnegative (0 = auto)")?;
        c(self.ensemble.particles > 0, "ensemble.particles must be positive")?;
        c(self.ensemble.sde_dt > 0.0, "ensemble.sde_dt must be positive")?;
        c(self.tolerances.score_floor > 0.0, "tolerances.score_floor must be positive")?;
        // Lindblad/Hamiltonian symbols are polynomials in (Q, P) built from
        // the physical parameters only; an hbar-dependent symbol cannot be
        // expressed in this configuration, which enforces the hbar-free
        // symbol convention structurally.
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn classify_toml_error(err: &toml::de::Error) -> CoreError {
    let msg = err.to_string();
    if let Some(rest) = msg.split("unknown field `").nth(1) {
        if let Some(name) = rest.split('`').next() {
            return CoreError::Config(ConfigError::UnknownKey(name.to_string()));
        }
    }
    CoreError::Config(ConfigError::Syntax(msg))
}

/// Parse a config string (TOML: flat keys plus one level of sections).
pub fn parse_config_str(text: &str) -> Result<ScenarioConfig> {
    let config: ScenarioConfig =
        toml::from_str(text).map_err(|e| classify_toml_error(&e))?;
    config.validate()?;
    Ok(config)
}

/// Parse a config file.
pub fn parse_config(path: &Path) -> Result<ScenarioConfig> {
    if !path.exists() {
        return Err(CoreError::Config(ConfigError::MissingFile(
            path.display().to_string(),
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_str(&text)
}

/// Apply `key=value` overrides (dotted paths into sections) on top of the
/// config text, then re-parse.
pub fn apply_overrides(config: &ScenarioConfig, overrides: &[String]) -> Result<ScenarioConfig> {
    if overrides.is_empty() {
        return Ok(config.clone());
    }
    let mut table: toml::Table = toml::from_str(&config.to_toml())
        .expect("round trip of a serialized config");
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| CoreError::Config(ConfigError::BadOverride(entry.clone())))?;
        let parsed: toml::Value = match value.parse::<i64>() {
            Ok(v) => toml::Value::Integer(v),
            Err(_) => match value.parse::<f64>() {
                Ok(v) => toml::Value::Float(v),
                Err(_) => match value {
                    "true" => toml::Value::Boolean(true),
                    "false" => toml::Value::Boolean(false),
                    s => toml::Value::String(s.to_string()),
                },
            },
        };
        let mut parts = key.split('.');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(top), None, _) => {
                table.insert(top.to_string(), parsed);
            }
            (Some(section), Some(field), None) => {
                let entry = table
                    .entry(section.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match entry.as_table_mut() {
                    Some(t) => {
                        t.insert(field.to_string(), parsed);
                    }
                    None => {
                        return Err(CoreError::Config(ConfigError::BadOverride(entry.to_string())))
                    }
                }
            }
            _ => return Err(CoreError::Config(ConfigError::BadOverride(key.to_string()))),
        }
    }
    let text = toml::to_string(&table).expect("table serializes");
    parse_config_str(&text)
}
