//! TOML run configuration.
//!
//! ```toml
//! [scenario]          # controller, ts, duration, noise_sd, seed, band, resolution
//! [patient]           # true plant for `simulate` and `delay-sweep`
//! [nominal]           # design model for controller and observer
//! [patients.<name>]   # cohort for `compare-patients`
//! [mpc]
//! [ekf]
//! ```
//!
//! Every patient table may start from `preset = "nominal" | "patient1" |
//! "patient2"` and override individual fields. Missing sections fall back to
//! the built-in defaults. [`ResolvedConfig::to_toml`] writes the fully
//! expanded configuration, which parses back to the same value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::MpcConfig;
use crate::error::{ModelError, SimError};
use crate::estimator::EkfTuning;
use crate::patient_model::{Concentrations, PatientParams, DEFAULT_TS};
use crate::scenario::{
    ControllerKind, Scenario, DEFAULT_BAND, DEFAULT_DURATION, DEFAULT_RESOLUTION,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected dotted.key=value")]
    Override(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<SimError> for ConfigError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Model(ModelError::InvalidParam { field, reason }) => {
                ConfigError::Invalid { field, reason }
            }
            other => ConfigError::invalid("scenario", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub controller: ControllerKind,
    pub ts: f64,
    pub duration: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Acceptable band around the setpoint, BIS units.
    pub band: f64,
    /// Delay-search resolution, seconds.
    pub resolution: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            controller: ControllerKind::StateSpaceEkf,
            ts: DEFAULT_TS,
            duration: DEFAULT_DURATION,
            noise_sd: 0.0,
            seed: 0,
            band: DEFAULT_BAND,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientSection {
    preset: Option<String>,
    v1: Option<f64>,
    k10: Option<f64>,
    k12: Option<f64>,
    k21: Option<f64>,
    k13: Option<f64>,
    k31: Option<f64>,
    ke0: Option<f64>,
    td: Option<f64>,
    bis0: Option<f64>,
    gamma: Option<f64>,
    ec50: Option<f64>,
    weight: Option<f64>,
}

impl PatientSection {
    fn resolve(self, section: &str, fallback: PatientParams) -> Result<PatientParams, ConfigError> {
        let mut p = match &self.preset {
            Some(name) => PatientParams::preset(name).ok_or_else(|| {
                ConfigError::invalid(
                    format!("{section}.preset"),
                    format!("unknown preset `{name}` (expected nominal, patient1 or patient2)"),
                )
            })?,
            None => fallback,
        };
        let fields = [
            (&mut p.v1, self.v1),
            (&mut p.k10, self.k10),
            (&mut p.k12, self.k12),
            (&mut p.k21, self.k21),
            (&mut p.k13, self.k13),
            (&mut p.k31, self.k31),
            (&mut p.ke0, self.ke0),
            (&mut p.td, self.td),
            (&mut p.bis0, self.bis0),
            (&mut p.gamma, self.gamma),
            (&mut p.ec50, self.ec50),
            (&mut p.weight, self.weight),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        p.validate().map_err(|e| match e {
            ModelError::InvalidParam { field, reason } => {
                ConfigError::invalid(format!("{section}.{field}"), reason)
            }
            other => ConfigError::invalid(section, other.to_string()),
        })?;
        Ok(p)
    }
}

/// Configuration with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub scenario: ScenarioSection,
    pub patient: PatientParams,
    pub nominal: PatientParams,
    pub patients: BTreeMap<String, PatientParams>,
    pub mpc: MpcConfig,
    pub ekf: EkfTuning,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self::from_table(toml::Table::new()).expect("built-in defaults are valid")
    }
}

fn default_cohort() -> BTreeMap<String, PatientParams> {
    [
        ("nominal", PatientParams::nominal()),
        ("patient1", PatientParams::patient1()),
        ("patient2", PatientParams::patient2()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn section<T: for<'de> Deserialize<'de> + Default>(
    table: &toml::Table,
    name: &str,
) -> Result<T, ConfigError> {
    match table.get(name) {
        None => Ok(T::default()),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::invalid(name, e.message().to_string())),
    }
}

impl ResolvedConfig {
    /// Parses TOML text and applies `key=value` overrides before resolving.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table_with(table, overrides)
    }

    /// Applies `key=value` overrides to an already parsed table, then resolves it.
    pub fn from_table_with(
        mut table: toml::Table,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        for key in table.keys() {
            if !matches!(
                key.as_str(),
                "scenario" | "patient" | "nominal" | "patients" | "mpc" | "ekf"
            ) {
                return Err(ConfigError::invalid(key.clone(), "unknown section"));
            }
        }
        let scenario: ScenarioSection = section(&table, "scenario")?;
        let nominal = section::<PatientSection>(&table, "nominal")?
            .resolve("nominal", PatientParams::nominal())?;
        let patient = section::<PatientSection>(&table, "patient")?.resolve("patient", nominal)?;
        let patients = match table.get("patients") {
            None => default_cohort(),
            Some(toml::Value::Table(t)) => {
                let mut out = BTreeMap::new();
                for (name, v) in t {
                    let name_path = format!("patients.{name}");
                    let sec: PatientSection =
                        v.clone().try_into().map_err(|e: toml::de::Error| {
                            ConfigError::invalid(&name_path, e.message().to_string())
                        })?;
                    let fallback = PatientParams::preset(name).unwrap_or(nominal);
                    out.insert(name.clone(), sec.resolve(&name_path, fallback)?);
                }
                if out.is_empty() {
                    return Err(ConfigError::invalid(
                        "patients",
                        "at least one patient is required",
                    ));
                }
                out
            }
            Some(_) => {
                return Err(ConfigError::invalid(
                    "patients",
                    "must be a table of patient tables",
                ))
            }
        };
        let mpc: MpcConfig = section(&table, "mpc")?;
        let ekf: EkfTuning = section(&table, "ekf")?;

        let cfg = Self {
            scenario,
            patient,
            nominal,
            patients,
            mpc,
            ekf,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.scenario;
        if !(s.band > 0.0 && s.band.is_finite()) {
            return Err(ConfigError::invalid("scenario.band", "must be positive"));
        }
        if !(s.resolution >= s.ts && s.resolution.is_finite()) {
            return Err(ConfigError::invalid(
                "scenario.resolution",
                "must be at least scenario.ts",
            ));
        }
        self.scenario_for(self.patient, s.controller).validate()?;
        for p in self.patients.values() {
            self.scenario_for(*p, s.controller).validate()?;
        }
        Ok(())
    }

    /// Scenario with `patient` as the true plant and the configured design model.
    pub fn scenario_for(&self, patient: PatientParams, controller: ControllerKind) -> Scenario {
        Scenario {
            patient,
            nominal: self.nominal,
            controller,
            mpc: self.mpc.clone(),
            ekf: self.ekf,
            ts: self.scenario.ts,
            duration: self.scenario.duration,
            noise_sd: self.scenario.noise_sd,
            seed: self.scenario.seed,
            plant_x0: Concentrations::zeros(),
            estimate_x0: Concentrations::zeros(),
        }
    }

    /// Fully expanded TOML snapshot.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config is serializable")
    }
}

/// Applies `dotted.key=value` to a TOML table. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let leaf = keys.pop().expect("path is non-empty");
    let mut cursor = table;
    for key in keys {
        let entry = cursor
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => {
                return Err(ConfigError::invalid(
                    path,
                    format!("`{key}` is not a table"),
                ))
            }
        };
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}
