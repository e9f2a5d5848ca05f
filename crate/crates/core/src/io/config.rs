//! Scenario configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::{ConsensusOptions, EstimatorPolicy, SimulationOptions};
use crate::behavior::{sample_sessions, synthetic_baseload, synthetic_price, synthetic_solar, BehaviorConfig, PerturbationConfig};
use crate::day_ahead::SolverOptions;
use crate::error::{Error, Result};
use crate::flex::{ChargingSession, TimeGrid};
use crate::pipeline::RunInputs;

use super::sessions::load_sessions_csv;
use super::timeseries::{load_timeseries_csv, resolve, Timeseries};

pub const DEFAULT_EV_COUNT: usize = 1240;
pub const DEFAULT_THETA: f64 = 0.01;
/// Clock hour of step 0 in the default grid. Overnight stays from the
/// evening peak then end before the horizon does.
pub const DEFAULT_START_HOUR: f64 = 6.0;

/// Where a profile comes from: `"synthetic"`, `{"file": path}` or
/// `{"values": [...]}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SeriesSource {
    #[default]
    Synthetic,
    File(PathBuf),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n: usize,
    pub behavior: BehaviorConfig,
    /// Falls back to the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: DEFAULT_EV_COUNT,
            behavior: BehaviorConfig::default(),
            seed: None,
        }
    }
}

/// `{"file": path}` or `{"generate": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionSource {
    File(PathBuf),
    Generate(GeneratorConfig),
}

impl Default for SessionSource {
    fn default() -> Self {
        SessionSource::Generate(GeneratorConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub grid: TimeGrid,
    pub price: SeriesSource,
    pub baseload: SeriesSource,
    pub solar: SeriesSource,
    pub sessions: SessionSource,
    pub theta: f64,
    pub consensus: ConsensusOptions,
    pub solver: SolverOptions,
    pub perturbation: PerturbationConfig,
    pub estimator: EstimatorPolicy,
    pub perfect_forecast: bool,
    pub reserve_pending: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// File the config was read from; relative paths resolve against its
    /// directory.
    #[serde(skip)]
    pub path: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let sim = SimulationOptions::default();
        ScenarioConfig {
            grid: TimeGrid::day_quarter_hours().with_start_hour(DEFAULT_START_HOUR),
            price: SeriesSource::Synthetic,
            baseload: SeriesSource::Synthetic,
            solar: SeriesSource::Synthetic,
            sessions: SessionSource::default(),
            theta: DEFAULT_THETA,
            consensus: sim.consensus,
            solver: SolverOptions::default(),
            perturbation: PerturbationConfig::off(),
            estimator: sim.estimator,
            perfect_forecast: sim.perfect_forecast,
            reserve_pending: sim.reserve_pending,
            seed: 0,
            output_dir: None,
            path: PathBuf::new(),
        }
    }
}

/// Parse and validate a scenario file. Relative paths inside it are taken
/// relative to the file's directory.
pub fn parse_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_scenario_str(&text, path)?;
    cfg.path = path.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

/// Deserialize without validating; `path` only labels errors.
pub fn parse_scenario_str(text: &str, path: &Path) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        Error::Config {
            path: path.to_path_buf(),
            at,
            msg: e.into_inner().to_string(),
        }
    })
}

impl ScenarioConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        resolve(self.path.parent().unwrap_or(Path::new("")), p)
    }

    fn field_err(&self, at: &str, msg: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.clone(),
            at: at.into(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(self.field_err("theta", format!("must be non-negative, got {}", self.theta)));
        }
        self.consensus.validate()?;
        self.perturbation.validate()?;
        for (name, src) in self.series_sources() {
            match src {
                SeriesSource::Synthetic => {}
                SeriesSource::File(p) => self.check_exists(name, p)?,
                SeriesSource::Values(v) => {
                    Timeseries::new(v.clone(), name).validate(&self.grid)?;
                }
            }
        }
        match &self.sessions {
            SessionSource::File(p) => self.check_exists("sessions", p)?,
            SessionSource::Generate(g) => {
                if g.n == 0 {
                    return Err(self.field_err("sessions.generate.n", "need at least one EV"));
                }
                g.behavior.validate(&self.grid)?;
            }
        }
        Ok(())
    }

    fn check_exists(&self, name: &str, p: &Path) -> Result<()> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(())
        } else {
            Err(self.field_err(name, format!("file {} does not exist", full.display())))
        }
    }

    fn series_sources(&self) -> [(&'static str, &SeriesSource); 3] {
        [
            ("price", &self.price),
            ("baseload", &self.baseload),
            ("solar", &self.solar),
        ]
    }

    /// Every input file the scenario reads, resolved.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = self
            .series_sources()
            .iter()
            .filter_map(|(_, s)| match s {
                SeriesSource::File(p) => Some(self.resolve(p)),
                _ => None,
            })
            .collect();
        if let SessionSource::File(p) = &self.sessions {
            files.push(self.resolve(p));
        }
        files
    }

    fn load(&self, src: &SeriesSource, unit: &str, synthetic: fn(&TimeGrid) -> Vec<f64>) -> Result<Vec<f64>> {
        let series = match src {
            SeriesSource::Synthetic => Timeseries::new(synthetic(&self.grid), unit),
            SeriesSource::File(p) => load_timeseries_csv(self.resolve(p), unit, &self.grid)?,
            SeriesSource::Values(v) => Timeseries::new(v.clone(), unit),
        };
        series.validate(&self.grid)?;
        Ok(series.values)
    }

    pub fn price(&self) -> Result<Vec<f64>> {
        self.load(&self.price, "$/kWh", synthetic_price)
    }

    pub fn baseload(&self) -> Result<Vec<f64>> {
        self.load(&self.baseload, "kW", synthetic_baseload)
    }

    pub fn solar(&self) -> Result<Vec<f64>> {
        self.load(&self.solar, "kW", synthetic_solar)
    }

    /// Declared sessions, read or generated.
    pub fn load_sessions(&self) -> Result<Vec<ChargingSession>> {
        match &self.sessions {
            SessionSource::File(p) => load_sessions_csv(self.resolve(p), &self.grid),
            SessionSource::Generate(g) => sample_sessions(&g.behavior, g.n, &self.grid, g.seed.unwrap_or(self.seed)),
        }
    }

    pub fn simulation_options(&self) -> SimulationOptions {
        SimulationOptions {
            consensus: self.consensus.clone(),
            estimator: self.estimator,
            perfect_forecast: self.perfect_forecast,
            seed: self.seed,
            reserve_pending: self.reserve_pending,
        }
    }

    pub fn run_inputs(&self) -> Result<RunInputs> {
        self.validate()?;
        Ok(RunInputs {
            grid: self.grid.clone(),
            price: self.price()?,
            baseload_forecast: self.baseload()?,
            solar_forecast: self.solar()?,
            sessions: self.load_sessions()?,
            theta: self.theta,
            perturbation: self.perturbation.clone(),
            simulation: self.simulation_options(),
            solver: self.solver.clone(),
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ScenarioConfig> {
        let cfg = parse_scenario_str(text, Path::new("test.json"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("{}").unwrap();
        assert_eq!(cfg.consensus.beta, 2.0);
        assert_eq!(cfg.consensus.err_tol, 1e-4);
        assert_eq!(cfg.consensus.k_max, 200);
        assert_eq!(cfg.theta, 0.01);
        assert_eq!(cfg.grid.steps, 96);
        assert_eq!(cfg.sessions, SessionSource::Generate(GeneratorConfig::default()));
        assert_eq!(cfg, ScenarioConfig::default());
    }

    #[test]
    fn nested_defaults_fill_in() {
        let cfg = parse(r#"{"consensus": {"beta": 5.0}, "sessions": {"generate": {"n": 10}}}"#).unwrap();
        assert_eq!(cfg.consensus.beta, 5.0);
        assert_eq!(cfg.consensus.err_tol, 1e-4);
        match cfg.sessions {
            SessionSource::Generate(g) => {
                assert_eq!(g.n, 10);
                assert_eq!(g.behavior, BehaviorConfig::default());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_theta_rejected() {
        let err = parse(r#"{"theta": -1}"#).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn unknown_keys_carry_their_path() {
        match parse(r#"{"consensus": {"beta": 1.0, "gamma": 2}}"#) {
            Err(Error::Config { at, msg, .. }) => {
                assert_eq!(at, "consensus.gamma");
                assert!(msg.contains("gamma"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        match parse(r#"{"sessions": {"generate": {"behavior": {"duration": {"median_hours": "x"}}}}}"#) {
            Err(Error::Config { at, .. }) => assert_eq!(at, "sessions.generate.behavior.duration.median_hours"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn series_sources() {
        let values: Vec<String> = (0..96).map(|t| format!("{}", t as f64 * 0.001)).collect();
        let cfg = parse(&format!(r#"{{"price": {{"values": [{}]}}}}"#, values.join(","))).unwrap();
        assert_eq!(cfg.price().unwrap()[10], 0.01);
        assert!(parse(r#"{"price": {"values": [1, 2]}}"#).is_err());
        assert!(parse(r#"{"solar": {"file": "/definitely/missing.csv"}}"#).is_err());
        let cfg = parse(r#"{"baseload": "synthetic"}"#).unwrap();
        assert_eq!(cfg.baseload().unwrap(), synthetic_baseload(&cfg.grid));
    }

    #[test]
    fn relative_files_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("step,value\n");
        for h in 0..24 {
            body.push_str(&format!("{h},{}\n", 0.1 + h as f64 * 0.01));
        }
        std::fs::write(dir.path().join("price.csv"), body).unwrap();
        let cfg_path = dir.path().join("s.json");
        std::fs::write(&cfg_path, r#"{"price": {"file": "price.csv"}, "seed": 3}"#).unwrap();
        let cfg = parse_scenario(&cfg_path).unwrap();
        let price = cfg.price().unwrap();
        assert_eq!(price.len(), 96);
        assert_eq!(price[4], 0.11);
        assert_eq!(cfg.input_files(), vec![dir.path().join("price.csv")]);
    }

    #[test]
    fn generated_sessions_are_reproducible() {
        let cfg = parse(r#"{"seed": 9, "sessions": {"generate": {"n": 50}}}"#).unwrap();
        let a = cfg.load_sessions().unwrap();
        let b = parse(r#"{"sessions": {"generate": {"n": 50}}, "seed": 9}"#)
            .unwrap()
            .load_sessions()
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ScenarioConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }
}
