//! Synthetic charging behavior, demand from session flexibility, and the
//! perturbations that turn declared sessions into realized ones.
//!
//! Every random draw for a session comes from a stream keyed by
//! `(seed, session id)`, so adding or removing one EV leaves the others
//! untouched.

use rand::distributions::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::{ChargingSession, TimeGrid};

const SAMPLE_SALT: u64 = 0x5e55_1015;
const PERTURB_SALT: u64 = 0x0b5e_7e44;

fn stream(seed: u64, salt: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartComponent {
    pub mean_hour: f64,
    pub std_hour: f64,
    pub weight: f64,
}

/// Log-normal stay length, clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationModel {
    pub median_hours: f64,
    /// Standard deviation of the log duration.
    pub sigma: f64,
    pub min_hours: f64,
    pub max_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexibilityModel {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorConfig {
    pub start_mixture: Vec<StartComponent>,
    pub duration: DurationModel,
    pub flexibility: FlexibilityModel,
    pub pmax_kw: f64,
    pub eta: f64,
    pub battery_kwh: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            start_mixture: vec![
                StartComponent {
                    mean_hour: 8.0,
                    std_hour: 1.5,
                    weight: 0.5,
                },
                StartComponent {
                    mean_hour: 18.0,
                    std_hour: 2.0,
                    weight: 0.5,
                },
            ],
            duration: DurationModel {
                median_hours: 6.0,
                sigma: 0.5,
                min_hours: 0.5,
                max_hours: 14.0,
            },
            flexibility: FlexibilityModel {
                alpha: 2.0,
                beta: 2.0,
            },
            pmax_kw: 6.6,
            eta: 1.0,
            battery_kwh: 60.0,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.start_mixture.is_empty() {
            return Err(Error::Invalid("start-time mixture is empty".into()));
        }
        let total: f64 = self.start_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "start-time weights must sum to 1, got {total}"
            )));
        }
        for c in &self.start_mixture {
            if !(c.weight >= 0.0 && c.std_hour >= 0.0 && c.mean_hour.is_finite()) {
                return Err(Error::Invalid(format!("bad start-time component {c:?}")));
            }
        }
        let d = &self.duration;
        if !(d.median_hours > 0.0 && d.sigma >= 0.0 && d.min_hours > 0.0 && d.min_hours <= d.max_hours) {
            return Err(Error::Invalid(format!("bad duration model {d:?}")));
        }
        if d.max_hours < grid.step_hours {
            return Err(Error::Invalid(format!(
                "duration clamp {} h is shorter than one step",
                d.max_hours
            )));
        }
        let f = &self.flexibility;
        if !(f.alpha > 0.0 && f.beta > 0.0) {
            return Err(Error::Invalid(format!("bad flexibility model {f:?}")));
        }
        if !(self.pmax_kw > 0.0 && self.eta > 0.0 && self.eta <= 1.0 && self.battery_kwh >= 0.0) {
            return Err(Error::Invalid("charger limits must be positive and eta in (0, 1]".into()));
        }
        Ok(())
    }

    /// Mean of the start-hour mixture.
    pub fn mean_start_hour(&self) -> f64 {
        self.start_mixture.iter().map(|c| c.weight * c.mean_hour).sum()
    }
}

/// Demand that leaves a fraction `flexibility` of the stay idle.
pub fn energy_from_flexibility(flexibility: f64, steps: usize, pmax_kw: f64, eta: f64, step_hours: f64) -> f64 {
    (1.0 - flexibility) * pmax_kw * eta * steps as f64 * step_hours
}

/// Draw one session with the given id.
fn sample_one(cfg: &BehaviorConfig, id: u64, grid: &TimeGrid, seed: u64, pick: &WeightedIndex<f64>) -> Result<ChargingSession> {
    let mut rng = stream(seed, SAMPLE_SALT, id);
    let comp = &cfg.start_mixture[pick.sample(&mut rng)];
    let hour = comp.mean_hour + comp.std_hour * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let span = grid.hour_of(grid.steps).max(24.0);
    let elapsed = (hour - grid.start_hour).rem_euclid(span);
    let start = ((elapsed / grid.step_hours).round() as usize).min(grid.steps - 1);

    let d = &cfg.duration;
    let lognormal = LogNormal::new(d.median_hours.ln(), d.sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let hours = lognormal.sample(&mut rng).clamp(d.min_hours, d.max_hours);
    let steps = ((hours / grid.step_hours).round() as usize).clamp(1, grid.steps - start);

    let beta = Beta::new(cfg.flexibility.alpha, cfg.flexibility.beta).map_err(|e| Error::Invalid(e.to_string()))?;
    let f: f64 = beta.sample(&mut rng).min(1.0 - f64::EPSILON);
    let energy = energy_from_flexibility(f, steps, cfg.pmax_kw, cfg.eta, grid.step_hours).min(cfg.battery_kwh);

    let session = ChargingSession {
        id,
        start_step: start,
        duration_steps: steps,
        energy_kwh: energy,
        pmax_kw: cfg.pmax_kw,
        eta: cfg.eta,
        battery_kwh: cfg.battery_kwh,
    };
    session.validate(grid)?;
    Ok(session)
}

/// `n` sessions with ids `0..n`.
pub fn sample_sessions(cfg: &BehaviorConfig, n: usize, grid: &TimeGrid, seed: u64) -> Result<Vec<ChargingSession>> {
    cfg.validate(grid)?;
    let pick = WeightedIndex::new(cfg.start_mixture.iter().map(|c| c.weight))
        .map_err(|e| Error::Invalid(format!("start-time weights: {e}")))?;
    (0..n as u64)
        .map(|id| sample_one(cfg, id, grid, seed, &pick))
        .collect()
}

/// Noise applied to declared sessions and to forecast profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Std of the stay-length noise, steps.
    pub sigma_d: f64,
    /// Std of the demand noise, kWh.
    pub sigma_e: f64,
    /// Std of the demand noise relative to the declared demand.
    pub sigma_e_rel: f64,
    /// Relative std of the baseload and solar noise.
    pub profile_sigma: f64,
    /// Falls back to the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            sigma_d: 0.0,
            sigma_e: 0.0,
            sigma_e_rel: 0.0,
            profile_sigma: 0.0,
            seed: None,
        }
    }
}

impl PerturbationConfig {
    pub fn off() -> Self {
        PerturbationConfig::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_d", self.sigma_d),
            ("sigma_e", self.sigma_e),
            ("sigma_e_rel", self.sigma_e_rel),
            ("profile_sigma", self.profile_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.sigma_d == 0.0 && self.sigma_e == 0.0 && self.sigma_e_rel == 0.0 && self.profile_sigma == 0.0
    }
}

/// Realized `(duration_steps, energy_kwh)` of a declared session.
pub fn perturb_session(session: &ChargingSession, cfg: &PerturbationConfig, seed: u64, grid: &TimeGrid) -> (usize, f64) {
    let seed = cfg.seed.unwrap_or(seed);
    let mut rng = stream(seed, PERTURB_SALT, session.id);
    let z_d: f64 = rng.sample(rand_distr::StandardNormal);
    let z_e: f64 = rng.sample(rand_distr::StandardNormal);

    let room = grid.steps.saturating_sub(session.start_step).max(1);
    let d = if cfg.sigma_d == 0.0 {
        session.duration_steps.min(room)
    } else {
        let raw = (session.duration_steps as f64 + cfg.sigma_d * z_d).round();
        (raw.max(1.0) as usize).min(room)
    };
    let std_e = cfg.sigma_e.hypot(cfg.sigma_e_rel * session.energy_kwh);
    let cap = (session.rate_kw() * grid.step_hours * d as f64).min(session.battery_kwh);
    let e = (session.energy_kwh + std_e * z_e).clamp(0.0, cap);
    (d, e)
}

/// Multiply each entry by `1 + N(0, sigma)`; `floor_zero` keeps the result
/// non-negative.
pub fn perturb_profile<R: Rng + ?Sized>(series: &[f64], sigma: f64, floor_zero: bool, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return series.to_vec();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    series
        .iter()
        .map(|v| {
            let x = v * (1.0 + noise.sample(rng));
            if floor_zero {
                x.max(0.0)
            } else {
                x
            }
        })
        .collect()
}

/// Seeded generator for profile noise, independent of session streams.
pub fn profile_rng(seed: u64, which: u64) -> ChaCha8Rng {
    stream(seed, PERTURB_SALT.rotate_left(17), which)
}

/// Smooth bump centred at `mu` hours with width `sd` hours.
fn bump(h: f64, mu: f64, sd: f64) -> f64 {
    (-0.5 * ((h - mu) / sd).powi(2)).exp()
}

/// Community baseload, kW: night trough near 3000 kW, daytime plateau near
/// 4500 kW.
pub fn synthetic_baseload(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps)
        .map(|t| {
            let h = grid.clock_hour(t);
            let day = 1.0 / (1.0 + (-(h - 8.0) / 1.2).exp()) - 1.0 / (1.0 + (-(h - 20.5) / 1.5).exp());
            3000.0 + 1300.0 * day + 250.0 * bump(h, 13.0, 2.5)
        })
        .collect()
}

/// Rooftop and campus PV, kW, peaking near 1500 kW at solar noon.
pub fn synthetic_solar(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps)
        .map(|t| {
            let h = grid.clock_hour(t);
            if (6.0..19.0).contains(&h) {
                1500.0 * (std::f64::consts::PI * (h - 6.0) / 13.0).sin().powi(2)
            } else {
                0.0
            }
        })
        .collect()
}

/// Wholesale price, $/kWh: cheap overnight and at midday, peaking in the
/// early evening.
pub fn synthetic_price(grid: &TimeGrid) -> Vec<f64> {
    (0..grid.steps)
        .map(|t| {
            let h = grid.clock_hour(t);
            0.035 + 0.015 * bump(h, 8.0, 1.5) - 0.015 * bump(h, 13.0, 2.0) + 0.06 * bump(h, 19.0, 1.8)
        })
        .collect()
}
