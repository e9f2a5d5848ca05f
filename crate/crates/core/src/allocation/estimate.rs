use serde::{Deserialize, Serialize};

use crate::flex::{ChargingSession, TimeGrid};

use super::best_response::LocalLimits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvStatus {
    Pending,
    Active,
    Departed,
}

/// Live state of one EV during the real-time stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EvState {
    /// What the driver declared at plug-in.
    pub session: ChargingSession,
    /// Hidden truth: steps actually plugged.
    pub realized_duration: usize,
    /// Hidden truth: energy actually wanted, kWh.
    pub realized_energy: f64,
    pub d_hat: usize,
    pub e_hat: f64,
    /// Energy credited so far, kWh.
    pub delivered: f64,
    pub status: EvStatus,
    /// Whether the EV was part of the day-ahead plan.
    pub planned: bool,
}

impl EvState {
    pub fn new(session: ChargingSession, realized_duration: usize, realized_energy: f64) -> Self {
        EvState {
            d_hat: session.duration_steps,
            e_hat: session.energy_kwh,
            session,
            realized_duration,
            realized_energy,
            delivered: 0.0,
            status: EvStatus::Pending,
            planned: true,
        }
    }

    pub fn id(&self) -> u64 {
        self.session.id
    }

    pub fn rate_kw(&self) -> f64 {
        self.session.rate_kw()
    }

    pub fn realized_departure(&self) -> usize {
        self.session.start_step + self.realized_duration
    }

    /// Estimated first step after departure, capped at the grid end.
    pub fn estimated_departure(&self, grid: &TimeGrid) -> usize {
        (self.session.start_step + self.d_hat).min(grid.steps)
    }

    /// Energy the EV can still absorb before its estimated departure.
    pub fn deliverable_from(&self, now: usize, grid: &TimeGrid) -> f64 {
        let steps = self.estimated_departure(grid).saturating_sub(now);
        self.rate_kw() * grid.step_hours * steps as f64
    }

    /// Energy the EV should get over its realized stay.
    pub fn required_kwh(&self, grid: &TimeGrid) -> f64 {
        let stay = self.rate_kw() * grid.step_hours * self.realized_duration as f64;
        self.realized_energy.min(stay)
    }

    /// Best-response constraints over `now..grid.steps`, from current estimates.
    pub fn limits(&self, now: usize, grid: &TimeGrid) -> LocalLimits {
        let end = self.estimated_departure(grid).max(now);
        let max_kwh = (self.session.battery_kwh - self.delivered).max(0.0);
        let capacity = self.rate_kw() * grid.step_hours * (end - now) as f64;
        let min_kwh = (self.e_hat - self.delivered).max(0.0).min(capacity).min(max_kwh);
        LocalLimits {
            start: self.session.start_step.saturating_sub(now),
            end: end - now,
            rate: self.rate_kw(),
            step_hours: grid.step_hours,
            min_kwh,
            max_kwh,
        }
    }
}

/// How an EV's controller refreshes its stay and demand estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorPolicy {
    /// Knows the realized stay and demand.
    Oracle,
    /// Trusts the declaration, extending the stay one step at a time while
    /// the EV overstays.
    #[default]
    DeclaredPersistence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub d_hat: usize,
    pub e_hat: f64,
    /// Set when the declared demand had to be cut to fit the window.
    pub clamped_from: Option<f64>,
}

pub fn update_estimates(ev: &EvState, now: usize, policy: EstimatorPolicy, grid: &TimeGrid) -> Estimate {
    match policy {
        EstimatorPolicy::Oracle => Estimate {
            d_hat: ev.realized_duration,
            e_hat: ev.realized_energy,
            clamped_from: None,
        },
        EstimatorPolicy::DeclaredPersistence => {
            let start = ev.session.start_step;
            let elapsed = now.saturating_sub(start);
            let d_hat = if elapsed < ev.d_hat {
                ev.d_hat
            } else {
                elapsed + 1
            }
            .min(grid.steps - start);
            let remaining = (start + d_hat).saturating_sub(now) as f64;
            let reachable = (ev.delivered + ev.rate_kw() * grid.step_hours * remaining)
                .min(ev.session.battery_kwh);
            let declared = ev.session.energy_kwh;
            if declared > reachable {
                Estimate {
                    d_hat,
                    e_hat: reachable,
                    clamped_from: Some(declared),
                }
            } else {
                Estimate {
                    d_hat,
                    e_hat: declared,
                    clamped_from: None,
                }
            }
        }
    }
}
