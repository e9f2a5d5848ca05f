//! Receding-horizon real-time stage.
//!
//! At every step: refresh forecasts, admit and retire EVs, refresh each EV's
//! estimates, run consensus over the remaining horizon against the day-ahead
//! target, then implement only the first step of each EV's schedule.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::day_ahead::DayAheadSchedule;
use crate::error::{Error, Result};
use crate::flex::{asap_profile, ChargingSession, TimeGrid};

use super::best_response::{best_response, LocalLimits};
use super::consensus::{aggregate, initial_schedules, run_consensus, ConsensusOptions, InitMode};
use super::estimate::{update_estimates, EstimatorPolicy, EvState, EvStatus};

/// The up-front split runs with a tighter tolerance and more rounds than a
/// real-time step.
const SPLIT_TOL_FACTOR: f64 = 0.01;
const SPLIT_ROUNDS_FACTOR: usize = 20;

/// A session together with how it actually plays out.
#[derive(Debug, Clone, PartialEq)]
pub struct EvSpec {
    pub session: ChargingSession,
    pub realized_duration: usize,
    pub realized_energy: f64,
    /// Whether the day-ahead plan counted this EV.
    pub planned: bool,
}

impl EvSpec {
    /// An EV that behaves exactly as declared.
    pub fn as_declared(session: ChargingSession) -> Self {
        EvSpec {
            realized_duration: session.duration_steps,
            realized_energy: session.energy_kwh,
            session,
            planned: true,
        }
    }

    /// The realized stay and demand as a session.
    pub fn realized_session(&self) -> ChargingSession {
        ChargingSession {
            duration_steps: self.realized_duration,
            energy_kwh: self.realized_energy,
            ..self.session.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub grid: TimeGrid,
    /// $/kWh.
    pub price: Vec<f64>,
    /// Day-ahead forecasts, kW.
    pub baseload_forecast: Vec<f64>,
    pub solar_forecast: Vec<f64>,
    /// Realized values, kW.
    pub baseload: Vec<f64>,
    pub solar: Vec<f64>,
    pub evs: Vec<EvSpec>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.grid.steps;
        for (what, v) in [
            ("price", &self.price),
            ("baseload forecast", &self.baseload_forecast),
            ("solar forecast", &self.solar_forecast),
            ("baseload", &self.baseload),
            ("solar", &self.solar),
        ] {
            Error::check_len(what, n, v.len())?;
        }
        let mut ids = HashSet::new();
        for ev in &self.evs {
            ev.session.validate(&self.grid)?;
            if !ids.insert(ev.session.id) {
                return Err(Error::InvalidSession {
                    id: ev.session.id,
                    reason: "duplicate id".into(),
                });
            }
            let realized = ev.realized_session();
            if realized.duration_steps == 0 || realized.end_step() > n {
                return Err(Error::InvalidSession {
                    id: ev.session.id,
                    reason: format!("realized stay of {} steps leaves the grid", ev.realized_duration),
                });
            }
            if !(ev.realized_energy.is_finite() && ev.realized_energy >= 0.0) {
                return Err(Error::InvalidSession {
                    id: ev.session.id,
                    reason: "realized energy must be non-negative".into(),
                });
            }
        }
        Ok(())
    }

    /// Declared sessions of the EVs in the day-ahead plan.
    pub fn planned_sessions(&self) -> Vec<ChargingSession> {
        self.evs
            .iter()
            .filter(|e| e.planned)
            .map(|e| e.session.clone())
            .collect()
    }

    /// Realized EV load under uncontrolled (as-soon-as-possible) charging.
    pub fn uncontrolled_ev_load(&self) -> Vec<f64> {
        let mut load = vec![0.0; self.grid.steps];
        let mut evs: Vec<&EvSpec> = self.evs.iter().collect();
        evs.sort_by_key(|e| e.session.id);
        for ev in evs {
            for (acc, p) in load.iter_mut().zip(asap_profile(&ev.realized_session(), &self.grid)) {
                *acc += p;
            }
        }
        load
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationOptions {
    pub consensus: ConsensusOptions,
    pub estimator: EstimatorPolicy,
    /// Real-time forecasts equal realized baseload and solar.
    pub perfect_forecast: bool,
    /// Seeds the random initialization mode.
    pub seed: u64,
    /// Split the day-ahead plan across planned EVs up front and hold back
    /// the shares of those that have not arrived yet.
    pub reserve_pending: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            consensus: ConsensusOptions::default(),
            estimator: EstimatorPolicy::default(),
            perfect_forecast: true,
            seed: 0,
            reserve_pending: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Realized baseload, kW.
    pub baseload_kw: f64,
    /// Realized solar, kW.
    pub solar_kw: f64,
    /// Implemented EV load, kW.
    pub ev_kw: f64,
    /// Day-ahead EV profile at this step, kW.
    pub target_kw: f64,
    /// Target after folding in forecast updates, kW.
    pub corrected_target_kw: f64,
    pub active_evs: usize,
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvOutcome {
    pub id: u64,
    pub arrive: usize,
    pub depart: usize,
    pub delivered_kwh: f64,
    pub required_kwh: f64,
    /// Energy missing at departure, kWh.
    pub shortfall: f64,
}

/// Anomalies and adjustments, one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    DemandRepair {
        step: usize,
        id: u64,
        requested_kwh: f64,
        granted_kwh: f64,
    },
    StayExtended {
        step: usize,
        id: u64,
        d_hat: usize,
    },
    NonConvergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },
    UnplannedArrival {
        step: usize,
        id: u64,
    },
    Shortfall {
        step: usize,
        id: u64,
        shortfall_kwh: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub grid: TimeGrid,
    pub steps: Vec<StepRecord>,
    /// Sorted by id.
    pub evs: Vec<EvOutcome>,
    pub events: Vec<Event>,
}

impl SimulationTrace {
    pub fn ev_load(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.ev_kw).collect()
    }

    pub fn planned_load(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.target_kw).collect()
    }

    /// Realized baseload − solar + EV load.
    pub fn total_load(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.baseload_kw - s.solar_kw + s.ev_kw)
            .collect()
    }

    pub fn netload(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.baseload_kw - s.solar_kw).collect()
    }

    /// Share of steps with participants whose consensus converged.
    pub fn convergence_rate(&self) -> f64 {
        let with_evs: Vec<&StepRecord> = self.steps.iter().filter(|s| s.active_evs > 0).collect();
        if with_evs.is_empty() {
            return 1.0;
        }
        with_evs.iter().filter(|s| s.converged).count() as f64 / with_evs.len() as f64
    }
}

const SHORTFALL_EPS_KWH: f64 = 1e-6;

fn depart(ev: &mut EvState, now: usize, grid: &TimeGrid, out: &mut Vec<EvOutcome>, events: &mut Vec<Event>) {
    ev.status = EvStatus::Departed;
    let required = ev.required_kwh(grid);
    let shortfall = (required - ev.delivered).max(0.0);
    if shortfall > SHORTFALL_EPS_KWH {
        events.push(Event::Shortfall {
            step: now,
            id: ev.id(),
            shortfall_kwh: shortfall,
        });
    }
    out.push(EvOutcome {
        id: ev.id(),
        arrive: ev.session.start_step,
        depart: ev.realized_departure(),
        delivered_kwh: ev.delivered,
        required_kwh: required,
        shortfall,
    });
}

fn mix_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-EV share of `p_hat` for every planned EV, from its declared session.
fn split_plan(
    evs: &[EvState],
    p_hat: &[f64],
    grid: &TimeGrid,
    consensus: &ConsensusOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    let planned: Vec<usize> = (0..evs.len()).filter(|&i| evs[i].planned).collect();
    let mut shares = vec![None; evs.len()];
    if planned.is_empty() {
        return Ok(shares);
    }
    let limits: Vec<LocalLimits> = planned
        .iter()
        .map(|&i| {
            let s = &evs[i].session;
            EvState::new(s.clone(), s.duration_steps, s.energy_kwh).limits(0, grid)
        })
        .collect();
    let opts = ConsensusOptions {
        err_tol: consensus.err_tol * SPLIT_TOL_FACTOR,
        k_max: consensus.k_max * SPLIT_ROUNDS_FACTOR,
        init: InitMode::Flat,
        ..consensus.clone()
    };
    let init = initial_schedules(&limits, grid.steps, InitMode::Flat, 0);
    let outcome = run_consensus(&limits, p_hat, &opts, init)?;
    for (sched, i) in outcome.schedules.into_iter().zip(planned) {
        shares[i] = Some(sched);
    }
    Ok(shares)
}

pub fn simulate(
    scenario: &Scenario,
    dayahead: &DayAheadSchedule,
    opts: &SimulationOptions,
) -> Result<SimulationTrace> {
    scenario.validate()?;
    opts.consensus.validate()?;
    let grid = &scenario.grid;
    let n = grid.steps;
    let dt = grid.step_hours;
    Error::check_len("day-ahead schedule", n, dayahead.p_hat.len())?;

    let mut evs: Vec<EvState> = scenario
        .evs
        .iter()
        .map(|spec| EvState {
            planned: spec.planned,
            ..EvState::new(spec.session.clone(), spec.realized_duration, spec.realized_energy)
        })
        .collect();
    // Canonical order: sums and outputs do not depend on input order.
    evs.sort_by_key(EvState::id);

    let forecast_net: Vec<f64> = (0..n)
        .map(|t| scenario.baseload_forecast[t] - scenario.solar_forecast[t])
        .collect();
    let realized_net: Vec<f64> = (0..n).map(|t| scenario.baseload[t] - scenario.solar[t]).collect();

    let shares = if opts.reserve_pending {
        split_plan(&evs, &dayahead.p_hat, grid, &opts.consensus)?
    } else {
        vec![None; evs.len()]
    };

    let mut warm: Vec<Option<Vec<f64>>> = vec![None; evs.len()];
    let zeros = vec![0.0; n];
    let mut steps = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(evs.len());
    let mut events = Vec::new();

    for now in 0..n {
        for ev in evs.iter_mut() {
            if ev.status == EvStatus::Active && ev.realized_departure() <= now {
                depart(ev, now, grid, &mut outcomes, &mut events);
            }
        }
        for ev in evs.iter_mut() {
            if ev.status == EvStatus::Pending && ev.session.start_step == now {
                ev.status = EvStatus::Active;
                if !ev.planned {
                    events.push(Event::UnplannedArrival { step: now, id: ev.id() });
                }
            }
        }
        let active: Vec<usize> = (0..evs.len())
            .filter(|&i| evs[i].status == EvStatus::Active)
            .collect();

        let mut limits: Vec<LocalLimits> = Vec::with_capacity(active.len());
        for &i in &active {
            let ev = &mut evs[i];
            let est = update_estimates(ev, now, opts.estimator, grid);
            if est.d_hat > ev.d_hat && now >= ev.session.start_step + ev.d_hat {
                events.push(Event::StayExtended {
                    step: now,
                    id: ev.id(),
                    d_hat: est.d_hat,
                });
            }
            if let Some(requested) = est.clamped_from {
                events.push(Event::DemandRepair {
                    step: now,
                    id: ev.id(),
                    requested_kwh: requested,
                    granted_kwh: est.e_hat,
                });
            }
            ev.d_hat = est.d_hat;
            ev.e_hat = est.e_hat;
            let lim = ev.limits(now, grid);
            let wanted = (ev.e_hat - ev.delivered).max(0.0);
            if wanted > lim.min_kwh + 1e-9 {
                events.push(Event::DemandRepair {
                    step: now,
                    id: ev.id(),
                    requested_kwh: ev.e_hat,
                    granted_kwh: ev.delivered + lim.min_kwh,
                });
            }
            limits.push(lim);
        }

        // Fold real-time forecast updates into the day-ahead target.
        let horizon = n - now;
        let target: Vec<f64> = (now..n)
            .map(|t| {
                let updated = if opts.perfect_forecast || t == now {
                    realized_net[t]
                } else {
                    forecast_net[t]
                };
                let reserved: f64 = evs
                    .iter()
                    .zip(&shares)
                    .filter(|(ev, _)| ev.status == EvStatus::Pending)
                    .filter_map(|(_, share)| share.as_ref().map(|s| s[t]))
                    .sum();
                dayahead.p_hat[t] + forecast_net[t] - updated - reserved
            })
            .collect();

        let (mut ev_kw, mut iters, mut residual, mut converged) = (0.0, 0, 0.0, true);
        if !active.is_empty() {
            let mut init = initial_schedules(
                &limits,
                horizon,
                opts.consensus.init,
                mix_seed(opts.seed, now),
            );
            for ((slot, &i), lim) in init.iter_mut().zip(&active).zip(&limits) {
                let guess = match opts.consensus.init {
                    InitMode::Warm => warm[i].as_ref(),
                    InitMode::Plan => warm[i].as_ref().or(shares[i].as_ref()),
                    _ => None,
                };
                if let Some(guess) = guess {
                    best_response(&zeros[..horizon], &guess[now..], lim, slot);
                }
            }
            let outcome = run_consensus(&limits, &target, &opts.consensus, init)?;
            iters = outcome.iterations;
            residual = outcome.residual;
            converged = outcome.converged;
            if !converged {
                events.push(Event::NonConvergence {
                    step: now,
                    iterations: iters,
                    residual,
                });
            }
            let first = aggregate(&outcome.schedules, horizon);
            ev_kw = first[0];
            for (sched, &i) in outcome.schedules.into_iter().zip(&active) {
                evs[i].delivered += sched[0] * dt;
                if matches!(opts.consensus.init, InitMode::Warm | InitMode::Plan) {
                    let mut full = vec![0.0; n];
                    full[now..].copy_from_slice(&sched);
                    warm[i] = Some(full);
                }
            }
        }

        steps.push(StepRecord {
            step: now,
            baseload_kw: scenario.baseload[now],
            solar_kw: scenario.solar[now],
            ev_kw,
            target_kw: dayahead.p_hat[now],
            corrected_target_kw: target[0],
            active_evs: active.len(),
            iters,
            residual,
            converged,
        });
    }
    for ev in evs.iter_mut() {
        if ev.status == EvStatus::Active {
            depart(ev, n, grid, &mut outcomes, &mut events);
        }
    }
    outcomes.sort_by_key(|o| o.id);

    Ok(SimulationTrace {
        grid: grid.clone(),
        steps,
        evs: outcomes,
        events,
    })
}
