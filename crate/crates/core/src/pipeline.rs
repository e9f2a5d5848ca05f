//! End-to-end run: sessions and forecasts in, day-ahead plan, real-time
//! simulation and metrics out.

use crate::allocation::{simulate, EvSpec, Scenario, SimulationOptions, SimulationTrace};
use crate::behavior::{perturb_profile, perturb_session, profile_rng, PerturbationConfig};
use crate::day_ahead::{solve_day_ahead, DayAheadInput, DayAheadSchedule, SolverOptions};
use crate::error::{Error, Result};
use crate::flex::{fleet_envelope, ChargingSession, DemandRepair, TimeGrid};
use crate::metrics::{build_report, MetricsReport};

/// Everything a run needs, already resolved to the grid.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub grid: TimeGrid,
    pub price: Vec<f64>,
    pub baseload_forecast: Vec<f64>,
    pub solar_forecast: Vec<f64>,
    pub sessions: Vec<ChargingSession>,
    pub theta: f64,
    pub perturbation: PerturbationConfig,
    pub simulation: SimulationOptions,
    pub solver: SolverOptions,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub scenario: Scenario,
    pub repairs: Vec<DemandRepair>,
    pub dayahead: DayAheadSchedule,
    pub trace: SimulationTrace,
    pub report: MetricsReport,
}

impl PipelineRun {
    /// Day-ahead solver and every real-time consensus converged.
    pub fn converged(&self) -> bool {
        self.dayahead.stats.converged && self.trace.convergence_rate() == 1.0
    }
}

/// Repair declared sessions and draw their realized behavior and the
/// realized profiles.
pub fn build_scenario(inputs: &RunInputs) -> Result<(Scenario, Vec<DemandRepair>)> {
    let grid = &inputs.grid;
    inputs.perturbation.validate()?;
    let mut repairs = Vec::new();
    let mut evs = Vec::with_capacity(inputs.sessions.len());
    for s in &inputs.sessions {
        let (s, repair) = s.clone().repaired(grid)?;
        repairs.extend(repair);
        let (d, e) = perturb_session(&s, &inputs.perturbation, inputs.seed, grid);
        evs.push(EvSpec {
            session: s,
            realized_duration: d,
            realized_energy: e,
            planned: true,
        });
    }
    let seed = inputs.perturbation.seed.unwrap_or(inputs.seed);
    let sigma = inputs.perturbation.profile_sigma;
    let baseload = perturb_profile(&inputs.baseload_forecast, sigma, false, &mut profile_rng(seed, 0));
    let solar = perturb_profile(&inputs.solar_forecast, sigma, true, &mut profile_rng(seed, 1));
    let scenario = Scenario {
        grid: grid.clone(),
        price: inputs.price.clone(),
        baseload_forecast: inputs.baseload_forecast.clone(),
        solar_forecast: inputs.solar_forecast.clone(),
        baseload,
        solar,
        evs,
    };
    scenario.validate()?;
    Ok((scenario, repairs))
}

/// Day-ahead plan for the scenario's planned sessions. A plan that missed
/// the solver tolerance is returned as is; check `stats.converged`.
pub fn plan_day_ahead(scenario: &Scenario, theta: f64, solver: &SolverOptions) -> Result<DayAheadSchedule> {
    let input = DayAheadInput {
        price: scenario.price.clone(),
        baseload: scenario.baseload_forecast.clone(),
        solar: scenario.solar_forecast.clone(),
        theta,
        grid: scenario.grid.clone(),
    };
    let agg = fleet_envelope(&scenario.planned_sessions(), &scenario.grid)?;
    match solve_day_ahead(&input, &agg, solver) {
        Ok(s) => Ok(s),
        Err(Error::NotConverged(best)) => Ok(*best),
        Err(e) => Err(e),
    }
}

pub fn run(inputs: &RunInputs, label: &str) -> Result<PipelineRun> {
    let (scenario, repairs) = build_scenario(inputs)?;
    let dayahead = plan_day_ahead(&scenario, inputs.theta, &inputs.solver)?;
    let trace = simulate(&scenario, &dayahead, &inputs.simulation)?;
    let report = build_report(label, &trace, &scenario.uncontrolled_ev_load(), &scenario.price)?;
    Ok(PipelineRun {
        scenario,
        repairs,
        dayahead,
        trace,
        report,
    })
}
