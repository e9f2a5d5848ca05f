//! First-stage aggregator problem.
//!
//! Choose the aggregate EV power profile `P` that minimizes wholesale energy
//! cost plus a quadratic penalty on consecutive netload changes,
//!
//! ```text
//! sum_t price[t] * L[t] * dt  +  theta * sum_t (L[t+1] - L[t])^2,
//! L = baseload - solar + P,
//! ```
//!
//! subject to the fleet's power and cumulative-energy envelope. Solved by
//! accelerated projected gradient with adaptive restart; every iterate is
//! projected exactly onto the envelope (see [`crate::projection`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::{check_feasible, AggregateEnvelope, TimeGrid};
use crate::projection::{CumulativeBand, Projector};

#[derive(Debug, Clone, PartialEq)]
pub struct DayAheadInput {
    /// Wholesale price, $/kWh.
    pub price: Vec<f64>,
    /// Forecast baseload, kW.
    pub baseload: Vec<f64>,
    /// Forecast solar generation, kW.
    pub solar: Vec<f64>,
    /// Ramp penalty weight, $/kW² per step pair.
    pub theta: f64,
    pub grid: TimeGrid,
}

impl DayAheadInput {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let n = self.grid.steps;
        Error::check_len("price", n, self.price.len())?;
        Error::check_len("baseload", n, self.baseload.len())?;
        Error::check_len("solar", n, self.solar.len())?;
        if let Some(t) = self.price.iter().position(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("price at step {t} is not finite")));
        }
        if let Some(t) = self.baseload.iter().position(|p| !p.is_finite()) {
            return Err(Error::Invalid(format!("baseload at step {t} is not finite")));
        }
        if let Some(t) = self.solar.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Invalid(format!(
                "solar at step {t} must be finite and non-negative"
            )));
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(Error::Invalid(format!(
                "theta must be non-negative, got {}",
                self.theta
            )));
        }
        Ok(())
    }

    /// Baseload minus solar, kW.
    pub fn netload(&self) -> Vec<f64> {
        self.baseload
            .iter()
            .zip(&self.solar)
            .map(|(b, s)| b - s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub cost_term: f64,
    pub ramp_term: f64,
    pub objective: f64,
}

pub fn day_ahead_objective(power: &[f64], input: &DayAheadInput) -> Result<ObjectiveTerms> {
    let n = input.grid.steps;
    Error::check_len("power profile", n, power.len())?;
    Error::check_len("price", n, input.price.len())?;
    Error::check_len("baseload", n, input.baseload.len())?;
    Error::check_len("solar", n, input.solar.len())?;
    let load: Vec<f64> = (0..n)
        .map(|t| input.baseload[t] - input.solar[t] + power[t])
        .collect();
    let cost_term: f64 = (0..n)
        .map(|t| input.price[t] * load[t] * input.grid.step_hours)
        .sum();
    let ramp_term = input.theta * load.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
    Ok(ObjectiveTerms {
        cost_term,
        ramp_term,
        objective: cost_term + ramp_term,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Feasibility tolerance in kW / kWh; `None` means `1e-6 * max(P_plus)`.
    pub feas_tol: Option<f64>,
    /// Gradient-mapping norm at termination, relative to the gradient norm
    /// at the starting point.
    pub opt_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 200_000,
            feas_tol: None,
            opt_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iterations: usize,
    pub feasibility_residual: f64,
    pub optimality_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAheadSchedule {
    pub p_hat: Vec<f64>,
    pub cost_term: f64,
    pub ramp_term: f64,
    pub objective: f64,
    pub stats: SolverStats,
}

impl DayAheadSchedule {
    /// Wrap a fixed profile (e.g. one read back from disk).
    pub fn from_profile(p_hat: Vec<f64>, input: &DayAheadInput) -> Result<Self> {
        let terms = day_ahead_objective(&p_hat, input)?;
        Ok(DayAheadSchedule {
            p_hat,
            cost_term: terms.cost_term,
            ramp_term: terms.ramp_term,
            objective: terms.objective,
            stats: SolverStats {
                iterations: 0,
                feasibility_residual: 0.0,
                optimality_residual: 0.0,
                converged: true,
            },
        })
    }
}

struct Problem<'a> {
    price_dt: Vec<f64>,
    netload: Vec<f64>,
    theta: f64,
    band: &'a CumulativeBand,
    projector: Projector,
}

impl Problem<'_> {
    fn value(&self, p: &[f64]) -> f64 {
        let mut v = 0.0;
        let mut prev = None;
        for t in 0..p.len() {
            let l = self.netload[t] + p[t];
            v += self.price_dt[t] * p[t];
            if let Some(lp) = prev {
                let d: f64 = l - lp;
                v += self.theta * d * d;
            }
            prev = Some(l);
        }
        v
    }

    fn gradient(&self, p: &[f64], g: &mut [f64]) {
        let n = p.len();
        let load = |t: usize| self.netload[t] + p[t];
        for t in 0..n {
            let mut lap = 0.0;
            if t > 0 {
                lap += load(t) - load(t - 1);
            }
            if t + 1 < n {
                lap -= load(t + 1) - load(t);
            }
            g[t] = self.price_dt[t] + 2.0 * self.theta * lap;
        }
    }

    fn gradient_step(&mut self, from: &[f64], grad: &[f64], step: f64, out: &mut [f64]) -> Result<()> {
        let trial: Vec<f64> = from.iter().zip(grad).map(|(x, g)| x - step * g).collect();
        self.projector.project(self.band, &trial, out)
    }

    /// Infinity norm of the gradient mapping at `x`.
    fn stationarity(&mut self, x: &[f64], step: f64, scratch: &mut [f64]) -> Result<f64> {
        let mut g = vec![0.0; x.len()];
        self.gradient(x, &mut g);
        self.gradient_step(x, &g, step, scratch)?;
        Ok(x.iter()
            .zip(scratch.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / step)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn solve_day_ahead(
    input: &DayAheadInput,
    agg: &AggregateEnvelope,
    opts: &SolverOptions,
) -> Result<DayAheadSchedule> {
    input.validate()?;
    let n = input.grid.steps;
    Error::check_len("aggregate envelope", n, agg.len())?;
    let band = CumulativeBand::from_envelope(agg, &input.grid)?;
    let max_power = agg.p_plus.iter().copied().fold(0.0, f64::max);
    let feas_tol = opts.feas_tol.unwrap_or(1e-6 * max_power);

    let mut problem = Problem {
        price_dt: input
            .price
            .iter()
            .map(|p| p * input.grid.step_hours)
            .collect(),
        netload: input.netload(),
        theta: input.theta,
        band: &band,
        projector: Projector::default(),
    };

    // 8θ bounds the curvature of the ramp term. With little or no curvature
    // the cost term is linear and any step is a descent step; cap the move
    // at a few envelope widths.
    let price_scale = inf_norm(&problem.price_dt);
    let linear_floor = if max_power > 0.0 && price_scale > 0.0 {
        price_scale / (10.0 * max_power)
    } else {
        1.0
    };
    let lipschitz = (8.0 * input.theta).max(linear_floor);
    let step = 1.0 / lipschitz;

    let mut x = vec![0.0; n];
    problem.projector.project(&band, &vec![0.0; n], &mut x)?;
    let mut grad = vec![0.0; n];
    problem.gradient(&x, &mut grad);
    let grad_scale = inf_norm(&grad).max(f64::MIN_POSITIVE);
    let tol = opts.opt_tol * grad_scale;

    let mut scratch = vec![0.0; n];
    let mut y = x.clone();
    let mut x_next = vec![0.0; n];
    let mut fx = problem.value(&x);
    let mut momentum = 1.0f64;
    let mut residual = problem.stationarity(&x, step, &mut scratch)?;
    let mut iterations = 0;

    while residual > tol && iterations < opts.max_iters {
        iterations += 1;
        problem.gradient(&y, &mut grad);
        problem.gradient_step(&y, &grad, step, &mut x_next)?;
        let f_next = problem.value(&x_next);
        if f_next > fx {
            y.copy_from_slice(&x);
            momentum = 1.0;
            continue;
        }
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        for t in 0..n {
            y[t] = x_next[t] + beta * (x_next[t] - x[t]);
        }
        std::mem::swap(&mut x, &mut x_next);
        fx = f_next;
        momentum = next_momentum;
        if iterations % 10 == 0 {
            residual = problem.stationarity(&x, step, &mut scratch)?;
        }
    }
    if residual > tol {
        residual = problem.stationarity(&x, step, &mut scratch)?;
    }

    let feasibility = check_feasible(&x, agg, &input.grid, 0.0)?.max_violation();
    let terms = day_ahead_objective(&x, input)?;
    let schedule = DayAheadSchedule {
        p_hat: x,
        cost_term: terms.cost_term,
        ramp_term: terms.ramp_term,
        objective: terms.objective,
        stats: SolverStats {
            iterations,
            feasibility_residual: feasibility,
            optimality_residual: residual / grad_scale,
            converged: residual <= tol && feasibility <= feas_tol,
        },
    };
    if schedule.stats.converged {
        Ok(schedule)
    } else {
        Err(Error::NotConverged(Box::new(schedule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flex::{build_envelope, fleet_envelope, ChargingSession};

    fn session(id: u64, start: usize, d: usize, rate: f64, e: f64) -> ChargingSession {
        ChargingSession {
            id,
            start_step: start,
            duration_steps: d,
            energy_kwh: e,
            pmax_kw: rate,
            eta: 1.0,
            battery_kwh: 100.0,
        }
    }

    fn flat_input(price: Vec<f64>, theta: f64) -> DayAheadInput {
        let n = price.len();
        DayAheadInput {
            price,
            baseload: vec![0.0; n],
            solar: vec![0.0; n],
            theta,
            grid: TimeGrid::new(n, 1.0).unwrap(),
        }
    }

    #[test]
    fn objective_two_step_example() {
        let input = flat_input(vec![1.0, 1.0], 1.0);
        let terms = day_ahead_objective(&[0.0, 2.0], &input).unwrap();
        assert_eq!((terms.cost_term, terms.ramp_term, terms.objective), (2.0, 4.0, 6.0));
    }

    #[test]
    fn objective_constant_load_has_no_ramp() {
        let mut input = flat_input(vec![0.3; 5], 7.0);
        input.baseload = vec![4.0, 3.0, 2.0, 1.0, 0.0];
        let terms = day_ahead_objective(&[0.0, 1.0, 2.0, 3.0, 4.0], &input).unwrap();
        assert_eq!(terms.ramp_term, 0.0);
        assert!((terms.cost_term - 0.3 * 4.0 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn objective_with_no_ev_load_is_baseload_only() {
        let mut input = flat_input(vec![0.1, 0.2, 0.4], 0.5);
        input.baseload = vec![10.0, 12.0, 9.0];
        input.solar = vec![0.0, 3.0, 1.0];
        let terms = day_ahead_objective(&[0.0; 3], &input).unwrap();
        let expected_cost = 0.1 * 10.0 + 0.2 * 9.0 + 0.4 * 8.0;
        let expected_ramp = 0.5 * (1.0 + 1.0);
        assert!((terms.cost_term - expected_cost).abs() < 1e-12);
        assert!((terms.ramp_term - expected_ramp).abs() < 1e-12);
        assert!(day_ahead_objective(&[0.0; 2], &input).is_err());
    }

    #[test]
    fn cheap_second_step_gets_all_energy() {
        let input = flat_input(vec![1.0, 0.1], 0.0);
        let agg = build_envelope(&session(1, 0, 2, 2.0, 2.0), &input.grid).unwrap().into();
        let s = solve_day_ahead(&input, &agg, &SolverOptions::default()).unwrap();
        assert!((s.p_hat[0] - 0.0).abs() < 1e-9 && (s.p_hat[1] - 2.0).abs() < 1e-9, "{:?}", s.p_hat);
    }

    #[test]
    fn zero_laxity_session_is_forced() {
        for theta in [0.0, 0.01, 3.0] {
            let mut input = flat_input(vec![0.5, 0.1, 0.9, 0.2, 0.3, 0.05], theta);
            input.baseload = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0];
            let agg = fleet_envelope(&[session(1, 1, 3, 2.5, 7.5)], &input.grid).unwrap();
            let s = solve_day_ahead(&input, &agg, &SolverOptions::default()).unwrap();
            let expected = [0.0, 2.5, 2.5, 2.5, 0.0, 0.0];
            for (a, b) in s.p_hat.iter().zip(expected) {
                assert!((a - b).abs() < 1e-9, "theta {theta}: {:?}", s.p_hat);
            }
        }
    }

    #[test]
    fn ramp_penalty_flattens_netload() {
        let mut input = flat_input(vec![0.1; 4], 10.0);
        input.baseload = vec![0.0, 4.0, 0.0, 4.0];
        let agg = fleet_envelope(&[session(1, 0, 4, 4.0, 8.0)], &input.grid).unwrap();
        let s = solve_day_ahead(&input, &agg, &SolverOptions::default()).unwrap();
        // netload + P = 4 everywhere is feasible and has zero ramp
        for (t, p) in s.p_hat.iter().enumerate() {
            assert!((input.baseload[t] + p - 4.0).abs() < 1e-4, "{:?}", s.p_hat);
        }
    }

    #[test]
    fn rejects_negative_theta() {
        let input = flat_input(vec![0.1; 3], -1.0);
        let agg = AggregateEnvelope::zeros(3);
        assert!(solve_day_ahead(&input, &agg, &SolverOptions::default()).is_err());
    }

    #[test]
    fn iteration_cap_returns_best_iterate() {
        let mut input = flat_input(vec![0.1; 24], 1.0);
        input.baseload = (0..24).map(|t| if t % 2 == 0 { 0.0 } else { 10.0 }).collect();
        let agg = fleet_envelope(&[session(1, 0, 24, 5.0, 40.0)], &input.grid).unwrap();
        let opts = SolverOptions {
            max_iters: 1,
            ..SolverOptions::default()
        };
        match solve_day_ahead(&input, &agg, &opts) {
            Err(Error::NotConverged(best)) => {
                assert_eq!(best.p_hat.len(), 24);
                assert!(!best.stats.converged);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
