//! Consensus iterations between the aggregator and the EVs.
//!
//! Each round the aggregator broadcasts the scaled mismatch between the
//! fleet's proposed load and the target; every EV replies with its best
//! response to that same signal (Jacobi updates). Rounds stop when the signal
//! stops moving in the infinity norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::best_response::{best_response, LocalLimits};

/// Below this many participants the rounds run on the calling thread.
const PARALLEL_THRESHOLD: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Required energy spread evenly over the window.
    Flat,
    /// As-soon-as-possible feasible schedule.
    Asap,
    /// Seeded random feasible schedule.
    Random,
    /// Previous step's equilibrium, flat for newcomers.
    Warm,
    #[default]
    /// Previous step's equilibrium; newcomers start from their share of the
    /// day-ahead plan, or flat when they have none.
    Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsensusOptions {
    pub beta: f64,
    pub err_tol: f64,
    pub k_max: usize,
    pub init: InitMode,
}

impl Default for ConsensusOptions {
    fn default() -> Self {
        ConsensusOptions {
            beta: 2.0,
            err_tol: 1e-4,
            k_max: 200,
            init: InitMode::Plan,
        }
    }
}

impl ConsensusOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.err_tol.is_finite() && self.err_tol > 0.0) {
            return Err(Error::Invalid(format!(
                "err_tol must be positive, got {}",
                self.err_tol
            )));
        }
        if self.k_max < 1 {
            return Err(Error::Invalid("k_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    /// One entry per remaining step.
    pub values: Vec<f64>,
    pub iteration: usize,
}

/// Aggregate load of a set of schedules, summed in slice order.
pub fn aggregate(schedules: &[Vec<f64>], horizon: usize) -> Vec<f64> {
    let mut total = vec![0.0; horizon];
    for s in schedules {
        for (acc, p) in total.iter_mut().zip(s) {
            *acc += p;
        }
    }
    total
}

/// `c[t] = (sum_n p_n[t] - target[t]) / (beta * N)`; `None` when nobody
/// participates.
pub fn control_signal(
    schedules: &[Vec<f64>],
    target: &[f64],
    beta: f64,
    iteration: usize,
) -> Result<Option<ControlSignal>> {
    if schedules.is_empty() {
        return Ok(None);
    }
    for s in schedules {
        Error::check_len("schedule", target.len(), s.len())?;
    }
    let scale = 1.0 / (beta * schedules.len() as f64);
    let values = aggregate(schedules, target.len())
        .iter()
        .zip(target)
        .map(|(sum, g)| (sum - g) * scale)
        .collect();
    Ok(Some(ControlSignal { values, iteration }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome {
    pub schedules: Vec<Vec<f64>>,
    pub signal: ControlSignal,
    /// Signal updates computed after the initial one.
    pub iterations: usize,
    /// Last `||c_k - c_{k-1}||_inf`.
    pub residual: f64,
    pub converged: bool,
}

/// Initial schedules for `limits`. Warm and plan starts fall back to flat
/// here; the simulator overwrites them where it has something better.
pub fn initial_schedules(
    limits: &[LocalLimits],
    horizon: usize,
    mode: InitMode,
    seed: u64,
) -> Vec<Vec<f64>> {
    limits
        .iter()
        .enumerate()
        .map(|(i, lim)| {
            let mut s = vec![0.0; horizon];
            match mode {
                InitMode::Flat | InitMode::Warm | InitMode::Plan => lim.flat(&mut s),
                InitMode::Asap => lim.asap(&mut s),
                InitMode::Random => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    let raw: Vec<f64> = (0..horizon).map(|_| rng.gen_range(0.0..=lim.rate)).collect();
                    // projection onto the EV's own feasible set
                    best_response(&vec![0.0; horizon], &raw, lim, &mut s);
                }
            }
            s
        })
        .collect()
}

fn respond_all(signal: &[f64], prev: &[Vec<f64>], limits: &[LocalLimits], out: &mut [Vec<f64>]) {
    let reply = |((o, p), lim): ((&mut Vec<f64>, &Vec<f64>), &LocalLimits)| {
        best_response(signal, p, lim, o)
    };
    if limits.len() >= PARALLEL_THRESHOLD {
        out.par_iter_mut()
            .zip(prev.par_iter())
            .zip(limits.par_iter())
            .for_each(reply);
    } else {
        out.iter_mut().zip(prev.iter()).zip(limits.iter()).for_each(reply);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn run_consensus(
    limits: &[LocalLimits],
    target: &[f64],
    opts: &ConsensusOptions,
    init: Vec<Vec<f64>>,
) -> Result<ConsensusOutcome> {
    opts.validate()?;
    if limits.is_empty() {
        return Err(Error::Invalid("consensus needs at least one participant".into()));
    }
    Error::check_len("initial schedules", limits.len(), init.len())?;
    let horizon = target.len();

    let mut previous = init;
    let mut signal = control_signal(&previous, target, opts.beta, 0)?
        .expect("participants checked above");
    let mut current = vec![vec![0.0; horizon]; limits.len()];
    respond_all(&signal.values, &previous, limits, &mut current);

    let mut residual = f64::INFINITY;
    for k in 1..=opts.k_max {
        let next = control_signal(&current, target, opts.beta, k)?
            .expect("participants checked above");
        residual = max_abs_diff(&next.values, &signal.values);
        signal = next;
        if residual <= opts.err_tol {
            return Ok(ConsensusOutcome {
                schedules: current,
                signal,
                iterations: k,
                residual,
                converged: true,
            });
        }
        if k == opts.k_max {
            break;
        }
        std::mem::swap(&mut previous, &mut current);
        respond_all(&signal.values, &previous, limits, &mut current);
    }
    Ok(ConsensusOutcome {
        schedules: current,
        signal,
        iterations: opts.k_max,
        residual,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lim(start: usize, end: usize, rate: f64, min: f64) -> LocalLimits {
        LocalLimits {
            start,
            end,
            rate,
            step_hours: 1.0,
            min_kwh: min,
            max_kwh: 100.0,
        }
    }

    #[test]
    fn signal_formula() {
        let target = [1.0, 1.0];
        let sched = vec![vec![3.0, -1.0]];
        let c = control_signal(&sched, &target, 1.0, 0).unwrap().unwrap();
        assert_eq!(c.values, vec![2.0, -2.0]);
        let c2 = control_signal(&sched, &target, 2.0, 0).unwrap().unwrap();
        assert_eq!(c2.values, vec![1.0, -1.0]);
        let exact = control_signal(&[vec![0.5, 0.5], vec![0.5, 0.5]], &target, 1.0, 0)
            .unwrap()
            .unwrap();
        assert_eq!(exact.values, vec![0.0, 0.0]);
        assert!(control_signal(&[], &target, 1.0, 0).unwrap().is_none());
    }

    #[test]
    fn zero_laxity_converges_immediately() {
        let limits = [lim(0, 3, 2.0, 6.0)];
        let init = initial_schedules(&limits, 3, InitMode::Asap, 0);
        let out = run_consensus(&limits, &[1.0, 0.0, 5.0], &ConsensusOptions::default(), init.clone())
            .unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        assert_eq!(out.schedules, init);
    }

    #[test]
    fn forced_fleet_matching_target_has_zero_signal() {
        let limits = [lim(0, 2, 2.0, 4.0), lim(1, 4, 1.0, 3.0)];
        let target = [2.0, 3.0, 1.0, 1.0];
        let init = initial_schedules(&limits, 4, InitMode::Asap, 0);
        let out = run_consensus(&limits, &target, &ConsensusOptions::default(), init).unwrap();
        let opts = ConsensusOptions::default();
        assert!(out.signal.values.iter().all(|c| c.abs() <= opts.err_tol));
    }

    #[test]
    fn random_init_is_feasible_and_reaches_same_aggregate() {
        let limits = [lim(0, 4, 2.0, 3.0), lim(1, 4, 3.0, 2.0), lim(0, 2, 1.0, 1.0)];
        let target = [1.0, 2.0, 2.0, 1.5];
        let opts = ConsensusOptions {
            err_tol: 1e-12,
            k_max: 20_000,
            ..ConsensusOptions::default()
        };
        let asap = run_consensus(&limits, &target, &opts, initial_schedules(&limits, 4, InitMode::Asap, 0))
            .unwrap();
        let init = initial_schedules(&limits, 4, InitMode::Random, 9);
        for (s, l) in init.iter().zip(&limits) {
            let e: f64 = s.iter().sum();
            assert!(e >= l.min_kwh - 1e-9 && s.iter().all(|p| *p >= 0.0 && *p <= l.rate));
        }
        let random = run_consensus(&limits, &target, &opts, init).unwrap();
        let a = aggregate(&asap.schedules, 4);
        let b = aggregate(&random.schedules, 4);
        for t in 0..4 {
            assert!((a[t] - b[t]).abs() < 1e-6, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let limits = [lim(0, 4, 2.0, 3.0), lim(0, 4, 3.0, 2.0)];
        let opts = ConsensusOptions {
            err_tol: 1e-15,
            k_max: 2,
            ..ConsensusOptions::default()
        };
        let init = initial_schedules(&limits, 4, InitMode::Asap, 0);
        let out = run_consensus(&limits, &[3.0, 0.0, 0.0, 2.0], &opts, init).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        assert!(out.residual > 0.0);
    }
}
