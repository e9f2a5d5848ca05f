//! A single EV's reply to the broadcast signal.
//!
//! Each EV minimizes `sum_t c[t] p[t] + sum_t (p[t] - prev[t])^2` over its own
//! power box and energy band. With a multiplier `mu` on the energy band the
//! minimizer is, per step,
//!
//! ```text
//! p[t] = clip(prev[t] + (mu * dt - c[t]) / 2, 0, rate)
//! ```
//!
//! so delivered energy is a nondecreasing piecewise-linear function of `mu`
//! whose breakpoints are where a step enters or leaves its bounds. The
//! multiplier is found by bisection over the sorted breakpoints followed by
//! linear interpolation inside the bracketing segment.

use crate::error::{Error, Result};
use crate::flex::TimeGrid;

use super::estimate::EvState;

/// Constraints of one EV over a remaining horizon, in horizon-relative indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLimits {
    /// First step the EV may charge.
    pub start: usize,
    /// First step after its (estimated) departure.
    pub end: usize,
    /// Battery-side power limit, kW.
    pub rate: f64,
    pub step_hours: f64,
    /// Energy it must still receive, kWh.
    pub min_kwh: f64,
    /// Energy it may still receive, kWh.
    pub max_kwh: f64,
}

impl LocalLimits {
    pub fn window(&self) -> std::ops::Range<usize> {
        self.start..self.end.max(self.start)
    }

    /// Energy deliverable at full power over the window.
    pub fn capacity_kwh(&self) -> f64 {
        self.rate * self.step_hours * self.window().len() as f64
    }

    /// Constant-power schedule meeting `min_kwh`, written over `out`.
    pub fn flat(&self, out: &mut [f64]) {
        out.fill(0.0);
        let window = self.window();
        if window.is_empty() {
            return;
        }
        let energy = self.min_kwh.min(self.capacity_kwh());
        let p = (energy / (window.len() as f64 * self.step_hours)).min(self.rate);
        out[window].fill(p);
    }

    /// As-soon-as-possible schedule meeting `min_kwh`, written over `out`.
    pub fn asap(&self, out: &mut [f64]) {
        out.fill(0.0);
        let mut left = self.min_kwh.min(self.capacity_kwh());
        for t in self.window() {
            if left <= 0.0 {
                break;
            }
            let p = self.rate.min(left / self.step_hours);
            out[t] = p;
            left -= p * self.step_hours;
        }
    }
}

/// Delivered energy as a function of the multiplier.
struct EnergyCurve<'a> {
    base: &'a [f64],
    rate: f64,
    dt: f64,
}

impl EnergyCurve<'_> {
    fn power(&self, t: usize, mu: f64) -> f64 {
        (self.base[t] + 0.5 * mu * self.dt).clamp(0.0, self.rate)
    }

    fn energy(&self, mu: f64) -> f64 {
        (0..self.base.len()).map(|t| self.power(t, mu)).sum::<f64>() * self.dt
    }

    /// Smallest multiplier whose energy reaches `target`.
    fn solve(&self, target: f64) -> f64 {
        let mut knots: Vec<f64> = self
            .base
            .iter()
            .flat_map(|b| [-2.0 * b / self.dt, 2.0 * (self.rate - b) / self.dt])
            .collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();

        let first = knots[0];
        let last = knots[knots.len() - 1];
        if target <= self.energy(first) {
            return first;
        }
        if target >= self.energy(last) {
            return last;
        }
        // invariant: energy(knots[lo]) < target <= energy(knots[hi])
        let (mut lo, mut hi) = (0, knots.len() - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.energy(knots[mid]) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (m0, m1) = (knots[lo], knots[hi]);
        let (e0, e1) = (self.energy(m0), self.energy(m1));
        m0 + (m1 - m0) * (target - e0) / (e1 - e0)
    }
}

/// Minimize signal cost plus proximal penalty toward `prev`, writing the
/// schedule into `out` (zero outside the window).
pub fn best_response(signal: &[f64], prev: &[f64], limits: &LocalLimits, out: &mut [f64]) {
    out.fill(0.0);
    let window = limits.window();
    if window.is_empty() {
        return;
    }
    let base: Vec<f64> = window
        .clone()
        .map(|t| prev[t] - 0.5 * signal[t])
        .collect();
    let curve = EnergyCurve {
        base: &base,
        rate: limits.rate,
        dt: limits.step_hours,
    };
    let free = curve.energy(0.0);
    let mu = if free < limits.min_kwh {
        curve.solve(limits.min_kwh)
    } else if free > limits.max_kwh {
        curve.solve(limits.max_kwh)
    } else {
        0.0
    };
    for (i, t) in window.enumerate() {
        out[t] = curve.power(i, mu);
    }
}

/// [`best_response`] for a live EV at absolute step `now`. The returned
/// schedule covers `now..grid.steps`.
pub fn ev_best_response(
    signal: &[f64],
    prev: &[f64],
    ev: &EvState,
    now: usize,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let horizon = grid.steps.saturating_sub(now);
    Error::check_len("control signal", horizon, signal.len())?;
    Error::check_len("previous schedule", horizon, prev.len())?;
    let limits = ev.limits(now, grid);
    let mut out = vec![0.0; horizon];
    best_response(signal, prev, &limits, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn limits(n: usize, rate: f64, min: f64, max: f64) -> LocalLimits {
        LocalLimits {
            start: 0,
            end: n,
            rate,
            step_hours: 1.0,
            min_kwh: min,
            max_kwh: max,
        }
    }

    fn objective(c: &[f64], prev: &[f64], p: &[f64]) -> f64 {
        (0..p.len())
            .map(|t| c[t] * p[t] + (p[t] - prev[t]).powi(2))
            .sum()
    }

    #[test]
    fn two_step_example_matches_grid_search() {
        let c = [1.0, -1.0];
        let prev = [0.0, 0.0];
        let lim = limits(2, 2.0, 1.0, 10.0);
        let mut p = [0.0; 2];
        best_response(&c, &prev, &lim, &mut p);

        // Brute force at 1e-3 resolution over the feasible square.
        let mut best = (f64::INFINITY, [0.0; 2]);
        for i in 0..=2000 {
            for j in 0..=2000 {
                let q = [i as f64 * 1e-3, j as f64 * 1e-3];
                if q[0] + q[1] < 1.0 - 1e-12 {
                    continue;
                }
                let v = objective(&c, &prev, &q);
                if v < best.0 {
                    best = (v, q);
                }
            }
        }
        assert!((p[0] - best.1[0]).abs() <= 1e-3 && (p[1] - best.1[1]).abs() <= 1e-3);
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn zero_signal_keeps_feasible_previous() {
        let prev = [1.0, 0.5, 0.0, 2.0];
        let mut p = [0.0; 4];
        best_response(&[0.0; 4], &prev, &limits(4, 2.0, 3.0, 10.0), &mut p);
        assert_eq!(p, prev);
    }

    #[test]
    fn zero_laxity_is_full_power() {
        let mut p = [0.0; 3];
        best_response(&[5.0, -2.0, 9.0], &[0.0; 3], &limits(3, 2.0, 6.0, 6.0), &mut p);
        assert_eq!(p, [2.0; 3]);
    }

    #[test]
    fn outside_window_is_zero_and_empty_window_yields_nothing() {
        let lim = LocalLimits {
            start: 1,
            end: 3,
            ..limits(0, 2.0, 1.0, 5.0)
        };
        let mut p = [9.0; 4];
        best_response(&[-1.0; 4], &[2.0; 4], &lim, &mut p);
        assert_eq!((p[0], p[3]), (0.0, 0.0));
        let empty = LocalLimits { start: 2, end: 2, ..lim };
        best_response(&[-1.0; 4], &[2.0; 4], &empty, &mut p);
        assert_eq!(p, [0.0; 4]);
    }

    #[test]
    fn asap_fills_front_of_window() {
        let lim = LocalLimits {
            start: 1,
            end: 4,
            rate: 2.0,
            step_hours: 0.5,
            min_kwh: 1.5,
            max_kwh: 10.0,
        };
        let mut p = [0.0; 5];
        lim.asap(&mut p);
        assert_eq!(p, [0.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn flat_spreads_evenly() {
        let lim = LocalLimits {
            start: 1,
            end: 4,
            rate: 2.0,
            step_hours: 0.5,
            min_kwh: 1.5,
            max_kwh: 10.0,
        };
        let mut p = [9.0; 5];
        lim.flat(&mut p);
        assert_eq!(p, [0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    /// Projection of `prev - c/2` onto box ∩ energy slab by Dykstra.
    fn dykstra(c: &[f64], prev: &[f64], lim: &LocalLimits) -> Vec<f64> {
        let n = c.len();
        let z: Vec<f64> = (0..n).map(|t| prev[t] - 0.5 * c[t]).collect();
        let mut x = z.clone();
        let (mut ib, mut is) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..1_000_000 {
            let mut change: f64 = 0.0;
            let y: Vec<f64> = (0..n).map(|t| x[t] + ib[t]).collect();
            let p: Vec<f64> = y.iter().map(|v| v.clamp(0.0, lim.rate)).collect();
            for t in 0..n {
                change = change.max((y[t] - p[t] - ib[t]).abs()).max((p[t] - x[t]).abs());
                ib[t] = y[t] - p[t];
            }
            x = p;
            let y: Vec<f64> = (0..n).map(|t| x[t] + is[t]).collect();
            let e: f64 = y.iter().sum::<f64>() * lim.step_hours;
            let shift = (e.clamp(lim.min_kwh, lim.max_kwh) - e) / (lim.step_hours * n as f64);
            for t in 0..n {
                let p = y[t] + shift;
                change = change.max((y[t] - p - is[t]).abs()).max((p - x[t]).abs());
                is[t] = y[t] - p;
                x[t] = p;
            }
            if change < 1e-14 {
                break;
            }
        }
        x
    }

    proptest! {
        #[test]
        fn agrees_with_alternating_projections(
            n in 1usize..6,
            seed in prop::collection::vec((-3.0f64..3.0, 0.0f64..2.0), 6),
            rate in 0.5f64..4.0,
            dt in prop::sample::select(vec![0.25, 0.5, 1.0]),
            fill in (0.05f64..0.9, 0.0f64..0.5),
        ) {
            let c: Vec<f64> = seed[..n].iter().map(|s| s.0).collect();
            let prev: Vec<f64> = seed[..n].iter().map(|s| s.1).collect();
            let cap = rate * dt * n as f64;
            let min = cap * fill.0;
            let lim = LocalLimits {
                start: 0,
                end: n,
                rate,
                step_hours: dt,
                min_kwh: min,
                max_kwh: min + (cap - min) * (0.1 + fill.1),
            };
            let mut p = vec![0.0; n];
            best_response(&c, &prev, &lim, &mut p);
            let reference = dykstra(&c, &prev, &lim);
            for t in 0..n {
                prop_assert!((p[t] - reference[t]).abs() < 1e-7, "{p:?} vs {reference:?}");
            }
            let e: f64 = p.iter().sum::<f64>() * dt;
            prop_assert!(e >= lim.min_kwh - 1e-9 && e <= lim.max_kwh + 1e-9);
        }
    }
}
