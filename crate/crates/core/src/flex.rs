//! Charging flexibility of individual sessions and of a fleet.
//!
//! A session's envelope is the band between its as-soon-as-possible and
//! as-late-as-possible cumulative energy trajectories. Power is held constant
//! within a step and the energy at step `t` already includes the delivery of
//! step `t`. All power figures are battery side, i.e. already scaled by the
//! charging efficiency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discrete time axis shared by every profile in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub steps: usize,
    pub step_hours: f64,
    /// Clock hour at the start of step 0.
    #[serde(default)]
    pub start_hour: f64,
    #[serde(default)]
    pub origin: String,
}

impl TimeGrid {
    pub fn new(steps: usize, step_hours: f64) -> Result<Self> {
        let grid = TimeGrid {
            steps,
            step_hours,
            start_hour: 0.0,
            origin: String::new(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// One day at quarter-hour resolution.
    pub fn day_quarter_hours() -> Self {
        TimeGrid {
            steps: 96,
            step_hours: 0.25,
            start_hour: 0.0,
            origin: String::new(),
        }
    }

    pub fn with_start_hour(mut self, hour: f64) -> Self {
        self.start_hour = hour;
        self
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = origin.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Invalid(format!(
                "time grid needs at least 2 steps, got {}",
                self.steps
            )));
        }
        if !(self.step_hours.is_finite() && self.step_hours > 0.0) {
            return Err(Error::Invalid(format!(
                "step length must be positive, got {} h",
                self.step_hours
            )));
        }
        if !(0.0..24.0).contains(&self.start_hour) {
            return Err(Error::Invalid(format!(
                "start hour must lie in [0, 24), got {}",
                self.start_hour
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Hours elapsed from the start of the grid to the start of step `t`.
    pub fn hour_of(&self, t: usize) -> f64 {
        t as f64 * self.step_hours
    }

    /// Clock hour in `[0, 24)` at the middle of step `t`.
    pub fn clock_hour(&self, t: usize) -> f64 {
        (self.start_hour + self.hour_of(t) + 0.5 * self.step_hours).rem_euclid(24.0)
    }
}

/// One EV plug-in as declared to the aggregator.
///
/// Field names double as the session CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargingSession {
    pub id: u64,
    pub start_step: usize,
    pub duration_steps: usize,
    pub energy_kwh: f64,
    pub pmax_kw: f64,
    pub eta: f64,
    pub battery_kwh: f64,
}

/// Record of a demand clamped down to what the stay can deliver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandRepair {
    pub id: u64,
    pub requested_kwh: f64,
    pub granted_kwh: f64,
}

impl ChargingSession {
    /// Battery-side power limit, `pmax * eta`.
    pub fn rate_kw(&self) -> f64 {
        self.pmax_kw * self.eta
    }

    /// First step after the stay.
    pub fn end_step(&self) -> usize {
        self.start_step + self.duration_steps
    }

    /// Most energy the stay can absorb at full power.
    pub fn deliverable_kwh(&self, grid: &TimeGrid) -> f64 {
        self.rate_kw() * self.duration_steps as f64 * grid.step_hours
    }

    pub fn is_plugged(&self, t: usize) -> bool {
        t >= self.start_step && t < self.end_step()
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSession {
            id: self.id,
            reason: reason.into(),
        }
    }

    pub(crate) fn validate_shape(&self, grid: &TimeGrid) -> Result<()> {
        if self.duration_steps == 0 {
            return Err(self.invalid("stay must last at least one step"));
        }
        if self.start_step >= grid.steps || self.end_step() > grid.steps {
            return Err(self.invalid(format!(
                "window [{}, {}) exceeds the {}-step grid",
                self.start_step,
                self.end_step(),
                grid.steps
            )));
        }
        if !(self.pmax_kw.is_finite() && self.pmax_kw > 0.0) {
            return Err(self.invalid(format!("pmax_kw must be positive, got {}", self.pmax_kw)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(self.invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if !(self.energy_kwh.is_finite() && self.energy_kwh >= 0.0) {
            return Err(self.invalid(format!(
                "energy_kwh must be non-negative, got {}",
                self.energy_kwh
            )));
        }
        if !(self.battery_kwh.is_finite() && self.battery_kwh >= 0.0) {
            return Err(self.invalid(format!(
                "battery_kwh must be non-negative, got {}",
                self.battery_kwh
            )));
        }
        Ok(())
    }

    /// Full invariant check, including deliverability of the demand.
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        self.validate_shape(grid)?;
        let deliverable = self.deliverable_kwh(grid);
        if self.energy_kwh > deliverable * (1.0 + 1e-12) {
            return Err(self.invalid(format!(
                "demand {} kWh exceeds deliverable {} kWh",
                self.energy_kwh, deliverable
            )));
        }
        if self.energy_kwh > self.battery_kwh {
            return Err(self.invalid(format!(
                "demand {} kWh exceeds battery capacity {} kWh",
                self.energy_kwh, self.battery_kwh
            )));
        }
        Ok(())
    }

    /// Validate, clamping an undeliverable demand to the stay's capacity.
    pub fn repaired(mut self, grid: &TimeGrid) -> Result<(Self, Option<DemandRepair>)> {
        self.validate_shape(grid)?;
        let deliverable = self.deliverable_kwh(grid);
        let mut repair = None;
        if self.energy_kwh > deliverable {
            repair = Some(DemandRepair {
                id: self.id,
                requested_kwh: self.energy_kwh,
                granted_kwh: deliverable,
            });
            self.energy_kwh = deliverable;
        }
        self.validate(grid)?;
        Ok((self, repair))
    }
}

/// Energy and power boundaries of a single session over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexEnvelope {
    pub e_plus: Vec<f64>,
    pub e_minus: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
}

/// Fleet-summed boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateEnvelope {
    pub e_plus: Vec<f64>,
    pub e_minus: Vec<f64>,
    pub p_plus: Vec<f64>,
    pub p_minus: Vec<f64>,
}

impl AggregateEnvelope {
    pub fn zeros(steps: usize) -> Self {
        AggregateEnvelope {
            e_plus: vec![0.0; steps],
            e_minus: vec![0.0; steps],
            p_plus: vec![0.0; steps],
            p_minus: vec![0.0; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.p_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_plus.is_empty()
    }

    fn add(&mut self, env: &FlexEnvelope) {
        let fields = [
            (&mut self.e_plus, &env.e_plus),
            (&mut self.e_minus, &env.e_minus),
            (&mut self.p_plus, &env.p_plus),
            (&mut self.p_minus, &env.p_minus),
        ];
        for (acc, v) in fields {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
    }
}

impl From<FlexEnvelope> for AggregateEnvelope {
    fn from(env: FlexEnvelope) -> Self {
        AggregateEnvelope {
            e_plus: env.e_plus,
            e_minus: env.e_minus,
            p_plus: env.p_plus,
            p_minus: env.p_minus,
        }
    }
}

pub fn build_envelope(session: &ChargingSession, grid: &TimeGrid) -> Result<FlexEnvelope> {
    session.validate(grid)?;
    let rate = session.rate_kw();
    let per_step = rate * grid.step_hours;
    let start = session.start_step;
    let end = session.end_step();
    let demand = session.energy_kwh;

    let mut env = FlexEnvelope {
        e_plus: vec![0.0; grid.steps],
        e_minus: vec![0.0; grid.steps],
        p_plus: vec![0.0; grid.steps],
        p_minus: vec![0.0; grid.steps],
    };
    for t in start..grid.steps {
        if t < end {
            let charged_steps = (t - start + 1) as f64;
            let steps_left = (end - 1 - t) as f64;
            env.e_plus[t] = demand.min(per_step * charged_steps);
            env.e_minus[t] = (demand - per_step * steps_left).max(0.0);
            env.p_plus[t] = rate;
        } else {
            env.e_plus[t] = demand;
            env.e_minus[t] = demand;
        }
    }
    Ok(env)
}

/// Elementwise sum; an empty slice yields an all-zero envelope over `grid`.
pub fn aggregate_envelopes(envelopes: &[FlexEnvelope], grid: &TimeGrid) -> Result<AggregateEnvelope> {
    let mut agg = AggregateEnvelope::zeros(grid.steps);
    for env in envelopes {
        for len in [
            env.e_plus.len(),
            env.e_minus.len(),
            env.p_plus.len(),
            env.p_minus.len(),
        ] {
            Error::check_len("envelope", grid.steps, len)?;
        }
        agg.add(env);
    }
    Ok(agg)
}

/// Envelopes for a whole fleet, summed.
pub fn fleet_envelope(sessions: &[ChargingSession], grid: &TimeGrid) -> Result<AggregateEnvelope> {
    let mut agg = AggregateEnvelope::zeros(grid.steps);
    for s in sessions {
        agg.add(&build_envelope(s, grid)?);
    }
    Ok(agg)
}

/// Power profile of uncontrolled charging: full power from plug-in until the
/// demand is met.
pub fn asap_profile(session: &ChargingSession, grid: &TimeGrid) -> Vec<f64> {
    let mut power = vec![0.0; grid.steps];
    let rate = session.rate_kw();
    let mut left = session.energy_kwh;
    for p in power
        .iter_mut()
        .take(session.end_step().min(grid.steps))
        .skip(session.start_step)
    {
        if left <= 0.0 {
            break;
        }
        *p = rate.min(left / grid.step_hours);
        left -= *p * grid.step_hours;
    }
    power
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    PowerLower,
    PowerUpper,
    EnergyLower,
    EnergyUpper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: BoundKind,
    pub bound: f64,
    pub value: f64,
    /// Distance outside the bound, kW or kWh.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Feasibility {
    pub violations: Vec<Violation>,
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn max_violation(&self) -> f64 {
        self.violations
            .iter()
            .map(|v| v.magnitude)
            .fold(0.0, f64::max)
    }
}

/// Test an aggregate power profile against power and cumulative-energy bounds.
pub fn check_feasible(
    power: &[f64],
    agg: &AggregateEnvelope,
    grid: &TimeGrid,
    tol: f64,
) -> Result<Feasibility> {
    Error::check_len("power profile", grid.steps, power.len())?;
    Error::check_len("aggregate envelope", grid.steps, agg.len())?;

    let mut violations = Vec::new();
    let mut push = |step, kind, bound: f64, value: f64| {
        violations.push(Violation {
            step,
            kind,
            bound,
            value,
            magnitude: (value - bound).abs(),
        })
    };
    let mut energy = 0.0;
    for (t, &p) in power.iter().enumerate() {
        energy += p * grid.step_hours;
        if p < agg.p_minus[t] - tol {
            push(t, BoundKind::PowerLower, agg.p_minus[t], p);
        }
        if p > agg.p_plus[t] + tol {
            push(t, BoundKind::PowerUpper, agg.p_plus[t], p);
        }
        if energy < agg.e_minus[t] - tol {
            push(t, BoundKind::EnergyLower, agg.e_minus[t], energy);
        }
        if energy > agg.e_plus[t] + tol {
            push(t, BoundKind::EnergyUpper, agg.e_plus[t], energy);
        }
    }
    Ok(Feasibility { violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hourly(steps: usize) -> TimeGrid {
        TimeGrid::new(steps, 1.0).unwrap()
    }

    fn session(id: u64, start: usize, d: usize, pmax: f64, e: f64) -> ChargingSession {
        ChargingSession {
            id,
            start_step: start,
            duration_steps: d,
            energy_kwh: e,
            pmax_kw: pmax,
            eta: 1.0,
            battery_kwh: 100.0,
        }
    }

    #[test]
    fn envelope_of_four_step_session() {
        // ASAP: 2, 4, then hold. ALAP: idle twice, then 2, 4.
        let env = build_envelope(&session(1, 0, 4, 2.0, 4.0), &hourly(4)).unwrap();
        assert_eq!(env.e_plus, vec![2.0, 4.0, 4.0, 4.0]);
        assert_eq!(env.e_minus, vec![0.0, 0.0, 2.0, 4.0]);
        assert_eq!(env.p_plus, vec![2.0; 4]);
        assert_eq!(env.p_minus, vec![0.0; 4]);
    }

    #[test]
    fn zero_laxity_and_zero_demand_collapse_the_band() {
        let grid = hourly(6);
        let env = build_envelope(&session(1, 1, 3, 2.0, 6.0), &grid).unwrap();
        assert_eq!(env.e_plus, env.e_minus);
        let env = build_envelope(&session(2, 1, 3, 2.0, 0.0), &grid).unwrap();
        assert!(env.e_plus.iter().chain(&env.e_minus).all(|&e| e == 0.0));
    }

    #[test]
    fn window_outside_grid_names_the_session() {
        let err = build_envelope(&session(17, 3, 4, 2.0, 1.0), &hourly(5)).unwrap_err();
        assert!(err.to_string().contains("17"), "{err}");
    }

    #[test]
    fn repair_clamps_demand_to_deliverable() {
        let (s, repair) = session(3, 0, 2, 2.0, 9.0).repaired(&hourly(4)).unwrap();
        assert_eq!(s.energy_kwh, 4.0);
        let repair = repair.unwrap();
        assert_eq!((repair.requested_kwh, repair.granted_kwh), (9.0, 4.0));
        let (_, none) = session(3, 0, 2, 2.0, 3.0).repaired(&hourly(4)).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn aggregate_of_two_sessions() {
        let grid = hourly(4);
        let a = build_envelope(&session(1, 0, 4, 2.0, 4.0), &grid).unwrap();
        let b = build_envelope(&session(2, 2, 2, 2.0, 2.0), &grid).unwrap();
        let agg = aggregate_envelopes(&[a.clone(), b], &grid).unwrap();
        assert_eq!(agg.e_plus, vec![2.0, 4.0, 6.0, 6.0]);

        let single = aggregate_envelopes(std::slice::from_ref(&a), &grid).unwrap();
        assert_eq!(single, AggregateEnvelope::from(a.clone()));
        let double = aggregate_envelopes(&[a.clone(), a.clone()], &grid).unwrap();
        assert!(double.e_minus.iter().zip(&a.e_minus).all(|(d, x)| *d == 2.0 * x));
        assert_eq!(aggregate_envelopes(&[], &grid).unwrap(), AggregateEnvelope::zeros(4));
    }

    #[test]
    fn asap_profile_front_loads() {
        let grid = TimeGrid::new(6, 0.5).unwrap();
        let p = asap_profile(&session(1, 1, 4, 2.0, 2.5), &grid);
        assert_eq!(p, vec![0.0, 2.0, 2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_rejects_mismatched_lengths() {
        let env = build_envelope(&session(1, 0, 2, 2.0, 1.0), &hourly(3)).unwrap();
        assert!(matches!(
            aggregate_envelopes(&[env], &hourly(4)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn feasibility_examples() {
        let grid = hourly(4);
        let agg: AggregateEnvelope = build_envelope(&session(1, 0, 4, 2.0, 4.0), &grid)
            .unwrap()
            .into();

        let zero = AggregateEnvelope::zeros(4);
        assert!(check_feasible(&[0.0; 4], &zero, &grid, 1e-9).unwrap().is_feasible());

        let full = check_feasible(&[2.0; 4], &agg, &grid, 1e-9).unwrap();
        assert!(!full.is_feasible());
        let first = &full.violations[0];
        assert_eq!((first.step, first.kind), (2, BoundKind::EnergyUpper));
        assert_eq!(first.magnitude, 2.0);

        let alap = check_feasible(&[0.0, 0.0, 2.0, 2.0], &agg, &grid, 1e-9).unwrap();
        assert!(alap.is_feasible());

        assert!(check_feasible(&[0.0; 3], &agg, &grid, 1e-9).is_err());
    }
}
