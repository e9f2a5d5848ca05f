//! Evaluation quantities: wholesale cost, ramping, tracking error.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::allocation::{EvOutcome, SimulationTrace};
use crate::error::{Error, Result};

/// Largest absolute change between consecutive steps, kW per step.
pub fn ramp_index(load: &[f64]) -> Result<f64> {
    if load.len() < 2 {
        return Err(Error::Invalid(format!(
            "ramp index needs at least 2 points, got {}",
            load.len()
        )));
    }
    Ok(load.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max))
}

/// Percent reduction of the ramp index relative to `uncontrolled`.
pub fn ramp_reduction(uncontrolled: f64, controlled: f64) -> Result<f64> {
    if !(uncontrolled > 0.0) {
        return Err(Error::Invalid(format!(
            "uncontrolled ramp index must be positive, got {uncontrolled}"
        )));
    }
    Ok(100.0 * (uncontrolled - controlled) / uncontrolled)
}

/// `sum_t price[t] * load[t] * dt`, dollars.
pub fn total_cost(load: &[f64], price: &[f64], step_hours: f64) -> Result<f64> {
    Error::check_len("price", load.len(), price.len())?;
    Ok(load.iter().zip(price).map(|(l, p)| l * p * step_hours).sum())
}

pub fn tracking_rmse(target: &[f64], realized: &[f64]) -> Result<f64> {
    Error::check_len("realized series", target.len(), realized.len())?;
    if target.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = target.iter().zip(realized).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sq / target.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub ev_count: usize,
    /// Controlled system cost, $.
    pub total_cost_usd: f64,
    /// Cost with every EV charging as soon as possible, $.
    pub uncontrolled_cost_usd: f64,
    /// kW per step.
    pub ramp_index_uncontrolled: f64,
    /// kW per step.
    pub ramp_index_controlled: f64,
    pub ramp_reduction_pct: f64,
    /// Planned vs implemented EV load, kW.
    pub tracking_rmse_kw: f64,
    pub peak_load_kw: f64,
    pub peak_step: usize,
    pub shortfall_count: usize,
    pub shortfall_kwh: f64,
}

/// Per-step series of one run, all on the same grid.
#[derive(Debug, Clone, Copy)]
pub struct RunSeries<'a> {
    pub step_hours: f64,
    /// Realized baseload minus solar, kW.
    pub netload: &'a [f64],
    /// Implemented EV load, kW.
    pub ev: &'a [f64],
    /// Day-ahead EV profile, kW.
    pub planned: &'a [f64],
    /// EV load under as-soon-as-possible charging, kW.
    pub uncontrolled_ev: &'a [f64],
    pub price: &'a [f64],
}

/// Build the report from raw series and per-EV outcomes.
pub fn report_from_series(label: impl Into<String>, run: RunSeries<'_>, evs: &[EvOutcome]) -> Result<MetricsReport> {
    let n = run.netload.len();
    Error::check_len("EV load", n, run.ev.len())?;
    Error::check_len("planned EV load", n, run.planned.len())?;
    Error::check_len("uncontrolled EV load", n, run.uncontrolled_ev.len())?;
    let controlled: Vec<f64> = run.netload.iter().zip(run.ev).map(|(l, p)| l + p).collect();
    let uncontrolled: Vec<f64> = run
        .netload
        .iter()
        .zip(run.uncontrolled_ev)
        .map(|(l, p)| l + p)
        .collect();
    let ramp_u = ramp_index(&uncontrolled)?;
    let ramp_c = ramp_index(&controlled)?;
    let (peak_step, peak_load_kw) = controlled
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (t, v)| if v > best.1 { (t, v) } else { best });
    let short: Vec<f64> = evs.iter().map(|e| e.shortfall).filter(|s| *s > 1e-6).collect();
    Ok(MetricsReport {
        label: label.into(),
        ev_count: evs.len(),
        total_cost_usd: total_cost(&controlled, run.price, run.step_hours)?,
        uncontrolled_cost_usd: total_cost(&uncontrolled, run.price, run.step_hours)?,
        ramp_index_uncontrolled: ramp_u,
        ramp_index_controlled: ramp_c,
        ramp_reduction_pct: if ramp_u > 0.0 { ramp_reduction(ramp_u, ramp_c)? } else { 0.0 },
        tracking_rmse_kw: tracking_rmse(run.planned, run.ev)?,
        peak_load_kw,
        peak_step,
        shortfall_count: short.len(),
        shortfall_kwh: short.iter().fold(0.0, |a, b| a + b),
    })
}

/// Build the report for a simulated run.
pub fn build_report(
    label: impl Into<String>,
    trace: &SimulationTrace,
    uncontrolled_ev_kw: &[f64],
    price: &[f64],
) -> Result<MetricsReport> {
    let netload = trace.netload();
    let ev = trace.ev_load();
    let planned = trace.planned_load();
    let run = RunSeries {
        step_hours: trace.grid.step_hours,
        netload: &netload,
        ev: &ev,
        planned: &planned,
        uncontrolled_ev: uncontrolled_ev_kw,
        price,
    };
    report_from_series(label, run, &trace.evs)
}

/// Side-by-side ramp table, one column per report.
pub fn ramp_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let width = 14;
    let row = |out: &mut String, name: &str, cells: Vec<String>| {
        let _ = write!(out, "{name:<34}");
        for c in cells {
            let _ = write!(out, "{c:>width$}");
        }
        out.push('\n');
    };
    row(&mut out, "Number of EVs", reports.iter().map(|r| r.ev_count.to_string()).collect());
    row(
        &mut out,
        "Max. ramp, uncontrolled (kW/step)",
        reports.iter().map(|r| format!("{:.1}", r.ramp_index_uncontrolled)).collect(),
    );
    row(
        &mut out,
        "Max. ramp, controlled (kW/step)",
        reports.iter().map(|r| format!("{:.1}", r.ramp_index_controlled)).collect(),
    );
    row(
        &mut out,
        "Max. ramp reduction (%)",
        reports.iter().map(|r| format!("{:.1}", r.ramp_reduction_pct)).collect(),
    );
    row(
        &mut out,
        "Total cost, controlled ($)",
        reports.iter().map(|r| format!("{:.2}", r.total_cost_usd)).collect(),
    );
    row(
        &mut out,
        "Total cost, uncontrolled ($)",
        reports.iter().map(|r| format!("{:.2}", r.uncontrolled_cost_usd)).collect(),
    );
    out
}

/// Same table as CSV, one row per report.
pub fn ramp_table_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "label,ev_count,ramp_uncontrolled_kw,ramp_controlled_kw,ramp_reduction_pct,cost_controlled_usd,cost_uncontrolled_usd\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.label,
            r.ev_count,
            r.ramp_index_uncontrolled,
            r.ramp_index_controlled,
            r.ramp_reduction_pct,
            r.total_cost_usd,
            r.uncontrolled_cost_usd
        );
    }
    out
}
