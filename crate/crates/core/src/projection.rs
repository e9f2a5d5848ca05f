//! Exact Euclidean projection onto a box intersected with a cumulative-sum band:
//!
//! ```text
//! { x : 0 <= x[t] <= upper[t],  cum_lo[t] <= x[0] + ... + x[t] <= cum_hi[t] }
//! ```
//!
//! The projection is solved by dynamic programming over the running sum `y`.
//! For each prefix we keep the inverse of the derivative of the prefix value
//! function, `Y_t(lambda)`: the running sum at which the prefix cost has slope
//! `lambda`. It is continuous, nondecreasing and piecewise linear, and obeys
//!
//! ```text
//! Y_t(l) = clamp(Y_{t-1}(l) + clip(l + z[t], 0, upper[t]), cum_lo[t], cum_hi[t])
//! ```
//!
//! with `Y_{-1} = 0`. The optimal final sum is `Y_{T-1}(0)`; a backward pass
//! splits each running sum into the step value and the previous prefix.

use crate::error::{Error, Result};
use crate::flex::{AggregateEnvelope, TimeGrid};

/// Knot of a piecewise-linear nondecreasing function, extended by constants
/// beyond its first and last knot.
type Knot = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeBand {
    upper: Vec<f64>,
    cum_lo: Vec<f64>,
    cum_hi: Vec<f64>,
}

impl CumulativeBand {
    pub fn new(upper: Vec<f64>, cum_lo: Vec<f64>, cum_hi: Vec<f64>) -> Result<Self> {
        let n = upper.len();
        Error::check_len("cumulative lower bound", n, cum_lo.len())?;
        Error::check_len("cumulative upper bound", n, cum_hi.len())?;
        for t in 0..n {
            if !(upper[t] >= 0.0) || !upper[t].is_finite() {
                return Err(Error::Invalid(format!(
                    "power bound at step {t} must be finite and non-negative, got {}",
                    upper[t]
                )));
            }
            if !(cum_lo[t] <= cum_hi[t]) {
                return Err(Error::Infeasible {
                    step: t,
                    detail: format!("lower bound {} above upper bound {}", cum_lo[t], cum_hi[t]),
                });
            }
        }
        Ok(CumulativeBand {
            upper,
            cum_lo,
            cum_hi,
        })
    }

    /// Feasible power profiles of an aggregate envelope, in kW.
    pub fn from_envelope(agg: &AggregateEnvelope, grid: &TimeGrid) -> Result<Self> {
        let dt = grid.step_hours;
        CumulativeBand::new(
            agg.p_plus.clone(),
            agg.e_minus.iter().map(|e| e / dt).collect(),
            agg.e_plus.iter().map(|e| e / dt).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Largest bound violation of `x`, in the units of `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        let mut sum = 0.0;
        for t in 0..self.len() {
            sum += x[t];
            worst = worst
                .max(-x[t])
                .max(x[t] - self.upper[t])
                .max(self.cum_lo[t] - sum)
                .max(sum - self.cum_hi[t]);
        }
        worst
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        Projector::default().project(self, z, &mut out)?;
        Ok(out)
    }
}

/// Reusable scratch space for repeated projections onto the same-size band.
#[derive(Debug, Default)]
pub struct Projector {
    stages: Vec<Vec<Knot>>,
    current: Vec<Knot>,
    scratch: Vec<Knot>,
}

impl Projector {
    pub fn project(&mut self, band: &CumulativeBand, z: &[f64], out: &mut [f64]) -> Result<()> {
        let n = band.len();
        Error::check_len("projection input", n, z.len())?;
        Error::check_len("projection output", n, out.len())?;
        if n == 0 {
            return Ok(());
        }
        self.stages.resize_with(n, Vec::new);
        self.current.clear();
        self.current.push((0.0, 0.0));

        for t in 0..n {
            let u = band.upper[t];
            if u > 0.0 {
                add_ramp(&mut self.current, &mut self.scratch, z[t], u);
            }
            self.stages[t].clear();
            self.stages[t].extend_from_slice(&self.current);
            clamp(
                &self.current,
                &mut self.scratch,
                band.cum_lo[t],
                band.cum_hi[t],
                t,
            )?;
            std::mem::swap(&mut self.current, &mut self.scratch);
        }

        let mut sum = eval(&self.current, 0.0);
        for t in (0..n).rev() {
            let u = band.upper[t];
            let x = if u > 0.0 {
                let lambda = inverse(&self.stages[t], sum);
                (lambda + z[t]).clamp(0.0, u)
            } else {
                0.0
            };
            out[t] = x;
            sum -= x;
        }
        Ok(())
    }
}

fn eval(f: &[Knot], l: f64) -> f64 {
    let first = f[0];
    let last = f[f.len() - 1];
    if l <= first.0 {
        return first.1;
    }
    if l >= last.0 {
        return last.1;
    }
    let i = f.partition_point(|k| k.0 <= l);
    let (l0, y0) = f[i - 1];
    let (l1, y1) = f[i];
    y0 + (y1 - y0) * (l - l0) / (l1 - l0)
}

/// Smallest slope at which `f` reaches `y`, clamped to the knot range.
fn inverse(f: &[Knot], y: f64) -> f64 {
    let first = f[0];
    let last = f[f.len() - 1];
    if y <= first.1 {
        return first.0;
    }
    if y >= last.1 {
        return last.0;
    }
    let i = f.partition_point(|k| k.1 < y);
    let (l0, y0) = f[i - 1];
    let (l1, y1) = f[i];
    l0 + (l1 - l0) * (y - y0) / (y1 - y0)
}

/// `f += clip(l + shift, 0, cap)`, keeping the ramp's two corners as knots.
fn add_ramp(f: &mut Vec<Knot>, scratch: &mut Vec<Knot>, shift: f64, cap: f64) {
    let a = -shift;
    let b = cap - shift;
    scratch.clear();
    let mut pending = [a, b].into_iter().peekable();
    for &(l, y) in f.iter() {
        while let Some(&c) = pending.peek() {
            if c < l {
                scratch.push((c, eval(f, c)));
                pending.next();
            } else {
                if c == l {
                    pending.next();
                }
                break;
            }
        }
        scratch.push((l, y));
    }
    for c in pending {
        if scratch.last().map_or(true, |k| k.0 < c) {
            let y = eval(f, c);
            scratch.push((c, y));
        }
    }
    for k in scratch.iter_mut() {
        k.1 += (k.0 + shift).clamp(0.0, cap);
    }
    std::mem::swap(f, scratch);
}

/// `out = clamp(f, lo, hi)` with crossing points inserted and saturated runs
/// collapsed to a single knot.
fn clamp(f: &[Knot], out: &mut Vec<Knot>, lo: f64, hi: f64, step: usize) -> Result<()> {
    let ymin = f[0].1;
    let ymax = f[f.len() - 1].1;
    let slack = 1e-9 * (1.0 + ymin.abs().max(ymax.abs()).max(hi.abs()));
    if lo > ymax + slack || hi < ymin - slack {
        return Err(Error::Infeasible {
            step,
            detail: format!(
                "reachable running sum [{ymin}, {ymax}] misses the band [{lo}, {hi}]"
            ),
        });
    }
    let lo = lo.min(ymax);
    let hi = hi.max(ymin);

    out.clear();
    for i in 0..f.len() {
        let (l, y) = f[i];
        out.push((l, y.clamp(lo, hi)));
        if let Some(&(l1, y1)) = f.get(i + 1) {
            for level in [lo, hi] {
                if y < level && level < y1 {
                    out.push((l + (l1 - l) * (level - y) / (y1 - y), level));
                }
            }
        }
    }
    let first_free = out.iter().rposition(|k| k.1 <= lo).unwrap_or(0);
    let last_free = out
        .iter()
        .position(|k| k.1 >= hi)
        .unwrap_or(out.len() - 1)
        .max(first_free);
    out.truncate(last_free + 1);
    out.drain(..first_free);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dykstra's alternating projections over the box and one slab per prefix.
    fn dykstra(band: &CumulativeBand, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let sets = n + 1;
        let mut x = z.to_vec();
        let mut incr = vec![vec![0.0; n]; sets];
        for _ in 0..1_000_000 {
            let mut change: f64 = 0.0;
            for s in 0..sets {
                let y: Vec<f64> = x.iter().zip(&incr[s]).map(|(a, b)| a + b).collect();
                let mut p = y.clone();
                if s == 0 {
                    for t in 0..n {
                        p[t] = p[t].clamp(0.0, band.upper[t]);
                    }
                } else {
                    let k = s - 1;
                    let sum: f64 = p[..=k].iter().sum();
                    let target = sum.clamp(band.cum_lo[k], band.cum_hi[k]);
                    let shift = (target - sum) / (k + 1) as f64;
                    for v in &mut p[..=k] {
                        *v += shift;
                    }
                }
                for t in 0..n {
                    let inc = y[t] - p[t];
                    change = change.max((inc - incr[s][t]).abs()).max((p[t] - x[t]).abs());
                    incr[s][t] = inc;
                }
                x = p;
            }
            // The iterate can stall for whole cycles while increments still
            // move, so both must settle.
            if change < 1e-15 {
                break;
            }
        }
        x
    }

    fn band_strategy() -> impl Strategy<Value = (CumulativeBand, Vec<f64>)> {
        (2usize..7).prop_flat_map(|n| {
            (
                prop::collection::vec(0.1f64..3.0, n),
                prop::collection::vec((0.05f64..0.95, 0.05f64..0.95), n),
                prop::collection::vec(-4.0f64..6.0, n),
            )
                .prop_map(move |(upper, fracs, z)| {
                    // Bounds around a random interior trajectory: Dykstra needs a
                    // band with slack to converge.
                    let mut lo = Vec::with_capacity(n);
                    let mut hi = Vec::with_capacity(n);
                    let mut reach = 0.0;
                    let mut sum = 0.0;
                    for t in 0..n {
                        sum += upper[t] * fracs[t].0;
                        reach += upper[t];
                        lo.push(sum * fracs[t].1);
                        hi.push(sum + (reach - sum) * fracs[t].1);
                    }
                    (CumulativeBand::new(upper, lo, hi).unwrap(), z)
                })
        })
    }

    proptest! {
        #[test]
        fn matches_dykstra((band, z) in band_strategy()) {
            let exact = band.project(&z).unwrap();
            let reference = dykstra(&band, &z);
            prop_assert!(band.violation(&exact) < 1e-9);
            for (a, b) in exact.iter().zip(&reference) {
                prop_assert!((a - b).abs() < 1e-6, "{exact:?} vs {reference:?}");
            }
        }

        #[test]
        fn idempotent_on_feasible_points((band, z) in band_strategy()) {
            let once = band.project(&z).unwrap();
            let twice = band.project(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn box_only_reduces_to_clipping() {
        let band = CumulativeBand::new(vec![1.0, 2.0, 0.0], vec![-1e9; 3], vec![1e9; 3]).unwrap();
        let x = band.project(&[-0.5, 1.5, 3.0]).unwrap();
        assert_eq!(x, vec![0.0, 1.5, 0.0]);
    }

    #[test]
    fn final_equality_spreads_evenly() {
        // Sum fixed at 2 with no other binding constraint: shift by equal amounts.
        let band = CumulativeBand::new(vec![5.0; 2], vec![0.0, 2.0], vec![5.0, 2.0]).unwrap();
        let x = band.project(&[0.0, 0.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_band_is_reported() {
        let band = CumulativeBand::new(vec![1.0, 1.0], vec![0.0, 3.0], vec![2.0, 4.0]).unwrap();
        assert!(matches!(band.project(&[0.0, 0.0]), Err(Error::Infeasible { step: 1, .. })));
    }
}
