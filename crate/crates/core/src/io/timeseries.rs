//! Two-column time series files: `step,value` or `timestamp,value`.

use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flex::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeseries {
    pub values: Vec<f64>,
    pub unit: String,
}

impl Timeseries {
    pub fn new(values: Vec<f64>, unit: impl Into<String>) -> Self {
        Timeseries {
            values,
            unit: unit.into(),
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        Error::check_len("time series", grid.steps, self.values.len())?;
        if let Some(t) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "{} series has a non-finite value at step {t}",
                self.unit
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IndexKind {
    Step,
    Timestamp,
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    if let Ok(t) = DateTime::parse_from_rfc3339(raw) {
        return Some(t.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn row_err(path: &Path, row: usize, msg: impl Into<String>) -> Error {
    Error::Row {
        path: path.to_path_buf(),
        row,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => row_err(path, pos.line() as usize, e.to_string()),
        None => Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        },
    }
}

/// Raw index/value pairs with their line numbers (header is line 1).
struct RawSeries {
    kind: IndexKind,
    lines: Vec<usize>,
    index: Vec<String>,
    values: Vec<f64>,
}

fn read_raw(path: &Path, value_column: &str) -> Result<RawSeries> {
    let mut reader = open(path)?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let kind = match names.as_slice() {
        ["step", v] if *v == value_column => IndexKind::Step,
        ["timestamp", v] if *v == value_column => IndexKind::Timestamp,
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "expected header `step,{value_column}` or `timestamp,{value_column}`, got `{}`",
                    names.join(",")
                ),
            })
        }
    };
    let mut raw = RawSeries {
        kind,
        lines: Vec::new(),
        index: Vec::new(),
        values: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = &record[1];
        let value: f64 = cell
            .parse()
            .map_err(|_| row_err(path, line, format!("`{cell}` is not a number")))?;
        if !value.is_finite() {
            return Err(row_err(path, line, format!("non-finite value `{cell}`")));
        }
        raw.lines.push(line);
        raw.index.push(record[0].to_string());
        raw.values.push(value);
    }
    if raw.values.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "no data rows".into(),
        });
    }
    Ok(raw)
}

/// Repeat each value `factor` times.
fn hold(values: &[f64], factor: usize) -> Vec<f64> {
    values
        .iter()
        .flat_map(|v| std::iter::repeat(*v).take(factor))
        .collect()
}

/// Mean of each block of `factor` values.
fn block_mean(values: &[f64], factor: usize) -> Vec<f64> {
    values
        .chunks(factor)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Resample `values` taken every `source_hours` onto the grid's step.
fn resample(path: &Path, values: &[f64], source_hours: f64, grid: &TimeGrid) -> Result<Vec<f64>> {
    let ratio = source_hours / grid.step_hours;
    let out = if (ratio - 1.0).abs() < 1e-9 {
        values.to_vec()
    } else if ratio > 1.0 && (ratio - ratio.round()).abs() < 1e-9 {
        hold(values, ratio.round() as usize)
    } else if ratio < 1.0 && (1.0 / ratio - (1.0 / ratio).round()).abs() < 1e-9 {
        let factor = (1.0 / ratio).round() as usize;
        if values.len() % factor != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{} rows do not fill whole {}-row blocks", values.len(), factor),
            });
        }
        block_mean(values, factor)
    } else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "source interval {source_hours} h is not a multiple or divisor of the {} h grid step",
                grid.step_hours
            ),
        });
    };
    if out.len() != grid.steps {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "{} rows resample to {} steps, grid has {}",
                values.len(),
                out.len(),
                grid.steps
            ),
        });
    }
    Ok(out)
}

fn from_steps(path: &Path, raw: &RawSeries, grid: &TimeGrid) -> Result<Vec<f64>> {
    for (expected, (cell, line)) in raw.index.iter().zip(&raw.lines).enumerate() {
        let step: usize = cell
            .parse()
            .map_err(|_| row_err(path, *line, format!("step `{cell}` is not a non-negative integer")))?;
        if step != expected {
            return Err(row_err(path, *line, format!("expected step {expected}, got {step}")));
        }
    }
    // Whole-horizon coverage fixes the source interval.
    let source_hours = grid.hour_of(grid.steps) / raw.values.len() as f64;
    resample(path, &raw.values, source_hours, grid)
}

fn from_timestamps(path: &Path, raw: &RawSeries, grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut stamps = Vec::with_capacity(raw.index.len());
    for (cell, line) in raw.index.iter().zip(&raw.lines) {
        let t = parse_timestamp(cell).ok_or_else(|| row_err(path, *line, format!("bad timestamp `{cell}`")))?;
        stamps.push(t);
    }
    if !grid.origin.is_empty() {
        let origin = parse_timestamp(&grid.origin)
            .ok_or_else(|| Error::Invalid(format!("grid origin `{}` is not a timestamp", grid.origin)))?;
        if stamps[0] != origin {
            return Err(row_err(
                path,
                raw.lines[0],
                format!("series starts at {}, grid origin is {origin}", stamps[0]),
            ));
        }
    }
    let interval = if stamps.len() > 1 {
        stamps[1] - stamps[0]
    } else {
        chrono::Duration::seconds((grid.hour_of(grid.steps) * 3600.0).round() as i64)
    };
    if interval <= chrono::Duration::zero() {
        return Err(row_err(path, raw.lines[1], "timestamps must increase"));
    }
    for i in 1..stamps.len() {
        if stamps[i] - stamps[i - 1] != interval {
            return Err(row_err(
                path,
                raw.lines[i],
                format!("irregular interval: expected {interval}, got {}", stamps[i] - stamps[i - 1]),
            ));
        }
    }
    let source_hours = interval.num_milliseconds() as f64 / 3.6e6;
    resample(path, &raw.values, source_hours, grid)
}

/// Read a `step,<column>` or `timestamp,<column>` file onto `grid`.
pub fn load_series_csv(path: impl AsRef<Path>, column: &str, unit: &str, grid: &TimeGrid) -> Result<Timeseries> {
    let path = path.as_ref();
    let raw = read_raw(path, column)?;
    let values = match raw.kind {
        IndexKind::Step => from_steps(path, &raw, grid)?,
        IndexKind::Timestamp => from_timestamps(path, &raw, grid)?,
    };
    Ok(Timeseries::new(values, unit))
}

/// Read a profile with a `value` column, resampling it to `grid`.
pub fn load_timeseries_csv(path: impl AsRef<Path>, expected_unit: &str, grid: &TimeGrid) -> Result<Timeseries> {
    load_series_csv(path, "value", expected_unit, grid)
}

/// Write `step,<column>` rows.
pub fn write_series_csv(path: impl AsRef<Path>, column: &str, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, series_csv(column, values)).map_err(|e| Error::io(path, e))
}

pub(crate) fn series_csv(column: &str, values: &[f64]) -> Vec<u8> {
    let mut out = format!("step,{column}\n");
    for (t, v) in values.iter().enumerate() {
        out.push_str(&format!("{t},{v}\n"));
    }
    out.into_bytes()
}

/// Read a day-ahead schedule written by [`write_schedule_csv`].
pub fn load_schedule_csv(path: impl AsRef<Path>, grid: &TimeGrid) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let raw = read_raw(path, "p_hat_kw")?;
    if raw.kind != IndexKind::Step || raw.values.len() != grid.steps {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("schedule must have {} `step,p_hat_kw` rows", grid.steps),
        });
    }
    from_steps(path, &raw, grid)
}

pub fn write_schedule_csv(path: impl AsRef<Path>, p_hat: &[f64]) -> Result<()> {
    write_series_csv(path, "p_hat_kw", p_hat)
}

pub(crate) fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
