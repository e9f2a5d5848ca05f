//! Run artifacts and the manifest that indexes them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocation::{EvOutcome, SimulationTrace};
use crate::day_ahead::{DayAheadSchedule, SolverStats};
use crate::error::{Error, Result};
use crate::flex::{ChargingSession, DemandRepair};
use crate::metrics::MetricsReport;
use crate::pipeline::PipelineRun;

use super::sessions::sessions_csv;
use super::timeseries::series_csv;

pub const MANIFEST: &str = "manifest.json";
pub const SESSIONS: &str = "sessions.csv";
pub const SCHEDULE: &str = "dayahead_schedule.csv";
pub const SCHEDULE_SUMMARY: &str = "dayahead_summary.json";
pub const TRACE: &str = "trace.csv";
pub const PER_EV: &str = "per_ev.csv";
pub const EVENTS: &str = "events.jsonl";
pub const UNCONTROLLED: &str = "uncontrolled.csv";
pub const REPORT: &str = "report.json";
pub const CONFIG_SNAPSHOT: &str = "config.resolved.json";

/// Overrides the output directory when no `--out` flag is given.
pub const OUT_DIR_ENV: &str = "EVGRID_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    fn of(path: String, bytes: &[u8]) -> Self {
        FileDigest {
            path,
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest::of(path.display().to_string(), &bytes))
    }
}

/// One per run. Holds nothing that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    /// Command-line values that replaced config values.
    pub overrides: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub converged: bool,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(RunManifest {
            subcommand: subcommand.into(),
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            seed,
            overrides: BTreeMap::new(),
            config: serde_json::to_value(config).map_err(|e| Error::Invalid(e.to_string()))?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            converged: true,
        })
    }
}

/// Writes files into one directory and remembers their digests.
#[derive(Debug)]
pub struct OutputWriter {
    dir: PathBuf,
    written: BTreeMap<String, FileDigest>,
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

impl OutputWriter {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(OutputWriter {
            dir,
            written: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.written.insert(name.into(), FileDigest::of(name.into(), bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, &json_bytes(value)?)
    }

    pub fn sessions(&mut self, sessions: &[ChargingSession]) -> Result<()> {
        self.write(SESSIONS, &sessions_csv(sessions)?)
    }

    pub fn dayahead(&mut self, schedule: &DayAheadSchedule, theta: f64, repairs: &[DemandRepair]) -> Result<()> {
        self.write(SCHEDULE, &series_csv("p_hat_kw", &schedule.p_hat))?;
        let summary = DayAheadSummary {
            theta,
            cost_term: schedule.cost_term,
            ramp_term: schedule.ramp_term,
            objective: schedule.objective,
            stats: schedule.stats.clone(),
            repairs: repairs.to_vec(),
        };
        self.write_json(SCHEDULE_SUMMARY, &summary)
    }

    pub fn simulation(&mut self, trace: &SimulationTrace, uncontrolled_ev_kw: &[f64]) -> Result<()> {
        self.write(TRACE, &csv_bytes(trace.steps.iter().map(TraceRow::from))?)?;
        self.write(PER_EV, &csv_bytes(&trace.evs)?)?;
        let mut events = Vec::new();
        for e in &trace.events {
            serde_json::to_writer(&mut events, e).map_err(|e| Error::Invalid(e.to_string()))?;
            events.push(b'\n');
        }
        self.write(EVENTS, &events)?;
        self.write(UNCONTROLLED, &series_csv("ev_kw", uncontrolled_ev_kw))
    }

    pub fn report(&mut self, report: &MetricsReport) -> Result<()> {
        self.write_json(REPORT, report)
    }

    /// Write `manifest.json` listing every file written so far.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.outputs = self.written.into_values().collect();
        let bytes = json_bytes(&manifest)?;
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayAheadSummary {
    pub theta: f64,
    pub cost_term: f64,
    pub ramp_term: f64,
    pub objective: f64,
    pub stats: SolverStats,
    pub repairs: Vec<DemandRepair>,
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub baseload_kw: f64,
    pub solar_kw: f64,
    pub ev_kw: f64,
    pub target_kw: f64,
    pub iters: usize,
    pub residual: f64,
}

impl From<&crate::allocation::StepRecord> for TraceRow {
    fn from(s: &crate::allocation::StepRecord) -> Self {
        TraceRow {
            step: s.step,
            baseload_kw: s.baseload_kw,
            solar_kw: s.solar_kw,
            ev_kw: s.ev_kw,
            target_kw: s.target_kw,
            iters: s.iters,
            residual: s.residual,
        }
    }
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| {
            r.map_err(|e: csv::Error| Error::Row {
                path: path.to_path_buf(),
                row: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn load_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let rows: Vec<TraceRow> = read_rows(path)?;
    for (t, r) in rows.iter().enumerate() {
        if r.step != t {
            return Err(Error::Row {
                path: path.to_path_buf(),
                row: t + 2,
                msg: format!("expected step {t}, got {}", r.step),
            });
        }
    }
    Ok(rows)
}

pub fn load_per_ev_csv(path: impl AsRef<Path>) -> Result<Vec<EvOutcome>> {
    read_rows(path.as_ref())
}

/// Write every artifact of a pipeline run plus its manifest into `dir`.
pub fn write_outputs(dir: impl Into<PathBuf>, run: &PipelineRun, theta: f64, manifest: RunManifest) -> Result<RunManifest> {
    let mut w = OutputWriter::create(dir)?;
    w.write_json(CONFIG_SNAPSHOT, &manifest.config)?;
    w.sessions(&run.scenario.planned_sessions())?;
    w.dayahead(&run.dayahead, theta, &run.repairs)?;
    w.simulation(&run.trace, &run.scenario.uncontrolled_ev_load())?;
    w.report(&run.report)?;
    let manifest = RunManifest {
        converged: run.converged(),
        ..manifest
    };
    w.finish(manifest)
}
