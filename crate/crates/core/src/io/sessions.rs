//! Session files, one charging session per row.

use std::path::Path;

use crate::error::{Error, Result};
use crate::flex::{ChargingSession, TimeGrid};

const HEADER: [&str; 7] = [
    "id",
    "start_step",
    "duration_steps",
    "energy_kwh",
    "pmax_kw",
    "eta",
    "battery_kwh",
];

/// Read sessions and check each window against `grid`. Ids must be unique;
/// demands the stay cannot deliver are left for the pipeline to repair.
pub fn load_sessions_csv(path: impl AsRef<Path>, grid: &TimeGrid) -> Result<Vec<ChargingSession>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if headers.iter().ne(HEADER) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected header `{}`, got `{}`",
                HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut sessions = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in reader.deserialize::<ChargingSession>() {
        let session = record.map_err(|e| Error::Row {
            path: path.to_path_buf(),
            row: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let row = sessions.len() + 2;
        session.validate_shape(grid).map_err(|e| Error::Row {
            path: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        if !seen.insert(session.id) {
            return Err(Error::Row {
                path: path.to_path_buf(),
                row,
                msg: format!("duplicate session id {}", session.id),
            });
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub(crate) fn sessions_csv(sessions: &[ChargingSession]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for s in sessions {
        writer
            .serialize(s)
            .map_err(|e| Error::Invalid(format!("session {}: {e}", s.id)))?;
    }
    writer
        .into_inner()
        .map_err(|e| Error::Invalid(e.to_string()))
}

pub fn write_sessions_csv(path: impl AsRef<Path>, sessions: &[ChargingSession]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sessions_csv(sessions)?).map_err(|e| Error::io(path, e))
}
