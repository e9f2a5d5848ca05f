//! Files in and out: profiles, sessions, scenario configs and run artifacts.

mod config;
mod output;
mod sessions;
mod timeseries;

pub use config::*;
pub use output::*;
pub use sessions::{load_sessions_csv, write_sessions_csv};
pub use timeseries::{
    load_schedule_csv, load_series_csv, load_timeseries_csv, write_schedule_csv, write_series_csv, Timeseries,
};
