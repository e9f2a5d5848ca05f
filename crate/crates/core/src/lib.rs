pub mod allocation;
pub mod behavior;
pub mod cli;
pub mod day_ahead;
pub mod error;
pub mod flex;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod projection;

pub use error::{Error, Result};
