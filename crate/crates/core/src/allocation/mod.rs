//! Second stage: decentralized receding-horizon allocation.

mod best_response;
mod consensus;
mod estimate;
mod simulate;

pub use best_response::{best_response, ev_best_response, LocalLimits};
pub use consensus::{
    aggregate, control_signal, initial_schedules, run_consensus, ConsensusOptions,
    ConsensusOutcome, ControlSignal, InitMode,
};
pub use estimate::{update_estimates, Estimate, EstimatorPolicy, EvState, EvStatus};
pub use simulate::*;
