//! Experiment orchestration: configuration, per-`N` runs, bundles, the
//! convergence study and offline verification.

mod config;
mod convergence;
mod experiment;
mod schema;
mod verify;

pub use config::{
    eta_schedule, DensitySection, ExperimentConfig, OracleSection, OutputSection, Resolved, RunSection,
    ScheduleSection, DESK_LIMIT,
};
pub use convergence::{
    checkpoint_times, convergence_study, decay_exponent, fit_slope, reference, run_convergence, ConvergenceRow,
    ConvergenceTable, CONVERGENCE_HEADER,
};
pub use experiment::{
    first_row_violation, n_dir, row_gates, run_experiment, run_single, summarize, AnchorShells, GateViolation,
    NArtifacts, NRun, ShellSizes, ShellsSummary, ShortTimeChecks, StageSummary, Summary, TObs, TrackingLine,
    TrackingSummary, CODE_VERSION, GATE_C, GATE_E, GATE_K, GATE_M, GATE_T,
};
pub use schema::{schema_text, CONFIG_TEMPLATE};
pub use verify::{verify_bundle, Check, VerifyReport};

use crate::error::Error;

/// Process exit code for an error: 2 configuration, 3 collision, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::InvalidParameter { .. }
        | Error::InvalidDimension(_)
        | Error::UnsupportedDensity(_)
        | Error::InvalidBeta { .. }
        | Error::UnsupportedDimension
        | Error::NonIntegrableKernel(_) => 2,
        Error::Collision { .. } => 3,
        _ => 1,
    }
}

/// Exit code for a finished verification.
pub const EXIT_INVARIANT: i32 = 4;
