//! Particle approximation of mean-field dynamics with singular kernels.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod harness;
pub mod integrator;
pub mod oracle;
pub mod parallelepiped;
pub mod quadrature;
pub mod shells;

pub use diagnostics::{
    check_mlinf, diagnostics_record, discrete_linf, min_phase_separation, short_time_check, support_radii,
    windowed_force_avg, windowed_force_diff_avg, DiagnosticsRecord, DiagnosticsRow, DiffAvgOptions, LinfBracket,
    RecordOptions,
};
pub use ensemble::{epsilon_scale, quiet_start_init, DensityKind, InitialDensitySpec, ParticleEnsemble, QuietStart};
pub use error::{Error, Result};
pub use field::{
    field_all, field_at, field_exact, field_regularized, grad_field_regularized, pair_force, potential_energy,
    Coupling, ForceKernel,
};
pub use harness::{convergence_study, run_experiment, verify_bundle, ExperimentConfig, Summary};
pub use integrator::{run, total_energy, total_momentum, verlet_step, FieldPath, RunOptions, RunOutcome, Trajectory};
pub use oracle::{force_convergence_stat, solve, weak_distance, GridDensity, GridSpec, OracleRun, TestDictionary};
pub use parallelepiped::{
    backward_step, lattice_cover, linf_preservation_report, norm_conditions, track_back, LatticeCover, LinfOptions,
    LinfPreservationReport, PhaseParallelepiped, TrackingReport,
};
pub use shells::{position_shells, q0_split, two_scale_shells, velocity_shells, ShellKind, ShellPartition};
