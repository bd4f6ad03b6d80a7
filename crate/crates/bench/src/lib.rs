//! Workloads, load-factor sweeps, crash sweeps and recovery probes for the
//! hash tables in `dash-core`.

pub mod crash;
pub mod recovery;
pub mod report;
pub mod sweep;
pub mod workload;

pub use crash::{crash_sweep, CrashReport, PolicyKind, Scenario};
pub use recovery::{post_restart_timeline, recovery_probe, RecoveryRow};
pub use report::{MetricsReport, PhaseRow};
pub use sweep::{load_factor_sweep, table_peak, SweepRow, TablePeak};
pub use workload::{run, KeyKind, Mix, TableKind, WorkloadSpec};
