//! Project storage, scheduling and experiment execution.

mod execute;
mod project;
pub mod records;
mod schedule;
mod status;

pub use execute::{execute, record_files, ExecuteOptions, ExperimentOutcome, RunReport, Runtime};
pub use project::{
    failure_log, generation_log, score_log, Clock, ExperimentStatus, FixedClock, Manifest, ManifestEntry, Progress,
    Project, SystemClock, LOCK_FILE, MANIFEST_FILE,
};
pub use schedule::{model_load_count, plan_schedule, SchedulePlan};
pub use status::{status, ExperimentView, ProjectStatus};
