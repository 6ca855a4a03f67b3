//! Deterministic logical-time simulator and reference trainer for
//! pipeline-parallel DNN training, contrasting four weight-versioning
//! policies: PipeDream (1F1B with full weight stashing), TiMePReSt (nF1B,
//! backward on the per-stage forward-used version), V-TiMePReSt
//! (always-latest, zero staleness) and I-TiMePReSt (intermediate weights
//! scaled by an exponential staleness-significance decay).

pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod model;
pub mod schedule;
pub mod staleness;
pub mod version;

pub use config::{
    validate_config, BatchRef, Policy, PolicyKind, SimConfig, StageId, WeightVersion,
};
pub use engine::{run_experiment, run_policy, TrainConfig, TrainRun};
pub use error::{Error, Result};
pub use schedule::{
    build_1f1b, build_nf1b, build_timeline, timeline_csv, verify_timeline, PassKind,
    ScheduleEvent, Timeline, Violation,
};
pub use staleness::{
    delta_of, intermediate_factor, intermediate_weights, significance, DecayParams,
    StalenessRecord, VersionHistory,
};
pub use version::{
    memory_report, memory_report_csv, MemoryReportRow, ResolvedWeights, VersionStore, WeightSource,
};
