//! Eager-mode reverse-mode training engine with three optimizer schedules:
//! the conventional three-stage loop, forward-fusion (each update deferred
//! into the next forward pass) and backward-fusion (each update applied
//! during backward as soon as it is safe).
//!
//! Alongside the engine sit the tools to compare the schedules: a memory
//! transaction trace with an LRU cache simulator, a critical-path analyzer,
//! an analytical speedup model and a benchmark harness.
//!
//! The `parallel` feature (on by default) enables rayon-backed matrix
//! products, the parallel verification grid and the worker pool used by
//! parallel backward-fusion. Without it every path runs sequentially.

pub mod error;
pub mod graph;
pub mod harness;
pub mod locality;
pub mod optim;
pub mod schedule;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use graph::{BackwardEvent, Graph, ModelSpec, NodeId, OpKind, ParamId, Parameter};
pub use locality::{
    critical_path_depth, predict_speedup, simulate_cache, transaction_count, CacheConfig, CacheReport,
};
pub use optim::{clip_by_global_norm, policy_newton, policy_step, OptimizerKind, OptimizerPolicy};
pub use schedule::{
    check_inplace_safety, check_trace_legality, flush_pending_updates, run_backward_fusion, run_baseline,
    run_forward_fusion, run_step, BackwardMode, Schedule, StageTimes, StepReport,
};
pub use tensor::{Init, Precision, Scalar, Tensor};
pub use trace::{Access, Recorder, RegionClass, ScheduleTrace, TaskKind};
