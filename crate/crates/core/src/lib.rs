//! Deadline-aware allocation of spot and on-demand GPU instances.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forecast;
pub mod harness;
pub mod job;
pub mod market;
pub mod optimizer;
pub mod policy;
pub mod scalar;
pub mod selector;

pub use error::{Error, Result};
pub use forecast::{predict_ar, predict_noisy_oracle, Forecast, MagnitudeMode, NoiseDistribution, NoiseSpec};
pub use job::{Allocation, JobSpec, Model, OverheadModel, ProgressState, Scenario, ThroughputModel};
pub use market::{load_trace, normalize_trace, synthesize_trace, MarketSlot, SpotTrace, TraceSynthSpec};
pub use optimizer::{solve_offline, solve_window, PlanSequence, WindowProblem};
pub use policy::{build_policy_pool, CommitAggregation, Observation, Policy, PolicySpec};
pub use scalar::{Exact, Scalar};
pub use harness::{run_job, ExperimentConfig, ExperimentKind, ForecasterConfig, JobResult};
pub use selector::{SelectionRecord, SelectionRun};
