//! Trace-driven simulation of jobs under policies, and the experiment
//! drivers built on it: parameter sweeps, online selection, phase-switching
//! adaptation runs, and comparison against the offline optimum.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{
    predict_ar_recent, predict_noisy_oracle, Forecast, MagnitudeMode, NoiseDistribution, NoiseSpec,
    DEFAULT_AR_ORDER,
};
use crate::job::{Allocation, JobSpec, Model, OverheadModel, ProgressState, Scenario, ThroughputModel};
use crate::market::{load_trace, round_count, synthesize_trace, SpotTrace, TraceSynthSpec, DAILY_PERIOD_SLOTS};
use crate::optimizer::{solve_offline, solve_window, WindowProblem};
use crate::policy::{build_policy_pool, CommitAggregation, Observation, Policy, PolicySpec};
use crate::scalar::{Exact, Scalar};
use crate::selector::{argmax, run_selection_by_job, SelectionRun, UtilityBounds};

pub const DEFAULT_RUNS: usize = 50;
pub const DEFAULT_SELECTION_JOBS: usize = 1000;
/// Slots of market history kept in front of every drawn job window.
pub const HISTORY_SLOTS: usize = DAILY_PERIOD_SLOTS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForecasterConfig {
    Ar {
        #[serde(default = "default_ar_order")]
        order: usize,
        #[serde(default = "default_ar_lookback")]
        lookback: usize,
    },
    NoisyOracle {
        #[serde(default = "default_magnitude_mode")]
        magnitude_mode: MagnitudeMode,
        #[serde(default = "default_distribution")]
        distribution: NoiseDistribution,
        #[serde(default)]
        level: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_ar_order() -> usize {
    DEFAULT_AR_ORDER
}
fn default_ar_lookback() -> usize {
    2 * DAILY_PERIOD_SLOTS
}
fn default_magnitude_mode() -> MagnitudeMode {
    MagnitudeMode::FixedMagnitude
}
fn default_distribution() -> NoiseDistribution {
    NoiseDistribution::Uniform
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig::NoisyOracle {
            magnitude_mode: MagnitudeMode::FixedMagnitude,
            distribution: NoiseDistribution::Uniform,
            level: 0.1,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn exact() -> Self {
        Self::from_noise(NoiseSpec::exact())
    }

    pub fn from_noise(noise: NoiseSpec) -> Self {
        ForecasterConfig::NoisyOracle {
            magnitude_mode: noise.magnitude_mode,
            distribution: noise.distribution,
            level: noise.level,
            seed: noise.seed,
        }
    }

    /// Forecast made at trace index `t` covering `t ..= t + horizon`.
    pub fn forecast(&self, trace: &SpotTrace, t: usize, horizon: usize) -> Result<Forecast> {
        match *self {
            ForecasterConfig::Ar { order, lookback } => {
                match predict_ar_recent(trace, t, horizon, order, lookback) {
                    Err(Error::InsufficientHistory { .. }) => Forecast::persistence(trace, t, horizon),
                    other => other,
                }
            }
            ForecasterConfig::NoisyOracle {
                magnitude_mode,
                distribution,
                level,
                seed,
            } => {
                let noise = NoiseSpec {
                    magnitude_mode,
                    distribution,
                    level,
                    seed,
                };
                predict_noisy_oracle(trace, t, horizon, &noise).map_err(exhausted)
            }
        }
    }

    /// Slots past the job window the forecaster reads.
    pub fn lookahead(&self, horizon: usize) -> usize {
        match self {
            ForecasterConfig::Ar { .. } => 0,
            ForecasterConfig::NoisyOracle { .. } => horizon,
        }
    }
}

fn exhausted(e: Error) -> Error {
    match e {
        Error::TraceRange { requested, available } => Error::Config(format!(
            "trace exhausted: slot {requested} needed, trace has {available} slots"
        )),
        other => other,
    }
}

/// Forecasts for every slot of one job, made once at the largest horizon
/// any policy needs and truncated per policy.
#[derive(Debug, Clone)]
pub struct JobForecasts {
    horizon: usize,
    per_slot: Vec<Forecast>,
}

impl JobForecasts {
    pub fn build(forecaster: &ForecasterConfig, trace: &SpotTrace, start: usize, deadline: u32, horizon: usize) -> Result<Self> {
        let per_slot = (0..deadline as usize)
            .map(|k| forecaster.forecast(trace, start + k, horizon))
            .collect::<Result<Vec<_>>>()?;
        Ok(JobForecasts { horizon, per_slot })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Forecast at job slot `t` (1-based) with horizon `h`.
    pub fn at(&self, t: u32, h: usize) -> Result<Forecast> {
        let f = self
            .per_slot
            .get(t as usize - 1)
            .ok_or_else(|| Error::InvalidParameter(format!("no forecast for slot {t}")))?;
        if h > self.horizon {
            return Err(Error::InvalidParameter(format!(
                "forecast horizon {h} requested, {} available",
                self.horizon
            )));
        }
        Ok(if h == self.horizon { f.clone() } else { f.truncated(h) })
    }
}

/// A simulated job: what was allocated and where it ended.
#[derive(Debug, Clone)]
pub struct Trajectory<T = f64> {
    pub allocations: Vec<Allocation>,
    pub state: ProgressState<T>,
    pub utility: T,
    /// Slot in which the workload completed, or the deadline plus the
    /// termination configuration's run time.
    pub completion_slot: T,
}

/// Steps `policy` through the job starting at trace index `start`.
pub fn simulate_job<T: Scalar>(
    policy: &mut Policy,
    model: &Model<T>,
    trace: &SpotTrace,
    start: usize,
    forecasts: Option<&JobForecasts>,
) -> Result<Trajectory<T>> {
    simulate_job_with(policy, model, trace, start, forecasts, &mut crate::policy::exact_window_plan)
}

pub fn simulate_job_with<T: Scalar>(
    policy: &mut Policy,
    model: &Model<T>,
    trace: &SpotTrace,
    start: usize,
    forecasts: Option<&JobForecasts>,
    solve: &mut crate::policy::WindowSolver<'_, T>,
) -> Result<Trajectory<T>> {
    let job = model.job().clone();
    let horizon = policy.spec().forecast_horizon();
    let mut state = ProgressState::<T>::initial();
    let mut allocations = Vec::with_capacity(job.deadline as usize);
    let mut completed_at = None;

    for t in 1..=job.deadline {
        if model.is_complete(&state.progress) {
            break;
        }
        let idx = start + t as usize - 1;
        let slot = *trace.slot(idx).map_err(exhausted)?;
        let prev_avail = idx.checked_sub(1).map_or(0, |i| trace.slots()[i].spot_avail);
        let forecast = match horizon {
            Some(h) => Some(
                forecasts
                    .ok_or_else(|| Error::InvalidParameter("policy needs forecasts".into()))?
                    .at(t, h)?,
            ),
            None => None,
        };
        let obs = Observation {
            slot: t,
            spot_price: slot.spot_price,
            spot_avail: slot.spot_avail,
            prev_avail,
            state: state.clone(),
        };
        let mut alloc = policy.decide_with(&obs, forecast.as_ref(), model, solve)?;
        alloc.n_spot = alloc.n_spot.min(slot.spot_avail);
        let alloc = alloc.clamped(&job);
        state = model.step(&state, alloc, T::from_f64(slot.spot_price));
        allocations.push(alloc);
        if completed_at.is_none() && model.is_complete(&state.progress) {
            completed_at = Some(t);
        }
    }

    let completion_slot = match completed_at {
        Some(t) => T::from_u32(t),
        None if model.is_complete(&state.progress) => T::zero(),
        None => model.deadline.clone() + model.termination_time(&state.progress),
    };
    let utility = model.utility(state.progress.clone(), state.accrued_cost.clone());
    Ok(Trajectory {
        allocations,
        state,
        utility,
        completion_slot,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub policy: String,
    pub start_slot: usize,
    pub utility_raw: f64,
    pub utility_norm: f64,
    pub completion_slot: f64,
    pub cost: f64,
    pub z_ddl: f64,
    pub allocations: Vec<Allocation>,
}

impl JobResult {
    fn from_trajectory(spec: &PolicySpec, scenario: &Scenario, start: usize, tr: &Trajectory) -> Result<Self> {
        let bounds = UtilityBounds::for_job(&scenario.job, scenario.od_price)?;
        Ok(JobResult {
            policy: spec.to_string(),
            start_slot: start,
            utility_raw: tr.utility,
            utility_norm: bounds.normalize(tr.utility),
            completion_slot: tr.completion_slot,
            cost: tr.state.accrued_cost,
            z_ddl: tr.state.progress,
            allocations: tr.allocations.clone(),
        })
    }

    /// Utility recomputed from the recorded allocations and the market.
    pub fn replayed_utility(&self, scenario: &Scenario, trace: &SpotTrace) -> Result<f64> {
        let prices = (0..self.allocations.len())
            .map(|k| trace.slot(self.start_slot + k).map(|s| s.spot_price))
            .collect::<Result<Vec<f64>>>()?;
        Ok(scenario.lift::<f64>().replay(&self.allocations, &prices))
    }

    /// No slot used more spot instances than the market offered.
    pub fn respects_availability(&self, trace: &SpotTrace) -> bool {
        self.allocations.iter().enumerate().all(|(k, a)| {
            trace
                .slot(self.start_slot + k)
                .is_ok_and(|s| a.n_spot <= s.spot_avail)
        })
    }
}

/// Runs one policy on one job whose first slot is trace index `start`.
pub fn run_job(
    spec: &PolicySpec,
    scenario: &Scenario,
    trace: &SpotTrace,
    forecaster: &ForecasterConfig,
    start: usize,
    aggregation: CommitAggregation,
) -> Result<JobResult> {
    spec.validate()?;
    scenario.validate()?;
    let model = scenario.lift::<f64>();
    let forecasts = match spec.forecast_horizon() {
        Some(h) if scenario.job.workload > 0.0 => Some(JobForecasts::build(
            forecaster,
            trace,
            start,
            scenario.job.deadline,
            h,
        )?),
        _ => None,
    };
    let mut policy = Policy::with_aggregation(spec, aggregation);
    let tr = simulate_job(&mut policy, &model, trace, start, forecasts.as_ref())?;
    JobResult::from_trajectory(spec, scenario, start, &tr)
}

type WindowKey = (u32, usize, u64, u32);

/// Window plans keyed by slot, horizon, progress, and previous count. AHAP
/// variants sharing a window length reach identical states often, and the
/// window problem does not depend on the threshold or commitment level.
#[derive(Default)]
struct WindowMemo {
    plans: HashMap<WindowKey, Vec<Allocation>>,
}

impl WindowMemo {
    fn solve(&mut self, p: &WindowProblem<'_, f64>) -> Result<Vec<Allocation>> {
        let key = (p.start_slot, p.horizon, p.initial.progress.to_bits(), p.initial.prev_total);
        if let Some(plan) = self.plans.get(&key) {
            return Ok(plan.clone());
        }
        let plan = solve_window(p)?.allocations;
        self.plans.insert(key, plan.clone());
        Ok(plan)
    }
}

/// Runs every policy in `pool` on one job, sharing forecasts and window
/// solutions across policies.
pub fn evaluate_pool(
    pool: &[PolicySpec],
    scenario: &Scenario,
    trace: &SpotTrace,
    forecaster: &ForecasterConfig,
    start: usize,
    aggregation: CommitAggregation,
) -> Result<Vec<JobResult>> {
    scenario.validate()?;
    let model = scenario.lift::<f64>();
    let horizon = pool.iter().filter_map(PolicySpec::forecast_horizon).max();
    let forecasts = match horizon {
        Some(h) if scenario.job.workload > 0.0 => {
            Some(JobForecasts::build(forecaster, trace, start, scenario.job.deadline, h)?)
        }
        _ => None,
    };
    let mut memo = WindowMemo::default();
    pool.iter()
        .map(|spec| {
            let mut policy = Policy::with_aggregation(spec, aggregation);
            let tr = simulate_job_with(
                &mut policy,
                &model,
                trace,
                start,
                forecasts.as_ref(),
                &mut |p| memo.solve(p),
            )?;
            JobResult::from_trajectory(spec, scenario, start, &tr)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JobDistribution {
    /// Inclusive integer range.
    pub workload: [u32; 2],
    pub deadline: u32,
    pub n_min: [u32; 2],
    pub n_max: [u32; 2],
    pub value: f64,
    pub gamma: f64,
}

impl Default for JobDistribution {
    fn default() -> Self {
        JobDistribution {
            workload: [70, 120],
            deadline: 10,
            n_min: [1, 4],
            n_max: [12, 16],
            value: 100.0,
            gamma: 1.5,
        }
    }
}

impl JobDistribution {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("workload", self.workload), ("n_min", self.n_min), ("n_max", self.n_max)] {
            if lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.n_min[1] > self.n_max[0] {
            return Err(Error::Config("n_min range must lie below the n_max range".into()));
        }
        self.sample_job(self.workload[0], self.n_min[0], self.n_max[0]).validate()
    }

    fn sample_job(&self, workload: u32, n_min: u32, n_max: u32) -> JobSpec {
        JobSpec {
            workload: workload as f64,
            deadline: self.deadline,
            n_min,
            n_max,
            value: self.value,
            gamma: self.gamma,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> JobSpec {
        let workload = rng.random_range(self.workload[0]..=self.workload[1]);
        let n_min = rng.random_range(self.n_min[0]..=self.n_min[1]);
        let n_max = rng.random_range(self.n_max[0]..=self.n_max[1]);
        self.sample_job(workload, n_min, n_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mu_up: f64,
    pub mu_down: f64,
    pub od_price: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let tp = ThroughputModel::default();
        let ov = OverheadModel::default();
        ModelConfig {
            alpha: tp.alpha,
            beta: tp.beta,
            mu_up: ov.mu_up,
            mu_down: ov.mu_down,
            od_price: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn scenario(&self, job: JobSpec) -> Result<Scenario> {
        Scenario::new(
            job,
            ThroughputModel {
                alpha: self.alpha,
                beta: self.beta,
            },
            OverheadModel {
                mu_up: self.mu_up,
                mu_down: self.mu_down,
            },
            self.od_price,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TraceSource {
    Synth(TraceSynthSpec),
    File { path: PathBuf },
}

impl Default for TraceSource {
    fn default() -> Self {
        TraceSource::Synth(TraceSynthSpec::default())
    }
}

impl TraceSource {
    pub fn load(&self) -> Result<SpotTrace> {
        match self {
            TraceSource::Synth(spec) => synthesize_trace(spec),
            TraceSource::File { path } => {
                let file = File::open(path)
                    .map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
                load_trace(BufReader::new(file))
            }
        }
    }

    /// The trace with its mean availability moved to `mean`.
    fn with_mean_avail(&self, trace: &SpotTrace, mean: f64) -> Result<SpotTrace> {
        if let TraceSource::Synth(spec) = self {
            return synthesize_trace(&TraceSynthSpec {
                base_avail: mean,
                ..spec.clone()
            });
        }
        let current = trace.mean_avail();
        let factor = if current > 0.0 { mean / current } else { 0.0 };
        let prices: Vec<f64> = trace.prices().collect();
        let avails: Vec<u32> = trace.avails().map(|a| round_count(a as f64 * factor, u32::MAX)).collect();
        SpotTrace::from_series(&prices, &avails, trace.on_demand_price())
    }

    /// The trace with its mean spot price moved to `mean`.
    fn with_mean_price(&self, trace: &SpotTrace, mean: f64) -> Result<SpotTrace> {
        if let TraceSource::Synth(spec) = self {
            return synthesize_trace(&TraceSynthSpec {
                base_price: mean,
                price_amplitude: spec.price_amplitude * mean / spec.base_price,
                ..spec.clone()
            });
        }
        let current = trace.mean_price();
        let factor = if current > 0.0 { mean / current } else { 0.0 };
        let prices: Vec<f64> = trace.prices().map(|p| p * factor).collect();
        let avails: Vec<u32> = trace.avails().collect();
        SpotTrace::from_series(&prices, &avails, trace.on_demand_price())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Simulate,
    SweepDeadline,
    SweepOverhead,
    SweepAvail,
    SweepPrice,
    Select,
    AdaptPhases,
    Oracle,
}

impl ExperimentKind {
    pub fn sweep_param(&self) -> Option<&'static str> {
        match self {
            ExperimentKind::SweepDeadline => Some("deadline"),
            ExperimentKind::SweepOverhead => Some("overhead"),
            ExperimentKind::SweepAvail => Some("avail"),
            ExperimentKind::SweepPrice => Some("price"),
            _ => None,
        }
    }
}

/// One selection phase: iterations `start..end` use this forecast noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub start: usize,
    pub end: usize,
    pub magnitude_mode: MagnitudeMode,
    pub distribution: NoiseDistribution,
    pub level: f64,
}

pub fn default_phases() -> Vec<PhaseConfig> {
    use MagnitudeMode::FixedMagnitude as Fm;
    use NoiseDistribution::*;
    vec![
        PhaseConfig { start: 0, end: 800, magnitude_mode: Fm, distribution: Uniform, level: 0.1 },
        PhaseConfig { start: 800, end: 1600, magnitude_mode: Fm, distribution: HeavyTail, level: 0.3 },
        PhaseConfig { start: 1600, end: 2400, magnitude_mode: Fm, distribution: Uniform, level: 0.5 },
        PhaseConfig { start: 2400, end: 3600, magnitude_mode: Fm, distribution: Uniform, level: 2.0 },
    ]
}

fn default_policies() -> Vec<String> {
    ["od", "msu", "up", "ahanp:s=0.7", "ahap:w=3,v=1,s=0.7"]
        .map(String::from)
        .to_vec()
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

fn default_selection_jobs() -> usize {
    DEFAULT_SELECTION_JOBS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Seeded job/trace draws per point.
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Policy strings; `"pool"` expands to the full selection pool.
    #[serde(default = "default_policies")]
    pub policies: Vec<String>,
    #[serde(default)]
    pub sweep_values: Vec<f64>,
    /// Jobs (iterations) in a selection run.
    #[serde(default = "default_selection_jobs")]
    pub selection_jobs: usize,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub commit_aggregation: CommitAggregation,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub jobs: JobDistribution,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trace: TraceSource,
    #[serde(default)]
    pub forecaster: ForecasterConfig,
    #[serde(default)]
    pub phases: Vec<PhaseConfig>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seed: 0,
            runs: DEFAULT_RUNS,
            policies: default_policies(),
            sweep_values: Vec::new(),
            selection_jobs: DEFAULT_SELECTION_JOBS,
            eta: None,
            commit_aggregation: CommitAggregation::Mean,
            output: None,
            jobs: JobDistribution::default(),
            model: ModelConfig::default(),
            trace: TraceSource::default(),
            forecaster: ForecasterConfig::default(),
            phases: Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.jobs.validate().map_err(as_config)?;
        self.model
            .scenario(self.jobs.sample_job(self.jobs.workload[0], self.jobs.n_min[0], self.jobs.n_max[0]))
            .map_err(as_config)?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.resolved_policies()?.is_empty() {
            return Err(Error::Config("policy list is empty".into()));
        }
        if let TraceSource::File { path } = &self.trace {
            if !path.exists() {
                return Err(Error::Config(format!("trace file {} does not exist", path.display())));
            }
        }
        if self.kind.sweep_param().is_some() && self.sweep_values.is_empty() {
            return Err(Error::Config("sweep needs at least one sweep value".into()));
        }
        if self.kind == ExperimentKind::AdaptPhases {
            validate_phases(&self.effective_phases())?;
        }
        if self.kind == ExperimentKind::Select && self.selection_jobs == 0 {
            return Err(Error::Config("selection needs at least one job".into()));
        }
        Ok(())
    }

    pub fn resolved_policies(&self) -> Result<Vec<PolicySpec>> {
        let mut out = Vec::new();
        for p in &self.policies {
            if p == "pool" {
                out.extend(build_policy_pool());
            } else {
                out.push(p.parse()?);
            }
        }
        Ok(out)
    }

    /// Policies for selection runs: the configured list, or the pool when
    /// the list was left at its default.
    pub fn selection_pool(&self) -> Result<Vec<PolicySpec>> {
        if self.policies == default_policies() {
            Ok(build_policy_pool())
        } else {
            self.resolved_policies()
        }
    }

    pub fn effective_phases(&self) -> Vec<PhaseConfig> {
        if self.phases.is_empty() {
            default_phases()
        } else {
            self.phases.clone()
        }
    }
}

fn as_config(e: Error) -> Error {
    if e.is_config() {
        match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        }
    } else {
        e
    }
}

pub fn validate_phases(phases: &[PhaseConfig]) -> Result<()> {
    if phases.is_empty() {
        return Err(Error::Config("phase list is empty".into()));
    }
    let mut sorted = phases.to_vec();
    sorted.sort_by_key(|p| p.start);
    if sorted[0].start != 0 {
        return Err(Error::Config("phases must start at iteration 0".into()));
    }
    for p in &sorted {
        if p.end <= p.start {
            return Err(Error::Config(format!("phase [{}, {}) is empty", p.start, p.end)));
        }
        if !(p.level >= 0.0) {
            return Err(Error::Config("phase noise level must be nonnegative".into()));
        }
    }
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::Config(format!(
                "phases [{}, {}) and [{}, {}) overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
        if pair[1].start > pair[0].end {
            return Err(Error::Config(format!(
                "no phase covers iterations {}..{}",
                pair[0].end, pair[1].start
            )));
        }
    }
    Ok(())
}

/// A drawn job and where its window starts in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct JobDraw {
    pub job: JobSpec,
    pub start: usize,
}

/// `count` seeded job draws whose windows (plus `reach` slots of lookahead
/// and up to a day of history) fit inside a trace of `trace_len` slots.
pub fn draw_jobs(
    dist: &JobDistribution,
    count: usize,
    reach: usize,
    trace_len: usize,
    seed: u64,
) -> Result<Vec<JobDraw>> {
    if reach + 1 > trace_len {
        return Err(Error::Config(format!(
            "trace of {trace_len} slots cannot hold a job window of {reach} slots"
        )));
    }
    let hi = trace_len - reach;
    let lo = HISTORY_SLOTS.min(hi);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let job = dist.draw(&mut rng);
            let start = rng.random_range(lo..=hi);
            JobDraw { job, start }
        })
        .collect())
}

fn max_horizon(policies: &[PolicySpec]) -> usize {
    policies.iter().filter_map(PolicySpec::forecast_horizon).max().unwrap_or(0)
}

/// One `(run, policy)` result of a plain simulation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub run: usize,
    #[serde(flatten)]
    pub result: JobResult,
}

pub fn run_simulate(cfg: &ExperimentConfig) -> Result<Vec<SimulationRecord>> {
    cfg.validate()?;
    let policies = cfg.resolved_policies()?;
    let trace = cfg.trace.load()?;
    let reach = cfg.jobs.deadline as usize + cfg.forecaster.lookahead(max_horizon(&policies));
    let draws = draw_jobs(&cfg.jobs, cfg.runs, reach, trace.len(), cfg.seed)?;
    let per_run = draws
        .par_iter()
        .enumerate()
        .map(|(run, d)| {
            let scenario = cfg.model.scenario(d.job.clone())?;
            let results = evaluate_pool(&policies, &scenario, &trace, &cfg.forecaster, d.start, cfg.commit_aggregation)?;
            Ok(results
                .into_iter()
                .map(|result| SimulationRecord { run, result })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

pub const SWEEP_CSV_HEADER: &str = "sweep_param,sweep_value,policy,mean_utility,stderr,runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_param: String,
    pub sweep_value: f64,
    pub policy: String,
    pub mean_utility: f64,
    pub stderr: f64,
    pub runs: usize,
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let param = cfg
        .kind
        .sweep_param()
        .ok_or_else(|| Error::Config(format!("{:?} is not a sweep", cfg.kind)))?;
    let policies = cfg.resolved_policies()?;
    let base_trace = cfg.trace.load()?;

    let max_deadline = if cfg.kind == ExperimentKind::SweepDeadline {
        cfg.sweep_values.iter().fold(0.0f64, |a, b| a.max(*b)) as usize
    } else {
        cfg.jobs.deadline as usize
    };
    let reach = max_deadline + cfg.forecaster.lookahead(max_horizon(&policies));
    // Common draws across sweep points and policies.
    let draws = draw_jobs(&cfg.jobs, cfg.runs, reach, base_trace.len(), cfg.seed)?;

    let mut rows = Vec::with_capacity(cfg.sweep_values.len() * policies.len());
    for &value in &cfg.sweep_values {
        let mut model = cfg.model;
        let mut trace = base_trace.clone();
        let mut deadline = cfg.jobs.deadline;
        match cfg.kind {
            ExperimentKind::SweepDeadline => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("deadline sweep value {value} is not a positive integer")));
                }
                deadline = value as u32;
            }
            ExperimentKind::SweepOverhead => {
                model.mu_up = value;
                model.mu_down = value;
            }
            ExperimentKind::SweepAvail => trace = cfg.trace.with_mean_avail(&base_trace, value)?,
            ExperimentKind::SweepPrice => trace = cfg.trace.with_mean_price(&base_trace, value)?,
            _ => unreachable!(),
        }
        let per_run = draws
            .par_iter()
            .map(|d| {
                let job = JobSpec { deadline, ..d.job.clone() };
                let scenario = model.scenario(job).map_err(as_config)?;
                let results = evaluate_pool(&policies, &scenario, &trace, &cfg.forecaster, d.start, cfg.commit_aggregation)?;
                Ok(results.into_iter().map(|r| r.utility_norm).collect::<Vec<f64>>())
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, spec) in policies.iter().enumerate() {
            let xs: Vec<f64> = per_run.iter().map(|r| r[i]).collect();
            let (mean, stderr) = mean_and_stderr(&xs);
            rows.push(SweepRow {
                sweep_param: param.to_string(),
                sweep_value: value,
                policy: spec.to_string(),
                mean_utility: mean,
                stderr,
                runs: xs.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.sweep_param, r.sweep_value, r.policy, r.mean_utility, r.stderr, r.runs
        )?;
    }
    Ok(())
}

pub fn write_jsonl<W: Write, S: Serialize>(items: &[S], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub const SIMULATION_CSV_HEADER: &str = "run,policy,start_slot,utility_raw,utility_norm,completion_slot,cost,z_ddl";

pub fn write_simulation_csv<W: Write>(records: &[SimulationRecord], mut out: W) -> Result<()> {
    writeln!(out, "{SIMULATION_CSV_HEADER}")?;
    for rec in records {
        let r = &rec.result;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            rec.run, r.policy, r.start_slot, r.utility_raw, r.utility_norm, r.completion_slot, r.cost, r.z_ddl
        )?;
    }
    Ok(())
}

/// Normalized utilities of every pool policy on each of `draws`, with the
/// forecaster for job `k` given by `forecaster(k)`.
pub fn pool_utilities<F>(
    cfg: &ExperimentConfig,
    pool: &[PolicySpec],
    trace: &SpotTrace,
    draws: &[JobDraw],
    forecaster: F,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize) -> ForecasterConfig + Sync,
{
    draws
        .par_iter()
        .enumerate()
        .map(|(k, d)| {
            let scenario = cfg.model.scenario(d.job.clone())?;
            let results = evaluate_pool(pool, &scenario, trace, &forecaster(k), d.start, cfg.commit_aggregation)
                .map_err(|e| Error::Simulation {
                    job: k,
                    policy: usize::MAX,
                    source: Box::new(e),
                })?;
            Ok(results.into_iter().map(|r| r.utility_norm).collect())
        })
        .collect()
}

/// Online selection over the pool on `selection_jobs` drawn jobs.
pub fn run_select(cfg: &ExperimentConfig) -> Result<SelectionRun> {
    cfg.validate()?;
    let pool = cfg.selection_pool()?;
    let trace = cfg.trace.load()?;
    let reach = cfg.jobs.deadline as usize + cfg.forecaster.lookahead(max_horizon(&pool));
    let draws = draw_jobs(&cfg.jobs, cfg.selection_jobs, reach, trace.len(), cfg.seed)?;
    let table = pool_utilities(cfg, &pool, &trace, &draws, |_| cfg.forecaster)?;
    run_selection_by_job(pool.len(), table.len(), cfg.eta, cfg.seed, |k| Ok(table[k].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub start: usize,
    pub end: usize,
    /// Pool index with the largest weight at the end of the phase.
    pub argmax: usize,
    pub policy: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub run: SelectionRun,
    pub phases: Vec<PhaseSummary>,
}

impl AdaptResult {
    /// Weight of every policy at every iteration, one row per iteration.
    pub fn write_heatmap_csv<W: Write>(&self, out: W) -> Result<()> {
        self.run.write_weights_csv(out)
    }
}

/// Selection with the forecast noise switched at phase boundaries. The
/// weights carry over between phases.
pub fn run_adapt_phases(cfg: &ExperimentConfig) -> Result<AdaptResult> {
    cfg.validate()?;
    let mut phases = cfg.effective_phases();
    validate_phases(&phases)?;
    phases.sort_by_key(|p| p.start);
    let total = phases.last().map_or(0, |p| p.end);

    let pool = cfg.selection_pool()?;
    let trace = cfg.trace.load()?;
    let reach = cfg.jobs.deadline as usize + max_horizon(&pool);
    let draws = draw_jobs(&cfg.jobs, total, reach, trace.len(), cfg.seed)?;
    let noise_seed = match cfg.forecaster {
        ForecasterConfig::NoisyOracle { seed, .. } => seed,
        ForecasterConfig::Ar { .. } => cfg.seed,
    };
    let phase_of = |k: usize| {
        let p = phases.iter().find(|p| p.start <= k && k < p.end).expect("phases cover every iteration");
        ForecasterConfig::NoisyOracle {
            magnitude_mode: p.magnitude_mode,
            distribution: p.distribution,
            level: p.level,
            seed: noise_seed,
        }
    };
    let table = pool_utilities(cfg, &pool, &trace, &draws, phase_of)?;
    let run = run_selection_by_job(pool.len(), total, cfg.eta, cfg.seed, |k| Ok(table[k].clone()))?;

    let summaries = phases
        .iter()
        .map(|p| {
            let w = if p.end < total {
                &run.history[p.end].weights
            } else {
                &run.final_weights
            };
            let i = argmax(w);
            PhaseSummary {
                start: p.start,
                end: p.end,
                argmax: i,
                policy: pool[i].to_string(),
                weight: w[i],
            }
        })
        .collect();
    Ok(AdaptResult { run, phases: summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub run: usize,
    pub policy: String,
    pub utility: f64,
    pub oracle_utility: f64,
    pub gap: f64,
}

pub const ORACLE_CSV_HEADER: &str = "run,policy,utility,oracle_utility,gap";

/// Every policy against the offline optimum (exact arithmetic).
pub fn run_oracle(cfg: &ExperimentConfig) -> Result<Vec<OracleRow>> {
    cfg.validate()?;
    let policies = cfg.resolved_policies()?;
    let trace = cfg.trace.load()?;
    let reach = cfg.jobs.deadline as usize + cfg.forecaster.lookahead(max_horizon(&policies));
    let draws = draw_jobs(&cfg.jobs, cfg.runs, reach, trace.len(), cfg.seed)?;
    let per_run = draws
        .par_iter()
        .enumerate()
        .map(|(run, d)| {
            let scenario = cfg.model.scenario(d.job.clone())?;
            let window = trace.window(d.start, d.job.deadline as usize)?;
            let opt = solve_offline(&window, &scenario.lift::<Exact>())?.objective.to_f64();
            let results = evaluate_pool(&policies, &scenario, &trace, &cfg.forecaster, d.start, cfg.commit_aggregation)?;
            Ok(results
                .into_iter()
                .map(|r| OracleRow {
                    run,
                    policy: r.policy,
                    utility: r.utility_raw,
                    oracle_utility: opt,
                    gap: opt - r.utility_raw,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

pub fn write_oracle_csv<W: Write>(rows: &[OracleRow], mut out: W) -> Result<()> {
    writeln!(out, "{ORACLE_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.run, r.policy, r.utility, r.oracle_utility, r.gap)?;
    }
    Ok(())
}
