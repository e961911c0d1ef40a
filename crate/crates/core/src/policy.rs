//! Per-slot allocation policies.
//!
//! * AHAP plans over a forecast window (spot-greedy when ahead of the
//!   reference trajectory, exact window optimization when behind) and
//!   executes the average of the last `v` plans' entries for the current
//!   slot.
//! * AHANP reacts to progress, price, and availability-change indicators
//!   without any forecast.
//! * OD-Only, MSU, and UP are the comparison baselines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::Forecast;
use crate::job::{Allocation, JobSpec, Model, ProgressState};
use crate::optimizer::{solve_window, WindowProblem};
use crate::scalar::Scalar;

pub const POOL_SIGMAS: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const POOL_MAX_OMEGA: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicySpec {
    Ahap { omega: u32, commit: u32, sigma: f64 },
    Ahanp { sigma: f64 },
    OdOnly,
    Msu,
    Up,
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        let check_sigma = |sigma: f64| {
            if (0.0..=1.0).contains(&sigma) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("price threshold {sigma} outside [0, 1]")))
            }
        };
        match *self {
            PolicySpec::Ahap { omega, commit, sigma } => {
                if omega == 0 || commit == 0 || commit > omega {
                    return Err(Error::InvalidParameter(format!(
                        "AHAP needs 1 <= v <= w, got w={omega}, v={commit}"
                    )));
                }
                check_sigma(sigma)
            }
            PolicySpec::Ahanp { sigma } => check_sigma(sigma),
            _ => Ok(()),
        }
    }

    /// Forecast horizon the policy consumes, if any.
    pub fn forecast_horizon(&self) -> Option<usize> {
        match self {
            PolicySpec::Ahap { omega, .. } => Some(*omega as usize),
            _ => None,
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Ahap { omega, commit, sigma } => write!(f, "ahap:w={omega},v={commit},s={sigma}"),
            PolicySpec::Ahanp { sigma } => write!(f, "ahanp:s={sigma}"),
            PolicySpec::OdOnly => f.write_str("od"),
            PolicySpec::Msu => f.write_str("msu"),
            PolicySpec::Up => f.write_str("up"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid policy `{s}`"));
        let field = |part: Option<&str>, key: &str| -> Result<String> {
            part.and_then(|p| p.strip_prefix(key))
                .and_then(|p| p.strip_prefix('='))
                .filter(|v| !v.is_empty())
                .map(str::to_owned)
                .ok_or_else(bad)
        };
        let spec = match s {
            "od" => PolicySpec::OdOnly,
            "msu" => PolicySpec::Msu,
            "up" => PolicySpec::Up,
            _ => {
                if let Some(rest) = s.strip_prefix("ahap:") {
                    let mut parts = rest.split(',');
                    let omega = field(parts.next(), "w")?.parse().map_err(|_| bad())?;
                    let commit = field(parts.next(), "v")?.parse().map_err(|_| bad())?;
                    let sigma = parse_sigma(&field(parts.next(), "s")?).ok_or_else(bad)?;
                    if parts.next().is_some() {
                        return Err(bad());
                    }
                    PolicySpec::Ahap { omega, commit, sigma }
                } else if let Some(rest) = s.strip_prefix("ahanp:") {
                    let sigma = parse_sigma(&field(Some(rest), "s")?).ok_or_else(bad)?;
                    PolicySpec::Ahanp { sigma }
                } else {
                    return Err(bad());
                }
            }
        };
        spec.validate().map_err(|e| Error::Config(format!("policy `{s}`: {e}")))?;
        Ok(spec)
    }
}

fn parse_sigma(text: &str) -> Option<f64> {
    if text.chars().all(|c| c.is_ascii_digit() || c == '.') {
        text.parse().ok()
    } else {
        None
    }
}

impl Serialize for PolicySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// The 112-policy pool: AHAP over `1 <= v <= w <= 5` and seven thresholds,
/// ordered by `(w, v, s)`, followed by AHANP ordered by threshold.
pub fn build_policy_pool() -> Vec<PolicySpec> {
    let mut pool = Vec::with_capacity(112);
    for omega in 1..=POOL_MAX_OMEGA {
        for commit in 1..=omega {
            for sigma in POOL_SIGMAS {
                pool.push(PolicySpec::Ahap { omega, commit, sigma });
            }
        }
    }
    pool.extend(POOL_SIGMAS.map(|sigma| PolicySpec::Ahanp { sigma }));
    pool
}

/// What a policy sees at the start of job slot `slot`.
#[derive(Debug, Clone)]
pub struct Observation<T = f64> {
    /// Job slot `t`, 1-based.
    pub slot: u32,
    pub spot_price: f64,
    pub spot_avail: u32,
    /// Availability observed in the previous market slot.
    pub prev_avail: u32,
    /// State after slot `t - 1`.
    pub state: ProgressState<T>,
}

/// How AHAP combines the current-slot entries of its stored plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitAggregation {
    /// Arithmetic mean, rounded half up.
    #[default]
    Mean,
    /// Plain sum of the entries.
    Sum,
}

#[derive(Debug, Clone)]
struct StoredPlan {
    origin: u32,
    allocations: Vec<Allocation>,
}

/// AHAP's memory of its most recent `v` plans.
#[derive(Debug, Clone)]
pub struct AhapState {
    commit: u32,
    aggregation: CommitAggregation,
    plans: VecDeque<StoredPlan>,
}

impl AhapState {
    pub fn new(commit: u32, aggregation: CommitAggregation) -> Self {
        AhapState {
            commit,
            aggregation,
            plans: VecDeque::with_capacity(commit as usize + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Stores a plan made at `origin` and forgets plans older than `v` slots.
    pub fn push(&mut self, origin: u32, allocations: Vec<Allocation>) {
        self.plans.push_back(StoredPlan { origin, allocations });
        while self.plans.len() > self.commit as usize {
            self.plans.pop_front();
        }
    }

    /// Combined entry for slot `t` across stored plans that cover it.
    pub fn aggregate(&self, t: u32) -> Allocation {
        let entries: Vec<Allocation> = self
            .plans
            .iter()
            .filter(|p| p.origin <= t && t < p.origin + self.commit)
            .filter_map(|p| p.allocations.get((t - p.origin) as usize).copied())
            .collect();
        if entries.is_empty() {
            return Allocation::IDLE;
        }
        let od: u32 = entries.iter().map(|a| a.n_od).sum();
        let spot: u32 = entries.iter().map(|a| a.n_spot).sum();
        match self.aggregation {
            CommitAggregation::Sum => Allocation::new(od, spot),
            CommitAggregation::Mean => {
                let k = entries.len() as u32;
                Allocation::new(mean_half_up(od, k), mean_half_up(spot, k))
            }
        }
    }
}

fn mean_half_up(sum: u32, count: u32) -> u32 {
    (2 * sum + count) / (2 * count)
}

fn price_at_most_threshold<T: Scalar>(price: f64, sigma: f64, model: &Model<T>) -> bool {
    T::from_f64(price) <= T::from_f64(sigma) * model.od_price.clone()
}

/// Spot-greedy plan over the whole forecast window: take every cheap spot
/// instance (up to `n_max`) and no on-demand.
pub fn spot_priority_plan<T: Scalar>(forecast: &Forecast, sigma: f64, model: &Model<T>) -> Vec<Allocation> {
    let job = model.job();
    forecast
        .price_pred
        .iter()
        .zip(&forecast.avail_pred)
        .map(|(&p, &a)| {
            if price_at_most_threshold(p, sigma, model) && a >= job.n_min {
                Allocation::new(0, a.min(job.n_max))
            } else {
                Allocation::IDLE
            }
        })
        .collect()
}

/// Window solver used when AHAP is behind schedule. The default is
/// [`solve_window`]; callers may substitute a memoizing wrapper.
pub type WindowSolver<'s, T> = dyn FnMut(&WindowProblem<'_, T>) -> Result<Vec<Allocation>> + 's;

pub fn exact_window_plan<T: Scalar>(p: &WindowProblem<'_, T>) -> Result<Vec<Allocation>> {
    solve_window(p).map(|plan| plan.allocations)
}

pub fn decide_ahap<T: Scalar>(
    omega: u32,
    sigma: f64,
    state: &mut AhapState,
    obs: &Observation<T>,
    forecast: &Forecast,
    model: &Model<T>,
) -> Result<Allocation> {
    decide_ahap_with(omega, sigma, state, obs, forecast, model, &mut exact_window_plan)
}

#[allow(clippy::too_many_arguments)]
pub fn decide_ahap_with<T: Scalar>(
    omega: u32,
    sigma: f64,
    state: &mut AhapState,
    obs: &Observation<T>,
    forecast: &Forecast,
    model: &Model<T>,
    solve: &mut WindowSolver<'_, T>,
) -> Result<Allocation> {
    if forecast.horizon != omega as usize {
        return Err(Error::InvalidParameter(format!(
            "AHAP with w={omega} given a forecast of horizon {}",
            forecast.horizon
        )));
    }
    let t = obs.slot;
    let job = model.job();
    let ahead_target =
        model.workload.clone() * T::from_u32(t + omega) / model.deadline.clone();

    let plan = if obs.state.progress >= ahead_target {
        spot_priority_plan(forecast, sigma, model)
    } else {
        let problem = WindowProblem {
            start_slot: t,
            horizon: omega as usize,
            initial: obs.state.clone(),
            forecast,
            model,
        };
        solve(&problem)?
    };
    state.push(t, plan);

    let mut decision = state.aggregate(t);
    decision.n_spot = decision.n_spot.min(obs.spot_avail);
    Ok(decision.clamped(job))
}

pub fn decide_ahanp<T: Scalar>(sigma: f64, obs: &Observation<T>, model: &Model<T>) -> Allocation {
    let job = model.job();
    let t = obs.slot;
    let prev = obs.state.prev_total;
    let avail = obs.spot_avail;

    // z_hat >= 1, with z_hat = +inf when the reference trajectory is still 0.
    let expected_prev = model.workload.clone() * T::from_u32(t.saturating_sub(1)) / model.deadline.clone();
    let ahead = obs.state.progress >= expected_prev;
    let cheap = price_at_most_threshold(obs.spot_price, sigma, model);

    #[derive(PartialEq)]
    enum Change {
        Vanished,
        Halved,
        Shrunk,
        Grew,
        Reappeared,
    }
    let change = if avail == 0 {
        Change::Vanished
    } else if obs.prev_avail == 0 {
        Change::Reappeared
    } else if 2 * avail <= obs.prev_avail {
        Change::Halved
    } else if avail <= obs.prev_avail {
        Change::Shrunk
    } else {
        Change::Grew
    };

    let total = if ahead {
        match change {
            Change::Vanished => 0,
            Change::Halved => mean_half_up(prev, 2).max(job.n_min),
            Change::Shrunk => prev,
            Change::Grew | Change::Reappeared if !cheap => prev,
            Change::Grew | Change::Reappeared => prev.max(avail),
        }
    } else if change == Change::Reappeared {
        job.n_min
    } else {
        // Doubling from idle would stay idle while behind schedule.
        (2 * prev).max(job.n_min)
    };

    let total = if total == 0 {
        0
    } else {
        total.clamp(job.n_min, job.n_max)
    };
    let n_spot = avail.min(total);
    Allocation::new(total - n_spot, n_spot)
}

/// Smallest constant count in `[n_min, n_max]` finishing `remaining` work in
/// `slots` slots, paying the reconfiguration fraction once in the first;
/// `n_max` when none suffices.
fn constant_count_to_finish<T: Scalar>(model: &Model<T>, remaining: f64, slots: u32, prev: u32) -> u32 {
    let job = model.job();
    let tol = 1e-9;
    (job.n_min..=job.n_max)
        .find(|&n| {
            let h = model.throughput(n).to_f64();
            let first = model.effective_fraction(n, prev).to_f64() * h;
            first + (slots.saturating_sub(1)) as f64 * h >= remaining - tol
        })
        .unwrap_or(job.n_max)
}

/// Fewest instances in `[n_min, n_max]` whose progress this slot covers
/// `need`; `n_max` when none does.
fn count_for_need<T: Scalar>(model: &Model<T>, need: f64, prev: u32) -> u32 {
    let job = model.job();
    (job.n_min..=job.n_max)
        .find(|&n| model.slot_progress(n, prev).to_f64() >= need - 1e-9)
        .unwrap_or(job.n_max)
}

fn remaining_work<T: Scalar>(obs: &Observation<T>, model: &Model<T>) -> Option<f64> {
    if model.is_complete(&obs.state.progress) {
        None
    } else {
        Some(model.workload.to_f64() - obs.state.progress.to_f64())
    }
}

fn slots_left(t: u32, d: u32) -> u32 {
    d.saturating_sub(t) + 1
}

pub fn decide_od_only<T: Scalar>(obs: &Observation<T>, model: &Model<T>) -> Allocation {
    let Some(remaining) = remaining_work(obs, model) else {
        return Allocation::IDLE;
    };
    let job = model.job();
    let n = constant_count_to_finish(model, remaining, slots_left(obs.slot, job.deadline), obs.state.prev_total);
    Allocation::new(n, 0)
}

pub fn decide_msu<T: Scalar>(obs: &Observation<T>, model: &Model<T>) -> Allocation {
    let Some(remaining) = remaining_work(obs, model) else {
        return Allocation::IDLE;
    };
    let job = model.job();
    let n_spot = obs.spot_avail.min(job.n_max);
    let slack = job.deadline.saturating_sub(obs.slot) as f64
        * (model.mu_up.clone() * model.throughput(job.n_max)).to_f64();
    let total = if remaining > slack + 1e-9 {
        let needed = constant_count_to_finish(
            model,
            remaining,
            slots_left(obs.slot, job.deadline),
            obs.state.prev_total,
        );
        needed.max(n_spot)
    } else {
        n_spot
    };
    Allocation::new(total - n_spot, n_spot).clamped(job)
}

pub fn decide_up<T: Scalar>(obs: &Observation<T>, model: &Model<T>) -> Allocation {
    let Some(_) = remaining_work(obs, model) else {
        return Allocation::IDLE;
    };
    let job = model.job();
    let target = job.expected_progress(obs.slot);
    let need = target - obs.state.progress.to_f64();
    if need <= 1e-9 {
        return Allocation::IDLE;
    }
    let n = count_for_need(model, need, obs.state.prev_total);
    if obs.spot_avail >= job.n_min {
        Allocation::new(0, obs.spot_avail.min(n))
    } else {
        Allocation::new(n, 0)
    }
}

/// A policy instance with whatever per-run state it carries.
#[derive(Debug, Clone)]
pub enum Policy {
    Ahap {
        omega: u32,
        sigma: f64,
        state: AhapState,
    },
    Ahanp {
        sigma: f64,
    },
    OdOnly,
    Msu,
    Up,
}

impl Policy {
    pub fn new(spec: &PolicySpec) -> Self {
        Self::with_aggregation(spec, CommitAggregation::Mean)
    }

    pub fn with_aggregation(spec: &PolicySpec, aggregation: CommitAggregation) -> Self {
        match *spec {
            PolicySpec::Ahap { omega, commit, sigma } => Policy::Ahap {
                omega,
                sigma,
                state: AhapState::new(commit, aggregation),
            },
            PolicySpec::Ahanp { sigma } => Policy::Ahanp { sigma },
            PolicySpec::OdOnly => Policy::OdOnly,
            PolicySpec::Msu => Policy::Msu,
            PolicySpec::Up => Policy::Up,
        }
    }

    pub fn spec(&self) -> PolicySpec {
        match self {
            Policy::Ahap { omega, sigma, state } => PolicySpec::Ahap {
                omega: *omega,
                commit: state.commit,
                sigma: *sigma,
            },
            Policy::Ahanp { sigma } => PolicySpec::Ahanp { sigma: *sigma },
            Policy::OdOnly => PolicySpec::OdOnly,
            Policy::Msu => PolicySpec::Msu,
            Policy::Up => PolicySpec::Up,
        }
    }

    pub fn decide<T: Scalar>(
        &mut self,
        obs: &Observation<T>,
        forecast: Option<&Forecast>,
        model: &Model<T>,
    ) -> Result<Allocation> {
        self.decide_with(obs, forecast, model, &mut exact_window_plan)
    }

    pub fn decide_with<T: Scalar>(
        &mut self,
        obs: &Observation<T>,
        forecast: Option<&Forecast>,
        model: &Model<T>,
        solve: &mut WindowSolver<'_, T>,
    ) -> Result<Allocation> {
        Ok(match self {
            Policy::Ahap { omega, sigma, state } => {
                let forecast = forecast.ok_or_else(|| {
                    Error::InvalidParameter("AHAP requires a forecast".into())
                })?;
                decide_ahap_with(*omega, *sigma, state, obs, forecast, model, solve)?
            }
            Policy::Ahanp { sigma } => decide_ahanp(*sigma, obs, model),
            Policy::OdOnly => decide_od_only(obs, model),
            Policy::Msu => decide_msu(obs, model),
            Policy::Up => decide_up(obs, model),
        })
    }
}

/// Checks the per-slot feasibility every policy must respect.
pub fn is_feasible(alloc: &Allocation, job: &JobSpec, spot_avail: u32) -> bool {
    alloc.is_valid_for(job) && alloc.n_spot <= spot_avail
}
