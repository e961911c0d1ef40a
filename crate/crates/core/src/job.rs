//! Fine-tuning job model: throughput law, reconfiguration overhead, cost,
//! the soft/hard-deadline value function, and the deadline-reformulated
//! utility that charges a termination configuration for unfinished work.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Total workload in instance-slot units.
    pub workload: f64,
    /// Soft deadline in slots.
    pub deadline: u32,
    pub n_min: u32,
    pub n_max: u32,
    /// Value earned when finishing by the soft deadline.
    pub value: f64,
    /// Hard deadline multiplier; value reaches zero at `gamma * deadline`.
    pub gamma: f64,
}

impl Default for JobSpec {
    fn default() -> Self {
        JobSpec {
            workload: 80.0,
            deadline: 10,
            n_min: 1,
            n_max: 12,
            value: 100.0,
            gamma: 1.5,
        }
    }
}

impl JobSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.workload >= 0.0 && self.workload.is_finite()) {
            return bad(format!("workload must be nonnegative, got {}", self.workload));
        }
        if self.deadline == 0 {
            return bad("deadline must be at least one slot".into());
        }
        if self.n_min == 0 || self.n_min > self.n_max {
            return bad(format!(
                "parallelism bounds must satisfy 1 <= n_min <= n_max, got [{}, {}]",
                self.n_min, self.n_max
            ));
        }
        if !(self.value > 0.0) {
            return bad(format!("value must be positive, got {}", self.value));
        }
        if !(self.gamma > 1.0) {
            return bad(format!("gamma must exceed 1, got {}", self.gamma));
        }
        Ok(())
    }

    /// Reference trajectory `(L / d) * t`; defined past the deadline too.
    pub fn expected_progress(&self, t: u32) -> f64 {
        self.workload / self.deadline as f64 * t as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputModel {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ThroughputModel {
    fn default() -> Self {
        ThroughputModel { alpha: 1.0, beta: 0.0 }
    }
}

impl ThroughputModel {
    /// Progress per fully effective slot with `n` instances; zero when idle.
    pub fn throughput(&self, n: u32) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.alpha * n as f64 + self.beta
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadModel {
    /// Effective fraction of a slot in which the instance count grew.
    pub mu_up: f64,
    /// Effective fraction of a slot in which the instance count shrank.
    pub mu_down: f64,
}

impl Default for OverheadModel {
    fn default() -> Self {
        OverheadModel {
            mu_up: 0.9,
            mu_down: 0.9,
        }
    }
}

impl OverheadModel {
    pub const NONE: OverheadModel = OverheadModel {
        mu_up: 1.0,
        mu_down: 1.0,
    };

    pub fn uniform(mu: f64) -> Self {
        OverheadModel {
            mu_up: mu,
            mu_down: mu,
        }
    }

    pub fn effective_fraction(&self, n_now: u32, n_prev: u32) -> f64 {
        use std::cmp::Ordering::*;
        match n_now.cmp(&n_prev) {
            Greater => self.mu_up,
            Less => self.mu_down,
            Equal => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Allocation {
    pub n_od: u32,
    pub n_spot: u32,
}

impl Allocation {
    pub const IDLE: Allocation = Allocation { n_od: 0, n_spot: 0 };

    pub fn new(n_od: u32, n_spot: u32) -> Self {
        Allocation { n_od, n_spot }
    }

    pub fn total(&self) -> u32 {
        self.n_od + self.n_spot
    }

    /// Idle, or a total within `[n_min, n_max]`.
    pub fn is_valid_for(&self, job: &JobSpec) -> bool {
        let n = self.total();
        n == 0 || (job.n_min..=job.n_max).contains(&n)
    }

    /// Clamp a nonzero total into `[n_min, n_max]`, adjusting the on-demand
    /// component first. An idle allocation stays idle.
    pub fn clamped(self, job: &JobSpec) -> Allocation {
        let total = self.total();
        if total == 0 {
            return self;
        }
        let mut a = self;
        if total < job.n_min {
            a.n_od += job.n_min - total;
        } else if total > job.n_max {
            let excess = total - job.n_max;
            let from_od = excess.min(a.n_od);
            a.n_od -= from_od;
            a.n_spot -= excess - from_od;
        }
        a
    }
}

/// Running simulation state after `slot` slots have been processed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressState<T = f64> {
    pub slot: u32,
    pub progress: T,
    pub prev_total: u32,
    pub accrued_cost: T,
}

impl<T: Scalar> ProgressState<T> {
    pub fn initial() -> Self {
        ProgressState {
            slot: 0,
            progress: T::zero(),
            prev_total: 0,
            accrued_cost: T::zero(),
        }
    }
}

/// A job together with the machine and price model it runs under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub job: JobSpec,
    pub throughput: ThroughputModel,
    pub overhead: OverheadModel,
    pub od_price: f64,
}

impl Scenario {
    pub fn new(
        job: JobSpec,
        throughput: ThroughputModel,
        overhead: OverheadModel,
        od_price: f64,
    ) -> Result<Self> {
        let s = Scenario {
            job,
            throughput,
            overhead,
            od_price,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.job.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.throughput.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.throughput.alpha));
        }
        if !(self.throughput.throughput(self.job.n_min) > 0.0) {
            return bad("throughput at n_min must be positive".into());
        }
        let OverheadModel { mu_up, mu_down } = self.overhead;
        if !(mu_up > 0.0 && mu_up <= mu_down && mu_down <= 1.0) {
            return bad(format!(
                "overhead fractions must satisfy 0 < mu_up <= mu_down <= 1, got {mu_up}, {mu_down}"
            ));
        }
        if !(self.od_price > 0.0 && self.od_price.is_finite()) {
            return bad(format!("on-demand price must be positive, got {}", self.od_price));
        }
        Ok(())
    }

    /// Parameters lifted into the scalar type `T`, with a throughput table.
    pub fn lift<T: Scalar>(&self) -> Model<T> {
        let job = &self.job;
        let throughput: Vec<T> = (0..=job.n_max)
            .map(|n| {
                if n == 0 {
                    T::zero()
                } else {
                    T::from_f64(self.throughput.alpha) * T::from_u32(n)
                        + T::from_f64(self.throughput.beta)
                }
            })
            .collect();
        let mu_up = T::from_f64(self.overhead.mu_up);
        let termination_rate = mu_up.clone() * throughput[job.n_max as usize].clone();
        Model {
            workload: T::from_f64(job.workload),
            deadline: T::from_u32(job.deadline),
            value: T::from_f64(job.value),
            gamma: T::from_f64(job.gamma),
            od_price: T::from_f64(self.od_price),
            mu_up,
            mu_down: T::from_f64(self.overhead.mu_down),
            n_max: T::from_u32(job.n_max),
            termination_rate,
            throughput,
            scenario: self.clone(),
        }
    }

    pub fn value_at(&self, completion: f64) -> f64 {
        self.lift::<f64>().value_at(completion)
    }

    pub fn tilde_value(&self, z_ddl: f64) -> f64 {
        self.lift::<f64>().tilde_value(z_ddl)
    }

    pub fn utility(&self, z_ddl: f64, cost_ddl: f64) -> f64 {
        self.lift::<f64>().utility(z_ddl, cost_ddl)
    }

    pub fn step(&self, state: &ProgressState, alloc: Allocation, slot_price: f64) -> ProgressState {
        self.lift::<f64>().step(state, alloc, slot_price)
    }
}

/// A [`Scenario`] with every parameter lifted into `T`.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub workload: T,
    pub deadline: T,
    pub value: T,
    pub gamma: T,
    pub od_price: T,
    pub mu_up: T,
    pub mu_down: T,
    pub n_max: T,
    /// Progress per slot of the termination configuration.
    pub termination_rate: T,
    throughput: Vec<T>,
    scenario: Scenario,
}

impl<T: Scalar> Model<T> {
    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn job(&self) -> &JobSpec {
        &self.scenario.job
    }

    pub fn throughput(&self, n: u32) -> T {
        self.throughput[n as usize].clone()
    }

    pub fn effective_fraction(&self, n_now: u32, n_prev: u32) -> T {
        use std::cmp::Ordering::*;
        match n_now.cmp(&n_prev) {
            Greater => self.mu_up.clone(),
            Less => self.mu_down.clone(),
            Equal => T::one(),
        }
    }

    /// Progress contributed by a slot running `n_now` after `n_prev`.
    pub fn slot_progress(&self, n_now: u32, n_prev: u32) -> T {
        if n_now == 0 {
            T::zero()
        } else {
            self.effective_fraction(n_now, n_prev) * self.throughput(n_now)
        }
    }

    pub fn is_complete(&self, progress: &T) -> bool {
        progress.clone() + T::completion_tolerance() >= self.workload
    }

    /// Value of completing at (possibly fractional) time `completion`.
    pub fn value_at(&self, completion: T) -> T {
        let d = self.deadline.clone();
        let hard = self.gamma.clone() * d.clone();
        if completion <= d {
            self.value.clone()
        } else if completion < hard {
            let span = (self.gamma.clone() - T::one()) * d.clone();
            self.value.clone() * (T::one() - (completion - d) / span)
        } else {
            T::zero()
        }
    }

    /// Slots the termination configuration needs to finish from `z_ddl`.
    pub fn termination_time(&self, z_ddl: &T) -> T {
        if self.is_complete(z_ddl) {
            T::zero()
        } else {
            (self.workload.clone() - z_ddl.clone()) / self.termination_rate.clone()
        }
    }

    /// Value as a function of progress at the deadline, net of the
    /// on-demand spend needed to finish the remainder at full parallelism.
    pub fn tilde_value(&self, z_ddl: T) -> T {
        if self.is_complete(&z_ddl) {
            return self.value.clone();
        }
        let t_rem = self.termination_time(&z_ddl);
        let finish = self.value_at(self.deadline.clone() + t_rem.clone());
        finish - t_rem * self.n_max.clone() * self.od_price.clone()
    }

    pub fn utility(&self, z_ddl: T, cost_ddl: T) -> T {
        self.tilde_value(z_ddl) - cost_ddl
    }

    pub fn slot_cost(&self, alloc: Allocation, slot_price: T) -> T {
        T::from_u32(alloc.n_od) * self.od_price.clone() + T::from_u32(alloc.n_spot) * slot_price
    }

    pub fn step(&self, state: &ProgressState<T>, alloc: Allocation, slot_price: T) -> ProgressState<T> {
        let total = alloc.total();
        ProgressState {
            slot: state.slot + 1,
            progress: state.progress.clone() + self.slot_progress(total, state.prev_total),
            prev_total: total,
            accrued_cost: state.accrued_cost.clone() + self.slot_cost(alloc, slot_price),
        }
    }

    /// Utility of a complete allocation sequence, recomputed from scratch.
    pub fn replay(&self, allocations: &[Allocation], prices: &[T]) -> T {
        let mut state = ProgressState::initial();
        for (a, p) in allocations.iter().zip(prices) {
            state = self.step(&state, *a, p.clone());
        }
        self.utility(state.progress, state.accrued_cost)
    }
}
