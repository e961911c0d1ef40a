//! Exact allocation solvers.
//!
//! [`solve_window`] maximizes `Ṽ(Z_end) - window cost` over a forecast
//! window with a forward dynamic program over Pareto frontiers.
//! [`solve_offline`] finds the full-horizon optimum on true market data by
//! depth-first branch and bound. The two share only the objective and the
//! spot/on-demand split rule, so agreement between them is a real check.
//!
//! Both enumerate per-slot totals `n ∈ {0} ∪ [n_min, n_max]`; for a given
//! total the cheapest split puts `min(n, avail)` on spot when spot is
//! strictly cheaper than on-demand. Ties between plans with equal objective
//! are broken by lower cost, then fewer instance-slots, then fewer
//! on-demand instance-slots, then the lexicographically smallest sequence of
//! totals.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::forecast::Forecast;
use crate::job::{Allocation, Model, ProgressState};
use crate::market::SpotTrace;
use crate::scalar::Scalar;

/// Largest deadline accepted by [`solve_offline`].
pub const OFFLINE_MAX_DEADLINE: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanSequence<T = f64> {
    /// Job slot of the first allocation.
    pub origin_slot: u32,
    pub allocations: Vec<Allocation>,
    pub objective: T,
}

#[derive(Debug, Clone)]
pub struct WindowProblem<'a, T> {
    /// Job slot `t` (1-based) at which the window opens.
    pub start_slot: u32,
    /// Requested look-ahead `ω`; the window covers `t ..= t + ω`, clipped
    /// at the deadline.
    pub horizon: usize,
    pub initial: ProgressState<T>,
    pub forecast: &'a Forecast,
    pub model: &'a Model<T>,
}

impl<T: Scalar> WindowProblem<'_, T> {
    /// Number of window slots after clipping at the deadline.
    pub fn effective_len(&self) -> Result<usize> {
        let d = self.model.job().deadline;
        if self.start_slot == 0 || self.start_slot > d {
            return Err(Error::InvalidParameter(format!(
                "window start {} outside job slots 1..={d}",
                self.start_slot
            )));
        }
        let clipped = self.horizon.min((d - self.start_slot) as usize);
        if self.forecast.horizon < clipped || self.forecast.price_pred.len() <= clipped {
            return Err(Error::InvalidParameter(format!(
                "forecast horizon {} shorter than window {clipped}",
                self.forecast.horizon
            )));
        }
        Ok(clipped + 1)
    }
}

/// Cheapest split of `total` instances given spot price and availability.
pub fn split_total<T: Scalar>(total: u32, avail: u32, spot_price: &T, od_price: &T) -> Allocation {
    if spot_price < od_price {
        let n_spot = total.min(avail);
        Allocation::new(total - n_spot, n_spot)
    } else {
        Allocation::new(total, 0)
    }
}

/// Candidate totals in ascending order.
pub fn candidate_totals(n_min: u32, n_max: u32) -> impl Iterator<Item = u32> + Clone {
    std::iter::once(0).chain(n_min..=n_max)
}

#[derive(Debug, Clone)]
struct SlotOption<T> {
    total: u32,
    alloc: Allocation,
    cost: T,
}

fn slot_options<T: Scalar>(model: &Model<T>, avail: u32, price: &T) -> Vec<SlotOption<T>> {
    let job = model.job();
    candidate_totals(job.n_min, job.n_max)
        .map(|total| {
            let alloc = split_total(total, avail, price, &model.od_price);
            SlotOption {
                total,
                alloc,
                cost: model.slot_cost(alloc, price.clone()),
            }
        })
        .collect()
}

/// Search label: one partial plan ending with `seq.last()` instances.
#[derive(Debug, Clone)]
struct Label<T> {
    progress: T,
    cost: T,
    instance_slots: u32,
    od_slots: u32,
    seq: Vec<u32>,
    allocs: Vec<Allocation>,
}

/// Ranks complete plans: `Less` means `a` is preferred.
fn rank<T: Scalar>(a_obj: &T, a: &Label<T>, b_obj: &T, b: &Label<T>) -> Ordering {
    b_obj
        .partial_cmp(a_obj)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.cost.partial_cmp(&b.cost).unwrap_or(Ordering::Equal))
        .then(a.instance_slots.cmp(&b.instance_slots))
        .then(a.od_slots.cmp(&b.od_slots))
        .then_with(|| a.seq.cmp(&b.seq))
}

/// Window search label. `seq` packs the totals chosen so far, `bits` bits
/// each with the first slot most significant, so for sequences of equal
/// length integer order is lexicographic order.
#[derive(Debug, Clone)]
struct WindowLabel<T> {
    progress: T,
    cost: T,
    instance_slots: u32,
    od_slots: u32,
    seq: u128,
}

impl<T: Scalar> WindowLabel<T> {
    fn key_cmp(&self, other: &WindowLabel<T>) -> Ordering {
        self.cost
            .partial_cmp(&other.cost)
            .unwrap_or(Ordering::Equal)
            .then(self.instance_slots.cmp(&other.instance_slots))
            .then(self.od_slots.cmp(&other.od_slots))
            .then(self.seq.cmp(&other.seq))
    }
}

/// Keeps the labels no other label beats for every common completion.
/// Labels in one bucket end on the same count, so a shared suffix adds the
/// same progress, cost and counts to both: a label with at least as much
/// progress and a smaller key wins on objective or, failing that, on the
/// tie-breaking order. After sorting by key, the survivors are the labels
/// whose progress exceeds that of every label before them.
fn prune<T: Scalar>(labels: &mut Vec<WindowLabel<T>>) {
    labels.sort_unstable_by(|a, b| a.key_cmp(b));
    let mut top: Option<T> = None;
    labels.retain(|l| {
        if top.as_ref().is_none_or(|t| l.progress > *t) {
            top = Some(l.progress.clone());
            true
        } else {
            false
        }
    });
}

/// Exact maximizer of the window objective under the forecast.
pub fn solve_window<T: Scalar>(p: &WindowProblem<'_, T>) -> Result<PlanSequence<T>> {
    let len = p.effective_len()?;
    let model = p.model;
    let bits = 32 - model.job().n_max.leading_zeros();
    if len as u32 * bits > u128::BITS {
        return Err(Error::Capability(format!(
            "window of {len} slots with n_max = {} is too long",
            model.job().n_max
        )));
    }
    let options: Vec<Vec<SlotOption<T>>> = (0..len)
        .map(|k| {
            let price = T::from_f64(p.forecast.price_pred[k]);
            slot_options(model, p.forecast.avail_pred[k], &price)
        })
        .collect();
    // Work beyond the workload earns nothing, so progress is capped there.
    let cap = |z: T| T::min_of(z, model.workload.clone());
    let extend = |label: &WindowLabel<T>, prev: u32, opt: &SlotOption<T>| WindowLabel {
        progress: cap(label.progress.clone() + model.slot_progress(opt.total, prev)),
        cost: label.cost.clone() + opt.cost.clone(),
        instance_slots: label.instance_slots + opt.total,
        od_slots: label.od_slots + opt.alloc.n_od,
        seq: (label.seq << bits) | opt.total as u128,
    };

    // Frontier keyed by the current instance count.
    let mut frontier: BTreeMap<u32, Vec<WindowLabel<T>>> = BTreeMap::new();
    frontier.insert(
        p.initial.prev_total,
        vec![WindowLabel {
            progress: cap(p.initial.progress.clone()),
            cost: T::zero(),
            instance_slots: 0,
            od_slots: 0,
            seq: 0,
        }],
    );
    for slot_opts in &options[..len - 1] {
        let mut next: BTreeMap<u32, Vec<WindowLabel<T>>> = BTreeMap::new();
        for (&prev, labels) in &frontier {
            for label in labels {
                for opt in slot_opts {
                    next.entry(opt.total).or_default().push(extend(label, prev, opt));
                }
            }
        }
        for labels in next.values_mut() {
            prune(labels);
        }
        frontier = next;
    }

    // The last slot goes straight into the ranking.
    let mut best: Option<(T, WindowLabel<T>)> = None;
    for (&prev, labels) in &frontier {
        for label in labels {
            for opt in &options[len - 1] {
                let child = extend(label, prev, opt);
                let obj = model.tilde_value(child.progress.clone()) - child.cost.clone();
                let better = match &best {
                    None => true,
                    Some((b_obj, b)) => match obj.partial_cmp(b_obj) {
                        Some(Ordering::Greater) => true,
                        Some(Ordering::Less) => false,
                        _ => child.key_cmp(b) == Ordering::Less,
                    },
                };
                if better {
                    best = Some((obj, child));
                }
            }
        }
    }
    let (objective, label) = best.expect("the idle plan is always feasible");
    let mask = (1u128 << bits) - 1;
    let allocations = (0..len)
        .map(|k| {
            let total = ((label.seq >> (bits as usize * (len - 1 - k))) & mask) as u32;
            options[k]
                .iter()
                .find(|o| o.total == total)
                .expect("decoded total is a candidate")
                .alloc
        })
        .collect();
    Ok(PlanSequence {
        origin_slot: p.start_slot,
        allocations,
        objective,
    })
}

struct OfflineSearch<'a, T> {
    model: &'a Model<T>,
    options: Vec<Vec<SlotOption<T>>>,
    /// `remaining_cap[s]`: most progress obtainable in slots `s..d`.
    remaining_cap: Vec<T>,
    best: Option<(T, Label<T>)>,
    nodes: u64,
}

impl<T: Scalar> OfflineSearch<'_, T> {
    fn dfs(&mut self, slot: usize, prev: u32, label: &mut Label<T>) {
        self.nodes += 1;
        if slot == self.options.len() {
            let obj = self.model.tilde_value(label.progress.clone()) - label.cost.clone();
            let better = match &self.best {
                None => true,
                // Visiting order is lexicographic, so an equal key never
                // replaces the incumbent.
                Some((b_obj, b)) => rank(&obj, label, b_obj, b) == Ordering::Less,
            };
            if better {
                self.best = Some((obj, label.clone()));
            }
            return;
        }
        if let Some((b_obj, _)) = &self.best {
            let optimistic = self
                .model
                .tilde_value(label.progress.clone() + self.remaining_cap[slot].clone())
                - label.cost.clone();
            if optimistic < *b_obj {
                return;
            }
        }
        for i in 0..self.options[slot].len() {
            let opt = self.options[slot][i].clone();
            let saved_progress = label.progress.clone();
            let saved_cost = label.cost.clone();
            label.progress = label.progress.clone() + self.model.slot_progress(opt.total, prev);
            label.cost = label.cost.clone() + opt.cost.clone();
            label.instance_slots += opt.total;
            label.od_slots += opt.alloc.n_od;
            label.seq.push(opt.total);
            label.allocs.push(opt.alloc);

            self.dfs(slot + 1, opt.total, label);

            label.allocs.pop();
            label.seq.pop();
            label.od_slots -= opt.alloc.n_od;
            label.instance_slots -= opt.total;
            label.cost = saved_cost;
            label.progress = saved_progress;
        }
    }
}

/// Full-horizon optimum with perfect knowledge of the market. Slot `i` of
/// `trace` is job slot `i + 1`.
pub fn solve_offline<T: Scalar>(trace: &SpotTrace, model: &Model<T>) -> Result<PlanSequence<T>> {
    let d = model.job().deadline;
    if d > OFFLINE_MAX_DEADLINE {
        return Err(Error::Capability(format!(
            "offline search supports deadlines up to {OFFLINE_MAX_DEADLINE} slots, got {d}"
        )));
    }
    if trace.len() < d as usize {
        return Err(Error::TraceRange {
            requested: d as usize - 1,
            available: trace.len(),
        });
    }
    let options: Vec<Vec<SlotOption<T>>> = trace.slots()[..d as usize]
        .iter()
        .map(|s| slot_options(model, s.spot_avail, &T::from_f64(s.spot_price)))
        .collect();
    let full = model.throughput(model.job().n_max);
    let mut remaining_cap = vec![T::zero(); d as usize + 1];
    for s in (0..d as usize).rev() {
        remaining_cap[s] = remaining_cap[s + 1].clone() + full.clone();
    }

    let mut search = OfflineSearch {
        model,
        options,
        remaining_cap,
        best: None,
        nodes: 0,
    };
    let mut root = Label {
        progress: T::zero(),
        cost: T::zero(),
        instance_slots: 0,
        od_slots: 0,
        seq: Vec::new(),
        allocs: Vec::new(),
    };
    search.dfs(0, 0, &mut root);
    let (objective, label) = search.best.expect("search visits at least one leaf");
    Ok(PlanSequence {
        origin_slot: 1,
        allocations: label.allocs,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::job::{JobSpec, OverheadModel, Scenario, ThroughputModel};
    use crate::scalar::Exact;
    use num::BigInt;
    use proptest::prelude::*;

    fn q(n: i64, d: i64) -> Exact {
        Exact::new(BigInt::from(n), BigInt::from(d))
    }

    fn scenario(workload: f64, deadline: u32, n_min: u32, n_max: u32, value: f64, gamma: f64, mu: f64) -> Scenario {
        Scenario::new(
            JobSpec {
                workload,
                deadline,
                n_min,
                n_max,
                value,
                gamma,
            },
            ThroughputModel::default(),
            OverheadModel::uniform(mu),
            1.0,
        )
        .unwrap()
    }

    fn forecast(prices: &[f64], avail: &[u32]) -> Forecast {
        Forecast {
            origin_slot: 0,
            horizon: prices.len() - 1,
            price_pred: prices.to_vec(),
            avail_pred: avail.to_vec(),
        }
    }

    /// Plain enumeration of every sequence of per-slot (n_od, n_spot) pairs,
    /// with no split rule and no pruning. Returns the best objective.
    fn brute_force_pairs(model: &Model<Exact>, init: &ProgressState<Exact>, prices: &[f64], avail: &[u32]) -> Exact {
        let job = model.job().clone();
        let mut per_slot: Vec<Vec<Allocation>> = Vec::new();
        for &a in avail {
            let mut v = vec![Allocation::IDLE];
            for total in job.n_min..=job.n_max {
                for spot in 0..=total.min(a) {
                    v.push(Allocation::new(total - spot, spot));
                }
            }
            per_slot.push(v);
        }
        let mut best: Option<Exact> = None;
        let mut idx = vec![0usize; prices.len()];
        loop {
            let mut state = init.clone();
            let mut cost = Exact::zero();
            for (k, &i) in idx.iter().enumerate() {
                let a = per_slot[k][i];
                let p = Exact::from_f64(prices[k]);
                cost += model.slot_cost(a, p.clone());
                state = model.step(&state, a, p);
            }
            let obj = model.tilde_value(state.progress) - cost;
            if best.as_ref().is_none_or(|b| obj > *b) {
                best = Some(obj);
            }
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return best.unwrap();
                }
                idx[k] += 1;
                if idx[k] < per_slot[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn two_slot_window_example() {
        let s = scenario(4.0, 2, 1, 4, 10.0, 2.0, 1.0);
        let m = s.lift::<Exact>();
        let f = forecast(&[0.4, 0.4], &[2, 2]);
        let p = WindowProblem {
            start_slot: 1,
            horizon: 1,
            initial: ProgressState::initial(),
            forecast: &f,
            model: &m,
        };
        let plan = solve_window(&p).unwrap();
        assert_eq!(plan.allocations, vec![Allocation::new(0, 2), Allocation::new(0, 2)]);
        assert_eq!(plan.objective, q(42, 5));
        assert_eq!(plan.objective, brute_force_pairs(&m, &ProgressState::initial(), &[0.4, 0.4], &[2, 2]));
    }

    #[test]
    fn finished_job_plans_idle() {
        let s = scenario(4.0, 3, 1, 4, 10.0, 2.0, 1.0);
        let m = s.lift::<Exact>();
        let f = forecast(&[0.4, 0.4, 0.4], &[2, 2, 2]);
        let init = ProgressState {
            slot: 1,
            progress: q(5, 1),
            prev_total: 2,
            accrued_cost: q(1, 1),
        };
        let p = WindowProblem {
            start_slot: 2,
            horizon: 2,
            initial: init,
            forecast: &f,
            model: &m,
        };
        let plan = solve_window(&p).unwrap();
        assert!(plan.allocations.iter().all(|a| a.total() == 0));
        assert_eq!(plan.allocations.len(), 2);
        assert_eq!(plan.objective, q(10, 1));
    }

    #[test]
    fn termination_penalty_beats_idling() {
        let s = scenario(4.0, 1, 1, 4, 1.0, 2.0, 1.0);
        let m = s.lift::<Exact>();
        let f = forecast(&[0.5], &[0]);
        let p = WindowProblem {
            start_slot: 1,
            horizon: 0,
            initial: ProgressState::initial(),
            forecast: &f,
            model: &m,
        };
        let plan = solve_window(&p).unwrap();
        assert_eq!(plan.allocations, vec![Allocation::new(4, 0)]);
        assert!(plan.objective > m.tilde_value(Exact::zero()));
        assert_eq!(plan.objective, brute_force_pairs(&m, &ProgressState::initial(), &[0.5], &[0]));
    }

    #[test]
    fn window_is_clipped_at_deadline() {
        let s = scenario(10.0, 4, 1, 4, 10.0, 2.0, 1.0);
        let m = s.lift::<f64>();
        let f = forecast(&[0.4; 6], &[2; 6]);
        let p = WindowProblem {
            start_slot: 3,
            horizon: 5,
            initial: ProgressState::initial(),
            forecast: &f,
            model: &m,
        };
        assert_eq!(p.effective_len().unwrap(), 2);
        assert_eq!(solve_window(&p).unwrap().allocations.len(), 2);
        let past = WindowProblem { start_slot: 5, ..p };
        assert!(solve_window(&past).is_err());
    }

    #[test]
    fn equal_prices_use_on_demand() {
        let one = 1.0f64;
        assert_eq!(split_total(5, 3, &one, &one), Allocation::new(5, 0));
        assert_eq!(split_total(5, 3, &0.5, &one), Allocation::new(2, 3));
        assert_eq!(split_total(2, 3, &0.5, &one), Allocation::new(0, 2));
    }

    #[test]
    fn toy_offline_uses_only_spot() {
        let s = scenario(20.0, 5, 1, 6, 25.0, 2.0, 1.0);
        let m = s.lift::<Exact>();
        let trace = SpotTrace::from_series(&[0.3; 5], &[6; 5], 1.0).unwrap();
        let plan = solve_offline(&trace, &m).unwrap();
        assert_eq!(plan.objective, q(19, 1));
        assert!(plan.allocations.iter().all(|a| a.n_od == 0));
        assert_eq!(plan.allocations.iter().map(|a| a.n_spot).sum::<u32>(), 20);
    }

    #[test]
    fn offline_without_spot_is_best_on_demand_schedule() {
        let s = scenario(9.0, 3, 1, 4, 20.0, 2.0, 0.9);
        let m = s.lift::<Exact>();
        let trace = SpotTrace::from_series(&[0.3; 3], &[0; 3], 1.0).unwrap();
        let plan = solve_offline(&trace, &m).unwrap();
        assert!(plan.allocations.iter().all(|a| a.n_spot == 0));
        // Enumerate on-demand totals directly.
        let mut best: Option<Exact> = None;
        for a in candidate_totals(1, 4) {
            for b in candidate_totals(1, 4) {
                for c in candidate_totals(1, 4) {
                    let allocs = [a, b, c].map(|n| Allocation::new(n, 0));
                    let u = m.replay(&allocs, &[q(3, 10), q(3, 10), q(3, 10)]);
                    if best.as_ref().is_none_or(|x| u > *x) {
                        best = Some(u);
                    }
                }
            }
        }
        assert_eq!(plan.objective, best.unwrap());
    }

    #[test]
    fn offline_infeasible_job_still_works() {
        let s = scenario(20.0, 4, 1, 4, 0.5, 2.0, 1.0);
        let m = s.lift::<Exact>();
        let trace = SpotTrace::from_series(&[0.9; 4], &[4; 4], 1.0).unwrap();
        let plan = solve_offline(&trace, &m).unwrap();
        assert!(plan.objective > m.tilde_value(Exact::zero()));
        let replayed = m.replay(&plan.allocations, &[q(9, 10), q(9, 10), q(9, 10), q(9, 10)]);
        assert_eq!(plan.objective, replayed);
    }

    #[test]
    fn offline_rejects_long_horizons() {
        let s = scenario(20.0, 9, 1, 4, 25.0, 2.0, 1.0);
        let trace = SpotTrace::from_series(&[0.3; 9], &[6; 9], 1.0).unwrap();
        assert!(matches!(solve_offline(&trace, &s.lift::<Exact>()), Err(Error::Capability(_))));
    }

    fn price_grid() -> impl Strategy<Value = f64> {
        (1u32..=24).prop_map(|k| k as f64 * 0.05)
    }

    fn small_instance(max_d: u32) -> impl Strategy<Value = (Scenario, Vec<f64>, Vec<u32>)> {
        (1u32..=max_d, 1u32..=3, 0u32..=3, 2u32..=20, 1u32..=6, prop_oneof![Just(1.0), Just(0.9), Just(0.8)])
            .prop_flat_map(|(d, n_min, extra, workload, value_scale, mu)| {
                let n_max = n_min + extra;
                (
                    Just(scenario(workload as f64, d, n_min, n_max, value_scale as f64 * 5.0, 1.5, mu)),
                    proptest::collection::vec(price_grid(), d as usize),
                    proptest::collection::vec(0u32..=n_max + 1, d as usize),
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn split_rule_dominates_pair_enumeration((s, prices, avail) in small_instance(2)) {
            let m = s.lift::<Exact>();
            let f = forecast(&prices, &avail);
            let p = WindowProblem {
                start_slot: 1,
                horizon: prices.len() - 1,
                initial: ProgressState::initial(),
                forecast: &f,
                model: &m,
            };
            let plan = solve_window(&p).unwrap();
            prop_assert_eq!(plan.objective, brute_force_pairs(&m, &ProgressState::initial(), &prices, &avail));
        }

        #[test]
        fn window_matches_offline((s, prices, avail) in small_instance(5)) {
            let m = s.lift::<Exact>();
            let trace = SpotTrace::from_series(&prices, &avail, 1.0).unwrap();
            let f = forecast(&prices, &avail);
            let p = WindowProblem {
                start_slot: 1,
                horizon: prices.len() - 1,
                initial: ProgressState::initial(),
                forecast: &f,
                model: &m,
            };
            let w = solve_window(&p).unwrap();
            let o = solve_offline(&trace, &m).unwrap();
            prop_assert_eq!(&w.objective, &o.objective);
            prop_assert_eq!(w.allocations, o.allocations);
        }

        #[test]
        fn more_availability_never_hurts((s, prices, avail) in small_instance(4)) {
            let m = s.lift::<Exact>();
            let solve = |avail: &[u32]| {
                let f = forecast(&prices, avail);
                solve_window(&WindowProblem {
                    start_slot: 1,
                    horizon: prices.len() - 1,
                    initial: ProgressState::initial(),
                    forecast: &f,
                    model: &m,
                })
                .unwrap()
                .objective
            };
            let more: Vec<u32> = avail.iter().map(|a| a + 1).collect();
            prop_assert!(solve(&more) >= solve(&avail));
        }

        #[test]
        fn objective_is_bounded((s, prices, avail) in small_instance(4), z0 in 0u32..10, prev in 0u32..4) {
            let m = s.lift::<Exact>();
            let f = forecast(&prices, &avail);
            let init = ProgressState { slot: 0, progress: Exact::from_u32(z0), prev_total: prev, accrued_cost: Exact::zero() };
            let plan = solve_window(&WindowProblem {
                start_slot: 1,
                horizon: prices.len() - 1,
                initial: init,
                forecast: &f,
                model: &m,
            })
            .unwrap();
            prop_assert!(plan.objective <= m.value);
            prop_assert!(plan.objective >= m.tilde_value(Exact::from_u32(z0)));
            for (a, &cap) in plan.allocations.iter().zip(&avail) {
                prop_assert!(a.is_valid_for(&s.job));
                prop_assert!(a.n_spot <= cap);
            }
        }
    }
}
