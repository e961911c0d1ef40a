//! Online policy selection with exponentiated-gradient weights under
//! full-information feedback.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::job::JobSpec;

pub const WEIGHT_FLOOR: f64 = 1e-30;

pub fn init_weights(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidParameter("policy pool is empty".into()));
    }
    Ok(vec![1.0 / m as f64; m])
}

/// Bounds used to map raw utilities into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityBounds {
    pub min: f64,
    pub max: f64,
}

impl UtilityBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if min < max {
            Ok(UtilityBounds { min, max })
        } else {
            Err(Error::InvalidParameter(format!("utility bounds [{min}, {max}] are empty")))
        }
    }

    /// `[-d * n_max * p_od, v]`.
    pub fn for_job(job: &JobSpec, od_price: f64) -> Result<Self> {
        Self::new(-(job.deadline as f64) * job.n_max as f64 * od_price, job.value)
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw.clamp(self.min, self.max) - self.min) / (self.max - self.min)
    }
}

pub fn normalize_utility(raw: f64, u_min: f64, u_max: f64) -> Result<f64> {
    Ok(UtilityBounds::new(u_min, u_max)?.normalize(raw))
}

/// One multiplicative step, stabilized by subtracting the largest utility.
pub fn update_weights(w: &[f64], u: &[f64], eta: f64) -> Vec<f64> {
    assert_eq!(w.len(), u.len(), "weight and utility lengths differ");
    let top = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut next: Vec<f64> = w
        .iter()
        .zip(u)
        .map(|(wi, ui)| wi * (eta * (ui - top)).exp())
        .collect();
    renormalize(&mut next);
    next
}

fn renormalize(w: &mut [f64]) {
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x = (*x / total).max(WEIGHT_FLOOR);
    }
    let total: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= total;
    }
}

pub fn select_policy<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(w)
        .expect("weights are positive and finite")
        .sample(rng)
}

pub fn default_eta(m: usize, k: usize) -> f64 {
    (2.0 * (m as f64).ln() / k as f64).sqrt()
}

/// The worst-case regret guarantee `sqrt(2 K ln M)`.
pub fn regret_bound(k: usize, m: usize) -> f64 {
    (2.0 * k as f64 * (m as f64).ln()).sqrt()
}

pub fn dot(w: &[f64], u: &[f64]) -> f64 {
    w.iter().zip(u).map(|(a, b)| a * b).sum()
}

/// One iteration of a selection run. `weights` are the weights the policy
/// was drawn from, before the update with `utilities`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub k: usize,
    pub chosen: usize,
    pub eta: f64,
    pub weights: Vec<f64>,
    pub utilities: Vec<f64>,
}

impl SelectionRecord {
    pub fn expected_utility(&self) -> f64 {
        dot(&self.weights, &self.utilities)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRun {
    pub eta: f64,
    pub seed: u64,
    pub history: Vec<SelectionRecord>,
    /// Weights after the last update.
    pub final_weights: Vec<f64>,
}

impl SelectionRun {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn pool_size(&self) -> usize {
        self.final_weights.len()
    }

    pub fn cumulative_utilities(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.pool_size()];
        for rec in &self.history {
            for (t, u) in totals.iter_mut().zip(&rec.utilities) {
                *t += u;
            }
        }
        totals
    }

    pub fn best_in_hindsight(&self) -> usize {
        argmax(&self.cumulative_utilities())
    }

    /// Pre-update weights of every policy, one row per iteration.
    pub fn write_weights_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = (0..self.pool_size()).map(|i| format!("w{i}")).collect();
        writeln!(out, "k,chosen,{}", header.join(","))?;
        for rec in &self.history {
            let row: Vec<String> = rec.weights.iter().map(f64::to_string).collect();
            writeln!(out, "{},{},{}", rec.k, rec.chosen, row.join(","))?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in &self.history {
            serde_json::to_writer(&mut out, rec).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Best fixed policy's total minus the selector's expected total.
pub fn regret(run: &SelectionRun) -> f64 {
    let best = run.cumulative_utilities().into_iter().fold(f64::NEG_INFINITY, f64::max);
    let expected: f64 = run.history.iter().map(SelectionRecord::expected_utility).sum();
    best - expected
}

/// Incremental selector state.
#[derive(Debug, Clone)]
pub struct Selector {
    weights: Vec<f64>,
    eta: f64,
    rng: ChaCha8Rng,
    k: usize,
}

impl Selector {
    pub fn new(m: usize, eta: f64, seed: u64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {eta} must be finite and >= 0")));
        }
        Ok(Selector {
            weights: init_weights(m)?,
            eta,
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: 0,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Draws the policy for the next job.
    pub fn choose(&mut self) -> usize {
        select_policy(&self.weights, &mut self.rng)
    }

    /// Records a job's normalized utilities for every policy and updates.
    pub fn observe(&mut self, chosen: usize, utilities: Vec<f64>) -> SelectionRecord {
        self.k += 1;
        let rec = SelectionRecord {
            k: self.k,
            chosen,
            eta: self.eta,
            weights: self.weights.clone(),
            utilities,
        };
        self.weights = update_weights(&self.weights, &rec.utilities, self.eta);
        rec
    }
}

/// Runs `k` iterations over `m` policies. `utility(k, m)` returns policy
/// `m`'s normalized utility on job `k` (0-based) and is evaluated for every
/// policy in parallel.
pub fn run_selection_with<F>(m: usize, k: usize, eta: Option<f64>, seed: u64, utility: F) -> Result<SelectionRun>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    run_selection_by_job(m, k, eta, seed, |job| {
        (0..m)
            .into_par_iter()
            .map(|policy| {
                utility(job, policy).map_err(|e| Error::Simulation {
                    job,
                    policy,
                    source: Box::new(e),
                })
            })
            .collect()
    })
}

/// Like [`run_selection_with`], with `utilities(k)` producing the whole
/// utility vector for job `k`.
pub fn run_selection_by_job<F>(m: usize, k: usize, eta: Option<f64>, seed: u64, mut utilities: F) -> Result<SelectionRun>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    if k == 0 {
        return Err(Error::InvalidParameter("selection needs at least one job".into()));
    }
    let eta = eta.unwrap_or_else(|| default_eta(m, k));
    let mut selector = Selector::new(m, eta, seed)?;
    let mut history = Vec::with_capacity(k);
    for job in 0..k {
        let chosen = selector.choose();
        let u = utilities(job)?;
        if u.len() != m {
            return Err(Error::InvalidParameter(format!(
                "job {job}: {} utilities for {m} policies",
                u.len()
            )));
        }
        history.push(selector.observe(chosen, u));
    }
    Ok(SelectionRun {
        eta,
        seed,
        history,
        final_weights: selector.weights,
    })
}

/// Selection over a precomputed `k x m` utility table.
pub fn run_selection_table(utilities: &[Vec<f64>], eta: Option<f64>, seed: u64) -> Result<SelectionRun> {
    let m = utilities.first().map_or(0, Vec::len);
    run_selection_with(m, utilities.len(), eta, seed, |k, i| Ok(utilities[k][i]))
}
