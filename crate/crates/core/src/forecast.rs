//! Multi-step forecasts of spot price and availability.
//!
//! Two predictors are provided: an autoregressive least-squares model fitted
//! on the observed history, and a noise-injected oracle that perturbs the
//! true future with a controlled error law.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{round_count, SpotTrace};

/// 0.9 quantile of Student-t with 3 degrees of freedom.
pub const STUDENT_T3_Q90: f64 = 1.637_744_353_696_210_2;
pub const DEFAULT_AR_ORDER: usize = 4;

/// Predictions for slots `origin_slot ..= origin_slot + horizon`; index 0 is
/// the observed present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub origin_slot: usize,
    pub horizon: usize,
    pub price_pred: Vec<f64>,
    pub avail_pred: Vec<u32>,
}

impl Forecast {
    /// Persistence forecast: the observed present repeated over the window.
    pub fn persistence(truth: &SpotTrace, t: usize, horizon: usize) -> Result<Forecast> {
        let now = truth.slot(t)?;
        Ok(Forecast {
            origin_slot: t,
            horizon,
            price_pred: vec![now.spot_price; horizon + 1],
            avail_pred: vec![now.spot_avail; horizon + 1],
        })
    }

    /// The first `horizon + 1` entries as a shorter forecast. Both predictors
    /// are recursive/per-slot, so this equals a forecast made directly with
    /// the shorter horizon.
    pub fn truncated(&self, horizon: usize) -> Forecast {
        let h = horizon.min(self.horizon);
        Forecast {
            origin_slot: self.origin_slot,
            horizon: h,
            price_pred: self.price_pred[..=h].to_vec(),
            avail_pred: self.avail_pred[..=h].to_vec(),
        }
    }
}

/// Autoregressive forecast from all history up to and including slot `t`.
pub fn predict_ar(history: &SpotTrace, t: usize, horizon: usize, order: usize) -> Result<Forecast> {
    predict_ar_recent(history, t, horizon, order, usize::MAX)
}

/// Like [`predict_ar`], fitting only on the last `lookback` slots ending at
/// `t`.
pub fn predict_ar_recent(
    history: &SpotTrace,
    t: usize,
    horizon: usize,
    order: usize,
    lookback: usize,
) -> Result<Forecast> {
    if order == 0 {
        return Err(Error::InvalidParameter("AR order must be positive".into()));
    }
    let available = (t + 1).min(history.len());
    let needed = (order + 1).max(2);
    if t >= history.len() || available < needed {
        return Err(Error::InsufficientHistory { needed, available });
    }
    let start = (t + 1).saturating_sub(lookback.max(needed));
    let slots = &history.slots()[start..=t];

    let prices: Vec<f64> = slots.iter().map(|s| s.spot_price).collect();
    let avails: Vec<f64> = slots.iter().map(|s| s.spot_avail as f64).collect();
    let price_path = ar_extrapolate(&prices, order, horizon);
    let avail_path = ar_extrapolate(&avails, order, horizon);

    let now = &slots[slots.len() - 1];
    let mut price_pred = Vec::with_capacity(horizon + 1);
    let mut avail_pred = Vec::with_capacity(horizon + 1);
    price_pred.push(now.spot_price);
    avail_pred.push(now.spot_avail);
    for k in 0..horizon {
        price_pred.push(price_path[k].max(0.0));
        avail_pred.push(round_count(avail_path[k], u32::MAX));
    }
    Ok(Forecast {
        origin_slot: t,
        horizon,
        price_pred,
        avail_pred,
    })
}

/// Fits `y_i - m = c + sum_j a_j (y_{i-j} - m)` by minimum-norm least squares
/// on the centered series and iterates it `steps` times.
fn ar_extrapolate(series: &[f64], order: usize, steps: usize) -> Vec<f64> {
    let n = series.len();
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|y| y - mean).collect();

    let rows = n - order;
    let design = DMatrix::from_fn(rows, order + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            centered[r + order - c]
        }
    });
    let target = DVector::from_fn(rows, |r, _| centered[r + order]);

    let coeffs = if target.iter().all(|&v| v == 0.0) {
        DVector::zeros(order + 1)
    } else {
        let svd = design.svd(true, true);
        let cutoff = 1e-9 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        svd.solve(&target, cutoff)
            .unwrap_or_else(|_| DVector::zeros(order + 1))
    };

    let mut window: Vec<f64> = centered[n - order..].to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = coeffs[0];
        for j in 1..=order {
            next += coeffs[j] * window[window.len() - j];
        }
        window.push(next);
        out.push(next + mean);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MagnitudeMode {
    MagnitudeDependent,
    FixedMagnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Uniform,
    HeavyTail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub magnitude_mode: MagnitudeMode,
    pub distribution: NoiseDistribution,
    /// Relative error level, e.g. 0.1 for 10%.
    pub level: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn exact() -> Self {
        NoiseSpec {
            magnitude_mode: MagnitudeMode::MagnitudeDependent,
            distribution: NoiseDistribution::Uniform,
            level: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        NoiseSpec { seed, ..self }
    }

    /// Relative error for series `series` at origin `t`, offset `tau`. Each
    /// triple selects its own ChaCha stream, so draws for overlapping windows
    /// are independent and need no shared generator state.
    fn epsilon(&self, t: usize, tau: usize, series: u64) -> f64 {
        if self.level == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((t as u64) << 20) | ((tau as u64) << 1) | series);
        match self.distribution {
            NoiseDistribution::Uniform => self.level * rng.random_range(-1.0..=1.0),
            NoiseDistribution::HeavyTail => {
                let t3 = StudentT::new(3.0).expect("3 degrees of freedom is valid");
                self.level * t3.sample(&mut rng) / STUDENT_T3_Q90
            }
        }
    }

    fn perturb(&self, y: f64, series_mean: f64, eps: f64) -> f64 {
        match self.magnitude_mode {
            MagnitudeMode::MagnitudeDependent => y * (1.0 + eps),
            MagnitudeMode::FixedMagnitude => y + eps * series_mean,
        }
    }
}

const PRICE_SERIES: u64 = 0;
const AVAIL_SERIES: u64 = 1;

/// The true future over `t ..= t + horizon` with per-slot noise injected
/// from `noise`; slot `t` itself is returned unperturbed.
pub fn predict_noisy_oracle(
    truth: &SpotTrace,
    t: usize,
    horizon: usize,
    noise: &NoiseSpec,
) -> Result<Forecast> {
    if !(noise.level >= 0.0) {
        return Err(Error::InvalidParameter("noise level must be nonnegative".into()));
    }
    let last = t + horizon;
    if last >= truth.len() {
        return Err(Error::TraceRange {
            requested: last,
            available: truth.len(),
        });
    }
    let price_mean = truth.mean_price();
    let avail_mean = truth.mean_avail();

    let mut price_pred = Vec::with_capacity(horizon + 1);
    let mut avail_pred = Vec::with_capacity(horizon + 1);
    for tau in 0..=horizon {
        let slot = &truth.slots()[t + tau];
        if tau == 0 {
            price_pred.push(slot.spot_price);
            avail_pred.push(slot.spot_avail);
            continue;
        }
        let p = noise.perturb(slot.spot_price, price_mean, noise.epsilon(t, tau, PRICE_SERIES));
        let a = noise.perturb(
            slot.spot_avail as f64,
            avail_mean,
            noise.epsilon(t, tau, AVAIL_SERIES),
        );
        price_pred.push(p.max(0.0));
        avail_pred.push(round_count(a, u32::MAX));
    }
    Ok(Forecast {
        origin_slot: t,
        horizon,
        price_pred,
        avail_pred,
    })
}
