//! Shared fixtures for the benchmarks.

use spotmix_core::{synthesize_trace, Forecast, JobSpec, OverheadModel, Scenario, SpotTrace, ThroughputModel, TraceSynthSpec};

pub fn scenario(workload: f64, deadline: u32, n_max: u32) -> Scenario {
    let job = JobSpec {
        workload,
        deadline,
        n_min: 1,
        n_max,
        value: 100.0,
        gamma: 1.5,
    };
    Scenario::new(job, ThroughputModel::default(), OverheadModel::default(), 1.0).expect("valid scenario")
}

pub fn trace(length: usize) -> SpotTrace {
    synthesize_trace(&TraceSynthSpec {
        length,
        seed: 1,
        ..Default::default()
    })
    .expect("valid spec")
}

/// Perfect forecast of `trace` from slot 0.
pub fn perfect_forecast(trace: &SpotTrace, horizon: usize) -> Forecast {
    Forecast {
        origin_slot: 0,
        horizon,
        price_pred: trace.prices().take(horizon + 1).collect(),
        avail_pred: trace.avails().take(horizon + 1).collect(),
    }
}
