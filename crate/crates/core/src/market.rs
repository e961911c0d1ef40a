//! Spot-market traces: per-slot spot price and availability.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "slot,spot_price,spot_avail";
pub const DEFAULT_AVAIL_CAP: u32 = 16;
pub const DEFAULT_SLOT_MINUTES: u32 = 30;
/// One day of 30-minute slots.
pub const DAILY_PERIOD_SLOTS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketSlot {
    pub slot_index: usize,
    pub spot_price: f64,
    pub spot_avail: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotTrace {
    slots: Vec<MarketSlot>,
    on_demand_price: f64,
    slot_minutes: u32,
}

impl SpotTrace {
    /// Builds a trace from `(spot_price, spot_avail)` pairs, assigning slot
    /// indices from zero.
    pub fn from_series(prices: &[f64], avail: &[u32], on_demand_price: f64) -> Result<Self> {
        if prices.len() != avail.len() {
            return Err(Error::InvalidParameter(format!(
                "price series has {} slots but availability has {}",
                prices.len(),
                avail.len()
            )));
        }
        let slots = prices
            .iter()
            .zip(avail)
            .enumerate()
            .map(|(i, (&p, &a))| MarketSlot {
                slot_index: i,
                spot_price: p,
                spot_avail: a,
            })
            .collect();
        Self::new(slots, on_demand_price)
    }

    pub fn new(slots: Vec<MarketSlot>, on_demand_price: f64) -> Result<Self> {
        if !(on_demand_price > 0.0 && on_demand_price.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "on-demand price must be positive, got {on_demand_price}"
            )));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.slot_index != i {
                return Err(Error::SlotGap {
                    line: i + 2,
                    expected: i,
                    found: s.slot_index,
                });
            }
            if !(s.spot_price >= 0.0 && s.spot_price.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "slot {i}: spot price must be a nonnegative number, got {}",
                    s.spot_price
                )));
            }
        }
        Ok(SpotTrace {
            slots,
            on_demand_price,
            slot_minutes: DEFAULT_SLOT_MINUTES,
        })
    }

    pub fn slots(&self) -> &[MarketSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, index: usize) -> Result<&MarketSlot> {
        self.slots.get(index).ok_or(Error::TraceRange {
            requested: index,
            available: self.slots.len(),
        })
    }

    pub fn on_demand_price(&self) -> f64 {
        self.on_demand_price
    }

    pub fn slot_minutes(&self) -> u32 {
        self.slot_minutes
    }

    pub fn prices(&self) -> impl Iterator<Item = f64> + '_ {
        self.slots.iter().map(|s| s.spot_price)
    }

    pub fn avails(&self) -> impl Iterator<Item = u32> + '_ {
        self.slots.iter().map(|s| s.spot_avail)
    }

    pub fn mean_price(&self) -> f64 {
        mean(self.prices())
    }

    pub fn mean_avail(&self) -> f64 {
        mean(self.avails().map(f64::from))
    }

    /// Slots `[start, start + len)` re-indexed from zero.
    pub fn window(&self, start: usize, len: usize) -> Result<SpotTrace> {
        let end = start + len;
        if end > self.slots.len() {
            return Err(Error::TraceRange {
                requested: end.saturating_sub(1),
                available: self.slots.len(),
            });
        }
        let slots = self.slots[start..end]
            .iter()
            .enumerate()
            .map(|(i, s)| MarketSlot {
                slot_index: i,
                ..*s
            })
            .collect();
        Ok(SpotTrace {
            slots,
            on_demand_price: self.on_demand_price,
            slot_minutes: self.slot_minutes,
        })
    }

    /// Writes the trace in the CSV exchange format. Prices use the shortest
    /// round-tripping decimal, so `load_trace` reproduces them exactly.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for s in &self.slots {
            writeln!(out, "{},{},{}", s.slot_index, s.spot_price, s.spot_avail)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is ASCII")
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Parses a trace CSV (`slot,spot_price,spot_avail`) with the default
/// on-demand price of 1.
pub fn load_trace<R: BufRead>(source: R) -> Result<SpotTrace> {
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    if header.trim_end_matches('\r') != TRACE_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{TRACE_HEADER}`, found `{header}`"),
        });
    }

    let mut slots = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let bad = |what: &str, raw: &str| Error::Parse {
            line: line_no,
            message: format!("invalid {what} `{raw}`"),
        };
        let slot: usize = fields[0].parse().map_err(|_| bad("slot", fields[0]))?;
        let price: f64 = fields[1].parse().map_err(|_| bad("spot_price", fields[1]))?;
        if !(price >= 0.0 && price.is_finite()) {
            return Err(bad("spot_price", fields[1]));
        }
        let avail: u32 = fields[2].parse().map_err(|_| bad("spot_avail", fields[2]))?;
        if slot != slots.len() {
            return Err(Error::SlotGap {
                line: line_no,
                expected: slots.len(),
                found: slot,
            });
        }
        slots.push(MarketSlot {
            slot_index: slot,
            spot_price: price,
            spot_avail: avail,
        });
    }
    SpotTrace::new(slots, 1.0)
}

/// Round half up, then clamp into `[0, cap]`.
pub(crate) fn round_count(x: f64, cap: u32) -> u32 {
    let r = (x + 0.5).floor();
    if r <= 0.0 {
        0
    } else if r >= cap as f64 {
        cap
    } else {
        r as u32
    }
}

/// Rescales prices against the on-demand reference and availability by a
/// regional scale factor, capping availability at `avail_cap`.
pub fn normalize_trace(
    raw: &SpotTrace,
    od_reference_price: f64,
    avail_scale: f64,
    avail_cap: u32,
) -> Result<SpotTrace> {
    if !(od_reference_price > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "od_reference_price must be positive, got {od_reference_price}"
        )));
    }
    if !(avail_scale > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "avail_scale must be positive, got {avail_scale}"
        )));
    }
    let slots = raw
        .slots
        .iter()
        .map(|s| MarketSlot {
            slot_index: s.slot_index,
            spot_price: s.spot_price / od_reference_price,
            spot_avail: round_count(s.spot_avail as f64 * avail_scale, avail_cap),
        })
        .collect();
    Ok(SpotTrace {
        slots,
        on_demand_price: 1.0,
        slot_minutes: raw.slot_minutes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSynthSpec {
    pub length: usize,
    pub base_avail: f64,
    pub avail_amplitude: f64,
    pub base_price: f64,
    pub price_amplitude: f64,
    /// Relative per-slot noise: each series is perturbed by
    /// `jitter * base * U(-1, 1)`.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for TraceSynthSpec {
    fn default() -> Self {
        TraceSynthSpec {
            length: 48 * 60,
            base_avail: 6.0,
            avail_amplitude: 4.0,
            base_price: 0.5,
            price_amplitude: 0.2,
            jitter: 0.2,
            seed: 0,
        }
    }
}

/// Daily-periodic synthetic trace. Deterministic in `spec.seed`.
pub fn synthesize_trace(spec: &TraceSynthSpec) -> Result<SpotTrace> {
    if spec.length == 0 {
        return Err(Error::InvalidParameter("trace length must be at least 1".into()));
    }
    if !(spec.base_price > 0.0) {
        return Err(Error::InvalidParameter("base_price must be positive".into()));
    }
    for (name, v) in [
        ("base_avail", spec.base_avail),
        ("avail_amplitude", spec.avail_amplitude),
        ("price_amplitude", spec.price_amplitude),
        ("jitter", spec.jitter),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be nonnegative")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slots = (0..spec.length)
        .map(|i| {
            let phase = (2.0 * PI * i as f64 / DAILY_PERIOD_SLOTS as f64).sin();
            let (avail_noise, price_noise) = if spec.jitter > 0.0 {
                (
                    rng.random_range(-1.0..=1.0) * spec.jitter * spec.base_avail,
                    rng.random_range(-1.0..=1.0) * spec.jitter * spec.base_price,
                )
            } else {
                (0.0, 0.0)
            };
            let avail = spec.base_avail + spec.avail_amplitude * phase + avail_noise;
            let price = spec.base_price + spec.price_amplitude * phase + price_noise;
            MarketSlot {
                slot_index: i,
                spot_price: price.max(0.0),
                spot_avail: round_count(avail, u32::MAX),
            }
        })
        .collect();
    SpotTrace::new(slots, 1.0)
}
