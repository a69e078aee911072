//! Shift metrics from event logs, outlier screening, the Mann-Whitney U
//! test and framework comparison tables.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::forecast::DemandPredictor;
use crate::scenario::{CourierId, OrderId, ScenarioConfig};
use crate::simcore::{
    CourierStatus, DispatchPolicy, Event, EventKind, Mode, SimError, SimOptions, SimState, SteerPolicy,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("event log has no shift_start record")]
    MissingShiftStart,
    #[error("event log ends before shift_end")]
    MissingShiftEnd,
    #[error("log fleet size {log} does not match expected {expected}")]
    FleetMismatch { log: usize, expected: usize },
    #[error("event refers to unknown order {0}")]
    UnknownOrder(OrderId),
    #[error("event refers to unknown courier {0}")]
    UnknownCourier(CourierId),
    #[error("sample sizes {x} and {y} are too small, need at least 2 each")]
    TooFewSamples { x: usize, y: usize },
}

/// Count, mean and sample standard deviation. Empty sets report zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Summary::default();
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let std = if n > 1 { libm::sqrt(ss / (n - 1) as f64) } else { 0.0 };
        Summary { count: n, mean, std }
    }

    /// Summary of the union of the samples behind `parts`.
    pub fn pooled(parts: &[Summary]) -> Self {
        let n: usize = parts.iter().map(|p| p.count).sum();
        if n == 0 {
            return Summary::default();
        }
        let mean = parts.iter().map(|p| p.mean * p.count as f64).sum::<f64>() / n as f64;
        let ss: f64 = parts
            .iter()
            .map(|p| p.std * p.std * p.count.saturating_sub(1) as f64 + p.count as f64 * (p.mean - mean) * (p.mean - mean))
            .sum();
        let std = if n > 1 { libm::sqrt(ss / (n - 1) as f64) } else { 0.0 };
        Summary { count: n, mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CourierArrays {
    pub delivery_minutes: Vec<f64>,
    pub idle_minutes: Vec<f64>,
    pub orders_served: Vec<u32>,
    pub distance_travelled: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub orders: u32,
    pub delivered: u32,
    pub overdue: u32,
    /// Courier arrival minus actual ready time, delivered orders only.
    pub time_gap: Summary,
    pub pickup_distance: Summary,
    pub overdue_rate: f64,
    pub nsd: f64,
    pub psd: f64,
    pub couriers: CourierArrays,
    pub delivery_minutes: Summary,
    pub idle_minutes: Summary,
    pub orders_received: Summary,
    pub travel_distance: Summary,
}

#[derive(Debug, Clone, Copy, Default)]
struct OrderLog {
    ready: f64,
    arrival: Option<f64>,
    delivered: bool,
}

/// Recomputes every shift metric from a complete event log.
pub fn compute_metrics(events: &[Event], fleet: usize) -> Result<RunMetrics, EvalError> {
    let (log_fleet, minutes) = events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::ShiftStart { fleet, minutes } => Some((fleet, minutes)),
            _ => None,
        })
        .ok_or(EvalError::MissingShiftStart)?;
    if log_fleet != fleet {
        return Err(EvalError::FleetMismatch { log: log_fleet, expected: fleet });
    }
    let mut orders: BTreeMap<OrderId, OrderLog> = BTreeMap::new();
    let mut status = vec![(CourierStatus::Idle, 0.0f64); fleet];
    let mut arrays = CourierArrays {
        delivery_minutes: vec![0.0; fleet],
        idle_minutes: vec![0.0; fleet],
        orders_served: vec![0; fleet],
        distance_travelled: vec![0; fleet],
    };
    let mut pickups = Vec::new();
    let mut overdue = 0u32;
    let mut balance: BTreeMap<u64, (i64, i64)> = BTreeMap::new();
    let mut ended = false;

    fn accrue(arrays: &mut CourierArrays, i: usize, st: CourierStatus, spent: f64) {
        match st {
            CourierStatus::Idle => arrays.idle_minutes[i] += spent,
            CourierStatus::Reallocating => {}
            _ => arrays.delivery_minutes[i] += spent,
        }
    }
    let slot = |c: CourierId| -> Result<usize, EvalError> {
        let i = c.0 as usize;
        if i < fleet { Ok(i) } else { Err(EvalError::UnknownCourier(c)) }
    };

    for e in events {
        match e.kind {
            EventKind::CourierStart { courier, .. } => {
                let i = slot(courier)?;
                status[i] = (CourierStatus::Idle, e.time);
            }
            EventKind::OrderPlaced { order, ready, .. } => {
                orders.insert(order, OrderLog { ready, ..OrderLog::default() });
            }
            EventKind::Assigned { order, courier, pickup_distance, .. } => {
                orders.get(&order).ok_or(EvalError::UnknownOrder(order))?;
                arrays.orders_served[slot(courier)?] += 1;
                pickups.push(pickup_distance as f64);
            }
            EventKind::Overdue { order } => {
                orders.get(&order).ok_or(EvalError::UnknownOrder(order))?;
                overdue += 1;
            }
            EventKind::ArrivedAtRestaurant { order, .. } => {
                orders.get_mut(&order).ok_or(EvalError::UnknownOrder(order))?.arrival = Some(e.time);
            }
            EventKind::Delivered { order, .. } => {
                orders.get_mut(&order).ok_or(EvalError::UnknownOrder(order))?.delivered = true;
            }
            EventKind::Status { courier, to, .. } => {
                let i = slot(courier)?;
                let (st, since) = status[i];
                accrue(&mut arrays, i, st, e.time - since);
                status[i] = (to, e.time);
            }
            EventKind::Hop { courier, .. } => {
                arrays.distance_travelled[slot(courier)?] += 1;
            }
            EventKind::GridBalance { couriers, orders: n, .. } => {
                let gap = couriers as i64 - n as i64;
                let entry = balance.entry(e.time.to_bits()).or_default();
                entry.0 += gap.min(0);
                entry.1 += gap.max(0);
            }
            EventKind::ShiftEnd => {
                for (i, &(st, since)) in status.iter().enumerate() {
                    accrue(&mut arrays, i, st, e.time - since);
                }
                ended = true;
                break;
            }
            EventKind::ShiftStart { .. } | EventKind::Postponed { .. } | EventKind::PickedUp { .. } => {}
            EventKind::Reallocated { courier, .. } => {
                slot(courier)?;
            }
        }
    }
    if !ended {
        return Err(EvalError::MissingShiftEnd);
    }

    let gaps: Vec<f64> = orders
        .values()
        .filter(|o| o.delivered)
        .filter_map(|o| o.arrival.map(|a| a - o.ready))
        .collect();
    let steps = minutes.max(1) as f64;
    let nsd = balance.values().map(|b| b.0).sum::<i64>() as f64 / steps;
    let psd = balance.values().map(|b| b.1).sum::<i64>() as f64 / steps;
    let n_orders = orders.len() as u32;
    let as_f64 = |v: &[u32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok(RunMetrics {
        orders: n_orders,
        delivered: orders.values().filter(|o| o.delivered).count() as u32,
        overdue,
        time_gap: Summary::of(&gaps),
        pickup_distance: Summary::of(&pickups),
        overdue_rate: if n_orders == 0 { 0.0 } else { overdue as f64 / n_orders as f64 },
        nsd,
        psd,
        delivery_minutes: Summary::of(&arrays.delivery_minutes),
        idle_minutes: Summary::of(&arrays.idle_minutes),
        orders_received: Summary::of(&as_f64(&arrays.orders_served)),
        travel_distance: Summary::of(&as_f64(&arrays.distance_travelled)),
        couriers: arrays,
    })
}

/// Fewer runs than this are never screened for outliers.
pub const MIN_RUNS_FOR_OUTLIERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierScreen {
    pub kept: Vec<usize>,
    pub excluded: Vec<usize>,
    /// Nearest-rank 95th percentile of the screened values.
    pub cut: Option<f64>,
    pub warning: Option<String>,
}

/// Drops runs whose mean time gap is above the nearest-rank 95th
/// percentile of the set.
pub fn exclude_outliers(mean_gaps: &[f64]) -> OutlierScreen {
    let n = mean_gaps.len();
    if n < MIN_RUNS_FOR_OUTLIERS {
        return OutlierScreen {
            kept: (0..n).collect(),
            excluded: Vec::new(),
            cut: None,
            warning: Some(format!("{n} runs is below {MIN_RUNS_FOR_OUTLIERS}; no outliers excluded")),
        };
    }
    let mut sorted = mean_gaps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (95 * n).div_ceil(100);
    let cut = sorted[rank - 1];
    let (excluded, kept) = (0..n).partition(|&i| mean_gaps[i] > cut);
    OutlierScreen { kept, excluded, cut: Some(cut), warning: None }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Rank-sum statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value from the tie-corrected normal approximation with
    /// continuity correction.
    pub p: f64,
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitney, EvalError> {
    let (n1, n2) = (x.len(), y.len());
    if n1 < 2 || n2 < 2 {
        return Err(EvalError::TooFewSamples { x: n1, y: n2 });
    }
    let mut pooled: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pooled.len();
    let mut rank_x = 0.0;
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        rank_x += mid * pooled[i..=j].iter().filter(|p| p.1).count() as f64;
        i = j + 1;
    }
    let (a, b, nn) = (n1 as f64, n2 as f64, n as f64);
    let u = rank_x - a * (a + 1.0) / 2.0;
    let mu = a * b / 2.0;
    let var = a * b / 12.0 * ((nn + 1.0) - ties / (nn * (nn - 1.0)));
    if var <= 0.0 {
        return Ok(MannWhitney { u, p: 1.0 });
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / libm::sqrt(var);
    let p = libm::erfc(z / core::f64::consts::SQRT_2).min(1.0);
    Ok(MannWhitney { u, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatcher {
    Strategic,
    Myopic,
    NearestIdle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub dispatcher: Dispatcher,
    pub steering: bool,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant { dispatcher: Dispatcher::Strategic, steering: false },
        Variant { dispatcher: Dispatcher::Strategic, steering: true },
        Variant { dispatcher: Dispatcher::Myopic, steering: false },
        Variant { dispatcher: Dispatcher::Myopic, steering: true },
        Variant { dispatcher: Dispatcher::NearestIdle, steering: false },
        Variant { dispatcher: Dispatcher::NearestIdle, steering: true },
    ];

    pub fn name(self) -> &'static str {
        match (self.dispatcher, self.steering) {
            (Dispatcher::Strategic, false) => "strategic",
            (Dispatcher::Strategic, true) => "strategic+steer",
            (Dispatcher::Myopic, false) => "myopic",
            (Dispatcher::Myopic, true) => "myopic+steer",
            (Dispatcher::NearestIdle, false) => "nearest_idle",
            (Dispatcher::NearestIdle, true) => "nearest_idle+steer",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Information mode of the simulator; Nearest-Idle steers with
    /// anticipated gaps.
    pub fn mode(self) -> Mode {
        match self.dispatcher {
            Dispatcher::Myopic => Mode::Myopic,
            _ => Mode::Strategic,
        }
    }
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Runs one evaluation shift and returns the finished simulator.
pub fn run_shift(
    scenario: Arc<ScenarioConfig>,
    predictor: Arc<DemandPredictor>,
    mode: Mode,
    seed: u64,
    dispatch: &mut dyn DispatchPolicy,
    steering: Option<&mut dyn SteerPolicy>,
) -> Result<SimState, SimError> {
    let mut sim = SimState::new(scenario, predictor, mode, seed, SimOptions { record_events: true })?;
    sim.run(dispatch, steering)?;
    Ok(sim)
}

/// Metric families reported per variant, in table order.
pub const FAMILIES: [&str; 9] = [
    "time_gap",
    "pickup_distance",
    "overdue_rate",
    "nsd",
    "psd",
    "orders_received_std",
    "delivery_minutes",
    "travel_distance",
    "idle_minutes",
];

/// Per-run summary of one family: the value compared across runs and the
/// within-run spread behind it.
pub fn family_summary(m: &RunMetrics, family: &str) -> Option<Summary> {
    let point = |v: f64| Summary { count: 1, mean: v, std: 0.0 };
    Some(match family {
        "time_gap" => m.time_gap,
        "pickup_distance" => m.pickup_distance,
        "overdue_rate" => Summary { count: m.orders as usize, mean: m.overdue_rate, std: 0.0 },
        "nsd" => point(m.nsd),
        "psd" => point(m.psd),
        "orders_received_std" => point(m.orders_received.std),
        "delivery_minutes" => m.delivery_minutes,
        "travel_distance" => m.travel_distance,
        "idle_minutes" => m.idle_minutes,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub runs: usize,
    /// Mean of per-run means.
    pub avg: f64,
    /// Mean of per-run standard deviations.
    pub std_within: f64,
    /// Standard deviation of per-run means across runs.
    pub std_between: f64,
    /// Standard deviation over all pooled observations.
    pub pooled_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub excluded: Vec<usize>,
    pub warning: Option<String>,
    pub families: BTreeMap<String, FamilyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub family: String,
    pub a: Variant,
    pub b: Variant,
    pub u: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub variants: Vec<VariantSummary>,
    /// Variants that were configured but produced no runs.
    pub missing: Vec<Variant>,
    pub tests: Vec<PairTest>,
}

pub const SIGNIFICANCE: f64 = 0.05;

/// Aggregates matched-seed runs per variant after outlier screening and
/// tests every variant pair on every family.
pub fn compare_frameworks(runs: &[(Variant, Vec<RunMetrics>)]) -> ComparisonReport {
    let mut variants = Vec::new();
    let mut missing = Vec::new();
    let mut kept_runs: Vec<(Variant, Vec<&RunMetrics>)> = Vec::new();
    for (variant, metrics) in runs {
        if metrics.is_empty() {
            missing.push(*variant);
            continue;
        }
        let screen = exclude_outliers(&metrics.iter().map(|m| m.time_gap.mean).collect::<Vec<_>>());
        let kept: Vec<&RunMetrics> = screen.kept.iter().map(|&i| &metrics[i]).collect();
        let mut families = BTreeMap::new();
        for fam in FAMILIES {
            let parts: Vec<Summary> = kept.iter().filter_map(|m| family_summary(m, fam)).collect();
            let means: Vec<f64> = parts.iter().map(|p| p.mean).collect();
            let between = Summary::of(&means);
            let pooled = Summary::pooled(&parts);
            families.insert(
                fam.to_string(),
                FamilyRow {
                    runs: parts.len(),
                    avg: between.mean,
                    std_within: parts.iter().map(|p| p.std).sum::<f64>() / parts.len().max(1) as f64,
                    std_between: between.std,
                    pooled_std: pooled.std,
                },
            );
        }
        variants.push(VariantSummary {
            variant: *variant,
            runs: kept.len(),
            excluded: screen.excluded,
            warning: screen.warning,
            families,
        });
        kept_runs.push((*variant, kept));
    }
    let mut tests = Vec::new();
    for fam in FAMILIES {
        for i in 0..kept_runs.len() {
            for j in i + 1..kept_runs.len() {
                let vals = |k: usize| -> Vec<f64> {
                    kept_runs[k].1.iter().filter_map(|m| family_summary(m, fam)).map(|s| s.mean).collect()
                };
                if let Ok(t) = mann_whitney_u(&vals(i), &vals(j)) {
                    tests.push(PairTest {
                        family: fam.to_string(),
                        a: kept_runs[i].0,
                        b: kept_runs[j].0,
                        u: t.u,
                        p: t.p,
                        significant: t.p < SIGNIFICANCE,
                    });
                }
            }
        }
    }
    ComparisonReport { variants, missing, tests }
}

#[cfg(test)]
mod tests;
