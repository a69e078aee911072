//! Order supply of the digital twin: arrival rates, origin-destination
//! probabilities, preparation times, and transaction history.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::hexgrid::{GridId, ServiceRegion};

/// Absolute time in minutes since 1970-01-01T00:00.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Minute(pub i64);

pub const MINUTES_PER_DAY: i64 = 1440;

/// 2024-01-06, a Saturday. Simulated shifts are dated relative to this day.
pub const SHIFT_REFERENCE_DAY: i64 = 19_728;
/// 2023-01-07, a Saturday. Synthetic histories start on or after this day.
pub const HISTORY_REFERENCE_DAY: i64 = 19_364;

impl Minute {
    pub fn from_day(day: i64, minute_of_day: i64) -> Self {
        Minute(day * MINUTES_PER_DAY + minute_of_day)
    }

    pub fn day(self) -> i64 {
        self.0.div_euclid(MINUTES_PER_DAY)
    }

    pub fn minute_of_day(self) -> i64 {
        self.0.rem_euclid(MINUTES_PER_DAY)
    }

    pub fn hour(self) -> u32 {
        (self.minute_of_day() / 60) as u32
    }

    /// Monday is 0.
    pub fn day_of_week(self) -> u8 {
        (self.day() + 3).rem_euclid(7) as u8
    }

    pub fn plus(self, minutes: i64) -> Self {
        Minute(self.0 + minutes)
    }
}

/// First day on or after `reference` falling on `day_of_week` (Monday = 0).
pub fn first_weekday_on_or_after(reference: i64, day_of_week: u8) -> i64 {
    let dow = (reference + 3).rem_euclid(7);
    reference + (day_of_week as i64 - dow).rem_euclid(7)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CourierId(pub u32);

impl fmt::Display for OrderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for CourierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStatus {
    Pending,
    Assigned,
    PickedUp,
    Delivered,
    Overdue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    /// Minute within the shift at which the order was placed.
    pub placed_at: f64,
    pub restaurant: GridId,
    pub household: GridId,
    /// Preparation time announced by the restaurant.
    pub est_prep: f64,
    /// Preparation time actually realized; hidden from decision makers.
    pub prep: f64,
    pub status: OrderStatus,
    pub assigned_courier: Option<CourierId>,
    pub courier_arrival: Option<f64>,
}

impl Order {
    pub fn est_ready(&self) -> f64 {
        self.placed_at + self.est_prep
    }

    pub fn ready_time(&self) -> f64 {
        self.placed_at + self.prep
    }
}

/// One historical transaction: placement minute, origin and destination grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub timestamp: Minute,
    pub restaurant: GridId,
    pub household: GridId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEntry {
    pub grid: GridId,
    pub hour: u32,
    pub rate: f64,
}

/// Destination probabilities for one restaurant grid, aligned with the
/// region's grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdRow {
    pub restaurant: GridId,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepParams {
    pub mean: f64,
    pub variance: f64,
    pub noise_variance: f64,
}

/// Full description of one simulated market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScenarioDoc", into = "ScenarioDoc")]
pub struct ScenarioConfig {
    pub region: ServiceRegion,
    rates: BTreeMap<(GridId, u32), f64>,
    od: BTreeMap<GridId, Vec<f64>>,
    od_cumulative: BTreeMap<GridId, Vec<f64>>,
    pub fleet_size: usize,
    pub shift_start_hour: u32,
    pub shift_minutes: u32,
    /// Weekday of the simulated shift, Monday = 0.
    pub day_of_week: u8,
    pub prep_mean_min: f64,
    pub prep_var: f64,
    pub prep_noise_var: f64,
    pub overdue_limit_min: f64,
    pub idle_threshold_min: f64,
    pub max_delivery_tasks: usize,
    pub seed: u64,
}

/// Serialized form of [`ScenarioConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioDoc {
    pub region: ServiceRegion,
    pub hourly_rates: Vec<RateEntry>,
    pub od_probs: Vec<OdRow>,
    pub fleet_size: usize,
    pub shift_start_hour: u32,
    pub shift_minutes: u32,
    pub day_of_week: u8,
    pub prep_mean_min: f64,
    pub prep_var: f64,
    pub prep_noise_var: f64,
    pub overdue_limit_min: f64,
    pub idle_threshold_min: f64,
    pub max_delivery_tasks: usize,
    pub seed: u64,
}

impl TryFrom<ScenarioDoc> for ScenarioConfig {
    type Error = ConfigError;

    fn try_from(doc: ScenarioDoc) -> Result<Self, ConfigError> {
        let mut cfg = ScenarioConfig::empty(doc.region, doc.fleet_size);
        cfg.shift_start_hour = doc.shift_start_hour;
        cfg.shift_minutes = doc.shift_minutes;
        cfg.day_of_week = doc.day_of_week;
        cfg.prep_mean_min = doc.prep_mean_min;
        cfg.prep_var = doc.prep_var;
        cfg.prep_noise_var = doc.prep_noise_var;
        cfg.overdue_limit_min = doc.overdue_limit_min;
        cfg.idle_threshold_min = doc.idle_threshold_min;
        cfg.max_delivery_tasks = doc.max_delivery_tasks;
        cfg.seed = doc.seed;
        for e in doc.hourly_rates {
            cfg.set_rate(e.grid, e.hour, e.rate)?;
        }
        for row in doc.od_probs {
            cfg.set_od_row(row.restaurant, row.probs)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<ScenarioConfig> for ScenarioDoc {
    fn from(cfg: ScenarioConfig) -> Self {
        ScenarioDoc {
            hourly_rates: cfg.rate_entries().collect(),
            od_probs: cfg.od.iter().map(|(g, p)| OdRow { restaurant: *g, probs: p.clone() }).collect(),
            region: cfg.region,
            fleet_size: cfg.fleet_size,
            shift_start_hour: cfg.shift_start_hour,
            shift_minutes: cfg.shift_minutes,
            day_of_week: cfg.day_of_week,
            prep_mean_min: cfg.prep_mean_min,
            prep_var: cfg.prep_var,
            prep_noise_var: cfg.prep_noise_var,
            overdue_limit_min: cfg.overdue_limit_min,
            idle_threshold_min: cfg.idle_threshold_min,
            max_delivery_tasks: cfg.max_delivery_tasks,
            seed: cfg.seed,
        }
    }
}

impl ScenarioConfig {
    /// A config with the default timing and prep parameters, no demand.
    pub fn empty(region: ServiceRegion, fleet_size: usize) -> Self {
        ScenarioConfig {
            region,
            rates: BTreeMap::new(),
            od: BTreeMap::new(),
            od_cumulative: BTreeMap::new(),
            fleet_size,
            shift_start_hour: 19,
            shift_minutes: 120,
            day_of_week: 5,
            prep_mean_min: 10.0,
            prep_var: 2.0,
            prep_noise_var: 1.0,
            overdue_limit_min: 10.0,
            idle_threshold_min: 5.0,
            max_delivery_tasks: 2,
            seed: 0,
        }
    }

    /// The default Saturday-evening market on the 5x5 region.
    ///
    /// About 63 orders per hour over the shift, spread over the nine
    /// restaurant grids with grids 8, 14 and 18 at half weight. Hour 18 is
    /// included as a quieter pre-shift hour that seeds the demand
    /// forecaster's lag window.
    pub fn default_market() -> Self {
        let region = ServiceRegion::default_5x5();
        let mut cfg = ScenarioConfig::empty(region, 25);
        let weights: Vec<(GridId, f64)> = cfg
            .region
            .restaurant_ids()
            .map(|g| (g, if matches!(g.0, 8 | 14 | 18) { 0.5 } else { 1.0 }))
            .collect();
        let total_weight: f64 = weights.iter().map(|(_, w)| w).sum();
        for (hour, total) in [(18u32, 45.0), (19, 66.0), (20, 60.0)] {
            for (g, w) in &weights {
                cfg.set_rate(*g, hour, total * w / total_weight).expect("valid default rate");
            }
        }
        // Destinations are spread over the whole region; the dense
        // restaurant center holds fewer households than the outskirts.
        let dest_weights: Vec<f64> = cfg
            .region
            .ids()
            .iter()
            .map(|g| if cfg.region.is_restaurant(*g) { 0.6 } else { 1.0 })
            .collect();
        let total: f64 = dest_weights.iter().sum();
        let probs: Vec<f64> = dest_weights.iter().map(|w| w / total).collect();
        for (g, _) in &weights {
            cfg.set_od_row(*g, probs.clone()).expect("valid default od row");
        }
        cfg
    }

    pub fn set_rate(&mut self, grid: GridId, hour: u32, rate: f64) -> Result<(), ConfigError> {
        if !self.region.is_restaurant(grid) {
            return Err(ConfigError::RateOnHouseholdGrid(grid));
        }
        if !(rate >= 0.0) || !rate.is_finite() {
            return Err(ConfigError::NegativeRate { grid, hour, rate });
        }
        self.rates.insert((grid, hour), rate);
        Ok(())
    }

    pub fn set_od_row(&mut self, restaurant: GridId, probs: Vec<f64>) -> Result<(), ConfigError> {
        if !self.region.is_restaurant(restaurant) {
            return Err(ConfigError::Domain(crate::error::DomainError::UnknownGrid(restaurant)));
        }
        if probs.len() != self.region.len() {
            return Err(ConfigError::OdWrongLength {
                grid: restaurant,
                got: probs.len(),
                expected: self.region.len(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(ConfigError::OdNotNormalized { grid: restaurant, sum });
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        self.od_cumulative.insert(restaurant, cumulative);
        self.od.insert(restaurant, probs);
        Ok(())
    }

    /// Orders per hour for `grid` at `hour`; `None` when not configured.
    pub fn rate(&self, grid: GridId, hour: u32) -> Option<f64> {
        self.rates.get(&(grid, hour)).copied()
    }

    pub fn rate_entries(&self) -> impl Iterator<Item = RateEntry> + '_ {
        self.rates.iter().map(|((grid, hour), rate)| RateEntry { grid: *grid, hour: *hour, rate: *rate })
    }

    /// Distinct hours that carry a rate, ascending.
    pub fn configured_hours(&self) -> Vec<u32> {
        let hours: BTreeSet<u32> = self.rates.keys().map(|(_, h)| *h).collect();
        hours.into_iter().collect()
    }

    pub fn od_row(&self, restaurant: GridId) -> Option<&[f64]> {
        self.od.get(&restaurant).map(Vec::as_slice)
    }

    /// Hours covered by the shift, ascending.
    pub fn shift_hours(&self) -> impl Iterator<Item = u32> {
        let first = self.shift_start_hour;
        let last = self.shift_start_hour + self.shift_minutes.saturating_sub(1) / 60;
        first..=last
    }

    pub fn hour_at(&self, minute_in_shift: u32) -> u32 {
        self.shift_start_hour + minute_in_shift / 60
    }

    /// Absolute start of the simulated shift.
    pub fn shift_start(&self) -> Minute {
        let day = first_weekday_on_or_after(SHIFT_REFERENCE_DAY, self.day_of_week);
        Minute::from_day(day, self.shift_start_hour as i64 * 60)
    }

    pub fn prep_params(&self) -> PrepParams {
        PrepParams { mean: self.prep_mean_min, variance: self.prep_var, noise_variance: self.prep_noise_var }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fleet_size == 0 {
            return Err(ConfigError::EmptyFleet);
        }
        if self.shift_minutes == 0 {
            return Err(ConfigError::InvalidParameter { name: "shift_minutes", reason: "must be positive".into() });
        }
        if self.day_of_week > 6 {
            return Err(ConfigError::InvalidParameter { name: "day_of_week", reason: "must be 0..=6".into() });
        }
        if self.max_delivery_tasks == 0 {
            return Err(ConfigError::InvalidParameter { name: "max_delivery_tasks", reason: "must be positive".into() });
        }
        for (name, v) in [
            ("prep_mean_min", self.prep_mean_min),
            ("prep_var", self.prep_var),
            ("prep_noise_var", self.prep_noise_var),
            ("overdue_limit_min", self.overdue_limit_min),
            ("idle_threshold_min", self.idle_threshold_min),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(ConfigError::InvalidParameter { name, reason: alloc::format!("{v} is not a finite non-negative value") });
            }
        }
        for g in self.region.restaurant_ids() {
            if !self.od.contains_key(&g) {
                return Err(ConfigError::MissingOdRow(g));
            }
            for hour in self.shift_hours() {
                if self.rate(g, hour).is_none() {
                    return Err(ConfigError::MissingRate { grid: g, hour });
                }
            }
        }
        Ok(())
    }

    fn sample_household<R: Rng + ?Sized>(&self, restaurant: GridId, rng: &mut R) -> GridId {
        let cumulative = &self.od_cumulative[&restaurant];
        let u: f64 = rng.random();
        let i = cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1);
        // Skip zero-probability tail entries reached through rounding.
        let i = (0..=i).rev().find(|j| self.od[&restaurant][*j] > 0.0).unwrap_or(i);
        self.region.ids()[i]
    }

    /// Placements for one minute at `hour`: one Poisson draw per
    /// restaurant grid, then a destination for each order.
    pub fn sample_arrivals<R: Rng + ?Sized>(
        &self,
        hour: u32,
        rng: &mut R,
    ) -> Result<Vec<(GridId, GridId)>, ConfigError> {
        let mut out = Vec::new();
        for g in self.region.restaurant_ids() {
            let rate = self.rate(g, hour).ok_or(ConfigError::MissingRate { grid: g, hour })?;
            let count = poisson(rate / 60.0, rng);
            for _ in 0..count {
                out.push((g, self.sample_household(g, rng)));
            }
        }
        Ok(out)
    }
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite Poisson mean");
    let x: f64 = dist.sample(rng);
    x as u64
}

/// Draws `(estimated, actual)` preparation minutes, both clamped at zero.
pub fn sample_prep<R: Rng + ?Sized>(params: &PrepParams, rng: &mut R) -> (f64, f64) {
    let est = Normal::new(params.mean, libm::sqrt(params.variance))
        .expect("finite prep distribution")
        .sample(rng)
        .max(0.0);
    let noise = Normal::new(0.0, libm::sqrt(params.noise_variance))
        .expect("finite prep noise")
        .sample(rng);
    (est, (est + noise).max(0.0))
}

/// Orders placed at minute `t` of the shift. Ids continue from `next_id`.
pub fn sample_orders<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    t: u32,
    rng: &mut R,
    next_id: &mut u64,
) -> Result<Vec<Order>, ConfigError> {
    let arrivals = config.sample_arrivals(config.hour_at(t), rng)?;
    let prep = config.prep_params();
    let mut orders = Vec::with_capacity(arrivals.len());
    for (restaurant, household) in arrivals {
        let (est_prep, actual) = sample_prep(&prep, rng);
        orders.push(Order {
            id: OrderId(*next_id),
            placed_at: t as f64,
            restaurant,
            household,
            est_prep,
            prep: actual,
            status: OrderStatus::Pending,
            assigned_courier: None,
            courier_arrival: None,
        });
        *next_id += 1;
    }
    Ok(orders)
}

/// Synthetic transaction history: `num_weeks` days on the configured
/// weekday, covering every hour that carries a rate.
pub fn synth_history<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    num_weeks: u32,
    rng: &mut R,
) -> Result<Vec<TransactionRecord>, ConfigError> {
    if num_weeks == 0 {
        return Err(ConfigError::InvalidParameter { name: "num_weeks", reason: "must be at least 1".into() });
    }
    let first_day = first_weekday_on_or_after(HISTORY_REFERENCE_DAY, config.day_of_week);
    let hours = config.configured_hours();
    let mut records = Vec::new();
    for week in 0..num_weeks as i64 {
        let day = first_day + 7 * week;
        for &hour in &hours {
            for minute in 0..60 {
                let stamp = Minute::from_day(day, hour as i64 * 60 + minute);
                for g in config.region.restaurant_ids() {
                    let rate = config.rate(g, hour).unwrap_or(0.0);
                    for _ in 0..poisson(rate / 60.0, rng) {
                        records.push(TransactionRecord {
                            timestamp: stamp,
                            restaurant: g,
                            household: config.sample_household(g, rng),
                        });
                    }
                }
            }
        }
    }
    Ok(records)
}

/// Arrival rates and destination probabilities estimated from history.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub hourly_rates: BTreeMap<(GridId, u32), f64>,
    pub od_probs: BTreeMap<GridId, Vec<f64>>,
    /// Restaurant grids without any observed order; their row is uniform.
    pub uniform_fallback: Vec<GridId>,
    pub days_observed: usize,
}

pub fn estimate_rates(history: &[TransactionRecord], region: &ServiceRegion) -> Result<RateEstimate, ConfigError> {
    if history.is_empty() {
        return Err(ConfigError::EmptyHistory);
    }
    let mut days = BTreeSet::new();
    let mut hours = BTreeSet::new();
    let mut counts: BTreeMap<(GridId, u32), u64> = BTreeMap::new();
    let mut od_counts: BTreeMap<GridId, Vec<u64>> = BTreeMap::new();
    for rec in history {
        if !region.is_restaurant(rec.restaurant) {
            return Err(ConfigError::BadOrigin(rec.restaurant));
        }
        let dest = region.index_of(rec.household).ok_or(ConfigError::BadDestination(rec.household))?;
        days.insert(rec.timestamp.day());
        hours.insert(rec.timestamp.hour());
        *counts.entry((rec.restaurant, rec.timestamp.hour())).or_default() += 1;
        od_counts.entry(rec.restaurant).or_insert_with(|| alloc::vec![0; region.len()])[dest] += 1;
    }
    let n_days = days.len() as f64;
    let mut hourly_rates = BTreeMap::new();
    let mut od_probs = BTreeMap::new();
    let mut uniform_fallback = Vec::new();
    for g in region.restaurant_ids() {
        for &h in &hours {
            let c = counts.get(&(g, h)).copied().unwrap_or(0);
            hourly_rates.insert((g, h), c as f64 / n_days);
        }
        match od_counts.get(&g) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                od_probs.insert(g, row.iter().map(|c| *c as f64 / total as f64).collect());
            }
            None => {
                uniform_fallback.push(g);
                od_probs.insert(g, alloc::vec![1.0 / region.len() as f64; region.len()]);
            }
        }
    }
    Ok(RateEstimate { hourly_rates, od_probs, uniform_fallback, days_observed: days.len() })
}

impl RateEstimate {
    /// Overwrites the demand side of `base` with this estimate.
    pub fn apply_to(&self, base: &ScenarioConfig) -> Result<ScenarioConfig, ConfigError> {
        let mut cfg = base.clone();
        cfg.rates.clear();
        for ((g, h), r) in &self.hourly_rates {
            cfg.set_rate(*g, *h, *r)?;
        }
        for (g, p) in &self.od_probs {
            // Renormalize to absorb floating-point drift in the division.
            let s: f64 = p.iter().sum();
            cfg.set_od_row(*g, p.iter().map(|x| x / s).collect())?;
        }
        Ok(cfg)
    }
}
