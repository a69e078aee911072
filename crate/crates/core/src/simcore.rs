//! Minute-step agent-based environment: courier and order state machines,
//! the dispatch/steering decision loop, and supply-demand bookkeeping.

use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::forecast::{DemandHistory, DemandPredictor, WINDOW_MINUTES};
use crate::hexgrid::{GridId, ServiceRegion, MINUTES_PER_UNIT};
use crate::scenario::{sample_orders, Minute, Order, OrderStatus, ScenarioConfig};

pub use crate::scenario::{CourierId, OrderId};

/// RNG stream ids derived from one shift seed.
pub const STREAM_ORDERS: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_POLICY: u64 = 3;

/// Horizon within which a busy courier counts as future supply.
pub const ANTICIPATION_MINUTES: f64 = WINDOW_MINUTES as f64;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CourierStatus {
    Idle,
    ToPickup,
    WaitingAtRestaurant,
    ToDelivery,
    Reallocating,
}

impl CourierStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CourierStatus::Idle => "idle",
            CourierStatus::ToPickup => "to_pickup",
            CourierStatus::WaitingAtRestaurant => "waiting_at_restaurant",
            CourierStatus::ToDelivery => "to_delivery",
            CourierStatus::Reallocating => "reallocating",
        }
    }

    /// The courier's legal status machine.
    pub fn can_transition_to(self, to: CourierStatus) -> bool {
        use CourierStatus::*;
        matches!(
            (self, to),
            (Idle, ToPickup)
                | (Idle, Reallocating)
                | (ToPickup, WaitingAtRestaurant)
                | (ToPickup, ToDelivery)
                | (WaitingAtRestaurant, ToDelivery)
                | (ToDelivery, Idle)
                | (ToDelivery, ToPickup)
                | (Reallocating, Idle)
                | (Reallocating, ToPickup)
        )
    }
}

impl fmt::Display for CourierStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether decisions look at current or anticipated supply and demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Strategic,
    Myopic,
}

impl Mode {
    pub fn horizon(self) -> Horizon {
        match self {
            Mode::Strategic => Horizon::Anticipated,
            Mode::Myopic => Horizon::Current,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Strategic => "strategic",
            Mode::Myopic => "myopic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Current,
    Anticipated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Delivery(OrderId),
    Reallocate(GridId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub created_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CourierTotals {
    /// Minutes spent heading to, waiting at, or delivering from restaurants.
    pub delivery_minutes: f64,
    pub idle_minutes: f64,
    /// Grid units moved, including reallocation legs.
    pub distance_travelled: u32,
    /// Delivery tasks received.
    pub orders_served: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct Leg {
    path: Vec<GridId>,
    depart: f64,
    hops_done: usize,
}

impl Leg {
    fn arrive(&self) -> f64 {
        self.depart + (MINUTES_PER_UNIT as usize * (self.path.len() - 1)) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Courier {
    pub id: CourierId,
    pub status: CourierStatus,
    /// Current grid; while moving, the last grid reached on the path.
    pub grid: GridId,
    /// The task being worked on; not part of `queue`.
    pub active: Option<Task>,
    pub queue: VecDeque<Task>,
    pub idle_since: Option<f64>,
    pub totals: CourierTotals,
    leg: Option<Leg>,
    wait_until: f64,
    status_since: f64,
}

impl Courier {
    fn new(id: CourierId, grid: GridId, at: f64) -> Self {
        Courier {
            id,
            status: CourierStatus::Idle,
            grid,
            active: None,
            queue: VecDeque::new(),
            idle_since: Some(at),
            totals: CourierTotals::default(),
            leg: None,
            wait_until: 0.0,
            status_since: at,
        }
    }

    /// Deliveries held, the active one included.
    pub fn delivery_tasks(&self) -> usize {
        let active = matches!(self.active, Some(Task { kind: TaskKind::Delivery(_), .. })) as usize;
        active + self.queue.iter().filter(|t| matches!(t.kind, TaskKind::Delivery(_))).count()
    }

    /// Minute the courier arrives at the end of its current leg.
    pub fn leg_arrival(&self) -> Option<f64> {
        self.leg.as_ref().map(Leg::arrive)
    }

    pub fn leg_destination(&self) -> Option<GridId> {
        self.leg.as_ref().map(|l| *l.path.last().expect("non-empty path"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    ShiftStart { fleet: usize, minutes: u32 },
    CourierStart { courier: CourierId, grid: GridId },
    OrderPlaced { order: OrderId, restaurant: GridId, household: GridId, est_ready: f64, ready: f64 },
    Assigned { order: OrderId, courier: CourierId, pickup_distance: u32, expected_arrival: f64 },
    Postponed { order: OrderId },
    Overdue { order: OrderId },
    ArrivedAtRestaurant { order: OrderId, courier: CourierId },
    PickedUp { order: OrderId, courier: CourierId },
    Delivered { order: OrderId, courier: CourierId },
    Status { courier: CourierId, from: CourierStatus, to: CourierStatus },
    Hop { courier: CourierId, from: GridId, to: GridId },
    Reallocated { courier: CourierId, from: GridId, to: GridId },
    /// Idle couriers and unassigned orders at a grid, logged each minute
    /// after order sampling and before any decision.
    GridBalance { grid: GridId, couriers: u32, orders: u32 },
    ShiftEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Minutes since shift start.
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default)]
struct EventSink {
    enabled: bool,
    events: Vec<Event>,
}

impl EventSink {
    fn push(&mut self, time: f64, kind: EventKind) {
        if self.enabled {
            self.events.push(Event { time, kind });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("order {0} is not pending")]
    OrderNotPending(OrderId),
    #[error("courier {0} does not exist")]
    UnknownCourier(CourierId),
    #[error("courier {0} already holds the maximum number of delivery tasks")]
    CourierFull(CourierId),
    #[error("courier {0} is not eligible for reallocation")]
    NotSteerable(CourierId),
    #[error("neighbor slot {slot} of courier {courier} is outside the region")]
    AbsentSlot { courier: CourierId, slot: usize },
    #[error("shift already finished")]
    ShiftOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DispatchAction {
    Assign(CourierId),
    Postpone,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DispatchOutcome {
    Assigned {
        courier: CourierId,
        /// Future idle grid of the courier before the assignment.
        from_grid: GridId,
        /// Minutes until the courier would have been idle.
        eta_before: f64,
        pickup_distance: u32,
        expected_arrival: f64,
        actual_ready: f64,
    },
    Postponed,
    /// Postponed while more than the overdue limit past its ready time.
    Removed,
}

/// Context handed to a dispatch policy after each of its decisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchStep {
    pub order: OrderId,
    pub action: DispatchAction,
    pub outcome: DispatchOutcome,
    /// Next order to be decided in this minute, if any.
    pub next_order: Option<OrderId>,
    pub last_minute: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteerStep {
    pub courier: CourierId,
    /// 0 = stay, 1..=6 = neighbor slot `action - 1`.
    pub action: usize,
    pub from: GridId,
    pub to: GridId,
    pub next_courier: Option<CourierId>,
    pub last_minute: bool,
}

pub trait DispatchPolicy {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction;
    fn observe(&mut self, _sim: &SimState, _step: &DispatchStep) {}
    fn end_of_minute(&mut self, _sim: &SimState) {}
}

pub trait SteerPolicy {
    fn decide(&mut self, sim: &SimState, courier: CourierId, rng: &mut ChaCha8Rng) -> usize;
    fn observe(&mut self, _sim: &SimState, _step: &SteerStep) {}
    fn end_of_minute(&mut self, _sim: &SimState) {}
}

impl<P: DispatchPolicy + ?Sized> DispatchPolicy for &mut P {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        (**self).decide(sim, order, rng)
    }
    fn observe(&mut self, sim: &SimState, step: &DispatchStep) {
        (**self).observe(sim, step)
    }
    fn end_of_minute(&mut self, sim: &SimState) {
        (**self).end_of_minute(sim)
    }
}

impl<P: SteerPolicy + ?Sized> SteerPolicy for &mut P {
    fn decide(&mut self, sim: &SimState, courier: CourierId, rng: &mut ChaCha8Rng) -> usize {
        (**self).decide(sim, courier, rng)
    }
    fn observe(&mut self, sim: &SimState, step: &SteerStep) {
        (**self).observe(sim, step)
    }
    fn end_of_minute(&mut self, sim: &SimState) {
        (**self).end_of_minute(sim)
    }
}

impl<P: DispatchPolicy + ?Sized> DispatchPolicy for alloc::boxed::Box<P> {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        (**self).decide(sim, order, rng)
    }
    fn observe(&mut self, sim: &SimState, step: &DispatchStep) {
        (**self).observe(sim, step)
    }
    fn end_of_minute(&mut self, sim: &SimState) {
        (**self).end_of_minute(sim)
    }
}

impl<P: SteerPolicy + ?Sized> SteerPolicy for alloc::boxed::Box<P> {
    fn decide(&mut self, sim: &SimState, courier: CourierId, rng: &mut ChaCha8Rng) -> usize {
        (**self).decide(sim, courier, rng)
    }
    fn observe(&mut self, sim: &SimState, step: &SteerStep) {
        (**self).observe(sim, step)
    }
    fn end_of_minute(&mut self, sim: &SimState) {
        (**self).end_of_minute(sim)
    }
}

/// Per-grid supply minus demand, indexed like the region's grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GapField {
    pub gaps: Vec<i32>,
}

impl GapField {
    pub fn zeros(n: usize) -> Self {
        GapField { gaps: alloc::vec![0; n] }
    }

    pub fn at(&self, region: &ServiceRegion, g: GridId) -> i32 {
        self.gaps[region.idx(g)]
    }
}

/// Nearest integer, halves rounded up.
pub fn round_half_up(x: f64) -> i32 {
    libm::floor(x + 0.5) as i32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub record_events: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { record_events: true }
    }
}

/// One simulated shift.
#[derive(Debug, Clone)]
pub struct SimState {
    config: Arc<ScenarioConfig>,
    predictor: Arc<DemandPredictor>,
    mode: Mode,
    clock: u32,
    couriers: Vec<Courier>,
    orders: Vec<Order>,
    pending: Vec<OrderId>,
    history: DemandHistory,
    predictions: Vec<f64>,
    shift_start: Minute,
    order_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    next_order_id: u64,
    sink: EventSink,
    finished: bool,
}

impl SimState {
    pub fn new(
        config: Arc<ScenarioConfig>,
        predictor: Arc<DemandPredictor>,
        mode: Mode,
        seed: u64,
        options: SimOptions,
    ) -> Result<Self, SimError> {
        config.validate()?;
        let shift_start = config.shift_start();
        let mut order_rng = stream_rng(seed, STREAM_ORDERS);
        let mut init_rng = stream_rng(seed, STREAM_INIT);
        let region = &config.region;

        // An hour of placements before the shift feeds the forecaster lags.
        let warm_hour = config.shift_start_hour.checked_sub(1);
        let warm_rates_hour = match warm_hour {
            Some(h) if region.restaurant_ids().all(|g| config.rate(g, h).is_some()) => h,
            _ => config.shift_start_hour,
        };
        let warm_from = shift_start.plus(-60);
        let mut history = DemandHistory::new().with_coverage(warm_from.plus(-1));
        for m in 0..60 {
            for (g, _) in config.sample_arrivals(warm_rates_hour, &mut order_rng)? {
                history.push(g, warm_from.plus(m));
            }
        }

        let mut sink = EventSink { enabled: options.record_events, events: Vec::new() };
        sink.push(0.0, EventKind::ShiftStart { fleet: config.fleet_size, minutes: config.shift_minutes });
        let couriers = (0..config.fleet_size)
            .map(|i| {
                let grid = region.ids()[init_rng.random_range(0..region.len())];
                let id = CourierId(i as u32);
                sink.push(0.0, EventKind::CourierStart { courier: id, grid });
                Courier::new(id, grid, 0.0)
            })
            .collect();
        let n = region.len();
        Ok(SimState {
            predictor,
            mode,
            clock: 0,
            couriers,
            orders: Vec::new(),
            pending: Vec::new(),
            history,
            predictions: alloc::vec![0.0; n],
            shift_start,
            order_rng,
            policy_rng: stream_rng(seed, STREAM_POLICY),
            next_order_id: 0,
            sink,
            finished: false,
            config,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn region(&self) -> &ServiceRegion {
        &self.config.region
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn clock(&self) -> u32 {
        self.clock
    }

    pub fn now(&self) -> f64 {
        self.clock as f64
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_last_minute(&self) -> bool {
        self.clock + 1 >= self.config.shift_minutes
    }

    pub fn shift_start(&self) -> Minute {
        self.shift_start
    }

    pub fn couriers(&self) -> &[Courier] {
        &self.couriers
    }

    pub fn courier(&self, id: CourierId) -> &Courier {
        &self.couriers[id.0 as usize]
    }

    pub fn orders(&self) -> &[Order] {
        &self.orders
    }

    pub fn order(&self, id: OrderId) -> &Order {
        &self.orders[id.0 as usize]
    }

    /// Unassigned orders in placement order.
    pub fn pending(&self) -> &[OrderId] {
        &self.pending
    }

    pub fn history(&self) -> &DemandHistory {
        &self.history
    }

    /// Latest 15-minute demand forecast, indexed like the region's grids.
    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }

    pub fn events(&self) -> &[Event] {
        &self.sink.events
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        core::mem::take(&mut self.sink.events)
    }

    pub fn can_take_delivery(&self, c: CourierId) -> bool {
        self.courier(c).delivery_tasks() < self.config.max_delivery_tasks
    }

    /// Pending orders by remaining expected prep time, then id.
    pub fn pending_orders_ranked(&self) -> Vec<OrderId> {
        let now = self.now();
        let mut ids = self.pending.clone();
        ids.sort_by(|a, b| {
            let ra = self.order(*a).est_ready() - now;
            let rb = self.order(*b).est_ready() - now;
            ra.total_cmp(&rb).then(a.cmp(b))
        });
        ids
    }

    /// Grid where the courier next becomes idle and the expected minutes
    /// until then, using announced prep times.
    pub fn courier_eta_idle(&self, c: CourierId) -> (GridId, f64) {
        let courier = self.courier(c);
        let now = self.now();
        let region = self.region();
        let (mut pos, mut cursor) = match (courier.status, courier.active) {
            (CourierStatus::Idle, _) => (courier.grid, now),
            (CourierStatus::ToPickup, Some(Task { kind: TaskKind::Delivery(o), .. })) => {
                let order = self.order(o);
                let arrive = courier.leg_arrival().expect("moving courier has a leg");
                let pickup = arrive.max(order.est_ready());
                (order.household, pickup + region.travel_minutes(order.restaurant, order.household) as f64)
            }
            (CourierStatus::WaitingAtRestaurant, Some(Task { kind: TaskKind::Delivery(o), .. })) => {
                let order = self.order(o);
                let pickup = now.max(order.est_ready());
                (order.household, pickup + region.travel_minutes(order.restaurant, order.household) as f64)
            }
            (CourierStatus::ToDelivery | CourierStatus::Reallocating, _) => (
                courier.leg_destination().expect("moving courier has a leg"),
                courier.leg_arrival().expect("moving courier has a leg"),
            ),
            (status, active) => unreachable!("courier {c} in {status} with task {active:?}"),
        };
        for task in &courier.queue {
            match task.kind {
                TaskKind::Delivery(o) => {
                    let order = self.order(o);
                    let arrive = cursor + region.travel_minutes(pos, order.restaurant) as f64;
                    cursor = arrive.max(order.est_ready())
                        + region.travel_minutes(order.restaurant, order.household) as f64;
                    pos = order.household;
                }
                TaskKind::Reallocate(g) => {
                    cursor += region.travel_minutes(pos, g) as f64;
                    pos = g;
                }
            }
        }
        (pos, (cursor - now).max(0.0))
    }

    /// Supply minus demand for every grid under `horizon`.
    pub fn gap_field(&self, horizon: Horizon) -> GapField {
        let region = self.region();
        let mut gaps = alloc::vec![0i32; region.len()];
        match horizon {
            Horizon::Current => {
                for c in &self.couriers {
                    if c.status == CourierStatus::Idle {
                        gaps[region.idx(c.grid)] += 1;
                    }
                }
                for o in &self.pending {
                    gaps[region.idx(self.order(*o).restaurant)] -= 1;
                }
            }
            Horizon::Anticipated => {
                for c in &self.couriers {
                    let (g, dt) = self.courier_eta_idle(c.id);
                    if dt <= ANTICIPATION_MINUTES {
                        gaps[region.idx(g)] += 1;
                    }
                }
                for (gap, p) in gaps.iter_mut().zip(&self.predictions) {
                    *gap -= round_half_up(*p);
                }
            }
        }
        GapField { gaps }
    }

    pub fn supply_demand_gap(&self, grid: GridId, horizon: Horizon) -> i32 {
        self.gap_field(horizon).at(self.region(), grid)
    }

    /// Applies a dispatch decision for a pending order at the current minute.
    pub fn apply_dispatch(&mut self, order: OrderId, action: DispatchAction) -> Result<DispatchOutcome, SimError> {
        let pos = self
            .pending
            .iter()
            .position(|o| *o == order)
            .ok_or(SimError::OrderNotPending(order))?;
        let now = self.now();
        match action {
            DispatchAction::Postpone => {
                let ready = self.order(order).ready_time();
                if now - ready > self.config.overdue_limit_min {
                    self.pending.remove(pos);
                    self.orders[order.0 as usize].status = OrderStatus::Overdue;
                    self.sink.push(now, EventKind::Overdue { order });
                    Ok(DispatchOutcome::Removed)
                } else {
                    self.sink.push(now, EventKind::Postponed { order });
                    Ok(DispatchOutcome::Postponed)
                }
            }
            DispatchAction::Assign(c) => {
                if c.0 as usize >= self.couriers.len() {
                    return Err(SimError::UnknownCourier(c));
                }
                if !self.can_take_delivery(c) {
                    return Err(SimError::CourierFull(c));
                }
                let (from_grid, eta_before) = self.courier_eta_idle(c);
                let o = self.order(order).clone();
                let pickup_distance = self.region().distance(from_grid, o.restaurant);
                let expected_arrival = now + eta_before + (MINUTES_PER_UNIT * pickup_distance) as f64;
                self.pending.remove(pos);
                {
                    let ord = &mut self.orders[order.0 as usize];
                    ord.status = OrderStatus::Assigned;
                    ord.assigned_courier = Some(c);
                }
                self.sink.push(now, EventKind::Assigned { order, courier: c, pickup_distance, expected_arrival });
                let task = Task { kind: TaskKind::Delivery(order), created_at: now };
                let idx = c.0 as usize;
                self.couriers[idx].totals.orders_served += 1;
                if self.couriers[idx].status == CourierStatus::Idle {
                    self.start_task(idx, task, now);
                } else {
                    self.couriers[idx].queue.push_back(task);
                }
                self.settle(idx, now);
                Ok(DispatchOutcome::Assigned {
                    courier: c,
                    from_grid,
                    eta_before,
                    pickup_distance,
                    expected_arrival,
                    actual_ready: o.ready_time(),
                })
            }
        }
    }

    /// Idle couriers whose idle spell exceeds the threshold, by id.
    pub fn steerable_couriers(&self) -> Vec<CourierId> {
        let now = self.now();
        self.couriers
            .iter()
            .filter(|c| {
                c.status == CourierStatus::Idle
                    && c.idle_since.is_some_and(|s| now - s > self.config.idle_threshold_min)
            })
            .map(|c| c.id)
            .collect()
    }

    pub fn is_steerable(&self, c: CourierId) -> bool {
        let courier = self.courier(c);
        courier.status == CourierStatus::Idle
            && courier.idle_since.is_some_and(|s| self.now() - s > self.config.idle_threshold_min)
    }

    /// Target grid of steering action `action` for courier `c`.
    pub fn steer_target(&self, c: CourierId, action: usize) -> Option<GridId> {
        let grid = self.courier(c).grid;
        match action {
            0 => Some(grid),
            1..=6 => self.region().neighbor_ids(grid)[action - 1],
            _ => None,
        }
    }

    /// Applies a steering action: 0 keeps the courier in place, `1..=6`
    /// sends it to neighbor slot `action - 1`. Returns the target grid.
    pub fn apply_reallocation(&mut self, c: CourierId, action: usize) -> Result<GridId, SimError> {
        if c.0 as usize >= self.couriers.len() {
            return Err(SimError::UnknownCourier(c));
        }
        if !self.is_steerable(c) {
            return Err(SimError::NotSteerable(c));
        }
        let to = self
            .steer_target(c, action)
            .ok_or(SimError::AbsentSlot { courier: c, slot: action.wrapping_sub(1) })?;
        if action == 0 {
            return Ok(to);
        }
        let now = self.now();
        let idx = c.0 as usize;
        let from = self.couriers[idx].grid;
        self.sink.push(now, EventKind::Reallocated { courier: c, from, to });
        self.start_task(idx, Task { kind: TaskKind::Reallocate(to), created_at: now }, now);
        Ok(to)
    }

    fn set_status(&mut self, idx: usize, to: CourierStatus, at: f64) {
        let c = &mut self.couriers[idx];
        let from = c.status;
        debug_assert!(from.can_transition_to(to), "illegal transition {from} -> {to}");
        let spent = at - c.status_since;
        match from {
            CourierStatus::Idle => c.totals.idle_minutes += spent,
            CourierStatus::ToPickup | CourierStatus::WaitingAtRestaurant | CourierStatus::ToDelivery => {
                c.totals.delivery_minutes += spent
            }
            CourierStatus::Reallocating => {}
        }
        c.status = to;
        c.status_since = at;
        c.idle_since = if to == CourierStatus::Idle { Some(at) } else { None };
        let id = c.id;
        self.sink.push(at, EventKind::Status { courier: id, from, to });
    }

    fn start_leg(&mut self, idx: usize, to: GridId, at: f64) {
        let region = &self.config.region;
        let from = self.couriers[idx].grid;
        let mut last = from;
        // Path steps outside the region keep the last in-region grid.
        let path = region
            .path(from, to)
            .into_iter()
            .map(|h| {
                last = region.id_at(h).unwrap_or(last);
                last
            })
            .collect();
        self.couriers[idx].leg = Some(Leg { path, depart: at, hops_done: 0 });
    }

    fn start_task(&mut self, idx: usize, task: Task, at: f64) {
        self.couriers[idx].active = Some(task);
        match task.kind {
            TaskKind::Delivery(o) => {
                let restaurant = self.order(o).restaurant;
                self.set_status(idx, CourierStatus::ToPickup, at);
                self.start_leg(idx, restaurant, at);
            }
            TaskKind::Reallocate(g) => {
                self.set_status(idx, CourierStatus::Reallocating, at);
                self.start_leg(idx, g, at);
            }
        }
    }

    fn finish_task(&mut self, idx: usize, at: f64) {
        self.couriers[idx].active = None;
        match self.couriers[idx].queue.pop_front() {
            Some(next) => self.start_task(idx, next, at),
            None => self.set_status(idx, CourierStatus::Idle, at),
        }
    }

    fn pickup(&mut self, idx: usize, order: OrderId, at: f64) {
        let courier = self.couriers[idx].id;
        self.orders[order.0 as usize].status = OrderStatus::PickedUp;
        self.sink.push(at, EventKind::PickedUp { order, courier });
        self.set_status(idx, CourierStatus::ToDelivery, at);
        let household = self.order(order).household;
        self.start_leg(idx, household, at);
    }

    /// Processes every activity of courier `idx` that ends at or before `until`.
    fn settle(&mut self, idx: usize, until: f64) {
        loop {
            let status = self.couriers[idx].status;
            match status {
                CourierStatus::Idle => return,
                CourierStatus::WaitingAtRestaurant => {
                    let t = self.couriers[idx].wait_until;
                    if t > until {
                        return;
                    }
                    let Some(Task { kind: TaskKind::Delivery(o), .. }) = self.couriers[idx].active else {
                        unreachable!("waiting courier without delivery task")
                    };
                    self.pickup(idx, o, t);
                }
                CourierStatus::ToPickup | CourierStatus::ToDelivery | CourierStatus::Reallocating => {
                    self.advance_hops(idx, until);
                    let arrive = self.couriers[idx].leg_arrival().expect("moving courier has a leg");
                    if arrive > until {
                        return;
                    }
                    self.couriers[idx].leg = None;
                    let courier = self.couriers[idx].id;
                    match (status, self.couriers[idx].active.map(|t| t.kind)) {
                        (CourierStatus::ToPickup, Some(TaskKind::Delivery(o))) => {
                            self.orders[o.0 as usize].courier_arrival = Some(arrive);
                            self.sink.push(arrive, EventKind::ArrivedAtRestaurant { order: o, courier });
                            let ready = self.order(o).ready_time();
                            if ready <= arrive {
                                self.pickup(idx, o, arrive);
                            } else {
                                self.couriers[idx].wait_until = ready;
                                self.set_status(idx, CourierStatus::WaitingAtRestaurant, arrive);
                            }
                        }
                        (CourierStatus::ToDelivery, Some(TaskKind::Delivery(o))) => {
                            self.orders[o.0 as usize].status = OrderStatus::Delivered;
                            self.sink.push(arrive, EventKind::Delivered { order: o, courier });
                            self.finish_task(idx, arrive);
                        }
                        (CourierStatus::Reallocating, Some(TaskKind::Reallocate(_))) => self.finish_task(idx, arrive),
                        (s, k) => unreachable!("courier {courier} in {s} with task {k:?}"),
                    }
                }
            }
        }
    }

    fn advance_hops(&mut self, idx: usize, until: f64) {
        loop {
            let c = &mut self.couriers[idx];
            let leg = c.leg.as_mut().expect("moving courier has a leg");
            let next = leg.hops_done + 1;
            if next >= leg.path.len() {
                return;
            }
            let at = leg.depart + (MINUTES_PER_UNIT as usize * next) as f64;
            if at > until {
                return;
            }
            let (from, to) = (leg.path[next - 1], leg.path[next]);
            leg.hops_done = next;
            c.grid = to;
            c.totals.distance_travelled += 1;
            let id = c.id;
            self.sink.push(at, EventKind::Hop { courier: id, from, to });
        }
    }

    /// First half of a minute: new orders, fresh forecasts, balance snapshot.
    fn begin_minute(&mut self) -> Result<(), SimError> {
        let t = self.clock;
        let now = self.now();
        let stamp = self.shift_start.plus(t as i64);
        let new_orders = sample_orders(&self.config, t, &mut self.order_rng, &mut self.next_order_id)?;
        for o in new_orders {
            self.history.push(o.restaurant, stamp);
            self.sink.push(
                now,
                EventKind::OrderPlaced {
                    order: o.id,
                    restaurant: o.restaurant,
                    household: o.household,
                    est_ready: o.est_ready(),
                    ready: o.ready_time(),
                },
            );
            debug_assert_eq!(o.id.0 as usize, self.orders.len());
            self.pending.push(o.id);
            self.orders.push(o);
        }
        self.refresh_predictions();
        let region = &self.config.region;
        if self.sink.enabled {
            let mut couriers = alloc::vec![0u32; region.len()];
            let mut orders = alloc::vec![0u32; region.len()];
            for c in &self.couriers {
                if c.status == CourierStatus::Idle {
                    couriers[region.idx(c.grid)] += 1;
                }
            }
            for o in &self.pending {
                orders[region.idx(self.orders[o.0 as usize].restaurant)] += 1;
            }
            for (i, g) in region.ids().iter().enumerate() {
                self.sink.events.push(Event {
                    time: now,
                    kind: EventKind::GridBalance { grid: *g, couriers: couriers[i], orders: orders[i] },
                });
            }
        }
        Ok(())
    }

    /// Recomputes the 15-minute forecast for every restaurant grid.
    pub fn refresh_predictions(&mut self) {
        let stamp = self.shift_start.plus(self.clock as i64);
        let region = &self.config.region;
        for (i, g) in region.ids().iter().enumerate() {
            self.predictions[i] = if region.is_restaurant(*g) {
                self.predictor.predict(&self.config, &self.history, *g, stamp)
            } else {
                0.0
            };
        }
    }

    /// Adds a pending order at the current minute, outside the sampler.
    pub fn insert_order(&mut self, restaurant: GridId, household: GridId, est_prep: f64, prep: f64) -> OrderId {
        let id = OrderId(self.next_order_id);
        self.next_order_id += 1;
        let now = self.now();
        self.history.push(restaurant, self.shift_start.plus(self.clock as i64));
        self.sink.push(
            now,
            EventKind::OrderPlaced { order: id, restaurant, household, est_ready: now + est_prep, ready: now + prep },
        );
        self.orders.push(Order {
            id,
            placed_at: now,
            restaurant,
            household,
            est_prep,
            prep,
            status: OrderStatus::Pending,
            assigned_courier: None,
            courier_arrival: None,
        });
        self.pending.push(id);
        id
    }

    /// Moves an idle courier to `grid` without travel; for scripted setups.
    pub fn place_courier(&mut self, c: CourierId, grid: GridId) -> Result<(), SimError> {
        if !self.region().contains_id(grid) {
            return Err(ConfigError::Domain(crate::error::DomainError::UnknownGrid(grid)).into());
        }
        let courier = self.couriers.get_mut(c.0 as usize).ok_or(SimError::UnknownCourier(c))?;
        if courier.status != CourierStatus::Idle {
            return Err(SimError::NotSteerable(c));
        }
        courier.grid = grid;
        Ok(())
    }

    /// Advances all couriers to the next minute boundary.
    fn end_minute(&mut self) {
        let until = self.now() + 1.0;
        for i in 0..self.couriers.len() {
            self.settle(i, until);
        }
        self.clock += 1;
        if self.clock >= self.config.shift_minutes {
            self.finish();
        }
    }

    fn finish(&mut self) {
        let end = self.now();
        for c in &mut self.couriers {
            let spent = end - c.status_since;
            match c.status {
                CourierStatus::Idle => c.totals.idle_minutes += spent,
                CourierStatus::Reallocating => {}
                _ => c.totals.delivery_minutes += spent,
            }
            c.status_since = end;
        }
        self.sink.push(end, EventKind::ShiftEnd);
        self.finished = true;
    }

    /// One minute of the dual-control loop.
    pub fn step<D, S>(&mut self, dispatch: &mut D, mut steer: Option<&mut S>) -> Result<(), SimError>
    where
        D: DispatchPolicy + ?Sized,
        S: SteerPolicy + ?Sized,
    {
        if self.finished {
            return Err(SimError::ShiftOver);
        }
        self.begin_minute()?;
        let last_minute = self.is_last_minute();
        let mut rng = self.policy_rng.clone();

        let ranked = self.pending_orders_ranked();
        for (k, &order) in ranked.iter().enumerate() {
            let action = dispatch.decide(self, order, &mut rng);
            let outcome = self.apply_dispatch(order, action)?;
            let step = DispatchStep { order, action, outcome, next_order: ranked.get(k + 1).copied(), last_minute };
            dispatch.observe(self, &step);
        }

        if let Some(steer) = steer.as_deref_mut() {
            let eligible = self.steerable_couriers();
            for (k, &c) in eligible.iter().enumerate() {
                let from = self.courier(c).grid;
                let action = steer.decide(self, c, &mut rng);
                let to = self.apply_reallocation(c, action)?;
                let step = SteerStep { courier: c, action, from, to, next_courier: eligible.get(k + 1).copied(), last_minute };
                steer.observe(self, &step);
            }
        }

        self.policy_rng = rng;
        self.end_minute();
        dispatch.end_of_minute(self);
        if let Some(steer) = steer {
            steer.end_of_minute(self);
        }
        Ok(())
    }

    /// Runs the remaining minutes of the shift.
    pub fn run<D, S>(&mut self, dispatch: &mut D, mut steer: Option<&mut S>) -> Result<(), SimError>
    where
        D: DispatchPolicy + ?Sized,
        S: SteerPolicy + ?Sized,
    {
        while !self.finished {
            self.step(dispatch, steer.as_deref_mut())?;
        }
        Ok(())
    }
}

/// Steering policy that is never consulted; stands in for "no steering".
pub struct NoSteering;

impl SteerPolicy for NoSteering {
    fn decide(&mut self, _: &SimState, _: CourierId, _: &mut ChaCha8Rng) -> usize {
        0
    }
}

#[cfg(test)]
mod tests;
