use super::*;
use alloc::collections::BTreeMap;
use alloc::vec;
use proptest::prelude::*;
use rand::Rng;

fn quiet_config(fleet: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default_market();
    cfg.fleet_size = fleet;
    for e in cfg.rate_entries().collect::<Vec<_>>() {
        cfg.set_rate(e.grid, e.hour, 0.0).unwrap();
    }
    cfg
}

fn sim_with(cfg: ScenarioConfig, predictor: DemandPredictor, mode: Mode) -> SimState {
    SimState::new(Arc::new(cfg), Arc::new(predictor), mode, 1, SimOptions::default()).unwrap()
}

fn quiet_sim(fleet: usize) -> SimState {
    sim_with(quiet_config(fleet), DemandPredictor::Zero, Mode::Strategic)
}

struct PostponeAll;

impl DispatchPolicy for PostponeAll {
    fn decide(&mut self, _: &SimState, _: OrderId, _: &mut ChaCha8Rng) -> DispatchAction {
        DispatchAction::Postpone
    }
}

struct AssignTo(CourierId);

impl DispatchPolicy for AssignTo {
    fn decide(&mut self, _: &SimState, _: OrderId, _: &mut ChaCha8Rng) -> DispatchAction {
        DispatchAction::Assign(self.0)
    }
}

/// Uniform over valid actions; checks the task cap after each decision.
struct RandomValid;

impl DispatchPolicy for RandomValid {
    fn decide(&mut self, sim: &SimState, _: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        let mut options: Vec<DispatchAction> =
            sim.couriers().iter().filter(|c| sim.can_take_delivery(c.id)).map(|c| DispatchAction::Assign(c.id)).collect();
        options.push(DispatchAction::Postpone);
        options[rng.random_range(0..options.len())]
    }

    fn observe(&mut self, sim: &SimState, _: &DispatchStep) {
        assert!(sim.couriers().iter().all(|c| c.delivery_tasks() <= 2));
    }
}

impl SteerPolicy for RandomValid {
    fn decide(&mut self, sim: &SimState, c: CourierId, rng: &mut ChaCha8Rng) -> usize {
        let valid: Vec<usize> = (0..7).filter(|a| sim.steer_target(c, *a).is_some()).collect();
        valid[rng.random_range(0..valid.len())]
    }
}

fn advance(sim: &mut SimState, minutes: u32) {
    for _ in 0..minutes {
        sim.step(&mut PostponeAll, None::<&mut NoSteering>).unwrap();
    }
}

#[test]
fn quiet_minute_only_advances_timers() {
    let mut sim = quiet_sim(3);
    let before: Vec<_> = sim.couriers().to_vec();
    advance(&mut sim, 1);
    assert_eq!(sim.clock(), 1);
    assert!(sim.orders().is_empty());
    for (a, b) in before.iter().zip(sim.couriers()) {
        assert_eq!((a.status, a.grid, a.idle_since), (b.status, b.grid, b.idle_since));
    }
}

#[test]
fn single_order_single_idle_courier() {
    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(1)).unwrap();
    let o = sim.insert_order(GridId(13), GridId(25), 10.0, 10.0);
    sim.step(&mut AssignTo(CourierId(0)), None::<&mut NoSteering>).unwrap();
    assert_eq!(sim.order(o).status, OrderStatus::Assigned);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::ToPickup);
    assert!(sim.pending().is_empty());
}

#[test]
fn ranking_examples() {
    let mut sim = quiet_sim(1);
    assert!(sim.pending_orders_ranked().is_empty());
    let a = sim.insert_order(GridId(7), GridId(1), 2.0, 2.0);
    let b = sim.insert_order(GridId(7), GridId(1), -1.0, 0.0);
    let c = sim.insert_order(GridId(8), GridId(1), 2.0, 2.0);
    assert_eq!(sim.pending_orders_ranked(), vec![b, a, c]);
}

#[test]
fn eta_examples() {
    let mut sim = quiet_sim(2);
    sim.place_courier(CourierId(0), GridId(7)).unwrap();
    assert_eq!(sim.courier_eta_idle(CourierId(0)), (GridId(7), 0.0));

    // Grid 13 is two units from grid 3; grid 14 is adjacent to 13.
    let region = sim.region().clone();
    assert_eq!(region.distance(GridId(3), GridId(13)), 2);
    assert_eq!(region.distance(GridId(13), GridId(14)), 1);
    sim.place_courier(CourierId(1), GridId(3)).unwrap();
    let o = sim.insert_order(GridId(13), GridId(14), 10.0, 12.0);
    sim.apply_dispatch(o, DispatchAction::Assign(CourierId(1))).unwrap();
    assert_eq!(sim.courier_eta_idle(CourierId(1)), (GridId(14), 13.0));
}

#[test]
fn reallocation_eta_and_arrival() {
    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(13)).unwrap();
    advance(&mut sim, 5);
    assert!(sim.steerable_couriers().is_empty(), "idle exactly five minutes is not eligible");
    advance(&mut sim, 1);
    assert_eq!(sim.steerable_couriers(), vec![CourierId(0)]);
    let target = sim.steer_target(CourierId(0), 1).unwrap();
    assert_eq!(sim.apply_reallocation(CourierId(0), 1).unwrap(), target);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::Reallocating);
    assert_eq!(sim.courier(CourierId(0)).idle_since, None);
    assert_eq!(sim.courier_eta_idle(CourierId(0)), (target, 3.0));
    advance(&mut sim, 2);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::Reallocating);
    advance(&mut sim, 1);
    let c = sim.courier(CourierId(0));
    assert_eq!((c.status, c.grid, c.idle_since), (CourierStatus::Idle, target, Some(9.0)));
    assert_eq!(c.totals.distance_travelled, 1);
}

#[test]
fn stay_keeps_courier_idle() {
    let mut sim = quiet_sim(1);
    advance(&mut sim, 6);
    let g = sim.courier(CourierId(0)).grid;
    assert_eq!(sim.apply_reallocation(CourierId(0), 0).unwrap(), g);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::Idle);
    assert_eq!(sim.courier(CourierId(0)).idle_since, Some(0.0));
}

#[test]
fn reallocation_completes_before_queued_delivery() {
    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(13)).unwrap();
    advance(&mut sim, 6);
    let target = sim.steer_target(CourierId(0), 1).unwrap();
    sim.apply_reallocation(CourierId(0), 1).unwrap();
    let o = sim.insert_order(GridId(13), GridId(13), 0.0, 0.0);
    sim.apply_dispatch(o, DispatchAction::Assign(CourierId(0))).unwrap();
    // Three minutes to the target, three back, zero to deliver.
    assert_eq!(sim.courier_eta_idle(CourierId(0)), (GridId(13), 6.0));
    assert_eq!(sim.courier(CourierId(0)).queue.len(), 1);
    advance(&mut sim, 3);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::ToPickup);
    assert_eq!(sim.courier(CourierId(0)).grid, target);
    advance(&mut sim, 3);
    assert_eq!(sim.order(o).status, OrderStatus::Delivered);
}

#[test]
fn gap_examples() {
    let sim = quiet_sim(1);
    let g = sim.supply_demand_gap(GridId(1), Horizon::Anticipated);
    let own = sim.courier(CourierId(0)).grid;
    assert_eq!(g, if own == GridId(1) { 1 } else { 0 });

    let mut cfg = quiet_config(2);
    cfg.set_rate(GridId(13), 19, 13.6).unwrap();
    let mut sim = sim_with(cfg, DemandPredictor::Oracle, Mode::Strategic);
    sim.place_courier(CourierId(0), GridId(13)).unwrap();
    sim.place_courier(CourierId(1), GridId(13)).unwrap();
    sim.refresh_predictions();
    assert!((sim.predictions()[sim.region().index_of(GridId(13)).unwrap()] - 3.4).abs() < 1e-12);
    assert_eq!(sim.supply_demand_gap(GridId(13), Horizon::Anticipated), -1);

    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(1)).unwrap();
    assert_eq!(sim.supply_demand_gap(GridId(1), Horizon::Current), 1);
    sim.insert_order(GridId(7), GridId(1), 5.0, 5.0);
    assert_eq!(sim.supply_demand_gap(GridId(7), Horizon::Current), -1);
}

#[test]
fn rounding_rule() {
    assert_eq!(round_half_up(3.4), 3);
    assert_eq!(round_half_up(2.5), 3);
    assert_eq!(round_half_up(0.49), 0);
}

#[test]
fn anticipated_supply_uses_fifteen_minute_horizon() {
    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(1)).unwrap();
    // 2 units out, ready in 20, 4 units to deliver: idle after 32 minutes.
    let o = sim.insert_order(GridId(7), GridId(25), 20.0, 20.0);
    sim.apply_dispatch(o, DispatchAction::Assign(CourierId(0))).unwrap();
    let (g, dt) = sim.courier_eta_idle(CourierId(0));
    assert_eq!(g, GridId(25));
    assert!(dt > 15.0);
    assert_eq!(sim.supply_demand_gap(GridId(25), Horizon::Anticipated), 0);
}

#[test]
fn pickup_this_minute_when_at_restaurant_and_ready() {
    let mut sim = quiet_sim(1);
    sim.place_courier(CourierId(0), GridId(13)).unwrap();
    let o = sim.insert_order(GridId(13), GridId(14), 0.0, 0.0);
    sim.apply_dispatch(o, DispatchAction::Assign(CourierId(0))).unwrap();
    assert_eq!(sim.order(o).status, OrderStatus::PickedUp);
    assert_eq!(sim.courier(CourierId(0)).status, CourierStatus::ToDelivery);
    assert!(sim.events().iter().any(|e| e.time == 0.0 && matches!(e.kind, EventKind::PickedUp { .. })));
}

#[test]
fn postpone_and_overdue_rule() {
    let mut sim = quiet_sim(1);
    let o = sim.insert_order(GridId(13), GridId(14), 0.0, 0.0);
    assert_eq!(sim.apply_dispatch(o, DispatchAction::Postpone).unwrap(), DispatchOutcome::Postponed);
    assert_eq!(sim.pending(), &[o]);
    advance(&mut sim, 10);
    // Exactly ten minutes past ready: kept.
    assert_eq!(sim.apply_dispatch(o, DispatchAction::Postpone).unwrap(), DispatchOutcome::Postponed);
    advance(&mut sim, 1);
    assert_eq!(sim.apply_dispatch(o, DispatchAction::Postpone).unwrap(), DispatchOutcome::Removed);
    assert_eq!(sim.order(o).status, OrderStatus::Overdue);
    assert!(sim.pending().is_empty());
}

#[test]
fn task_cap_is_enforced_between_decisions() {
    let mut sim = quiet_sim(1);
    let a = sim.insert_order(GridId(13), GridId(14), 5.0, 5.0);
    let b = sim.insert_order(GridId(13), GridId(14), 5.0, 5.0);
    let c = sim.insert_order(GridId(13), GridId(14), 5.0, 5.0);
    sim.apply_dispatch(a, DispatchAction::Assign(CourierId(0))).unwrap();
    assert!(sim.can_take_delivery(CourierId(0)));
    sim.apply_dispatch(b, DispatchAction::Assign(CourierId(0))).unwrap();
    assert!(!sim.can_take_delivery(CourierId(0)));
    assert_eq!(sim.apply_dispatch(c, DispatchAction::Assign(CourierId(0))), Err(SimError::CourierFull(CourierId(0))));
    assert_eq!(sim.pending(), &[c]);
}

fn run_random(seed: u64, steer: bool) -> SimState {
    let cfg = ScenarioConfig::default_market();
    let mut sim = SimState::new(Arc::new(cfg), Arc::new(DemandPredictor::Oracle), Mode::Strategic, seed, SimOptions::default())
        .unwrap();
    let mut steer_policy = RandomValid;
    sim.run(&mut RandomValid, steer.then_some(&mut steer_policy)).unwrap();
    sim
}

#[test]
fn identical_seeds_identical_logs() {
    let a = run_random(17, true);
    let b = run_random(17, true);
    assert_eq!(a.events(), b.events());
    assert_ne!(a.events(), run_random(18, true).events());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shift_invariants(seed in 0u64..10_000, steer in any::<bool>()) {
        let sim = run_random(seed, steer);
        let region = sim.region();
        prop_assert_eq!(sim.clock(), 120);
        prop_assert!(sim.is_finished());

        // Every placed order ends in exactly one state.
        let placed = sim.events().iter().filter(|e| matches!(e.kind, EventKind::OrderPlaced { .. })).count();
        prop_assert_eq!(placed, sim.orders().len());
        let pending = sim.orders().iter().filter(|o| o.status == OrderStatus::Pending).count();
        prop_assert_eq!(pending, sim.pending().len());

        let mut arrived = BTreeMap::new();
        let mut picked = BTreeMap::new();
        let mut status: BTreeMap<CourierId, CourierStatus> = BTreeMap::new();
        for e in sim.events() {
            match e.kind {
                EventKind::Status { courier, from, to } => {
                    prop_assert!(from.can_transition_to(to), "{from} -> {to}");
                    let prev = status.insert(courier, to).unwrap_or(CourierStatus::Idle);
                    prop_assert_eq!(prev, from);
                }
                EventKind::ArrivedAtRestaurant { order, .. } => { arrived.insert(order, e.time); }
                EventKind::PickedUp { order, .. } => {
                    let o = sim.order(order);
                    let expect = arrived[&order].max(o.ready_time());
                    prop_assert_eq!(e.time, expect);
                    picked.insert(order, e.time);
                }
                EventKind::Delivered { order, .. } => {
                    let o = sim.order(order);
                    let d = region.distance(o.restaurant, o.household) as f64;
                    prop_assert_eq!(e.time, picked[&order] + 3.0 * d);
                }
                _ => {}
            }
        }
        for c in sim.couriers() {
            prop_assert_eq!(c.idle_since.is_some(), c.status == CourierStatus::Idle);
            prop_assert!(c.delivery_tasks() <= 2);
            let total = c.totals.idle_minutes + c.totals.delivery_minutes;
            prop_assert!(total <= 120.0 + 1e-9);
        }
    }
}
