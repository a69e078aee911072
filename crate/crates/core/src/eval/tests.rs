use super::*;
use crate::dispatch::NearestIdle;
use crate::hexgrid::GridId;
use proptest::prelude::*;

fn ev(time: f64, kind: EventKind) -> Event {
    Event { time, kind }
}

fn frame(minutes: u32, fleet: usize, body: Vec<Event>) -> Vec<Event> {
    let mut log = vec![ev(0.0, EventKind::ShiftStart { fleet, minutes })];
    for c in 0..fleet {
        log.push(ev(0.0, EventKind::CourierStart { courier: CourierId(c as u32), grid: GridId(13) }));
    }
    log.extend(body);
    log.push(ev(minutes as f64, EventKind::ShiftEnd));
    log
}

fn delivered_order(id: u64, ready: f64, arrival: f64) -> Vec<Event> {
    let o = OrderId(id);
    let c = CourierId(0);
    vec![
        ev(0.0, EventKind::OrderPlaced { order: o, restaurant: GridId(13), household: GridId(14), est_ready: ready, ready }),
        ev(0.0, EventKind::Assigned { order: o, courier: c, pickup_distance: 1, expected_arrival: arrival }),
        ev(arrival, EventKind::ArrivedAtRestaurant { order: o, courier: c }),
        ev(arrival.max(ready), EventKind::PickedUp { order: o, courier: c }),
        ev(arrival.max(ready) + 3.0, EventKind::Delivered { order: o, courier: c }),
    ]
}

#[test]
fn time_gap_mean_example() {
    let mut body = delivered_order(0, 10.0, 7.0);
    body.extend(delivered_order(1, 20.0, 19.0));
    let m = compute_metrics(&frame(120, 1, body), 1).unwrap();
    assert_eq!(m.time_gap.mean, -2.0);
    assert_eq!(m.time_gap.count, 2);
    assert_eq!(m.overdue_rate, 0.0);
    assert_eq!(m.couriers.orders_served, vec![2]);
}

#[test]
fn undelivered_orders_count_only_toward_rates() {
    let mut body = delivered_order(0, 10.0, 7.0);
    body.push(ev(1.0, EventKind::OrderPlaced {
        order: OrderId(1),
        restaurant: GridId(13),
        household: GridId(14),
        est_ready: 2.0,
        ready: 2.0,
    }));
    body.push(ev(13.0, EventKind::Overdue { order: OrderId(1) }));
    let m = compute_metrics(&frame(120, 1, body), 1).unwrap();
    assert_eq!(m.time_gap.count, 1);
    assert_eq!(m.overdue_rate, 0.5);
}

#[test]
fn network_score_example() {
    let mut body = Vec::new();
    for t in 0..120 {
        for g in 1..=25u32 {
            let (couriers, orders) = match (t, g) {
                (7, 1) => (0, 1),
                (7, 2) => (2, 0),
                (7, 3) => (1, 3),
                _ => (1, 1),
            };
            body.push(ev(t as f64, EventKind::GridBalance { grid: GridId(g), couriers, orders }));
        }
    }
    let m = compute_metrics(&frame(120, 1, body), 1).unwrap();
    assert_eq!(m.nsd, -3.0 / 120.0);
    assert_eq!(m.psd, 2.0 / 120.0);
}

#[test]
fn malformed_logs_are_rejected() {
    assert_eq!(compute_metrics(&[], 1), Err(EvalError::MissingShiftStart));
    let mut log = frame(10, 1, Vec::new());
    log.pop();
    assert_eq!(compute_metrics(&log, 1), Err(EvalError::MissingShiftEnd));
    assert_eq!(compute_metrics(&frame(10, 2, Vec::new()), 3), Err(EvalError::FleetMismatch { log: 2, expected: 3 }));
    let bad = frame(10, 1, vec![ev(1.0, EventKind::Overdue { order: OrderId(9) })]);
    assert_eq!(compute_metrics(&bad, 1), Err(EvalError::UnknownOrder(OrderId(9))));
    let bad = frame(10, 1, vec![ev(1.0, EventKind::Hop { courier: CourierId(4), from: GridId(1), to: GridId(2) })]);
    assert_eq!(compute_metrics(&bad, 1), Err(EvalError::UnknownCourier(CourierId(4))));
}

fn simulated(seed: u64) -> SimState {
    let cfg = Arc::new(ScenarioConfig::default_market());
    run_shift(cfg, Arc::new(DemandPredictor::Oracle), Mode::Strategic, seed, &mut NearestIdle, None).unwrap()
}

#[test]
fn log_metrics_match_simulator_totals() {
    let sim = simulated(11);
    let m = compute_metrics(sim.events(), sim.couriers().len()).unwrap();
    for (i, c) in sim.couriers().iter().enumerate() {
        assert!((m.couriers.delivery_minutes[i] - c.totals.delivery_minutes).abs() < 1e-9);
        assert!((m.couriers.idle_minutes[i] - c.totals.idle_minutes).abs() < 1e-9);
        assert_eq!(m.couriers.distance_travelled[i], c.totals.distance_travelled);
        assert_eq!(m.couriers.orders_served[i], c.totals.orders_served);
    }
    assert_eq!(m.orders as usize, sim.orders().len());
    assert!(m.overdue_rate >= 0.0 && m.overdue_rate <= 1.0);
    assert_eq!(m.couriers.orders_served.len(), 25);
    // Recomputing from the same log is idempotent.
    assert_eq!(compute_metrics(sim.events(), 25).unwrap(), m);
}

#[test]
fn fairness_is_invariant_under_courier_relabeling() {
    let sim = simulated(12);
    let n = sim.couriers().len() as u32;
    let relabel = |c: CourierId| CourierId(n - 1 - c.0);
    let permuted: Vec<Event> = sim
        .events()
        .iter()
        .map(|e| {
            let kind = match e.kind.clone() {
                EventKind::CourierStart { courier, grid } => EventKind::CourierStart { courier: relabel(courier), grid },
                EventKind::Assigned { order, courier, pickup_distance, expected_arrival } => {
                    EventKind::Assigned { order, courier: relabel(courier), pickup_distance, expected_arrival }
                }
                EventKind::ArrivedAtRestaurant { order, courier } => {
                    EventKind::ArrivedAtRestaurant { order, courier: relabel(courier) }
                }
                EventKind::PickedUp { order, courier } => EventKind::PickedUp { order, courier: relabel(courier) },
                EventKind::Delivered { order, courier } => EventKind::Delivered { order, courier: relabel(courier) },
                EventKind::Status { courier, from, to } => EventKind::Status { courier: relabel(courier), from, to },
                EventKind::Hop { courier, from, to } => EventKind::Hop { courier: relabel(courier), from, to },
                EventKind::Reallocated { courier, from, to } => {
                    EventKind::Reallocated { courier: relabel(courier), from, to }
                }
                k => k,
            };
            Event { time: e.time, kind }
        })
        .collect();
    let a = compute_metrics(sim.events(), n as usize).unwrap();
    let b = compute_metrics(&permuted, n as usize).unwrap();
    let close = |x: Summary, y: Summary| (x.mean - y.mean).abs() < 1e-9 && (x.std - y.std).abs() < 1e-9;
    assert!(close(a.travel_distance, b.travel_distance));
    assert!(close(a.delivery_minutes, b.delivery_minutes));
    assert!(close(a.orders_received, b.orders_received));
    assert!(close(a.idle_minutes, b.idle_minutes));
}

#[test]
fn outlier_examples() {
    let same = exclude_outliers(&[1.5; 40]);
    assert!(same.excluded.is_empty());
    assert_eq!(same.kept.len(), 40);

    let mut gaps: Vec<f64> = (0..100).map(|i| -5.0 + i as f64 * 0.01).collect();
    for i in [3, 17, 42, 66, 90] {
        gaps[i] = 50.0 + i as f64;
    }
    let screen = exclude_outliers(&gaps);
    assert_eq!(screen.excluded, vec![3, 17, 42, 66, 90]);
    assert_eq!(screen.kept.len(), 95);

    let few = exclude_outliers(&[1.0; 10]);
    assert!(few.excluded.is_empty());
    assert!(few.warning.is_some());
}

#[test]
fn mann_whitney_examples() {
    let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert_eq!(r.u, 0.0);
    let x: Vec<f64> = (0..20).map(|i| (i % 7) as f64).collect();
    assert!(mann_whitney_u(&x, &x).unwrap().p > 0.99);
    let lo: Vec<f64> = (1..=30).map(f64::from).collect();
    let hi: Vec<f64> = (31..=60).map(f64::from).collect();
    let p = mann_whitney_u(&lo, &hi).unwrap().p;
    // Complete separation: the exact two-sided tail is 2 / C(60, 30).
    let exact = 2.0 / 1.182_645_815_934_459_6e17;
    assert!(p < 0.001 && p >= exact, "{p}");
    assert_eq!(mann_whitney_u(&[2.0; 5], &[2.0; 5]).unwrap().p, 1.0);
    assert!(mann_whitney_u(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()), Some(v));
    }
    assert_eq!(Variant::parse("greedy"), None);
}

#[test]
fn comparing_a_policy_with_itself() {
    let runs: Vec<RunMetrics> =
        (0..6).map(|s| compute_metrics(simulated(s).events(), 25).unwrap()).collect();
    let a = Variant::ALL[4];
    let b = Variant::ALL[5];
    let report = compare_frameworks(&[(a, runs.clone()), (b, runs), (Variant::ALL[0], Vec::new())]);
    assert_eq!(report.variants.iter().map(|v| v.variant).collect::<Vec<_>>(), vec![a, b]);
    assert_eq!(report.missing, vec![Variant::ALL[0]]);
    for v in &report.variants {
        assert_eq!(v.families.len(), FAMILIES.len());
    }
    assert!(!report.tests.is_empty());
    for t in &report.tests {
        assert!(t.p > 0.99, "{t:?}");
        assert!(!t.significant);
    }
}

proptest! {
    #[test]
    fn u_matches_pair_count(x in prop::collection::vec(0u8..6, 2..12), y in prop::collection::vec(0u8..6, 2..12)) {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let mut pairs = 0.0;
        for a in &xf {
            for b in &yf {
                pairs += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        let r = mann_whitney_u(&xf, &yf).unwrap();
        prop_assert!((r.u - pairs).abs() < 1e-9);
        let swapped = mann_whitney_u(&yf, &xf).unwrap();
        prop_assert!((r.u + swapped.u - (x.len() * y.len()) as f64).abs() < 1e-9);
        prop_assert!((r.p - swapped.p).abs() < 1e-12);
        prop_assert!(r.p > 0.0 && r.p <= 1.0);
    }

    #[test]
    fn pooled_matches_concatenation(parts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 0..8), 1..6)) {
        let all: Vec<f64> = parts.iter().flatten().copied().collect();
        let pooled = Summary::pooled(&parts.iter().map(|p| Summary::of(p)).collect::<Vec<_>>());
        let direct = Summary::of(&all);
        prop_assert_eq!(pooled.count, direct.count);
        prop_assert!((pooled.mean - direct.mean).abs() < 1e-9);
        prop_assert!((pooled.std - direct.std).abs() < 1e-9);
    }

    #[test]
    fn network_scores_bracket_the_net_gap(cells in prop::collection::vec((0u32..4, 0u32..4), 25 * 4)) {
        let mut body = Vec::new();
        let mut net = 0i64;
        for (k, &(c, o)) in cells.iter().enumerate() {
            let t = (k / 25) as f64;
            body.push(ev(t, EventKind::GridBalance { grid: GridId((k % 25) as u32 + 1), couriers: c, orders: o }));
            net += c as i64 - o as i64;
        }
        let m = compute_metrics(&frame(4, 1, body), 1).unwrap();
        prop_assert!(m.nsd <= 0.0);
        prop_assert!(m.psd >= 0.0);
        prop_assert!((m.nsd + m.psd - net as f64 / 4.0).abs() < 1e-12);
    }
}
