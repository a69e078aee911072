//! Acceptance criteria. Each test prints one PASS/FAIL line to stderr.
//! Tests are serialized so the runtime bounds measure one check at a time.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use mealtwin::experiment::{self, Evaluation, ExperimentConfig, Policies, PolicyBundle};
use mealtwin_core::dispatch::{reward_assign, RewardConfig};
use mealtwin_core::eval::{Dispatcher, FamilyRow, Variant};
use mealtwin_core::forecast::GbtParams;
use mealtwin_core::hexgrid::{hex_distance, travel_minutes};
use mealtwin_core::rlcore::toy::{greedy_policy, tabular_q_learning, train_dqn_on, Bandit, TabularConfig, ToyMdp};
use mealtwin_core::rlcore::{masked_argmax, Activation, DqnConfig, DqnLearner, QNet};
use mealtwin_core::scenario::{sample_orders, sample_prep, synth_history, ScenarioConfig};
use mealtwin_core::simcore::GapField;
use mealtwin_core::steering::reward_reallocate;
use mealtwin_core::{GridId, HexCoord, ServiceRegion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAINING_SEEDS: [u64; 3] = [0, 1, 2];
const EVAL_SHIFTS: u32 = 100;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {n:>2} {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn majority(passes: &[bool]) -> bool {
    passes.iter().filter(|p| **p).count() >= 2
}

// ---------------------------------------------------------------- 1

const DIRS: [(i32, i32); 6] = [(1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1)];

fn bfs_distances(src: HexCoord, radius: i32) -> HashMap<(i32, i32), u32> {
    let mut seen = HashMap::from([((src.q, src.r), 0u32)]);
    let mut queue = VecDeque::from([(src.q, src.r)]);
    while let Some((q, r)) = queue.pop_front() {
        let d = seen[&(q, r)];
        if d as i32 == radius {
            continue;
        }
        for (dq, dr) in DIRS {
            let n = (q + dq, r + dr);
            if !seen.contains_key(&n) {
                seen.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    seen
}

#[test]
fn c01_hex_metric() {
    let _g = serial();
    let t0 = Instant::now();
    let region = ServiceRegion::default_5x5();
    let ids = region.ids().to_vec();
    let mut ok = true;
    for &a in &ids {
        ok &= region.distance(a, a) == 0;
        for &b in &ids {
            let dab = region.distance(a, b);
            ok &= dab == region.distance(b, a);
            ok &= (dab == 0) == (a == b);
            ok &= region.travel_minutes(a, b) == 3 * dab;
            for &c in &ids {
                ok &= region.distance(a, c) <= dab + region.distance(b, c);
            }
        }
    }
    let mut cells = Vec::new();
    for q in -6..=6i32 {
        for r in -6..=6i32 {
            if (q.abs() + r.abs() + (q + r).abs()) / 2 <= 6 {
                cells.push(HexCoord { q, r });
            }
        }
    }
    let mut pairs = 0usize;
    for &a in &cells {
        let bfs = bfs_distances(a, 12);
        for &b in &cells {
            ok &= hex_distance(a, b) == bfs[&(b.q, b.r)];
            ok &= travel_minutes(a, b) == 3 * bfs[&(b.q, b.r)];
            pairs += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        1,
        "hex metric laws and BFS agreement",
        ok && secs < 1.0,
        &format!("laws over {} grids, {pairs} BFS pairs, {secs:.3}s (limit 1s)", ids.len()),
    );
}

// ---------------------------------------------------------------- 2

fn worst_gradient_error(make: impl Fn(u64) -> QNet, probes: usize, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let (mut done, mut seed) = (0, 0);
    while done < probes {
        seed += 1;
        let net = make(seed);
        let x: Vec<f64> = (0..net.input_len()).map(|_| rng.random_range(-3.0..3.0)).collect();
        // Finite differences are meaningless across a relu kink.
        if net.pre_activations(&x).iter().flatten().any(|z| z.abs() < 1e-4) {
            continue;
        }
        let a = rng.random_range(0..net.output_len());
        let y = rng.random_range(-2.0..2.0);
        let (_, grad) = net.loss_gradient(&x, a, y);
        let mut probe = net.clone();
        for (i, g) in grad.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = probe.loss_gradient(&x, a, y).0;
            probe.params_mut()[i] = orig - h;
            let down = probe.loss_gradient(&x, a, y).0;
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = g.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((g - numeric).abs() / scale);
            }
        }
        done += 1;
    }
    worst
}

#[test]
fn c02_gradient_check() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let conv = worst_gradient_error(|s| QNet::conv(25, &[32], 26, Activation::Linear, s), 100, &mut rng);
    let dense = worst_gradient_error(|s| QNet::dense(&[14, 32, 16, 7], Activation::Linear, s), 100, &mut rng);
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        2,
        "analytic vs central-difference gradients",
        conv < 1e-4 && dense < 1e-4 && secs < 10.0,
        &format!("max rel err conv {conv:.2e}, dense {dense:.2e} (limit 1e-4), 100 probes each, {secs:.2}s (limit 10s)"),
    );
}

// ---------------------------------------------------------------- 3

fn steering_oracle(region: &ServiceRegion, gaps: &[i32], from: GridId, to: GridId) -> f64 {
    if from == to {
        return 0.0;
    }
    let at = |f: &[i32], g: GridId| f[region.index_of(g).unwrap()];
    let hood_of =
        |g: GridId| -> Vec<GridId> { region.ids().iter().copied().filter(|&h| region.distance(g, h) <= 1).collect() };
    let score = |f: &[i32], g: GridId| hood_of(g).into_iter().map(|h| at(f, h)).sum::<i32>();
    let mut post = gaps.to_vec();
    post[region.index_of(from).unwrap()] -= 1;
    post[region.index_of(to).unwrap()] += 1;
    let hood = hood_of(from);
    let diff: i32 = hood.iter().map(|&h| score(&post, h) - score(gaps, h)).sum();
    (at(gaps, from) - at(gaps, to)) as f64 + diff as f64 / hood.len() as f64
}

#[test]
fn c03_reward_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = RewardConfig::default();
    let mut dispatch_ok = 0;
    for _ in 0..1000 {
        // Gaps on a 1/64-minute lattice keep every sum exact.
        let gap = rng.random_range(-1920i32..=1920) as f64 / 64.0;
        let d: u32 = rng.random_range(0..=8);
        let sd: i32 = rng.random_range(-6..=6);
        let expected = if gap >= 0.0 { 100.0 - 5.0 * gap } else { 100.0 + gap } - 3.0 * d as f64
            + if sd > 0 { 5.0 } else { -5.0 };
        dispatch_ok += (reward_assign(&cfg, gap, d, sd) == expected) as usize;
    }
    let region = ServiceRegion::default_5x5();
    let mut steer_ok = 0;
    for _ in 0..1000 {
        let gaps: Vec<i32> = (0..region.len()).map(|_| rng.random_range(-4..=4)).collect();
        let from = region.ids()[rng.random_range(0..region.len())];
        let mut options = vec![from];
        options.extend(region.neighbor_ids(from).into_iter().flatten());
        let to = options[rng.random_range(0..options.len())];
        let got = reward_reallocate(&region, &GapField { gaps: gaps.clone() }, from, to);
        steer_ok += (got == steering_oracle(&region, &gaps, from, to)) as usize;
    }
    verdict(
        3,
        "dispatch and steering reward oracles",
        dispatch_ok == 1000 && steer_ok == 1000,
        &format!("exact matches: dispatch {dispatch_ok}/1000, steering {steer_ok}/1000"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_sampler_statistics() {
    let _g = serial();
    let cfg = ScenarioConfig::default_market();
    let shifts = 2000u32;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut counts: BTreeMap<GridId, u64> = BTreeMap::new();
    let mut next = 0u64;
    for _ in 0..shifts {
        for t in 0..cfg.shift_minutes {
            for o in sample_orders(&cfg, t, &mut rng, &mut next).unwrap() {
                *counts.entry(o.restaurant).or_default() += 1;
            }
        }
    }
    let mut worst_z: f64 = 0.0;
    for g in cfg.region.restaurant_ids() {
        let lambda: f64 = (0..cfg.shift_minutes).map(|t| cfg.rate(g, cfg.hour_at(t)).unwrap() / 60.0).sum();
        let mean = *counts.get(&g).unwrap_or(&0) as f64 / shifts as f64;
        let se = (lambda / shifts as f64).sqrt();
        worst_z = worst_z.max((mean - lambda).abs() / se);
    }
    let n = 100_000;
    let (mut sum, mut dev_sum, mut dev_sq) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let (est, actual) = sample_prep(&cfg.prep_params(), &mut rng);
        sum += est;
        dev_sum += actual - est;
        dev_sq += (actual - est) * (actual - est);
    }
    let prep_mean = sum / n as f64;
    let dev_mean = dev_sum / n as f64;
    let dev_var = (dev_sq - n as f64 * dev_mean * dev_mean) / (n - 1) as f64;
    verdict(
        4,
        "order and prep-time sampler statistics",
        worst_z <= 3.0 && (9.97..=10.03).contains(&prep_mean) && (0.97..=1.03).contains(&dev_var),
        &format!(
            "worst grid |z| {worst_z:.2} over {shifts} shifts (limit 3), prep mean {prep_mean:.4} in [9.97, 10.03], deviation variance {dev_var:.4} in [0.97, 1.03]"
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_ddqn_bandit() {
    let _g = serial();
    let t0 = Instant::now();
    let mdp = Bandit { good: 1.0, bad: 0.0 };
    let oracle = greedy_policy(&tabular_q_learning(
        &mdp,
        &TabularConfig { alpha: 0.1, gamma: 0.8, epsilon: 0.3, episodes: 500, max_steps: 1 },
        &mut ChaCha8Rng::seed_from_u64(5),
    ));
    let trials = 40u64;
    let mut correct = 0;
    let mut max_updates = 0;
    for seed in 0..trials {
        let cfg = DqnConfig { batch_size: 32, learn_every: 1, ..DqnConfig::default() };
        let mut learner = DqnLearner::new(QNet::dense(&[1, 16, 2], Activation::Linear, seed), cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 500);
        train_dqn_on(&mdp, &mut learner, 2000, 1, &mut rng).unwrap();
        max_updates = max_updates.max(learner.learn_count());
        let q = learner.value.forward(&mdp.features(0));
        correct += (masked_argmax(&q, &[true, true]) == Some(oracle[0])) as usize;
    }
    let rate = correct as f64 / trials as f64;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        5,
        "DDQN solves the bandit like the tabular oracle",
        rate >= 0.95 && max_updates <= 2000 && secs < 30.0,
        &format!("greedy-correct {correct}/{trials} = {:.1}% (limit 95%), <= {max_updates} updates, {secs:.2}s (limit 30s)", rate * 100.0),
    );
}

// ---------------------------------------------------------------- 6

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mealtwin")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "mealtwin {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn snapshot_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "latency.json" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c06_determinism() {
    let _g = serial();
    let mut cfg = ExperimentConfig::default();
    cfg.training = mealtwin_core::trainer::TrainingPlan::reduced(11);
    cfg.eval_shifts = 20;
    let runs: Vec<BTreeMap<String, Vec<u8>>> = [1usize, 3]
        .iter()
        .map(|&workers| {
            let dir = tempfile::tempdir().unwrap();
            let mut c = cfg.clone();
            c.workers = workers;
            let text = mealtwin::formats::to_json_string(mealtwin::formats::EXPERIMENT, &c).unwrap();
            std::fs::write(dir.path().join("experiment.json"), text).unwrap();
            run_cli(dir.path(), &["train", "--config", "experiment.json"]);
            run_cli(dir.path(), &["evaluate", "--config", "experiment.json"]);
            run_cli(dir.path(), &["simulate", "--config", "experiment.json", "--out", "out/events.csv"]);
            run_cli(dir.path(), &["report", "--dir", "out", "--out", "out/report.md"]);
            snapshot_files(&dir.path().join("out"))
        })
        .collect();
    let names: Vec<&String> = runs[0].keys().collect();
    let differing: Vec<&String> = names.iter().copied().filter(|n| runs[1].get(*n) != Some(&runs[0][*n])).collect();
    let expected = ["policies-strategic.json", "comparison.json", "events.csv", "report.md"];
    let complete = expected.iter().all(|e| runs[0].contains_key(*e));
    verdict(
        6,
        "identical seeds give byte-identical artifacts",
        differing.is_empty() && runs[0].len() == runs[1].len() && complete,
        &format!(
            "{} files compared (weights, training reports, tables, events, report), {} differ; worker counts 1 vs 3",
            names.len(),
            differing.len()
        ),
    );
}

// ---------------------------------------------------------------- shared fixture

struct Trained {
    seed: u64,
    eval: Evaluation,
}

fn fixture() -> &'static Vec<Trained> {
    static CELL: OnceLock<Vec<Trained>> = OnceLock::new();
    CELL.get_or_init(|| {
        let base = ExperimentConfig { eval_shifts: EVAL_SHIFTS, ..ExperimentConfig::default() };
        let exp = experiment::Experiment::from_config(base.clone(), Path::new("")).unwrap();
        let predictor = Arc::new(exp.predictor().unwrap());
        TRAINING_SEEDS
            .iter()
            .map(|&seed| {
                let mut plan = base.training.clone();
                plan.seed = seed;
                let trained = experiment::train_modes(&exp.scenario, &predictor, &exp.modes(), &plan).unwrap();
                let mut policies = Policies::default();
                for t in &trained {
                    assert!(t.report.aborted().is_none(), "training diverged for seed {seed}");
                    policies.insert(PolicyBundle::from(t));
                }
                let eval = experiment::evaluate_variants(
                    &exp.scenario,
                    &predictor,
                    &policies,
                    &plan,
                    &base.variants,
                    EVAL_SHIFTS,
                    base.eval_seed,
                    0,
                )
                .unwrap();
                Trained { seed, eval }
            })
            .collect()
    })
}

fn row(eval: &Evaluation, dispatcher: Dispatcher, steering: bool, family: &str) -> FamilyRow {
    let v = Variant { dispatcher, steering };
    eval.report.variants.iter().find(|s| s.variant == v).unwrap().families[family].clone()
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_nearest_idle_baseline() {
    let _g = serial();
    let t0 = Instant::now();
    let scenario = Arc::new(ScenarioConfig::default_market());
    let cfg = ExperimentConfig::default();
    let predictor = Arc::new(experiment::build_predictor(&cfg.forecaster, &scenario).unwrap());
    let v = Variant { dispatcher: Dispatcher::NearestIdle, steering: false };
    let eval = experiment::evaluate_variants(
        &scenario,
        &predictor,
        &Policies::default(),
        &cfg.training,
        &[v],
        EVAL_SHIFTS,
        cfg.eval_seed,
        0,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let gap = row(&eval, Dispatcher::NearestIdle, false, "time_gap").avg;
    let overdue = row(&eval, Dispatcher::NearestIdle, false, "overdue_rate").avg;
    verdict(
        7,
        "nearest-idle baseline",
        overdue == 0.0 && (-8.0..=-1.0).contains(&gap) && secs < 300.0,
        &format!("{EVAL_SHIFTS} shifts: overdue {:.2}% (need 0), mean gap {gap:.2} min in [-8, -1], {secs:.1}s (limit 300s)", overdue * 100.0),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_strategic_dispatch() {
    let _g = serial();
    let mut details = Vec::new();
    let passes: Vec<bool> = fixture()
        .iter()
        .map(|t| {
            let gap = row(&t.eval, Dispatcher::Strategic, false, "time_gap").avg;
            let overdue = row(&t.eval, Dispatcher::Strategic, false, "overdue_rate").avg;
            details.push(format!("seed {}: gap {gap:.2}, overdue {:.2}%", t.seed, overdue * 100.0));
            gap < 0.0 && overdue <= 0.01
        })
        .collect();
    verdict(
        8,
        "trained strategic dispatch: negative gap, overdue <= 1%",
        majority(&passes),
        &format!("{} of 3 seeds pass ({})", passes.iter().filter(|p| **p).count(), details.join("; ")),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_strategic_vs_myopic_pickup() {
    let _g = serial();
    let mut details = Vec::new();
    let passes: Vec<bool> = fixture()
        .iter()
        .map(|t| {
            let s = row(&t.eval, Dispatcher::Strategic, false, "pickup_distance").avg;
            let m = row(&t.eval, Dispatcher::Myopic, false, "pickup_distance").avg;
            details.push(format!("seed {}: strategic {s:.3} vs myopic {m:.3}", t.seed));
            s <= m
        })
        .collect();
    verdict(
        9,
        "strategic pickup distance <= myopic",
        majority(&passes),
        &format!("{} of 3 seeds pass ({})", passes.iter().filter(|p| **p).count(), details.join("; ")),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_steering_effect() {
    let _g = serial();
    let mut details = Vec::new();
    let passes: Vec<bool> = fixture()
        .iter()
        .map(|t| {
            let p0 = row(&t.eval, Dispatcher::Strategic, false, "pickup_distance").avg;
            let p1 = row(&t.eval, Dispatcher::Strategic, true, "pickup_distance").avg;
            let d0 = row(&t.eval, Dispatcher::Strategic, false, "travel_distance");
            let d1 = row(&t.eval, Dispatcher::Strategic, true, "travel_distance");
            let drop = 1.0 - d1.std_within / d0.std_within;
            details.push(format!(
                "seed {}: pickup {p0:.3}->{p1:.3}, travel std {:.2}->{:.2} ({:.0}% drop), travel mean {:.2}->{:.2}",
                t.seed,
                d0.std_within,
                d1.std_within,
                drop * 100.0,
                d0.avg,
                d1.avg
            ));
            p1 < p0 && drop >= 0.10 && d1.avg > d0.avg
        })
        .collect();
    verdict(
        10,
        "steering cuts pickup distance and travel spread, raises travel",
        majority(&passes),
        &format!("{} of 3 seeds pass ({})", passes.iter().filter(|p| **p).count(), details.join("; ")),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn c11_forecaster_beats_persistence() {
    let _g = serial();
    let cfg = ScenarioConfig::default_market();
    let records = synth_history(&cfg, 30, &mut ChaCha8Rng::seed_from_u64(111)).unwrap();
    let grids: Vec<GridId> = cfg.region.restaurant_ids().collect();
    let r = experiment::forecast_eval(&records, &grids, &GbtParams::default(), 1, 0.2).unwrap();
    verdict(
        11,
        "forecaster MAE <= persistence MAE on holdout",
        r.model.mae <= r.persistence.mae,
        &format!(
            "{} holdout days, {} windows: model MAE {:.4}, persistence MAE {:.4}",
            r.holdout_days, r.model.count, r.model.mae, r.persistence.mae
        ),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn c12_decision_latency() {
    let _g = serial();
    let t = &fixture()[0];
    let mut worst: f64 = 0.0;
    let mut decisions = 0;
    for l in &t.eval.latency {
        if l.variant.dispatcher == Dispatcher::NearestIdle {
            continue;
        }
        worst = worst.max(l.dispatch.p99_s);
        decisions += l.dispatch.decisions;
        if let Some(s) = &l.steering {
            worst = worst.max(s.p99_s);
            decisions += s.decisions;
        }
    }
    verdict(
        12,
        "trained-policy decision latency p99 < 0.1s",
        decisions > 0 && worst < 0.1,
        &format!("worst p99 {:.3} ms over {decisions} trained-policy decisions", worst * 1e3),
    );
}
