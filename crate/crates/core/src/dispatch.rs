//! Order dispatching as an MDP: state encoding, multi-objective reward,
//! transitions, the Conv-DDQN agent and the Nearest-Idle baseline.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rlcore::{masked_argmax, select_action, Activation, DqnConfig, DqnLearner, NetError, QNet, Transition};
use crate::simcore::{
    CourierId, CourierStatus, DispatchAction, DispatchOutcome, DispatchPolicy, DispatchStep, GapField, OrderId,
    SimState,
};

/// Features per courier: minutes to idle, pickup distance, supply-demand gap.
pub const COURIER_FEATURES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub base: f64,
    /// Weights on lateness, earliness, pickup distance and rebalancing.
    pub rho: [f64; 4],
    pub postpone: f64,
    pub overdue: f64,
    /// Rewards are divided by this before entering the replay buffer.
    pub scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { base: 100.0, rho: [-5.0, -1.0, -3.0, 5.0], postpone: -10.0, overdue: -100.0, scale: 100.0 }
    }
}

/// Reward for assigning an order. `gap` is expected courier arrival minus
/// actual ready time; `sd` is the supply-demand gap of the courier's future
/// idle grid.
pub fn reward_assign(cfg: &RewardConfig, gap: f64, pickup_distance: u32, sd: i32) -> f64 {
    let rebalance = if sd > 0 { 1.0 } else { -1.0 };
    cfg.base
        + cfg.rho[0] * gap.max(0.0)
        + cfg.rho[1] * (-gap).max(0.0)
        + cfg.rho[2] * pickup_distance as f64
        + cfg.rho[3] * rebalance
}

/// Reward for postponing and whether the order is dropped as overdue.
pub fn reward_postpone(cfg: &RewardConfig, now: f64, actual_ready: f64, overdue_limit: f64) -> (f64, bool) {
    if now - actual_ready > overdue_limit {
        (cfg.overdue, true)
    } else {
        (cfg.postpone, false)
    }
}

/// `[Δt_order, (Δt_c, d_c, SD_c) for each courier in id order]` and the
/// action mask (couriers under the task cap, then postpone).
pub fn encode_state(sim: &SimState, order: OrderId, field: &GapField) -> (Vec<f64>, Vec<bool>) {
    let o = sim.order(order);
    let region = sim.region();
    let n = sim.couriers().len();
    let mut s = Vec::with_capacity(1 + COURIER_FEATURES * n);
    s.push(o.est_ready() - sim.now());
    let mut mask = Vec::with_capacity(n + 1);
    for c in sim.couriers() {
        let (g, dt) = sim.courier_eta_idle(c.id);
        s.push(dt);
        s.push(region.distance(g, o.restaurant) as f64);
        s.push(field.at(region, g) as f64);
        mask.push(sim.can_take_delivery(c.id));
    }
    mask.push(true);
    (s, mask)
}

/// Courier timers advanced one minute; the order timer is left alone.
pub fn tick_couriers(s: &[f64]) -> Vec<f64> {
    let mut out = s.to_vec();
    for dt in out[1..].iter_mut().step_by(COURIER_FEATURES) {
        *dt = (*dt - 1.0).max(0.0);
    }
    out
}

/// Next state after postponing: order and courier timers both tick.
pub fn postpone_next(s: &[f64]) -> Vec<f64> {
    let mut out = tick_couriers(s);
    out[0] -= 1.0;
    out
}

pub fn action_index(action: DispatchAction, couriers: usize) -> usize {
    match action {
        DispatchAction::Assign(c) => c.0 as usize,
        DispatchAction::Postpone => couriers,
    }
}

pub fn index_action(index: usize, couriers: usize) -> DispatchAction {
    if index >= couriers { DispatchAction::Postpone } else { DispatchAction::Assign(CourierId(index as u32)) }
}

/// Nearest idle courier to the restaurant, ties broken at random;
/// postpone when nobody is idle.
pub fn nearest_idle<R: Rng + ?Sized>(sim: &SimState, order: OrderId, rng: &mut R) -> DispatchAction {
    let restaurant = sim.order(order).restaurant;
    let region = sim.region();
    let mut best = u32::MAX;
    let mut ties: Vec<CourierId> = Vec::new();
    for c in sim.couriers().iter().filter(|c| c.status == CourierStatus::Idle) {
        let d = region.distance(c.grid, restaurant);
        if d < best {
            best = d;
            ties.clear();
        }
        if d == best {
            ties.push(c.id);
        }
    }
    match ties.len() {
        0 => DispatchAction::Postpone,
        1 => DispatchAction::Assign(ties[0]),
        n => DispatchAction::Assign(ties[rng.random_range(0..n)]),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NearestIdle;

impl DispatchPolicy for NearestIdle {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        nearest_idle(sim, order, rng)
    }
}

/// Fixed multipliers applied to raw state features before the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureScale {
    pub order_ready: f64,
    pub courier_idle: f64,
    pub distance: f64,
    pub gap: f64,
}

impl FeatureScale {
    pub const IDENTITY: FeatureScale = FeatureScale { order_ready: 1.0, courier_idle: 1.0, distance: 1.0, gap: 1.0 };
    /// Brings minutes, hops and gap counts to roughly unit range for the
    /// default market.
    pub const UNIT_RANGE: FeatureScale = FeatureScale { order_ready: 0.1, courier_idle: 0.1, distance: 0.25, gap: 0.2 };

    pub fn input_scale(&self, couriers: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + COURIER_FEATURES * couriers);
        v.push(self.order_ready);
        for _ in 0..couriers {
            v.extend([self.courier_idle, self.distance, self.gap]);
        }
        v
    }
}

impl Default for FeatureScale {
    fn default() -> Self {
        FeatureScale::UNIT_RANGE
    }
}

/// Conv-DDQN dispatch network: convolution over courier triples, one
/// hidden layer of 32 relu units, one output per courier plus postpone.
pub fn dispatch_net(couriers: usize, output: Activation, seed: u64) -> QNet {
    QNet::conv(couriers, &[32], couriers + 1, output, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchTrace {
    pub minute: u32,
    pub order: OrderId,
    pub action: usize,
    pub reward: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    s: Vec<f64>,
    a: usize,
    field: GapField,
    q_max: f64,
}

/// DDQN dispatching policy. In training mode it explores, stores scaled
/// transitions and learns; otherwise it acts greedily.
#[derive(Debug, Clone)]
pub struct DispatchAgent {
    pub learner: DqnLearner,
    pub rewards: RewardConfig,
    pub training: bool,
    /// Sum of unscaled rewards since the last reset.
    pub episode_return: f64,
    pub trace: Option<Vec<DispatchTrace>>,
    /// First learning failure, if any; training stops using the agent.
    pub error: Option<NetError>,
    pending: Option<Pending>,
}

impl DispatchAgent {
    pub fn new(net: QNet, dqn: DqnConfig, rewards: RewardConfig, seed: u64) -> Self {
        DispatchAgent {
            learner: DqnLearner::new(net, dqn, seed),
            rewards,
            training: true,
            episode_return: 0.0,
            trace: None,
            error: None,
            pending: None,
        }
    }

    /// Greedy agent around fixed weights.
    pub fn frozen(net: QNet, rewards: RewardConfig) -> Self {
        let mut a = Self::new(net, DqnConfig { buffer_capacity: 1, ..DqnConfig::default() }, rewards, 0);
        a.training = false;
        a
    }

    pub fn net(&self) -> &QNet {
        &self.learner.value
    }

    pub fn reset_episode(&mut self) -> f64 {
        self.pending = None;
        core::mem::take(&mut self.episode_return)
    }

    fn reward_of(&self, sim: &SimState, step: &DispatchStep, field: &GapField) -> f64 {
        match step.outcome {
            DispatchOutcome::Assigned { from_grid, pickup_distance, expected_arrival, actual_ready, .. } => {
                let sd = field.at(sim.region(), from_grid);
                reward_assign(&self.rewards, expected_arrival - actual_ready, pickup_distance, sd)
            }
            DispatchOutcome::Postponed => self.rewards.postpone,
            DispatchOutcome::Removed => self.rewards.overdue,
        }
    }
}

impl DispatchPolicy for DispatchAgent {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        let field = sim.gap_field(sim.mode().horizon());
        let (s, mask) = encode_state(sim, order, &field);
        let q = self.learner.value.forward(&s);
        let a = if self.training {
            self.learner.act(&s, &mask, rng)
        } else {
            select_action(&q, &mask, 0.0, rng)
        };
        let q_max = masked_argmax(&q, &mask).map(|i| q[i]).unwrap_or(f64::NAN);
        self.pending = Some(Pending { s, a, field, q_max });
        index_action(a, sim.couriers().len())
    }

    fn observe(&mut self, sim: &SimState, step: &DispatchStep) {
        let Some(p) = self.pending.take() else { return };
        let reward = self.reward_of(sim, step, &p.field);
        self.episode_return += reward;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(DispatchTrace { minute: sim.clock(), order: step.order, action: p.a, reward, q_max: p.q_max });
        }
        if !self.training {
            return;
        }
        let (s2, mask2) = match (step.outcome, step.next_order) {
            (DispatchOutcome::Postponed, _) => {
                let (_, mask) = encode_state(sim, step.order, &p.field);
                (postpone_next(&p.s), mask)
            }
            (_, Some(next)) => encode_state(sim, next, &sim.gap_field(sim.mode().horizon())),
            (_, None) => {
                let mut mask = vec![true; sim.couriers().len() + 1];
                for (m, c) in mask.iter_mut().zip(sim.couriers()) {
                    *m = sim.can_take_delivery(c.id);
                }
                (tick_couriers(&p.s), mask)
            }
        };
        let done = step.last_minute && step.next_order.is_none();
        self.learner.remember(Transition { s: p.s, a: p.a, r: reward / self.rewards.scale, s2, done, mask2 });
    }

    fn end_of_minute(&mut self, _sim: &SimState) {
        if self.training && self.error.is_none() {
            if let Err(e) = self.learner.on_env_step() {
                self.error = Some(e);
                self.training = false;
            }
        }
    }
}
