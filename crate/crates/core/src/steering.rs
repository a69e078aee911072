//! Idle-courier reallocation: neighborhood scores, the local state, the
//! move reward and the DDQN steering agent.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hexgrid::{GridId, ServiceRegion};
use crate::rlcore::{select_action, Activation, DqnConfig, DqnLearner, NetError, QNet, Transition};
use crate::simcore::{CourierId, GapField, SimState, SteerPolicy, SteerStep};

/// Self plus six neighbor slots.
pub const SLOTS: usize = 7;
pub const STEER_STATE_LEN: usize = 2 * SLOTS;

/// Sum of gaps over the grid and its in-region neighbors.
pub fn local_score(region: &ServiceRegion, field: &GapField, grid: GridId) -> i32 {
    let i = region.idx(grid);
    region.neighborhood_indices(i).map(|j| field.gaps[j]).sum()
}

/// `[(gap, score) for self then neighbor slots]`, absent slots zeroed, and
/// the slot mask.
pub fn encode_local(region: &ServiceRegion, field: &GapField, grid: GridId) -> (Vec<f64>, Vec<bool>) {
    let mut s = Vec::with_capacity(STEER_STATE_LEN);
    let mut mask = Vec::with_capacity(SLOTS);
    let slots = core::iter::once(Some(grid)).chain(region.neighbor_ids(grid));
    for slot in slots {
        match slot {
            Some(g) => {
                s.push(field.at(region, g) as f64);
                s.push(local_score(region, field, g) as f64);
                mask.push(true);
            }
            None => {
                s.extend([0.0, 0.0]);
                mask.push(false);
            }
        }
    }
    (s, mask)
}

/// Field with one unit of supply moved from `from` to `to`.
pub fn shift_supply(region: &ServiceRegion, field: &GapField, from: GridId, to: GridId) -> GapField {
    let mut out = field.clone();
    out.gaps[region.idx(from)] -= 1;
    out.gaps[region.idx(to)] += 1;
    out
}

/// Reward for moving an idle courier from `from` to `to` given the
/// pre-move gap field; zero when staying.
pub fn reward_reallocate(region: &ServiceRegion, field: &GapField, from: GridId, to: GridId) -> f64 {
    if from == to {
        return 0.0;
    }
    let post = shift_supply(region, field, from, to);
    let hood: Vec<usize> = region.neighborhood_indices(region.idx(from)).collect();
    let mut improvement = 0i32;
    for &j in &hood {
        let g = region.ids()[j];
        improvement += local_score(region, &post, g) - local_score(region, field, g);
    }
    let direct = field.at(region, from) - field.at(region, to);
    direct as f64 + improvement as f64 / hood.len() as f64
}

/// Steering state of a courier in the simulator's framework mode.
pub fn encode_steer_state(sim: &SimState, courier: CourierId) -> (Vec<f64>, Vec<bool>) {
    assert!(sim.is_steerable(courier), "courier {courier} is not eligible for steering");
    let field = sim.gap_field(sim.mode().horizon());
    encode_local(sim.region(), &field, sim.courier(courier).grid)
}

/// Two relu hidden layers of 32 and 16 units, one output per slot.
pub fn steer_net(seed: u64) -> QNet {
    QNet::dense(&[STEER_STATE_LEN, 32, 16, SLOTS], Activation::Linear, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerTrace {
    pub minute: u32,
    pub courier: CourierId,
    pub from: GridId,
    pub to: GridId,
    pub reward: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    s: Vec<f64>,
    a: usize,
    field: GapField,
}

/// DDQN steering policy, shared by every grid acting as a decision agent.
#[derive(Debug, Clone)]
pub struct SteerAgent {
    pub learner: DqnLearner,
    pub training: bool,
    pub episode_return: f64,
    pub trace: Option<Vec<SteerTrace>>,
    pub error: Option<NetError>,
    pending: Option<Pending>,
}

impl SteerAgent {
    pub fn new(net: QNet, dqn: DqnConfig, seed: u64) -> Self {
        SteerAgent {
            learner: DqnLearner::new(net, dqn, seed),
            training: true,
            episode_return: 0.0,
            trace: None,
            error: None,
            pending: None,
        }
    }

    pub fn frozen(net: QNet) -> Self {
        let mut a = Self::new(net, DqnConfig { buffer_capacity: 1, ..DqnConfig::default() }, 0);
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
}

impl SteerPolicy for SteerAgent {
    fn decide(&mut self, sim: &SimState, courier: CourierId, rng: &mut ChaCha8Rng) -> usize {
        let field = sim.gap_field(sim.mode().horizon());
        let (s, mask) = encode_local(sim.region(), &field, sim.courier(courier).grid);
        let a = if self.training {
            self.learner.act(&s, &mask, rng)
        } else {
            select_action(&self.learner.value.forward(&s), &mask, 0.0, rng)
        };
        self.pending = Some(Pending { s, a, field });
        a
    }

    fn observe(&mut self, sim: &SimState, step: &SteerStep) {
        let Some(p) = self.pending.take() else { return };
        let region = sim.region();
        let reward = reward_reallocate(region, &p.field, step.from, step.to);
        self.episode_return += reward;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(SteerTrace { minute: sim.clock(), courier: step.courier, from: step.from, to: step.to, reward });
        }
        if !self.training {
            return;
        }
        let post = shift_supply(region, &p.field, step.from, step.to);
        let (s2, mask2) = encode_local(region, &post, step.to);
        let done = step.last_minute && step.next_courier.is_none();
        self.learner.remember(Transition { s: p.s, a: p.a, r: reward, s2, done, mask2 });
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
