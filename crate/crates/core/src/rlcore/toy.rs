//! Small finite MDPs, tabular Q-learning, and dynamic-programming values
//! used to validate the deep learner.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use super::{select_action, masked_argmax, DqnLearner, NetError, Transition};

/// Deterministic episodic MDP with at most a handful of states.
pub trait ToyMdp {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn start(&self) -> usize;
    /// `(reward, next state, episode done)`.
    fn step(&self, s: usize, a: usize) -> (f64, usize, bool);
    /// One-hot encoding by default.
    fn features(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        v[s] = 1.0;
        v
    }
}

/// One state, action 0 pays `good`, action 1 pays `bad`, then the episode ends.
pub struct Bandit {
    pub good: f64,
    pub bad: f64,
}

impl ToyMdp for Bandit {
    fn n_states(&self) -> usize {
        1
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn start(&self) -> usize {
        0
    }
    fn step(&self, _: usize, a: usize) -> (f64, usize, bool) {
        (if a == 0 { self.good } else { self.bad }, 0, true)
    }
}

/// States `0..len`; action 0 moves right, action 1 stays. Leaving the last
/// state pays `reward` and ends the episode. Episodes are capped by the
/// caller's step limit.
pub struct Chain {
    pub len: usize,
    pub reward: f64,
}

impl ToyMdp for Chain {
    fn n_states(&self) -> usize {
        self.len
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn start(&self) -> usize {
        0
    }
    fn step(&self, s: usize, a: usize) -> (f64, usize, bool) {
        match (a, s + 1 == self.len) {
            (0, true) => (self.reward, s, true),
            (0, false) => (0.0, s + 1, false),
            _ => (0.0, s, false),
        }
    }
}

/// Optimal action values by value iteration.
pub fn value_iteration<M: ToyMdp>(mdp: &M, gamma: f64, sweeps: usize) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; mdp.n_actions()]; mdp.n_states()];
    for _ in 0..sweeps {
        let prev = q.clone();
        for (s, row) in q.iter_mut().enumerate() {
            for (a, cell) in row.iter_mut().enumerate() {
                let (r, s2, done) = mdp.step(s, a);
                let next = if done { 0.0 } else { prev[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
                *cell = r + gamma * next;
            }
        }
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub episodes: usize,
    pub max_steps: usize,
}

/// Off-policy TD control with an epsilon-greedy behavior policy; the
/// terminal state's value is fixed at zero.
pub fn tabular_q_learning<M: ToyMdp>(mdp: &M, config: &TabularConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q = vec![vec![0.0; mdp.n_actions()]; mdp.n_states()];
    let mask = vec![true; mdp.n_actions()];
    for _ in 0..config.episodes {
        let mut s = mdp.start();
        for _ in 0..config.max_steps {
            let a = select_action(&q[s], &mask, config.epsilon, rng);
            let (r, s2, done) = mdp.step(s, a);
            let next = if done { 0.0 } else { q[s2].iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
            q[s][a] += config.alpha * (r + config.gamma * next - q[s][a]);
            if done {
                break;
            }
            s = s2;
        }
    }
    q
}

pub fn greedy_policy(q: &[Vec<f64>]) -> Vec<usize> {
    q.iter().map(|row| masked_argmax(row, &vec![true; row.len()]).expect("non-empty row")).collect()
}

/// Runs the deep learner on a toy MDP until `updates` learning steps have
/// been taken, learning after every environment step once the buffer is
/// full enough.
pub fn train_dqn_on<M: ToyMdp>(
    mdp: &M,
    learner: &mut DqnLearner,
    updates: u64,
    max_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), NetError> {
    let mask = vec![true; mdp.n_actions()];
    let mut guard = 0u64;
    while learner.learn_count() < updates {
        let mut s = mdp.start();
        for _ in 0..max_steps {
            let x = mdp.features(s);
            let a = learner.act(&x, &mask, rng);
            let (r, s2, done) = mdp.step(s, a);
            learner.remember(Transition { s: x, a, r, s2: mdp.features(s2), done, mask2: mask.clone() });
            learner.on_env_step()?;
            if done || learner.learn_count() >= updates {
                break;
            }
            s = s2;
        }
        guard += 1;
        assert!(guard < 1_000_000, "toy training made no progress");
    }
    Ok(())
}
