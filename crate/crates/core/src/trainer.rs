//! Three-phase sandwich training: dispatch alone, steering against the
//! frozen dispatcher, then dispatch fine-tuning against frozen steering.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dispatch::{dispatch_net, DispatchAgent, FeatureScale, RewardConfig};
use crate::forecast::DemandPredictor;
use crate::rlcore::{Activation, DqnConfig, QNet};
use crate::scenario::ScenarioConfig;
use crate::simcore::{Mode, NoSteering, SimError, SimOptions, SimState};
use crate::steering::{steer_net, SteerAgent};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub enabled: bool,
    pub window: usize,
    pub threshold: f64,
    /// Episodes added per extension when the check fails.
    pub extend_block: usize,
    /// Extensions stop at this multiple of the planned episode count.
    pub max_factor: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig { enabled: true, window: 20, threshold: 0.05, extend_block: 25, max_factor: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingPlan {
    /// Episodes for the dispatch, steering and fine-tuning phases.
    pub episodes: [usize; 3],
    pub dispatch: DqnConfig,
    pub steering: DqnConfig,
    pub rewards: RewardConfig,
    pub dispatch_scale: FeatureScale,
    /// Fine-tuning restarts exploration at this fraction of the initial rate.
    pub finetune_eps_factor: f64,
    pub convergence: ConvergenceConfig,
    pub seed: u64,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        TrainingPlan {
            episodes: [200, 150, 100],
            dispatch: DqnConfig::default(),
            steering: DqnConfig::default(),
            rewards: RewardConfig::default(),
            dispatch_scale: FeatureScale::default(),
            finetune_eps_factor: 0.25,
            convergence: ConvergenceConfig::default(),
            seed: 0,
        }
    }
}

impl TrainingPlan {
    pub fn reduced(seed: u64) -> Self {
        TrainingPlan { episodes: [50, 30, 20], seed, ..Self::default() }
    }

    pub fn smoke(seed: u64) -> Self {
        TrainingPlan { episodes: [1, 1, 1], seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.episodes.iter().any(|&r| r == 0) {
            return Err(TrainError::Plan("episode counts must be at least 1".into()));
        }
        if self.convergence.window == 0 {
            return Err(TrainError::Plan("convergence window must be positive".into()));
        }
        if !(self.finetune_eps_factor > 0.0 && self.finetune_eps_factor <= 1.0) {
            return Err(TrainError::Plan("finetune_eps_factor must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training plan: {0}")]
    Plan(String),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("return series has {len} points, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },
}

/// True when the last window's mean is within `threshold` (relative) of the
/// window before it.
pub fn convergence_check(series: &[f64], window: usize, threshold: f64) -> Result<bool, TrainError> {
    let need = 2 * window;
    if window == 0 || series.len() < need {
        return Err(TrainError::SeriesTooShort { len: series.len(), need });
    }
    let n = series.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&series[n - window..]);
    let prev = mean(&series[n - need..n - window]);
    Ok((last - prev).abs() <= threshold * prev.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dispatch,
    Steering,
    FineTune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Dispatch => "dispatch",
            Phase::Steering => "steering",
            Phase::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub planned_episodes: usize,
    pub returns: Vec<f64>,
    pub learn_updates: u64,
    pub final_epsilon: f64,
    /// `None` when the series was too short to judge.
    pub converged: Option<bool>,
    /// Parameter fingerprints of (dispatch, steering) after each episode.
    pub fingerprints: Vec<(u64, u64)>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub mode: Mode,
    pub seed: u64,
    pub phases: Vec<PhaseReport>,
}

impl TrainingReport {
    pub fn aborted(&self) -> Option<&str> {
        self.phases.iter().find_map(|p| p.aborted.as_deref())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPolicies {
    /// Dispatch weights at the end of the first phase, used by frameworks
    /// that run without steering.
    pub dispatch_solo: QNet,
    pub dispatch: QNet,
    pub steering: QNet,
    pub report: TrainingReport,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Shift seed for one training episode.
pub fn episode_seed(plan_seed: u64, phase: Phase, episode: usize) -> u64 {
    mix(mix(plan_seed ^ 0x5eed) ^ mix(((phase as u64) << 32) | episode as u64))
}

pub struct Trainer {
    pub scenario: Arc<ScenarioConfig>,
    pub predictor: Arc<DemandPredictor>,
    pub mode: Mode,
    pub plan: TrainingPlan,
    pub dispatch: DispatchAgent,
    pub steering: SteerAgent,
}

impl Trainer {
    pub fn new(
        scenario: Arc<ScenarioConfig>,
        predictor: Arc<DemandPredictor>,
        mode: Mode,
        plan: TrainingPlan,
    ) -> Result<Self, TrainError> {
        plan.validate()?;
        scenario.validate().map_err(|e| TrainError::Sim(SimError::Config(e)))?;
        let couriers = scenario.fleet_size;
        let dispatch = DispatchAgent::new(
            dispatch_net(couriers, Activation::Linear, mix(plan.seed ^ 1))
                .with_input_scale(plan.dispatch_scale.input_scale(couriers)),
            plan.dispatch,
            plan.rewards,
            mix(plan.seed ^ 2),
        );
        let steering = SteerAgent::new(steer_net(mix(plan.seed ^ 3)), plan.steering, mix(plan.seed ^ 4));
        Ok(Trainer { scenario, predictor, mode, plan, dispatch, steering })
    }

    fn episode(&mut self, phase: Phase, k: usize) -> Result<f64, SimError> {
        let seed = episode_seed(self.plan.seed, phase, k);
        let opts = SimOptions { record_events: false };
        let mut sim = SimState::new(self.scenario.clone(), self.predictor.clone(), self.mode, seed, opts)?;
        self.dispatch.reset_episode();
        self.steering.reset_episode();
        match phase {
            Phase::Dispatch => sim.run(&mut self.dispatch, None::<&mut NoSteering>)?,
            Phase::Steering | Phase::FineTune => sim.run(&mut self.dispatch, Some(&mut self.steering))?,
        }
        Ok(match phase {
            Phase::Steering => self.steering.reset_episode(),
            _ => self.dispatch.reset_episode(),
        })
    }

    fn fingerprints(&self) -> (u64, u64) {
        (self.dispatch.net().fingerprint(), self.steering.net().fingerprint())
    }

    pub fn run_phase(&mut self, phase: Phase) -> Result<PhaseReport, TrainError> {
        let planned = self.plan.episodes[phase as usize];
        match phase {
            Phase::Dispatch | Phase::FineTune => {
                let eps0 = match phase {
                    Phase::FineTune => self.plan.dispatch.eps0 * self.plan.finetune_eps_factor,
                    _ => self.plan.dispatch.eps0,
                };
                self.dispatch.learner.buffer.clear();
                self.dispatch.learner.restart_exploration(eps0);
                self.dispatch.training = true;
                self.steering.training = false;
            }
            Phase::Steering => {
                self.steering.learner.buffer.clear();
                self.steering.learner.restart_exploration(self.plan.steering.eps0);
                self.dispatch.training = false;
                self.steering.training = true;
            }
        }
        let learner_updates = |t: &Trainer| match phase {
            Phase::Steering => t.steering.learner.learn_count(),
            _ => t.dispatch.learner.learn_count(),
        };
        let conv = self.plan.convergence;
        let mut report = PhaseReport {
            phase,
            planned_episodes: planned,
            returns: Vec::new(),
            learn_updates: 0,
            final_epsilon: 0.0,
            converged: None,
            fingerprints: Vec::new(),
            aborted: None,
        };
        let mut target = planned;
        'outer: loop {
            while report.returns.len() < target {
                let ret = self.episode(phase, report.returns.len())?;
                report.returns.push(ret);
                report.fingerprints.push(self.fingerprints());
                let err = match phase {
                    Phase::Steering => self.steering.error.as_ref(),
                    _ => self.dispatch.error.as_ref(),
                };
                if let Some(e) = err {
                    report.aborted = Some(e.to_string());
                    break 'outer;
                }
            }
            report.converged = convergence_check(&report.returns, conv.window, conv.threshold).ok();
            let cap = planned * conv.max_factor;
            if !conv.enabled || report.converged != Some(false) || target >= cap {
                break;
            }
            target = (target + conv.extend_block).min(cap);
        }
        report.learn_updates = learner_updates(self);
        report.final_epsilon = match phase {
            Phase::Steering => self.steering.learner.epsilon(),
            _ => self.dispatch.learner.epsilon(),
        };
        self.dispatch.training = false;
        self.steering.training = false;
        Ok(report)
    }
}

/// Runs all three phases. A diverging phase ends training early; the
/// report records where.
pub fn sandwich_train(
    scenario: Arc<ScenarioConfig>,
    predictor: Arc<DemandPredictor>,
    mode: Mode,
    plan: TrainingPlan,
) -> Result<TrainedPolicies, TrainError> {
    let seed = plan.seed;
    let mut t = Trainer::new(scenario, predictor, mode, plan)?;
    let mut phases = Vec::new();
    let mut dispatch_solo = None;
    for phase in [Phase::Dispatch, Phase::Steering, Phase::FineTune] {
        let r = t.run_phase(phase)?;
        let stop = r.aborted.is_some();
        phases.push(r);
        if phase == Phase::Dispatch {
            dispatch_solo = Some(t.dispatch.net().clone());
        }
        if stop {
            break;
        }
    }
    Ok(TrainedPolicies {
        dispatch_solo: dispatch_solo.expect("first phase always runs"),
        dispatch: t.dispatch.net().clone(),
        steering: t.steering.net().clone(),
        report: TrainingReport { mode, seed, phases },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn convergence_examples() {
        assert_eq!(convergence_check(&[3.0; 40], 20, 0.01), Ok(true));
        let mut ramp = vec![100.0; 20];
        ramp.extend([150.0; 20]);
        assert_eq!(convergence_check(&ramp, 20, 0.05), Ok(false));
        assert_eq!(convergence_check(&[1.0; 39], 20, 0.05), Err(TrainError::SeriesTooShort { len: 39, need: 40 }));
        // Only the last two windows count.
        let mut late = vec![0.0; 10];
        late.extend([5.0; 40]);
        assert_eq!(convergence_check(&late, 20, 0.0), Ok(true));
    }

    #[test]
    fn plan_validation() {
        assert!(TrainingPlan::default().validate().is_ok());
        let bad = TrainingPlan { episodes: [1, 0, 1], ..TrainingPlan::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn episode_seeds_differ_by_phase_and_episode() {
        let a = episode_seed(7, Phase::Dispatch, 0);
        assert_ne!(a, episode_seed(7, Phase::Dispatch, 1));
        assert_ne!(a, episode_seed(7, Phase::Steering, 0));
        assert_ne!(a, episode_seed(8, Phase::Dispatch, 0));
        assert_eq!(a, episode_seed(7, Phase::Dispatch, 0));
    }
}
