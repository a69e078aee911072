//! Wall-clock decision latency.

use std::time::Instant;

use mealtwin_core::scenario::{CourierId, OrderId};
use mealtwin_core::simcore::{DispatchAction, DispatchPolicy, DispatchStep, SimState, SteerPolicy, SteerStep};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Records the duration of every `decide` call of the wrapped policy.
#[derive(Debug, Clone)]
pub struct Timed<P> {
    pub inner: P,
    /// Seconds per decision, in call order.
    pub samples: Vec<f64>,
}

impl<P> Timed<P> {
    pub fn new(inner: P) -> Self {
        Timed { inner, samples: Vec::new() }
    }
}

impl<P: DispatchPolicy> DispatchPolicy for Timed<P> {
    fn decide(&mut self, sim: &SimState, order: OrderId, rng: &mut ChaCha8Rng) -> DispatchAction {
        let t0 = Instant::now();
        let a = self.inner.decide(sim, order, rng);
        self.samples.push(t0.elapsed().as_secs_f64());
        a
    }

    fn observe(&mut self, sim: &SimState, step: &DispatchStep) {
        self.inner.observe(sim, step)
    }

    fn end_of_minute(&mut self, sim: &SimState) {
        self.inner.end_of_minute(sim)
    }
}

impl<P: SteerPolicy> SteerPolicy for Timed<P> {
    fn decide(&mut self, sim: &SimState, courier: CourierId, rng: &mut ChaCha8Rng) -> usize {
        let t0 = Instant::now();
        let a = self.inner.decide(sim, courier, rng);
        self.samples.push(t0.elapsed().as_secs_f64());
        a
    }

    fn observe(&mut self, sim: &SimState, step: &SteerStep) {
        self.inner.observe(sim, step)
    }

    fn end_of_minute(&mut self, sim: &SimState) {
        self.inner.end_of_minute(sim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub decisions: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p99_s: f64,
    pub max_s: f64,
}

/// Nearest-rank percentile of sorted data, `q` in (0, 1].
fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencySummary {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencySummary::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        LatencySummary {
            decisions: s.len(),
            mean_s: s.iter().sum::<f64>() / s.len() as f64,
            p50_s: nearest_rank(&s, 0.5),
            p99_s: nearest_rank(&s, 0.99),
            max_s: s[s.len() - 1],
        }
    }
}
