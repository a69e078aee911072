//! Next-15-minute demand prediction per restaurant grid: lagged count
//! features and a from-scratch gradient-boosted regression-tree ensemble.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::hexgrid::GridId;
use crate::scenario::{Minute, ScenarioConfig, TransactionRecord};

pub const WINDOW_MINUTES: i64 = 15;
pub const NUM_LAGS: usize = 4;
pub const NUM_FEATURES: usize = 2 + NUM_LAGS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagFeatures {
    pub day_of_week: u8,
    pub hour_of_day: u32,
    /// Counts in `(t-15, t]`, `(t-30, t-15]`, `(t-45, t-30]`, `(t-60, t-45]`.
    /// Orders placed at minute `t` are already known at `t`.
    pub lags: [f64; NUM_LAGS],
}

impl LagFeatures {
    pub fn to_vector(&self) -> [f64; NUM_FEATURES] {
        let mut v = [0.0; NUM_FEATURES];
        v[0] = self.day_of_week as f64;
        v[1] = self.hour_of_day as f64;
        v[2..].copy_from_slice(&self.lags);
        v
    }
}

/// Order placements indexed by restaurant grid for fast window counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemandHistory {
    stamps: BTreeMap<GridId, Vec<i64>>,
    /// Orders after this minute are known to be complete.
    covered_from: Option<Minute>,
}

impl DemandHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: &[TransactionRecord]) -> Self {
        let mut h = DemandHistory::new();
        for r in records {
            h.stamps.entry(r.restaurant).or_default().push(r.timestamp.0);
        }
        for v in h.stamps.values_mut() {
            v.sort_unstable();
        }
        h.covered_from = records.iter().map(|r| r.timestamp).min();
        h
    }

    pub fn with_coverage(mut self, from: Minute) -> Self {
        self.covered_from = Some(from);
        self
    }

    pub fn covered_from(&self) -> Option<Minute> {
        self.covered_from
    }

    /// Records a placement; stamps must arrive in non-decreasing order.
    pub fn push(&mut self, grid: GridId, at: Minute) {
        let v = self.stamps.entry(grid).or_default();
        debug_assert!(v.last().is_none_or(|l| *l <= at.0));
        v.push(at.0);
    }

    /// Orders at `grid` placed in `(start, end]`.
    pub fn count(&self, grid: GridId, start: Minute, end: Minute) -> usize {
        match self.stamps.get(&grid) {
            Some(v) => v.partition_point(|s| *s <= end.0) - v.partition_point(|s| *s <= start.0),
            None => 0,
        }
    }
}

/// Lag features at `t`. The flag is set when part of the lag window lies
/// before the history's coverage; those lags are zero.
pub fn build_features(history: &DemandHistory, grid: GridId, t: Minute) -> (LagFeatures, bool) {
    let mut lags = [0.0; NUM_LAGS];
    let mut insufficient = false;
    for (k, lag) in lags.iter_mut().enumerate() {
        let end = t.plus(-(k as i64) * WINDOW_MINUTES);
        let start = end.plus(-WINDOW_MINUTES);
        match history.covered_from {
            Some(c) if start >= c => *lag = history.count(grid, start, end) as f64,
            _ => insufficient = true,
        }
    }
    (LagFeatures { day_of_week: t.day_of_week(), hour_of_day: t.hour(), lags }, insufficient)
}

/// Supervised samples for `grid`: features at every `stride` minutes and the
/// count in `(t, t+15]`, restricted to windows fully inside
/// the hours the history covers on each day.
pub fn build_dataset(
    records: &[TransactionRecord],
    history: &DemandHistory,
    grid: GridId,
    stride: i64,
) -> Vec<(LagFeatures, f64)> {
    let days: BTreeSet<i64> = records.iter().map(|r| r.timestamp.day()).collect();
    let hours: BTreeSet<u32> = records.iter().map(|r| r.timestamp.hour()).collect();
    let (Some(&first_hour), Some(&last_hour)) = (hours.first(), hours.last()) else {
        return Vec::new();
    };
    let day_start = first_hour as i64 * 60;
    let day_end = (last_hour as i64 + 1) * 60;
    let mut out = Vec::new();
    for &day in &days {
        let mut m = day_start - 1 + NUM_LAGS as i64 * WINDOW_MINUTES;
        while m + WINDOW_MINUTES < day_end {
            let t = Minute::from_day(day, m);
            let (f, _) = build_features(history, grid, t);
            let y = history.count(grid, t, t.plus(WINDOW_MINUTES)) as f64;
            out.push((f, y));
            m += stride.max(1);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub min_leaf: usize,
    pub lambda: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams { rounds: 100, max_depth: 4, eta: 0.1, min_leaf: 5, lambda: 1.0 }
    }
}

/// Tree node. Splits send `x[feature] < threshold` left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn eval(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtEnsemble {
    pub trees: Vec<RegressionTree>,
    pub base_score: f64,
    pub eta: f64,
    pub params: GbtParams,
}

impl GbtEnsemble {
    pub fn raw(&self, x: &[f64; NUM_FEATURES]) -> f64 {
        self.base_score + self.eta * self.trees.iter().map(|t| t.eval(x)).sum::<f64>()
    }
}

struct Builder<'a> {
    xs: &'a [[f64; NUM_FEATURES]],
    grad: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<TreeNode>,
    mark: Vec<bool>,
}

impl Builder<'_> {
    fn leaf(&mut self, members: &[usize]) -> usize {
        let g: f64 = members.iter().map(|&i| self.grad[i]).sum();
        let h = members.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: -g / (h + self.params.lambda) });
        self.nodes.len() - 1
    }

    /// `sorted[f]` lists the node's samples ordered by feature `f`.
    fn build(&mut self, sorted: [Vec<usize>; NUM_FEATURES], depth: usize) -> usize {
        let n = sorted[0].len();
        let lambda = self.params.lambda;
        let min_leaf = self.params.min_leaf.max(1);
        if depth >= self.params.max_depth || n < 2 * min_leaf {
            return self.leaf(&sorted[0]);
        }
        let g_total: f64 = sorted[0].iter().map(|&i| self.grad[i]).sum();
        let h_total = n as f64;
        let parent = g_total * g_total / (h_total + lambda);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in sorted.iter().enumerate() {
            let mut g_left = 0.0;
            for k in 0..n - 1 {
                g_left += self.grad[order[k]];
                let left_n = k + 1;
                let (a, b) = (self.xs[order[k]][f], self.xs[order[k + 1]][f]);
                if a == b || left_n < min_leaf || n - left_n < min_leaf {
                    continue;
                }
                let h_left = left_n as f64;
                let g_right = g_total - g_left;
                let gain = g_left * g_left / (h_left + lambda)
                    + g_right * g_right / (h_total - h_left + lambda)
                    - parent;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(&sorted[0]);
        };
        for &i in &sorted[0] {
            self.mark[i] = self.xs[i][feature] < threshold;
        }
        let mut left: [Vec<usize>; NUM_FEATURES] = Default::default();
        let mut right: [Vec<usize>; NUM_FEATURES] = Default::default();
        for f in 0..NUM_FEATURES {
            for &i in &sorted[f] {
                if self.mark[i] { left[f].push(i) } else { right[f].push(i) }
            }
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold, left: l, right: r };
        id
    }
}

/// Squared-error boosting with exact greedy splits.
///
/// Split ties resolve to the lowest feature index, then the lowest
/// threshold.
pub fn train_gbt(dataset: &[(LagFeatures, f64)], params: &GbtParams) -> Result<GbtEnsemble, ConfigError> {
    let xs: Vec<[f64; NUM_FEATURES]> = dataset.iter().map(|(f, _)| f.to_vector()).collect();
    let ys: Vec<f64> = dataset.iter().map(|(_, y)| *y).collect();
    train_gbt_raw(&xs, &ys, params)
}

pub fn train_gbt_raw(xs: &[[f64; NUM_FEATURES]], ys: &[f64], params: &GbtParams) -> Result<GbtEnsemble, ConfigError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(ConfigError::InvalidParameter { name: "dataset", reason: "must be non-empty".into() });
    }
    if !(params.eta > 0.0) || !(params.lambda >= 0.0) {
        return Err(ConfigError::InvalidParameter { name: "gbt params", reason: "eta must be positive and lambda non-negative".into() });
    }
    let n = xs.len();
    let base_score = ys.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base_score; n];
    let mut presorted: [Vec<usize>; NUM_FEATURES] = Default::default();
    for (f, order) in presorted.iter_mut().enumerate() {
        *order = (0..n).collect();
        order.sort_by(|&a, &b| xs[a][f].total_cmp(&xs[b][f]).then(a.cmp(&b)));
    }
    let mut trees = Vec::with_capacity(params.rounds);
    let mut grad = vec![0.0; n];
    for _ in 0..params.rounds {
        for i in 0..n {
            grad[i] = pred[i] - ys[i];
        }
        let mut b = Builder { xs, grad: &grad, params, nodes: Vec::new(), mark: vec![false; n] };
        b.build(presorted.clone(), 0);
        let tree = RegressionTree { nodes: b.nodes };
        for i in 0..n {
            pred[i] += params.eta * tree.eval(&xs[i]);
        }
        trees.push(tree);
    }
    Ok(GbtEnsemble { trees, base_score, eta: params.eta, params: *params })
}

/// Expected orders in the next 15 minutes, clamped at zero.
pub fn predict_next15(model: &GbtEnsemble, f: &LagFeatures) -> f64 {
    let v = model.raw(&f.to_vector());
    if v.is_finite() { v.max(0.0) } else { 0.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

/// MAE and RMSE of `predictions` against `targets`.
pub fn error_stats(predictions: &[f64], targets: &[f64]) -> ErrorStats {
    assert_eq!(predictions.len(), targets.len());
    let n = targets.len();
    if n == 0 {
        return ErrorStats { mae: 0.0, rmse: 0.0, count: 0 };
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, y) in predictions.iter().zip(targets) {
        abs += libm::fabs(p - y);
        sq += (p - y) * (p - y);
    }
    ErrorStats { mae: abs / n as f64, rmse: libm::sqrt(sq / n as f64), count: n }
}

pub fn evaluate(model: &GbtEnsemble, holdout: &[(LagFeatures, f64)]) -> ErrorStats {
    let preds: Vec<f64> = holdout.iter().map(|(f, _)| predict_next15(model, f)).collect();
    let ys: Vec<f64> = holdout.iter().map(|(_, y)| *y).collect();
    error_stats(&preds, &ys)
}

/// Naive persistence baseline: the next 15 minutes repeat the last 15.
pub fn evaluate_persistence(holdout: &[(LagFeatures, f64)]) -> ErrorStats {
    let preds: Vec<f64> = holdout.iter().map(|(f, _)| f.lags[0]).collect();
    let ys: Vec<f64> = holdout.iter().map(|(_, y)| *y).collect();
    error_stats(&preds, &ys)
}

/// Expected 15-minute demand under the generating process.
pub fn oracle_predictor(config: &ScenarioConfig, grid: GridId, t: Minute) -> f64 {
    config.rate(grid, t.hour()).unwrap_or(0.0) * 0.25
}

/// One ensemble per restaurant grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridForecaster {
    pub models: BTreeMap<GridId, GbtEnsemble>,
}

impl GridForecaster {
    pub fn train(
        records: &[TransactionRecord],
        grids: impl IntoIterator<Item = GridId>,
        params: &GbtParams,
        stride: i64,
    ) -> Result<Self, ConfigError> {
        let history = DemandHistory::from_records(records);
        let mut models = BTreeMap::new();
        for g in grids {
            let data = build_dataset(records, &history, g, stride);
            models.insert(g, train_gbt(&data, params)?);
        }
        Ok(GridForecaster { models })
    }

    pub fn predict(&self, history: &DemandHistory, grid: GridId, t: Minute) -> f64 {
        match self.models.get(&grid) {
            Some(m) => predict_next15(m, &build_features(history, grid, t).0),
            None => 0.0,
        }
    }
}

/// Source of the per-grid demand forecast used by the decision makers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum DemandPredictor {
    Gbt(GridForecaster),
    /// Expected demand from the true arrival rates.
    Oracle,
    /// No anticipation; every forecast is zero.
    #[default]
    Zero,
}

impl DemandPredictor {
    pub fn predict(&self, config: &ScenarioConfig, history: &DemandHistory, grid: GridId, t: Minute) -> f64 {
        match self {
            DemandPredictor::Gbt(f) => f.predict(history, grid, t),
            DemandPredictor::Oracle => oracle_predictor(config, grid, t),
            DemandPredictor::Zero => 0.0,
        }
    }
}
