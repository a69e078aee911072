//! Experiment configuration and the train / evaluate / simulate pipeline
//! shared by the command-line tool and the test suites.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use mealtwin_core::dispatch::{DispatchAgent, DispatchTrace, NearestIdle};
use mealtwin_core::eval::{compare_frameworks, compute_metrics, ComparisonReport, Dispatcher, RunMetrics, Variant};
use mealtwin_core::forecast::{
    build_dataset, evaluate as evaluate_model, evaluate_persistence, train_gbt, DemandHistory, DemandPredictor,
    ErrorStats, GbtParams, GridForecaster,
};
use mealtwin_core::rlcore::QNet;
use mealtwin_core::scenario::{synth_history, ScenarioConfig, TransactionRecord};
use mealtwin_core::simcore::{DispatchPolicy, Event, Mode, SimOptions, SimState};
use mealtwin_core::steering::{SteerAgent, SteerTrace};
use mealtwin_core::trainer::{sandwich_train, TrainedPolicies, TrainingPlan, TrainingReport};
use mealtwin_core::GridId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::formats;
use crate::timing::{LatencySummary, Timed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ForecasterConfig {
    /// Gradient-boosted trees trained on synthetic history of the scenario.
    Gbt {
        #[serde(default = "default_weeks")]
        weeks: u32,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        params: GbtParams,
        #[serde(default = "default_stride")]
        stride: i64,
    },
    Oracle,
    Zero,
}

fn default_weeks() -> u32 {
    24
}

fn default_stride() -> i64 {
    1
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        ForecasterConfig::Gbt { weeks: default_weeks(), seed: 0, params: GbtParams::default(), stride: default_stride() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceFlags {
    pub dispatch: bool,
    pub steering: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Scenario document; the built-in default market when absent.
    pub scenario: Option<PathBuf>,
    pub forecaster: ForecasterConfig,
    pub training: TrainingPlan,
    pub variants: Vec<Variant>,
    pub eval_shifts: u32,
    pub eval_seed: u64,
    /// Worker threads for evaluation; 0 picks one per core.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub traces: TraceFlags,
    /// Variant and seed used by `simulate`.
    pub simulate_variant: Variant,
    pub simulate_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: None,
            forecaster: ForecasterConfig::default(),
            training: TrainingPlan::default(),
            variants: Variant::ALL.to_vec(),
            eval_shifts: 100,
            eval_seed: 1_000_000,
            workers: 0,
            output_dir: PathBuf::from("out"),
            traces: TraceFlags::default(),
            simulate_variant: Variant { dispatcher: Dispatcher::Strategic, steering: true },
            simulate_seed: 1_000_000,
        }
    }
}

/// A loaded configuration with its paths resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Arc<ScenarioConfig>,
    pub output_dir: PathBuf,
}

impl Experiment {
    /// Relative paths in the document are taken from the document's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let config: ExperimentConfig = formats::read_json(path, formats::EXPERIMENT)?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_config(config, base)
    }

    pub fn from_config(config: ExperimentConfig, base: &Path) -> Result<Self> {
        if config.variants.is_empty() {
            return Err(AppError::data("experiment lists no variants"));
        }
        if config.eval_shifts == 0 {
            return Err(AppError::data("eval_shifts must be at least 1"));
        }
        config.training.validate()?;
        let scenario = match &config.scenario {
            Some(p) => load_scenario(&base.join(p))?,
            None => ScenarioConfig::default_market(),
        };
        let output_dir = base.join(&config.output_dir);
        Ok(Experiment { config, scenario: Arc::new(scenario), output_dir })
    }

    /// Modes whose trained networks the configured variants use.
    pub fn modes(&self) -> Vec<Mode> {
        modes_for(&self.config.variants)
    }

    pub fn predictor(&self) -> Result<DemandPredictor> {
        build_predictor(&self.config.forecaster, &self.scenario)
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    formats::read_json(path, formats::SCENARIO)
}

pub fn modes_for(variants: &[Variant]) -> Vec<Mode> {
    let strategic = variants.iter().any(|v| match v.dispatcher {
        Dispatcher::Strategic => true,
        Dispatcher::NearestIdle => v.steering,
        Dispatcher::Myopic => false,
    });
    let myopic = variants.iter().any(|v| v.dispatcher == Dispatcher::Myopic);
    let mut out = Vec::new();
    if strategic {
        out.push(Mode::Strategic);
    }
    if myopic {
        out.push(Mode::Myopic);
    }
    out
}

pub fn build_predictor(cfg: &ForecasterConfig, scenario: &ScenarioConfig) -> Result<DemandPredictor> {
    Ok(match cfg {
        ForecasterConfig::Gbt { weeks, seed, params, stride } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let records = synth_history(scenario, *weeks, &mut rng)?;
            let f = GridForecaster::train(&records, scenario.region.restaurant_ids(), params, *stride)?;
            DemandPredictor::Gbt(f)
        }
        ForecasterConfig::Oracle => DemandPredictor::Oracle,
        ForecasterConfig::Zero => DemandPredictor::Zero,
    })
}

/// Trained networks of one mode as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub mode: Mode,
    pub seed: u64,
    /// Dispatch network after the first phase, used without steering.
    pub dispatch_solo: QNet,
    pub dispatch: QNet,
    pub steering: QNet,
}

impl From<&TrainedPolicies> for PolicyBundle {
    fn from(t: &TrainedPolicies) -> Self {
        PolicyBundle {
            mode: t.report.mode,
            seed: t.report.seed,
            dispatch_solo: t.dispatch_solo.clone(),
            dispatch: t.dispatch.clone(),
            steering: t.steering.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Policies {
    pub strategic: Option<PolicyBundle>,
    pub myopic: Option<PolicyBundle>,
}

impl Policies {
    pub fn get(&self, mode: Mode) -> Option<&PolicyBundle> {
        match mode {
            Mode::Strategic => self.strategic.as_ref(),
            Mode::Myopic => self.myopic.as_ref(),
        }
    }

    pub fn insert(&mut self, b: PolicyBundle) {
        match b.mode {
            Mode::Strategic => self.strategic = Some(b),
            Mode::Myopic => self.myopic = Some(b),
        }
    }
}

pub fn policy_path(dir: &Path, mode: Mode) -> PathBuf {
    dir.join(format!("policies-{}.json", mode.as_str()))
}

pub fn load_policies(dir: &Path, modes: &[Mode]) -> Result<Policies> {
    let mut out = Policies::default();
    for &m in modes {
        let path = policy_path(dir, m);
        if !path.exists() {
            return Err(AppError::data(format!(
                "missing weights for {} dispatch: {} (run `train` first)",
                m.as_str(),
                path.display()
            )));
        }
        let b: PolicyBundle = formats::read_json(&path, formats::WEIGHTS)?;
        if b.mode != m {
            return Err(AppError::data(format!("{}: holds {} weights", path.display(), b.mode.as_str())));
        }
        out.insert(b);
    }
    Ok(out)
}

/// Trains every mode in `modes`, in order.
pub fn train_modes(
    scenario: &Arc<ScenarioConfig>,
    predictor: &Arc<DemandPredictor>,
    modes: &[Mode],
    plan: &TrainingPlan,
) -> Result<Vec<TrainedPolicies>> {
    modes.iter().map(|&m| Ok(sandwich_train(scenario.clone(), predictor.clone(), m, plan.clone())?)).collect()
}

/// Writes weights, the training report and the return series of each mode.
pub fn write_training(dir: &Path, trained: &[TrainedPolicies]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    for t in trained {
        let m = t.report.mode.as_str();
        formats::write_json(&policy_path(dir, t.report.mode), formats::WEIGHTS, &PolicyBundle::from(t))?;
        formats::write_json(&dir.join(format!("training-{m}.json")), formats::TRAINING, &t.report)?;
        formats::write_returns(&dir.join(format!("returns-{m}.csv")), &t.report)?;
    }
    Ok(())
}

pub fn training_failure(reports: &[&TrainingReport]) -> Option<String> {
    reports
        .iter()
        .find_map(|r| r.aborted().map(|why| format!("{} training diverged: {why}", r.mode.as_str())))
}

/// Decision makers of one variant for one shift.
pub struct VariantAgents {
    pub dispatch: Timed<Box<dyn DispatchPolicy + Send>>,
    pub steering: Option<Timed<SteerAgent>>,
}

impl VariantAgents {
    pub fn new(variant: Variant, policies: &Policies, plan: &TrainingPlan) -> Result<Self> {
        let need = |m: Mode| {
            policies.get(m).ok_or_else(|| AppError::data(format!("missing {} weights for {variant}", m.as_str())))
        };
        let dispatch: Box<dyn DispatchPolicy + Send> = match variant.dispatcher {
            Dispatcher::NearestIdle => Box::new(NearestIdle),
            d => {
                let b = need(if d == Dispatcher::Myopic { Mode::Myopic } else { Mode::Strategic })?;
                let net = if variant.steering { &b.dispatch } else { &b.dispatch_solo };
                Box::new(DispatchAgent::frozen(net.clone(), plan.rewards))
            }
        };
        let steering = if variant.steering {
            let b = need(variant.mode())?;
            Some(Timed::new(SteerAgent::frozen(b.steering.clone())))
        } else {
            None
        };
        Ok(VariantAgents { dispatch: Timed::new(dispatch), steering })
    }

    pub fn run(
        &mut self,
        scenario: &Arc<ScenarioConfig>,
        predictor: &Arc<DemandPredictor>,
        mode: Mode,
        seed: u64,
    ) -> Result<SimState> {
        let mut sim = SimState::new(scenario.clone(), predictor.clone(), mode, seed, SimOptions { record_events: true })?;
        match self.steering.as_mut() {
            Some(s) => sim.run(&mut self.dispatch, Some(s))?,
            None => sim.run(&mut self.dispatch, None::<&mut Timed<SteerAgent>>)?,
        }
        Ok(sim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantLatency {
    pub variant: Variant,
    pub dispatch: LatencySummary,
    pub steering: Option<LatencySummary>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub runs: Vec<(Variant, Vec<RunMetrics>)>,
    pub report: ComparisonReport,
    pub latency: Vec<VariantLatency>,
}

struct ShiftOutcome {
    metrics: RunMetrics,
    dispatch_times: Vec<f64>,
    steer_times: Vec<f64>,
}

/// Runs `shifts` matched-seed shifts per variant on `workers` threads.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_variants(
    scenario: &Arc<ScenarioConfig>,
    predictor: &Arc<DemandPredictor>,
    policies: &Policies,
    plan: &TrainingPlan,
    variants: &[Variant],
    shifts: u32,
    first_seed: u64,
    workers: usize,
) -> Result<Evaluation> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| AppError::Usage(format!("cannot start worker pool: {e}")))?;
    let jobs: Vec<(usize, u64)> =
        (0..variants.len()).flat_map(|v| (0..shifts as u64).map(move |k| (v, first_seed + k))).collect();
    let fleet = scenario.fleet_size;
    let outcomes: Vec<Result<ShiftOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, seed)| {
                let variant = variants[v];
                let mut agents = VariantAgents::new(variant, policies, plan)?;
                let sim = agents.run(scenario, predictor, variant.mode(), seed)?;
                Ok(ShiftOutcome {
                    metrics: compute_metrics(sim.events(), fleet)?,
                    dispatch_times: agents.dispatch.samples,
                    steer_times: agents.steering.map(|s| s.samples).unwrap_or_default(),
                })
            })
            .collect()
    });
    let mut runs: Vec<(Variant, Vec<RunMetrics>)> = variants.iter().map(|&v| (v, Vec::new())).collect();
    let mut times: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); variants.len()];
    for (&(v, _), out) in jobs.iter().zip(outcomes) {
        let out = out?;
        runs[v].1.push(out.metrics);
        times[v].0.extend(out.dispatch_times);
        times[v].1.extend(out.steer_times);
    }
    let latency = variants
        .iter()
        .zip(times)
        .map(|(&variant, (d, s))| VariantLatency {
            variant,
            dispatch: LatencySummary::of(&d),
            steering: variant.steering.then(|| LatencySummary::of(&s)),
        })
        .collect();
    let report = compare_frameworks(&runs);
    Ok(Evaluation { runs, report, latency })
}

pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    formats::write_json(&dir.join("comparison.json"), formats::COMPARISON, &eval.report)?;
    formats::write_tables(&dir.join("tables"), &eval.report)?;
    Ok(())
}

/// Wall-clock measurements; kept apart from the reproducible outputs.
pub fn write_latency(dir: &Path, eval: &Evaluation) -> Result<()> {
    formats::write_json(&dir.join("latency.json"), formats::LATENCY, &eval.latency)
}

/// One recorded shift with optional decision traces.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub events: Vec<Event>,
    pub dispatch_trace: Option<Vec<DispatchTrace>>,
    pub steer_trace: Option<Vec<SteerTrace>>,
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    scenario: &Arc<ScenarioConfig>,
    predictor: &Arc<DemandPredictor>,
    policies: &Policies,
    plan: &TrainingPlan,
    variant: Variant,
    seed: u64,
    traces: TraceFlags,
) -> Result<Simulation> {
    let mut dispatch_agent = match variant.dispatcher {
        Dispatcher::NearestIdle => None,
        d => {
            let m = if d == Dispatcher::Myopic { Mode::Myopic } else { Mode::Strategic };
            let b = policies.get(m).ok_or_else(|| AppError::data(format!("missing {} weights", m.as_str())))?;
            let net = if variant.steering { &b.dispatch } else { &b.dispatch_solo };
            let mut a = DispatchAgent::frozen(net.clone(), plan.rewards);
            if traces.dispatch {
                a.trace = Some(Vec::new());
            }
            Some(a)
        }
    };
    let mut steer_agent = if variant.steering {
        let b = policies.get(variant.mode()).ok_or_else(|| AppError::data("missing steering weights"))?;
        let mut a = SteerAgent::frozen(b.steering.clone());
        if traces.steering {
            a.trace = Some(Vec::new());
        }
        Some(a)
    } else {
        None
    };
    let mut sim = SimState::new(scenario.clone(), predictor.clone(), variant.mode(), seed, SimOptions { record_events: true })?;
    let mut nearest = NearestIdle;
    let dispatch: &mut dyn DispatchPolicy = match dispatch_agent.as_mut() {
        Some(a) => a,
        None => &mut nearest,
    };
    match steer_agent.as_mut() {
        Some(s) => sim.run(dispatch, Some(s))?,
        None => sim.run(dispatch, None::<&mut SteerAgent>)?,
    }
    if let Some(e) = dispatch_agent.as_ref().and_then(|a| a.error.clone()) {
        return Err(e.into());
    }
    Ok(Simulation {
        events: sim.take_events(),
        dispatch_trace: dispatch_agent.and_then(|a| a.trace),
        steer_trace: steer_agent.and_then(|a| a.trace),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridForecastError {
    pub grid: GridId,
    pub model: ErrorStats,
    pub persistence: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastEvaluation {
    pub train_days: usize,
    pub holdout_days: usize,
    pub grids: Vec<GridForecastError>,
    pub model: ErrorStats,
    pub persistence: ErrorStats,
}

fn pooled(stats: impl Iterator<Item = ErrorStats> + Clone) -> ErrorStats {
    let count: usize = stats.clone().map(|s| s.count).sum();
    if count == 0 {
        return ErrorStats { mae: 0.0, rmse: 0.0, count: 0 };
    }
    let n = count as f64;
    let mae = stats.clone().map(|s| s.mae * s.count as f64).sum::<f64>() / n;
    let mse = stats.map(|s| s.rmse * s.rmse * s.count as f64).sum::<f64>() / n;
    ErrorStats { mae, rmse: mse.sqrt(), count }
}

/// Chronological split: the last `holdout_fraction` of observed days are
/// held out; the model is compared against last-window persistence.
pub fn forecast_eval(
    records: &[TransactionRecord],
    grids: &[GridId],
    params: &GbtParams,
    stride: i64,
    holdout_fraction: f64,
) -> Result<ForecastEvaluation> {
    let mut days: Vec<i64> = records.iter().map(|r| r.timestamp.day()).collect();
    days.sort_unstable();
    days.dedup();
    if days.len() < 2 {
        return Err(AppError::data("forecast evaluation needs at least two days of history"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(AppError::Usage("holdout fraction must lie in (0, 1)".into()));
    }
    let holdout_days = ((days.len() as f64 * holdout_fraction).round() as usize).clamp(1, days.len() - 1);
    let split = days[days.len() - holdout_days];
    let (train, test): (Vec<TransactionRecord>, Vec<TransactionRecord>) =
        records.iter().partition(|r| r.timestamp.day() < split);
    let th = DemandHistory::from_records(&train);
    let hh = DemandHistory::from_records(&test);
    let mut out = Vec::new();
    for &g in grids {
        let model = train_gbt(&build_dataset(&train, &th, g, stride), params)?;
        let hold = build_dataset(&test, &hh, g, 1);
        out.push(GridForecastError { grid: g, model: evaluate_model(&model, &hold), persistence: evaluate_persistence(&hold) });
    }
    Ok(ForecastEvaluation {
        train_days: days.len() - holdout_days,
        holdout_days,
        model: pooled(out.iter().map(|g| g.model)),
        persistence: pooled(out.iter().map(|g| g.persistence)),
        grids: out,
    })
}

/// Scenario on an offset-rectangle region. The 5x5 region gets the default
/// market; other sizes spread the same hourly totals evenly over their
/// restaurant grids with uniform destinations.
pub fn default_scenario(cols: u32, rows: u32, fleet: usize) -> Result<ScenarioConfig> {
    if (cols, rows) == (5, 5) {
        let mut cfg = ScenarioConfig::default_market();
        cfg.fleet_size = fleet;
        return Ok(cfg);
    }
    let region = mealtwin_core::ServiceRegion::offset_rectangle(cols, rows)
        .map_err(|e| AppError::data(format!("invalid region: {e}")))?;
    let mut cfg = ScenarioConfig::empty(region, fleet);
    let restaurants: Vec<GridId> = cfg.region.restaurant_ids().collect();
    if restaurants.is_empty() {
        return Err(AppError::data(format!("a {cols}x{rows} region has no interior restaurant grids")));
    }
    let uniform = vec![1.0 / cfg.region.len() as f64; cfg.region.len()];
    for (hour, total) in [(18u32, 45.0), (19, 66.0), (20, 60.0)] {
        for &g in &restaurants {
            cfg.set_rate(g, hour, total / restaurants.len() as f64)?;
        }
    }
    for &g in &restaurants {
        cfg.set_od_row(g, uniform.clone())?;
    }
    Ok(cfg)
}
