use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use mealtwin::error::{AppError, Result};
use mealtwin::experiment::{self, Experiment, ExperimentConfig, ForecasterConfig};
use mealtwin::{formats, report, snapshot};
use mealtwin_core::eval::Variant;
use mealtwin_core::forecast::GbtParams;
use mealtwin_core::scenario::{synth_history, ScenarioConfig};
use mealtwin_core::trainer::TrainingReport;
use mealtwin_core::GridId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mealtwin", version, about = "Meal-delivery digital twin with learned dispatching and courier steering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario document for an offset-rectangle region.
    GenScenario {
        #[arg(long, default_value_t = 25)]
        fleet: usize,
        #[arg(long, default_value_t = 5)]
        cols: u32,
        #[arg(long, default_value_t = 5)]
        rows: u32,
        /// Rate table (`grid,hour,rate`) overriding the default hourly rates.
        #[arg(long)]
        rates: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic transaction history from a scenario.
    SynthHistory {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        weeks: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train dispatch and steering networks for the configured variants.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// One episode per phase.
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one shift and write its event log.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dispatch_trace: Option<PathBuf>,
        #[arg(long)]
        steer_trace: Option<PathBuf>,
        /// Per-minute grid balance table.
        #[arg(long)]
        balance: Option<PathBuf>,
    },
    /// Evaluate the configured variants over matched-seed shifts.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        shifts: Option<u32>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the demand forecaster with persistence on a chronological holdout.
    ForecastEval {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Transaction history; synthesized from the scenario when absent.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        weeks: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the grid balance at one minute of an event log as SVG.
    Snapshot {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        minute: u32,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render comparison and training results in a directory as markdown.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(config: Option<&Path>) -> Result<Experiment> {
    match config {
        Some(p) => Experiment::load(p),
        None => Experiment::from_config(ExperimentConfig::default(), Path::new("")),
    }
}

fn scenario_or_default(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => experiment::load_scenario(p),
        None => Ok(ScenarioConfig::default_market()),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        AppError::Usage(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScenario { fleet, cols, rows, rates, seed, out } => {
            let mut cfg = experiment::default_scenario(cols, rows, fleet)?;
            cfg.seed = seed;
            if let Some(path) = rates {
                for r in formats::read_rates(&path)? {
                    cfg.set_rate(GridId(r.grid), r.hour, r.rate)
                        .map_err(|e| AppError::data(format!("{}: {e}", path.display())))?;
                }
            }
            cfg.validate()?;
            formats::write_json(&out, formats::SCENARIO, &cfg)?;
            eprintln!("wrote {} ({} grids, {} restaurants, fleet {})", out.display(), cfg.region.len(), cfg.region.restaurant_count(), cfg.fleet_size);
        }
        Command::SynthHistory { scenario, weeks, seed, out } => {
            let cfg = scenario_or_default(scenario.as_deref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = synth_history(&cfg, weeks, &mut rng)?;
            formats::write_history(&out, &records)?;
            eprintln!("wrote {} records to {}", records.len(), out.display());
        }
        Command::Train { config, smoke, seed, out } => {
            let mut exp = experiment(config.as_deref())?;
            if smoke {
                exp.config.training.episodes = [1, 1, 1];
            }
            if let Some(s) = seed {
                exp.config.training.seed = s;
            }
            let dir = out.unwrap_or_else(|| exp.output_dir.clone());
            let predictor = Arc::new(exp.predictor()?);
            let modes = exp.modes();
            if modes.is_empty() {
                eprintln!("no configured variant needs trained weights");
                return Ok(());
            }
            let trained = experiment::train_modes(&exp.scenario, &predictor, &modes, &exp.config.training)?;
            experiment::write_training(&dir, &trained)?;
            eprintln!("wrote weights and training reports to {}", dir.display());
            let reports: Vec<&TrainingReport> = trained.iter().map(|t| &t.report).collect();
            if let Some(why) = experiment::training_failure(&reports) {
                return Err(AppError::Numerical(why));
            }
        }
        Command::Simulate { config, variant, seed, weights, out, dispatch_trace, steer_trace, balance } => {
            let exp = experiment(config.as_deref())?;
            let variant = match variant {
                Some(v) => parse_variant(&v)?,
                None => exp.config.simulate_variant,
            };
            let seed = seed.unwrap_or(exp.config.simulate_seed);
            let dir = weights.unwrap_or_else(|| exp.output_dir.clone());
            let policies = experiment::load_policies(&dir, &experiment::modes_for(&[variant]))?;
            let predictor = Arc::new(exp.predictor()?);
            let mut traces = exp.config.traces;
            traces.dispatch |= dispatch_trace.is_some();
            traces.steering |= steer_trace.is_some();
            let sim = experiment::simulate(&exp.scenario, &predictor, &policies, &exp.config.training, variant, seed, traces)?;
            formats::write_events(&out, &sim.events)?;
            if let (Some(p), Some(t)) = (dispatch_trace, &sim.dispatch_trace) {
                formats::write_dispatch_trace(&p, t)?;
            }
            if let (Some(p), Some(t)) = (steer_trace, &sim.steer_trace) {
                formats::write_steer_trace(&p, t)?;
            }
            if let Some(p) = balance {
                formats::write_balance(&p, &sim.events)?;
            }
            eprintln!("wrote {} events to {}", sim.events.len(), out.display());
        }
        Command::Evaluate { config, shifts, workers, weights, out } => {
            let exp = experiment(config.as_deref())?;
            let shifts = shifts.unwrap_or(exp.config.eval_shifts);
            if shifts == 0 {
                return Err(AppError::Usage("--shifts must be at least 1".into()));
            }
            let dir = out.unwrap_or_else(|| exp.output_dir.clone());
            let policies = experiment::load_policies(&weights.unwrap_or_else(|| exp.output_dir.clone()), &exp.modes())?;
            let predictor = Arc::new(exp.predictor()?);
            let eval = experiment::evaluate_variants(
                &exp.scenario,
                &predictor,
                &policies,
                &exp.config.training,
                &exp.config.variants,
                shifts,
                exp.config.eval_seed,
                workers.unwrap_or(exp.config.workers),
            )?;
            experiment::write_evaluation(&dir, &eval)?;
            experiment::write_latency(&dir, &eval)?;
            print!("{}", report::comparison_markdown(&eval.report));
        }
        Command::ForecastEval { scenario, history, weeks, seed, holdout, out } => {
            let cfg = scenario_or_default(scenario.as_deref())?;
            let records = match history {
                Some(p) => formats::read_history(&p)?,
                None => synth_history(&cfg, weeks, &mut ChaCha8Rng::seed_from_u64(seed))?,
            };
            let grids: Vec<GridId> = cfg.region.restaurant_ids().collect();
            let (params, stride) = match ForecasterConfig::default() {
                ForecasterConfig::Gbt { params, stride, .. } => (params, stride),
                _ => (GbtParams::default(), 1),
            };
            let r = experiment::forecast_eval(&records, &grids, &params, stride, holdout)?;
            println!(
                "holdout {} days: model MAE {:.4} RMSE {:.4}; persistence MAE {:.4} RMSE {:.4}",
                r.holdout_days, r.model.mae, r.model.rmse, r.persistence.mae, r.persistence.rmse
            );
            if let Some(p) = out {
                formats::write_json(&p, formats::FORECAST_EVAL, &r)?;
            }
        }
        Command::Snapshot { events, minute, scenario, out } => {
            let cfg = scenario_or_default(scenario.as_deref())?;
            let log = formats::read_events(&events)?;
            let balance = snapshot::balance_at(&log, minute)?;
            write_text(&out, &snapshot::render_svg(&cfg.region, minute, &balance)?)?;
        }
        Command::Report { dir, out } => {
            let mut text = String::new();
            let cmp = dir.join("comparison.json");
            if cmp.exists() {
                text.push_str(&report::comparison_markdown(&formats::read_json(&cmp, formats::COMPARISON)?));
            }
            let mut training = Vec::new();
            for m in ["strategic", "myopic"] {
                let p = dir.join(format!("training-{m}.json"));
                if p.exists() {
                    training.push(formats::read_json::<TrainingReport>(&p, formats::TRAINING)?);
                }
            }
            if !training.is_empty() {
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str(&report::training_markdown(&training));
            }
            if text.is_empty() {
                return Err(AppError::data(format!("{} holds no comparison or training results", dir.display())));
            }
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
