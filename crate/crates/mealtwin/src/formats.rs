//! On-disk formats. JSON documents carry a top-level `schema` field and CSV
//! files start with a `# schema: ...` comment line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use mealtwin_core::dispatch::DispatchTrace;
use mealtwin_core::eval::{ComparisonReport, FAMILIES};
use mealtwin_core::hexgrid::GridId;
use mealtwin_core::scenario::{Minute, TransactionRecord};
use mealtwin_core::simcore::{Event, EventKind};
use mealtwin_core::steering::SteerTrace;
use mealtwin_core::trainer::TrainingReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{AppError, Result};

pub const SCENARIO: &str = "mealtwin.scenario/1";
pub const EXPERIMENT: &str = "mealtwin.experiment/1";
pub const WEIGHTS: &str = "mealtwin.weights/1";
pub const TRAINING: &str = "mealtwin.training/1";
pub const COMPARISON: &str = "mealtwin.comparison/1";
pub const FORECAST_EVAL: &str = "mealtwin.forecast-eval/1";
pub const EVENTS: &str = "mealtwin.events/1";
pub const HISTORY: &str = "mealtwin.history/1";
pub const RETURNS: &str = "mealtwin.returns/1";
pub const TABLE: &str = "mealtwin.table/1";
pub const DISPATCH_TRACE: &str = "mealtwin.dispatch-trace/1";
pub const STEER_TRACE: &str = "mealtwin.steer-trace/1";
pub const RATES: &str = "mealtwin.rates/1";
pub const LATENCY: &str = "mealtwin.latency/1";
pub const BALANCE: &str = "mealtwin.balance/1";

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| AppError::io(path, e))?))
}

/// Serializes `doc` with `schema` as its first field.
pub fn to_json_string<T: Serialize>(schema: &str, doc: &T) -> Result<String> {
    let body = serde_json::to_value(doc).map_err(|e| AppError::data(e.to_string()))?;
    let mut map = serde_json::Map::new();
    map.insert("schema".into(), Value::String(schema.into()));
    match body {
        Value::Object(fields) => map.extend(fields),
        other => {
            map.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(map)).expect("in-memory json");
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, schema: &str, doc: &T) -> Result<()> {
    let text = to_json_string(schema, doc)?;
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| AppError::io(path, e))
}

pub fn from_json_str<T: DeserializeOwned>(text: &str, schema: &str, origin: &str) -> Result<T> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| AppError::data(format!("{origin}: not valid JSON: {e}")))?;
    let map = value.as_object_mut().ok_or_else(|| AppError::data(format!("{origin}: expected a JSON object")))?;
    match map.remove("schema") {
        Some(Value::String(s)) if s == schema => {}
        Some(other) => return Err(AppError::data(format!("{origin}: schema {other} is not {schema}"))),
        None => return Err(AppError::data(format!("{origin}: missing schema field (expected {schema})"))),
    }
    let body = match map.remove("data") {
        Some(data) if map.is_empty() => data,
        Some(data) => {
            map.insert("data".into(), data);
            value
        }
        None => value,
    };
    serde_json::from_value(body).map_err(|e| AppError::data(format!("{origin}: {e}")))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    from_json_str(&text, schema, &path.display().to_string())
}

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let mut w = create(path)?;
    writeln!(w, "# schema: {schema}").map_err(|e| AppError::io(path, e))?;
    Ok(csv::Writer::from_writer(w))
}

fn csv_reader(path: &Path, schema: &str) -> Result<csv::Reader<BufReader<fs::File>>> {
    let file = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut first = String::new();
    r.read_line(&mut first).map_err(|e| AppError::io(path, e))?;
    let found = first.trim().strip_prefix("# schema:").map(str::trim);
    if found != Some(schema) {
        return Err(AppError::data(format!("{}: expected '# schema: {schema}' header", path.display())));
    }
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    AppError::data(format!("{}: {e}", path.display()))
}

const STAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

pub fn format_minute(t: Minute) -> String {
    DateTime::from_timestamp(t.0 * 60, 0).expect("timestamp in range").naive_utc().format(STAMP_FORMAT).to_string()
}

pub fn parse_minute(s: &str) -> Result<Minute> {
    let dt = NaiveDateTime::parse_from_str(s, STAMP_FORMAT)
        .map_err(|e| AppError::data(format!("bad timestamp '{s}': {e}")))?;
    Ok(Minute(dt.and_utc().timestamp().div_euclid(60)))
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRow {
    timestamp: String,
    restaurant_grid: u32,
    household_grid: u32,
}

pub fn write_history(path: &Path, records: &[TransactionRecord]) -> Result<()> {
    let mut w = csv_writer(path, HISTORY)?;
    for r in records {
        w.serialize(HistoryRow {
            timestamp: format_minute(r.timestamp),
            restaurant_grid: r.restaurant.0,
            household_grid: r.household.0,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<TransactionRecord>> {
    let mut r = csv_reader(path, HISTORY)?;
    let mut out = Vec::new();
    for row in r.deserialize::<HistoryRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        out.push(TransactionRecord {
            timestamp: parse_minute(&row.timestamp)?,
            restaurant: GridId(row.restaurant_grid),
            household: GridId(row.household_grid),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub grid: u32,
    pub hour: u32,
    pub rate: f64,
}

/// Hourly arrival rates, `grid,hour,rate` per row.
pub fn read_rates(path: &Path) -> Result<Vec<RateRow>> {
    let mut r = csv_reader(path, RATES)?;
    r.deserialize::<RateRow>().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_rates(path: &Path, rows: &[RateRow]) -> Result<()> {
    let mut w = csv_writer(path, RATES)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

fn entity(kind: &EventKind) -> String {
    use EventKind::*;
    match kind {
        ShiftStart { .. } | ShiftEnd => "shift".into(),
        CourierStart { courier, .. }
        | Status { courier, .. }
        | Hop { courier, .. }
        | Reallocated { courier, .. } => format!("courier:{courier}"),
        OrderPlaced { order, .. }
        | Assigned { order, .. }
        | Postponed { order }
        | Overdue { order }
        | ArrivedAtRestaurant { order, .. }
        | PickedUp { order, .. }
        | Delivered { order, .. } => format!("order:{order}"),
        GridBalance { grid, .. } => format!("grid:{grid}"),
    }
}

/// Event log as `minute,entity,event,detail`; `detail` holds the remaining
/// fields as a JSON object.
pub fn write_events(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = csv_writer(path, EVENTS)?;
    w.write_record(["minute", "entity", "event", "detail"]).map_err(|e| csv_err(path, e))?;
    for e in events {
        let Value::Object(mut fields) = serde_json::to_value(&e.kind).expect("events serialize") else {
            unreachable!("tagged enum serializes to an object")
        };
        let Some(Value::String(name)) = fields.remove("event") else { unreachable!("event tag present") };
        let detail = Value::Object(fields).to_string();
        w.write_record([e.time.to_string(), entity(&e.kind), name, detail]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

#[derive(Deserialize)]
struct EventRow {
    minute: f64,
    #[allow(dead_code)]
    entity: String,
    event: String,
    detail: String,
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let mut r = csv_reader(path, EVENTS)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<EventRow>().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let bad = |msg: String| AppError::data(format!("{}: record {}: {msg}", path.display(), i + 1));
        let mut fields = match serde_json::from_str::<Value>(&row.detail) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(bad("detail is not a JSON object".into())),
            Err(e) => return Err(bad(e.to_string())),
        };
        fields.insert("event".into(), Value::String(row.event));
        let kind: EventKind = serde_json::from_value(Value::Object(fields)).map_err(|e| bad(e.to_string()))?;
        if !row.minute.is_finite() {
            return Err(bad("non-finite minute".into()));
        }
        out.push(Event { time: row.minute, kind });
    }
    Ok(out)
}

/// Idle couriers and unassigned orders per grid and minute.
pub fn write_balance(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = csv_writer(path, BALANCE)?;
    w.write_record(["minute", "grid", "couriers", "orders", "gap"]).map_err(|e| csv_err(path, e))?;
    for e in events {
        if let EventKind::GridBalance { grid, couriers, orders } = e.kind {
            let gap = couriers as i64 - orders as i64;
            w.write_record([e.time.to_string(), grid.0.to_string(), couriers.to_string(), orders.to_string(), gap.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_dispatch_trace(path: &Path, rows: &[DispatchTrace]) -> Result<()> {
    let mut w = csv_writer(path, DISPATCH_TRACE)?;
    w.write_record(["minute", "order", "action", "reward", "q_max"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.minute.to_string(),
            r.order.0.to_string(),
            r.action.to_string(),
            r.reward.to_string(),
            r.q_max.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_steer_trace(path: &Path, rows: &[SteerTrace]) -> Result<()> {
    let mut w = csv_writer(path, STEER_TRACE)?;
    w.write_record(["minute", "courier", "from", "to", "reward"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.minute.to_string(),
            r.courier.0.to_string(),
            r.from.0.to_string(),
            r.to.0.to_string(),
            r.reward.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Per-episode returns of every phase as `phase,episode,return`.
pub fn write_returns(path: &Path, report: &TrainingReport) -> Result<()> {
    let mut w = csv_writer(path, RETURNS)?;
    w.write_record(["phase", "episode", "return"]).map_err(|e| csv_err(path, e))?;
    for p in &report.phases {
        for (k, r) in p.returns.iter().enumerate() {
            w.write_record([p.phase.as_str().to_string(), k.to_string(), r.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// One CSV per metric family plus the pairwise significance tests.
pub fn write_tables(dir: &Path, report: &ComparisonReport) -> Result<()> {
    for fam in FAMILIES {
        let path = dir.join(format!("{fam}.csv"));
        let mut w = csv_writer(&path, TABLE)?;
        w.write_record(["variant", "runs", "avg", "std_within", "std_between", "pooled_std"])
            .map_err(|e| csv_err(&path, e))?;
        for v in &report.variants {
            let row = &v.families[fam];
            w.write_record([
                v.variant.name().to_string(),
                row.runs.to_string(),
                row.avg.to_string(),
                row.std_within.to_string(),
                row.std_between.to_string(),
                row.pooled_std.to_string(),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| AppError::io(&path, e))?;
    }
    let path = dir.join("significance.csv");
    let mut w = csv_writer(&path, TABLE)?;
    w.write_record(["family", "a", "b", "u", "p", "significant"]).map_err(|e| csv_err(&path, e))?;
    for t in &report.tests {
        w.write_record([
            t.family.clone(),
            t.a.name().to_string(),
            t.b.name().to_string(),
            t.u.to_string(),
            t.p.to_string(),
            t.significant.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| AppError::io(&path, e))
}
