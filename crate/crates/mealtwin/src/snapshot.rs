//! Hex-map heatmaps of the grid balance at one minute.

use std::fmt::Write;

use mealtwin_core::simcore::{Event, EventKind};
use mealtwin_core::{GridId, ServiceRegion};

use crate::error::{AppError, Result};

/// Color bins on each side of zero.
pub const BINS: i32 = 4;

const NEGATIVE: [&str; 4] = ["#fddbc7", "#f4a582", "#d6604d", "#b2182b"];
const POSITIVE: [&str; 4] = ["#d1e5f0", "#92c5de", "#4393c3", "#2166ac"];
const NEUTRAL: &str = "#f7f7f7";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridBalance {
    pub grid: GridId,
    pub couriers: u32,
    pub orders: u32,
}

impl GridBalance {
    pub fn gap(&self) -> i64 {
        self.couriers as i64 - self.orders as i64
    }
}

/// Grid balance logged at `minute`, in log order.
pub fn balance_at(events: &[Event], minute: u32) -> Result<Vec<GridBalance>> {
    let minutes = events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::ShiftStart { minutes, .. } => Some(minutes),
            _ => None,
        })
        .ok_or_else(|| AppError::data("event log has no shift start"))?;
    if minute >= minutes {
        return Err(AppError::data(format!("minute {minute} is outside the shift (0..{minutes})")));
    }
    let rows: Vec<GridBalance> = events
        .iter()
        .filter(|e| e.time == minute as f64)
        .filter_map(|e| match e.kind {
            EventKind::GridBalance { grid, couriers, orders } => Some(GridBalance { grid, couriers, orders }),
            _ => None,
        })
        .collect();
    if rows.is_empty() {
        return Err(AppError::data(format!("event log has no grid balance at minute {minute}")));
    }
    Ok(rows)
}

/// Signed bin in `-BINS..=BINS`, scaled to the largest magnitude shown.
pub fn color_bin(value: f64, max_abs: f64) -> i32 {
    if value == 0.0 || max_abs == 0.0 {
        return 0;
    }
    let b = (value.abs() / max_abs * BINS as f64).ceil() as i32;
    b.clamp(1, BINS) * value.signum() as i32
}

fn bin_color(bin: i32) -> &'static str {
    match bin {
        0 => NEUTRAL,
        b if b < 0 => NEGATIVE[(-b - 1) as usize],
        b => POSITIVE[(b - 1) as usize],
    }
}

const SIZE: f64 = 28.0;
const PANEL_GAP: f64 = 40.0;

fn centers(region: &ServiceRegion) -> Vec<(f64, f64)> {
    let raw: Vec<(f64, f64)> = region
        .coords()
        .iter()
        .map(|c| (SIZE * 3f64.sqrt() * (c.q as f64 + c.r as f64 / 2.0), SIZE * 1.5 * c.r as f64))
        .collect();
    let min_x = raw.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let min_y = raw.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let half_w = SIZE * 3f64.sqrt() / 2.0;
    raw.into_iter().map(|(x, y)| (x - min_x + half_w, y - min_y + SIZE)).collect()
}

fn hexagon(cx: f64, cy: f64) -> String {
    (0..6)
        .map(|k| {
            let a = std::f64::consts::PI / 180.0 * (60.0 * k as f64 - 30.0);
            format!("{:.2},{:.2}", cx + SIZE * a.cos(), cy + SIZE * a.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Two panels: idle couriers and current supply-demand gap per grid.
pub fn render_svg(region: &ServiceRegion, minute: u32, balance: &[GridBalance]) -> Result<String> {
    let mut values: Vec<Option<GridBalance>> = vec![None; region.len()];
    for b in balance {
        let i = region.index_of(b.grid).ok_or_else(|| AppError::data(format!("grid {} is not in the region", b.grid)))?;
        values[i] = Some(*b);
    }
    let pts = centers(region);
    let width = pts.iter().map(|p| p.0).fold(0.0, f64::max) + SIZE;
    let height = pts.iter().map(|p| p.1).fold(0.0, f64::max) + SIZE;
    let title_h = 24.0;
    let total_w = 2.0 * width + PANEL_GAP;
    let total_h = height + title_h + 8.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.2} {total_h:.2}" data-minute="{minute}">"#
    );
    let panels: [(&str, &str, fn(&GridBalance) -> f64); 2] = [
        ("couriers", "Idle couriers", |b| b.couriers as f64),
        ("gap", "Supply-demand gap", |b| b.gap() as f64),
    ];
    for (p, (key, title, value)) in panels.iter().enumerate() {
        let vals: Vec<f64> = values.iter().map(|b| b.as_ref().map_or(0.0, value)).collect();
        let max_abs = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ox = p as f64 * (width + PANEL_GAP);
        let _ = writeln!(svg, r#"  <g class="panel" data-panel="{key}" transform="translate({ox:.2},{title_h})">"#);
        let _ = writeln!(
            svg,
            r#"    <text x="{:.2}" y="-8" text-anchor="middle" font-family="sans-serif" font-size="13">{title} (minute {minute})</text>"#,
            width / 2.0
        );
        for (i, &(cx, cy)) in pts.iter().enumerate() {
            let g = region.ids()[i];
            let v = vals[i];
            let bin = color_bin(v, max_abs);
            let _ = writeln!(
                svg,
                r##"    <polygon points="{}" fill="{}" stroke="#555" stroke-width="1" data-grid="{g}" data-value="{v}" data-bin="{bin}"/>"##,
                hexagon(cx, cy),
                bin_color(bin)
            );
            let _ = writeln!(
                svg,
                r#"    <text x="{cx:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10">{g}: {v}</text>"#,
                cy + 4.0
            );
        }
        svg.push_str("  </g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
