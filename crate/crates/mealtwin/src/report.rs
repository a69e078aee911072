//! Markdown rendering of comparison and training results.

use std::fmt::Write;

use mealtwin_core::eval::{ComparisonReport, FAMILIES};
use mealtwin_core::trainer::TrainingReport;

fn family_title(f: &str) -> &str {
    match f {
        "time_gap" => "Time gap (min, courier arrival minus ready time)",
        "pickup_distance" => "Pickup distance (hops)",
        "overdue_rate" => "Overdue rate",
        "nsd" => "Negative supply-demand balance per grid-minute",
        "psd" => "Positive supply-demand balance per grid-minute",
        "orders_received_std" => "Orders received per courier",
        "delivery_minutes" => "Delivery minutes per courier",
        "travel_distance" => "Travel distance per courier (hops)",
        "idle_minutes" => "Idle minutes per courier",
        other => other,
    }
}

pub fn comparison_markdown(report: &ComparisonReport) -> String {
    let mut s = String::from("# Framework comparison\n\n");
    for v in &report.variants {
        if let Some(w) = &v.warning {
            let _ = writeln!(s, "- {}: {w}", v.variant);
        }
        if !v.excluded.is_empty() {
            let _ = writeln!(s, "- {}: {} outlier runs excluded", v.variant, v.excluded.len());
        }
    }
    for m in &report.missing {
        let _ = writeln!(s, "- {m}: no runs");
    }
    for fam in FAMILIES {
        let _ = writeln!(s, "\n## {}\n", family_title(fam));
        s.push_str("| Variant | Runs | Avg | Std across runs | Std within runs | Pooled std |\n");
        s.push_str("|---|---:|---:|---:|---:|---:|\n");
        for v in &report.variants {
            if let Some(r) = v.families.get(fam) {
                let _ = writeln!(
                    s,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    v.variant, r.runs, r.avg, r.std_between, r.std_within, r.pooled_std
                );
            }
        }
    }
    if !report.tests.is_empty() {
        s.push_str("\n## Mann-Whitney U tests on per-run means\n\n| Metric | A | B | U | p | Significant |\n|---|---|---|---:|---:|---|\n");
        for t in &report.tests {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} | {:.4} | {} |",
                t.family,
                t.a,
                t.b,
                t.u,
                t.p,
                if t.significant { "yes" } else { "no" }
            );
        }
    }
    s
}

pub fn training_markdown(reports: &[TrainingReport]) -> String {
    let mut s = String::from("# Training\n\n| Mode | Phase | Episodes | First-10 mean return | Last-10 mean return | Updates | Final epsilon | Converged |\n|---|---|---:|---:|---:|---:|---:|---|\n");
    for r in reports {
        for p in &r.phases {
            let w = p.returns.len().min(10);
            let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            let conv = match (&p.aborted, p.converged) {
                (Some(why), _) => format!("aborted: {why}"),
                (None, Some(true)) => "yes".into(),
                (None, Some(false)) => "no".into(),
                (None, None) => "n/a".into(),
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.2} | {:.2} | {} | {:.4} | {} |",
                r.mode.as_str(),
                p.phase.as_str(),
                p.returns.len(),
                mean(&p.returns[..w]),
                mean(&p.returns[p.returns.len() - w..]),
                p.learn_updates,
                p.final_epsilon,
                conv
            );
        }
    }
    s
}
