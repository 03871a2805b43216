//! CSV serialization of loss histories and metric reports.

use dnm_core::eval::MetricsReport;
use dnm_core::loss::{Dnm12Components, Dnm6Components};
use dnm_core::net::ModelKind;
use dnm_core::train::StepRecord;

/// Loss CSV header for a model kind, matching `LossBreakdown::csv_row`
/// (needed up front so zero-step histories still produce a valid file).
pub fn loss_csv_header(kind: ModelKind, scales: usize) -> String {
    let names: &[&str] = match kind {
        ModelKind::Dnm6 => &Dnm6Components::NAMES,
        ModelKind::Dnm12 => &Dnm12Components::NAMES,
    };
    let mut out = String::from("step,lr,total");
    for s in 1..=scales {
        for name in names {
            out.push_str(&format!(",s{s}_{name}"));
        }
        out.push_str(&format!(",s{s}_total"));
    }
    out
}

/// Full loss-history CSV, one row per training step.
pub fn loss_history_csv(kind: ModelKind, history: &[StepRecord]) -> String {
    let mut out = loss_csv_header(kind, 4);
    out.push('\n');
    for record in history {
        out.push_str(&record.breakdown.csv_row(record.step, record.lr));
        out.push('\n');
    }
    out
}

pub const METRICS_CSV_HEADER: &str = "method,abs_rel,sq_rel,rmse,rmse_log,d1_all,a1,a2,a3";

/// One metrics row in the benchmark column order.
pub fn metrics_csv_row(method: &str, m: &MetricsReport) -> String {
    format!(
        "{method},{},{},{},{},{},{},{},{}",
        m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.d1_all, m.a1, m.a2, m.a3
    )
}

/// Complete metrics CSV for a list of evaluated configurations.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for (method, report) in rows {
        out.push_str(&metrics_csv_row(method, report));
        out.push('\n');
    }
    out
}
