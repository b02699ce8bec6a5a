//! CSV output. Every table a command emits goes through these helpers so
//! formatting stays consistent and reruns stay byte-identical: floats use
//! Rust's shortest round-trip formatting, and undefined values print as `na`.

use std::path::Path;

use stlora_core::train::metrics::MetricsReport;
use stlora_core::train::TrainLog;
use stlora_core::Result;

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "na".to_string(),
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// The per-epoch training table, including an epoch-0 row for the untouched
/// model, so a log for E epochs always holds E+1 data rows.
pub fn write_training_csv(path: &Path, log: &TrainLog, first_lr: f64) -> Result<()> {
    let mut rows = vec![vec![
        "0".to_string(),
        fmt_f64(log.initial_train_loss),
        fmt_f64(log.initial_val_mae),
        fmt_f64(first_lr),
    ]];
    for r in &log.rows {
        rows.push(vec![
            r.epoch.to_string(),
            fmt_f64(r.train_loss),
            fmt_f64(r.val_mae),
            fmt_f64(r.lr),
        ]);
    }
    write_csv(path, &["epoch", "train_loss", "val_mae", "lr"], &rows)
}

/// Horizon steps called out by name in metric tables: quarter, half and
/// full horizon under the standard 12-step protocol.
pub const NAMED_STEPS: [usize; 3] = [3, 6, 12];

/// The steps a report table lists for a given horizon: the named steps that
/// exist, or the final step when the horizon is shorter than all of them.
pub fn report_steps(horizon: usize) -> Vec<usize> {
    let steps: Vec<usize> = NAMED_STEPS.iter().copied().filter(|s| *s <= horizon).collect();
    if steps.is_empty() {
        vec![horizon]
    } else {
        steps
    }
}

fn metric_rows(report: &MetricsReport) -> Vec<Vec<String>> {
    let horizon = report.steps.len();
    let mut rows = Vec::new();
    for step in report_steps(horizon) {
        let m = &report.steps[step - 1];
        rows.push(vec![
            format!("step{step}"),
            fmt_f64(m.mae),
            fmt_f64(m.rmse),
            fmt_opt(m.mape),
        ]);
    }
    rows.push(vec![
        "average".to_string(),
        fmt_f64(report.average.mae),
        fmt_f64(report.average.rmse),
        fmt_opt(report.average.mape),
    ]);
    rows
}

pub fn write_metrics_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    write_csv(path, &["step", "mae", "rmse", "mape"], &metric_rows(report))
}

/// Differences `adapted - frozen` per metric; negative values mean the
/// adaptation improved on the frozen backbone.
pub fn write_delta_csv(path: &Path, adapted: &MetricsReport, frozen: &MetricsReport) -> Result<()> {
    let horizon = adapted.steps.len().min(frozen.steps.len());
    let mut rows = Vec::new();
    for step in report_steps(horizon) {
        let a = &adapted.steps[step - 1];
        let f = &frozen.steps[step - 1];
        rows.push(vec![
            format!("step{step}"),
            fmt_f64(a.mae - f.mae),
            fmt_f64(a.rmse - f.rmse),
            match (a.mape, f.mape) {
                (Some(x), Some(y)) => fmt_f64(x - y),
                _ => "na".to_string(),
            },
        ]);
    }
    rows.push(vec![
        "average".to_string(),
        fmt_f64(adapted.average.mae - frozen.average.mae),
        fmt_f64(adapted.average.rmse - frozen.average.rmse),
        match (adapted.average.mape, frozen.average.mape) {
            (Some(x), Some(y)) => fmt_f64(x - y),
            _ => "na".to_string(),
        },
    ]);
    write_csv(path, &["step", "mae_delta", "rmse_delta", "mape_delta"], &rows)
}

pub fn write_params_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    write_csv(
        path,
        &["backbone_params", "adaptation_params", "overhead_percent"],
        &[vec![
            report.params.backbone_params.to_string(),
            report.params.adaptation_params.to_string(),
            fmt_f64(report.params.overhead_percent),
        ]],
    )
}
