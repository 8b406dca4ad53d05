//! Artifact renderers: the CSV documents and the aligned-text
//! comparison table. All CSVs are UTF-8 with a header row, '.' decimal
//! separators, and shortest-round-trip float formatting, so a strict
//! reader recovers the exact binary values.

use crate::compare::CompareRow;
use crate::config::GridPoint;
use crate::metrics::MetricReport;
use crate::train::RunRecord;

pub const COMPARISON_HEADER: &str = "strategy, acc, auc, f1, recall, param_ratio, train_seconds";
pub const LOSS_CURVE_HEADER: &str = "epoch, L_total, L_task, train_acc, val_acc";
pub const ALPHA_TRACE_HEADER: &str = "epoch, layer index, gamma, alpha, rank";
pub const SWEEP_HEADER: &str =
    "r_base, lambda_adjust, lambda1, lambda2, refresh_every, strategy, acc, auc, f1, recall, param_ratio, train_seconds";

/// Per-epoch loss and accuracy curve for one run.
pub fn loss_curve_csv(record: &RunRecord) -> String {
    let mut out = String::from(LOSS_CURVE_HEADER);
    out.push('\n');
    for e in &record.epochs {
        out.push_str(&format!(
            "{}, {}, {}, {}, {}\n",
            e.epoch, e.total_loss, e.task_loss, e.train_accuracy, e.val_accuracy
        ));
    }
    out
}

/// One row per layer per importance refresh. Runs without refreshes
/// (every non-dynamic strategy) produce a header-only file.
pub fn alpha_trace_csv(record: &RunRecord) -> String {
    let mut out = String::from(ALPHA_TRACE_HEADER);
    out.push('\n');
    for r in &record.refreshes {
        for l in 0..r.gamma.len() {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}\n",
                r.epoch, l, r.gamma[l], r.alpha[l], r.ranks[l]
            ));
        }
    }
    out
}

fn comparison_fields(row: &CompareRow) -> String {
    format!(
        "{}, {}, {}, {}, {}, {}, {}",
        row.strategy.name(),
        row.acc.mean,
        row.auc.mean,
        row.f1.mean,
        row.recall.mean,
        row.param_ratio,
        row.train_seconds
    )
}

pub fn comparison_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&comparison_fields(row));
        out.push('\n');
    }
    out
}

/// Sweep results keyed by grid point, one comparison row per
/// (point, strategy).
pub fn sweep_csv(entries: &[(GridPoint, CompareRow)]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for (p, row) in entries {
        out.push_str(&format!(
            "{}, {}, {}, {}, {}, {}\n",
            p.r_base,
            p.lambda_adjust,
            p.lambda1,
            p.lambda2,
            p.refresh_every,
            comparison_fields(row)
        ));
    }
    out
}

/// Aligned comparison table, one strategy per row, best accuracy
/// first. Parameter ratios are body-weight ratios; the dynamic
/// strategy's peak in-flight ratio is footnoted because its ranks
/// move during the run.
pub fn render_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>17} {:>17} {:>17} {:>17} {:>9} {:>9}\n",
        "strategy", "acc", "auc", "f1", "recall", "params", "time"
    ));
    let cell = |s: &crate::compare::Stat| format!("{:.4} +/- {:.4}", s.mean, s.sd);
    for row in rows {
        out.push_str(&format!(
            "{:<20} {:>17} {:>17} {:>17} {:>17} {:>8.2}% {:>8.2}s\n",
            row.strategy.name(),
            cell(&row.acc),
            cell(&row.auc),
            cell(&row.f1),
            cell(&row.recall),
            100.0 * row.param_ratio,
            row.train_seconds
        ));
    }
    out.push_str("metrics are macro-averaged over classes; +/- is the population sd over seeds\n");
    for row in rows {
        if row.max_param_ratio > row.param_ratio {
            out.push_str(&format!(
                "{} peak in-flight params: {:.2}%\n",
                row.strategy.name(),
                100.0 * row.max_param_ratio
            ));
        }
    }
    out
}

pub fn format_metric_report(r: &MetricReport) -> String {
    let mut out = format!(
        "test metrics (macro): accuracy {:.4}, auc {:.4}, f1 {:.4}, recall {:.4}",
        r.accuracy, r.auc, r.f1_macro, r.recall_macro
    );
    if !r.absent_classes.is_empty() {
        out.push_str(&format!(
            "\nwarning: classes {:?} absent from the split, excluded from macro averages",
            r.absent_classes
        ));
    }
    out
}
