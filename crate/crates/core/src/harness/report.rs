//! Report rendering and persistence: line-delimited metric records followed
//! by a fixed-width table, with timing fields cleanly separable so report
//! files compare byte-identical across same-seed runs.

use crate::error::{Error, Result};
use crate::evaluate::MetricReport;
use crate::harness::regime::BenchReport;

/// Fixed-width results table: one method per row, fractions as percentages,
/// two decimals everywhere.
pub fn render_table(reports: &[&BenchReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>15} {:>10} {:>12} {:>9}\n",
        "Method", "Reliability", "Generalization", "Locality", "Portability", "Fluency"
    ));
    for r in reports {
        out.push_str(&render_row(r.method.name(), &r.aggregate));
    }
    out
}

fn render_row(name: &str, m: &MetricReport) -> String {
    format!(
        "{:<12} {:>12.2} {:>15.2} {:>10.2} {:>12.2} {:>9.2}\n",
        name,
        100.0 * m.reliability,
        100.0 * m.generalization,
        100.0 * m.locality,
        100.0 * m.portability,
        m.fluency
    )
}

/// Serializes a bench report: header comments, one metric record per edit,
/// the aggregate record, failures, timing, and the rendered table.
pub fn report_to_text(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# method={} regime={} batch_size={} world_seed={} hparams_fingerprint={:016x} edits={}\n",
        report.method.name(),
        report.regime.kind.name(),
        report
            .regime
            .batch_size
            .map(|b| b.to_string())
            .unwrap_or_else(|| "-".into()),
        report.world_seed,
        report.hparams_fingerprint,
        report.per_edit.len(),
    ));
    for m in &report.per_edit {
        out.push_str(&m.to_line());
        out.push('\n');
    }
    out.push_str("# aggregate\n");
    out.push_str(&report.aggregate.to_line());
    out.push('\n');
    for (idx, why) in &report.failures {
        out.push_str(&format!("# failure edit={idx} {why}\n"));
    }
    out.push_str(&format!("# total_seconds={:.3}\n", report.total_seconds));
    out.push_str(&render_table(&[report]));
    out
}

/// Strips wall-clock content (`time_s` fields and the total-seconds line)
/// so two reports from identical seeds compare byte-identical.
pub fn comparable_report_text(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        if line.starts_with("# total_seconds=") {
            continue;
        }
        if line.starts_with('{') {
            match MetricReport::from_line(line) {
                Ok(mut m) => {
                    m.time_s = 0.0;
                    out.push_str(&m.to_line());
                    out.push('\n');
                    continue;
                }
                Err(_) => {
                    out.push_str(line);
                    out.push('\n');
                    continue;
                }
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn write_report_file(report: &BenchReport, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, report_to_text(report)).map_err(Error::Io)
}
