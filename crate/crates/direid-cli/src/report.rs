//! The comparison table: rank-1/5/10 and mAP per metrics file, with
//! deltas against the first file.

use std::path::Path;

use anyhow::Context;
use direid_core::eval::MetricsReport;

const RANKS: [usize; 3] = [1, 5, 10];

/// One table row: the run label plus its metric values in column order
/// (rank-1, rank-5, rank-10, mAP). `None` marks a rank beyond the
/// report's CMC depth.
struct Row {
    label: String,
    values: [Option<f64>; 4],
}

fn rank_at(report: &MetricsReport, rank: usize) -> Option<f64> {
    report.cmc.get(rank - 1).copied()
}

fn row_for(label: String, report: &MetricsReport) -> Row {
    Row {
        label,
        values: [
            rank_at(report, RANKS[0]),
            rank_at(report, RANKS[1]),
            rank_at(report, RANKS[2]),
            Some(report.map),
        ],
    }
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.3}"),
        None => "-".into(),
    }
}

fn delta_cell(v: Option<f64>, base: Option<f64>) -> String {
    match (v, base) {
        (Some(v), Some(b)) => format!("{:+.3}", v - b),
        _ => "-".into(),
    }
}

/// Renders the aligned text table for the given labelled reports.
pub fn render(reports: &[(String, MetricsReport)]) -> String {
    let rows: Vec<Row> = reports
        .iter()
        .map(|(label, r)| row_for(label.clone(), r))
        .collect();
    let base = &rows[0];

    let header = [
        "run", "rank-1", "rank-5", "rank-10", "mAP", "Δrank-1", "Δrank-5", "Δrank-10", "ΔmAP",
    ];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for row in &rows {
        let mut line = vec![row.label.clone()];
        for v in row.values {
            line.push(cell(v));
        }
        for (v, b) in row.values.iter().zip(&base.values) {
            line.push(delta_cell(*v, *b));
        }
        cells.push(line);
    }

    let widths: Vec<usize> = (0..header.len())
        .map(|col| {
            cells
                .iter()
                .map(|line| line[col].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for line in &cells {
        for (col, text) in line.iter().enumerate() {
            if col > 0 {
                out.push_str("  ");
            }
            let pad = widths[col] - text.chars().count();
            if col == 0 {
                out.push_str(text);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str(&" ".repeat(pad));
                out.push_str(text);
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

/// Reads each metrics file, labelling rows by file stem (full path on
/// stem collisions).
pub fn load_reports(paths: &[impl AsRef<Path>]) -> anyhow::Result<Vec<(String, MetricsReport)>> {
    let mut labelled = Vec::with_capacity(paths.len());
    for path in paths {
        let path = path.as_ref();
        let report = MetricsReport::read(path)
            .with_context(|| format!("metrics file {}", path.display()))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        labelled.push((stem, report, path.display().to_string()));
    }
    let mut rows = Vec::with_capacity(labelled.len());
    for (idx, (stem, report, full)) in labelled.iter().enumerate() {
        let collides = labelled
            .iter()
            .enumerate()
            .any(|(j, (other, _, _))| j != idx && other == stem);
        let label = if collides { full.clone() } else { stem.clone() };
        rows.push((label, report.clone()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(rank1: f64, map: f64) -> MetricsReport {
        let cmc = (0..10)
            .map(|k| (rank1 + 0.03 * k as f64).min(1.0))
            .collect();
        MetricsReport {
            variant: "fused".into(),
            cmc,
            map,
            trials: 10,
            seed: 7,
            checkpoint: "x.ckpt".into(),
        }
    }

    #[test]
    fn a_single_run_shows_zero_deltas() {
        let table = render(&[("solo".into(), report(0.5, 0.4))]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("run"));
        assert_eq!(lines[1].matches("+0.000").count(), 4, "{table}");
        assert!(!lines[1].contains("-0."), "{table}");
    }

    #[test]
    fn deltas_compare_against_the_first_run() {
        let table = render(&[
            ("base".into(), report(0.446, 0.40)),
            ("ours".into(), report(0.512, 0.45)),
        ]);
        assert!(table.contains("+0.066"), "{table}");
        assert!(table.contains("+0.050"), "{table}");
    }

    #[test]
    fn ranks_beyond_the_curve_render_as_dashes() {
        let mut short = report(0.5, 0.4);
        short.cmc.truncate(3);
        let table = render(&[("short".into(), short)]);
        let second = table.lines().nth(1).unwrap();
        assert!(second.contains('-'), "{table}");
    }

    #[test]
    fn columns_align_across_rows() {
        let table = render(&[
            ("a".into(), report(0.446, 0.4)),
            ("a-very-long-run-label".into(), report(0.512, 0.45)),
        ]);
        let widths: Vec<usize> = table.lines().map(|l| l.chars().count()).collect();
        assert_eq!(widths.len(), 3);
        assert!(
            widths.windows(2).all(|w| w[0] == w[1]),
            "rows print at different widths: {table}"
        );
    }
}
