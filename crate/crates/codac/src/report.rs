//! Metric tables, score dumps and curve files.

use std::fmt::Write as _;
use std::path::Path;

use codac_core::metrics::{aggregate, format_mean_std, table_row, MetricsReport, SeedMetrics, METRIC_NAMES, TABLE_COLUMNS};

use crate::error::{CliError, Result};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn header() -> String {
    format!("variant,seed,{}\n", METRIC_NAMES.join(","))
}

fn seed_line(variant: &str, m: &SeedMetrics) -> String {
    let vals: Vec<String> = m.values().iter().map(f64::to_string).collect();
    format!("{variant},{},{}\n", m.seed, vals.join(","))
}

/// Per-seed rows of one experiment.
pub fn experiment_csv(report: &MetricsReport) -> String {
    let mut out = header();
    for m in &report.per_seed {
        out.push_str(&seed_line(&report.variant, m));
    }
    out
}

/// Per-seed rows of every report, then `mean` and `std` rows per variant.
pub fn summary_csv(reports: &[MetricsReport]) -> String {
    let mut out = header();
    for r in reports {
        for m in &r.per_seed {
            out.push_str(&seed_line(&r.variant, m));
        }
    }
    for r in reports {
        let means: Vec<String> = r.aggregate.iter().map(|a| a.mean.to_string()).collect();
        let stds: Vec<String> = r.aggregate.iter().map(|a| a.std.to_string()).collect();
        writeln!(out, "{},mean,{}", r.variant, means.join(",")).expect("string write");
        writeln!(out, "{},std,{}", r.variant, stds.join(",")).expect("string write");
    }
    out
}

/// Rebuilds reports from the per-seed rows of a summary file, in order of
/// first appearance.
pub fn parse_summary(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header().trim()) {
        return Err(CliError::format("summary.csv: unexpected header"));
    }
    let mut groups: Vec<(String, Vec<SeedMetrics>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 2 + METRIC_NAMES.len() {
            return Err(CliError::format(format!("summary.csv row {}: expected {} columns", i + 1, 2 + METRIC_NAMES.len())));
        }
        let Ok(seed) = cells[1].parse::<u64>() else {
            continue;
        };
        let v: Vec<f64> = cells[2..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| CliError::format(format!("summary.csv row {}: `{c}` is not a number", i + 1))))
            .collect::<Result<_>>()?;
        let m = SeedMetrics { seed, acc: v[0], prec: v[1], rec: v[2], f1: v[3], auroc: v[4], auprc: v[5], rep_sep: v[6] };
        match groups.iter_mut().find(|(name, _)| name == cells[0]) {
            Some((_, ms)) => ms.push(m),
            None => groups.push((cells[0].to_string(), vec![m])),
        }
    }
    if groups.is_empty() {
        return Err(CliError::format("summary.csv: no per-seed rows"));
    }
    groups.into_iter().map(|(v, ms)| Ok(aggregate(&v, ms)?)).collect()
}

/// Plain-text table: mean ± std in percent for the classification metrics
/// and the separability score.
pub fn text_table(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Variant")
        .chain(TABLE_COLUMNS)
        .chain(["Rep-Sep"])
        .map(String::from)
        .collect()];
    for r in reports {
        let mut row = table_row(r);
        row.push(format_mean_std(r.aggregate[METRIC_NAMES.len() - 1]));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).expect("string write");
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).expect("string write");
        }
    }
    out
}

pub fn write_summary(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    let runs = dir.join("runs");
    std::fs::create_dir_all(&runs).map_err(CliError::io(&runs))?;
    for r in reports {
        write(&runs.join(format!("{}.csv", r.variant)), &experiment_csv(r))?;
    }
    write(&dir.join("summary.csv"), &summary_csv(reports))?;
    write(&dir.join("table.txt"), &text_table(reports))
}

/// `epoch,loss` lines.
pub fn curve_csv(values: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v}").expect("string write");
    }
    out
}

pub fn write_curve(path: &Path, values: &[f64]) -> Result<()> {
    write(path, &curve_csv(values))
}

/// `t,e,a,s,mask` lines of one segment.
pub fn score_csv(e: &[f64], a: &[f64], s: &[f64], mask: &[bool]) -> String {
    let mut out = String::from("t,e,a,s,mask\n");
    for t in 0..e.len() {
        writeln!(out, "{t},{},{},{},{}", e[t], a[t], s[t], u8::from(mask[t])).expect("string write");
    }
    out
}

/// ROC points `(fpr, tpr)` at every distinct threshold, from (0,0) to (1,1).
pub fn roc_points(y: &[u8], prob: &[f64]) -> Vec<(f64, f64)> {
    let n_pos = y.iter().filter(|&&v| v == 1).count().max(1) as f64;
    let n_neg = y.iter().filter(|&&v| v == 0).count().max(1) as f64;
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| prob[b].total_cmp(&prob[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in idx.iter().enumerate() {
        if y[i] == 1 {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if k + 1 == idx.len() || prob[idx[k + 1]] != prob[i] {
            pts.push((fp / n_neg, tp / n_pos));
        }
    }
    pts
}

pub fn roc_csv(y: &[u8], prob: &[f64]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (f, t) in roc_points(y, prob) {
        writeln!(out, "{f},{t}").expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(seed: u64, auroc: f64) -> SeedMetrics {
        SeedMetrics { seed, acc: 0.5, prec: 0.25, rec: 1.0, f1: 0.4, auroc, auprc: 0.7, rep_sep: 55.5 }
    }

    #[test]
    fn summary_round_trips_through_text() {
        let reports = vec![
            aggregate("full", vec![m(0, 0.9), m(1, 0.1 + 0.2)]).unwrap(),
            aggregate("dmcf_static", vec![m(0, 0.8), m(1, 0.7)]).unwrap(),
        ];
        let text = summary_csv(&reports);
        assert_eq!(text.lines().count(), 1 + 4 + 4);
        assert_eq!(parse_summary(&text).unwrap(), reports);
    }

    #[test]
    fn table_has_fixed_column_order() {
        let r = aggregate("full", vec![m(0, 0.9), m(1, 0.94)]).unwrap();
        let t = text_table(&[r]);
        let head: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(head, ["Variant", "Acc", "Prec", "Rec", "F1", "AUROC", "AUPRC", "Rep-Sep"]);
        assert!(t.contains("92.00 ± 2.83"), "{t}");
    }

    #[test]
    fn roc_endpoints_and_ties() {
        let pts = roc_points(&[1, 0, 1, 0], &[0.9, 0.5, 0.5, 0.1]);
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)]);
    }
}
