//! CSV and Markdown renderings of a [`Report`].
//!
//! CSV carries full precision. Markdown rounds times to six significant
//! digits and ratios to two decimals, the way the tables are usually read.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CounterReport, Report};

/// Benchmark column values used for the summary rows of the times CSV.
pub const GEOMEAN_ROW: &str = "geomean";
pub const MEDIAN_ROW: &str = "median";

/// `benchmark,system,mean_ms,stderr_ms,ratio`. Summary rows leave the
/// time columns empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimesCsvRow {
    pub benchmark: String,
    pub system: String,
    pub mean_ms: Option<f64>,
    pub stderr_ms: Option<f64>,
    pub ratio: f64,
}

/// `event,system,geomean_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterCsvRow {
    pub event: String,
    pub system: String,
    pub geomean_ratio: f64,
}

fn write_csv<T: Serialize>(rows: &[T], header: &[&str]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
}

pub fn times_rows(report: &Report) -> Vec<TimesCsvRow> {
    let mut rows = Vec::new();
    for r in &report.rows {
        rows.push(TimesCsvRow {
            benchmark: r.benchmark.clone(),
            system: report.baseline.clone(),
            mean_ms: Some(r.baseline.mean),
            stderr_ms: Some(r.baseline.stderr),
            ratio: 1.0,
        });
        for (name, c) in &r.candidates {
            rows.push(TimesCsvRow {
                benchmark: r.benchmark.clone(),
                system: name.clone(),
                mean_ms: Some(c.time.mean),
                stderr_ms: Some(c.time.stderr),
                ratio: c.ratio,
            });
        }
    }
    for (name, s) in &report.slowdowns {
        for (label, v) in [(GEOMEAN_ROW, s.geomean), (MEDIAN_ROW, s.median)] {
            rows.push(TimesCsvRow {
                benchmark: label.to_string(),
                system: name.clone(),
                mean_ms: None,
                stderr_ms: None,
                ratio: v,
            });
        }
    }
    rows
}

pub fn counter_rows(report: &CounterReport) -> Vec<CounterCsvRow> {
    report
        .events
        .iter()
        .flat_map(|e| {
            e.geomeans.iter().map(move |(system, (g, _))| CounterCsvRow {
                event: e.event.clone(),
                system: system.clone(),
                geomean_ratio: *g,
            })
        })
        .collect()
}

pub fn times_csv(report: &Report) -> String {
    write_csv(
        &times_rows(report),
        &["benchmark", "system", "mean_ms", "stderr_ms", "ratio"],
    )
}

pub fn counters_csv(report: &CounterReport) -> String {
    write_csv(&counter_rows(report), &["event", "system", "geomean_ratio"])
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes()).deserialize().collect()
}

pub fn parse_times_csv(text: &str) -> Result<Vec<TimesCsvRow>, csv::Error> {
    parse(text)
}

pub fn parse_counters_csv(text: &str) -> Result<Vec<CounterCsvRow>, csv::Error> {
    parse(text)
}

/// `x` rounded to `digits` significant digits, in plain decimal notation.
pub fn sig(x: f64, digits: u32) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = digits as i32 - 1 - magnitude;
    if decimals >= 0 {
        // Rounding can carry into a new digit (9.999995 → 10.0000); redo
        // with the carried magnitude so the digit count stays fixed.
        let s = format!("{:.*}", decimals as usize, x);
        let carried: f64 = s.parse().unwrap_or(x);
        if carried.abs().log10().floor() as i32 > magnitude && decimals > 0 {
            return format!("{:.*}", decimals as usize - 1, carried);
        }
        s
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{:.0}", (x / scale).round() * scale)
    }
}

fn ratio(x: f64) -> String {
    format!("{x:.2}")
}

fn table_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

/// Markdown tables: times (rows are benchmarks, with geomean and median
/// footer rows), counter-ratio geomeans, and kernel overhead.
pub fn to_markdown(report: &Report) -> String {
    let mut out = String::new();
    let mut header = vec!["benchmark".to_string(), format!("{} (ms)", report.baseline)];
    for c in &report.candidates {
        header.push(format!("{c} (ms)"));
        header.push(format!("{c} ratio"));
    }
    out.push_str(&table_row(&header));
    out.push_str(&table_row(&vec!["---".to_string(); header.len()]));
    for r in &report.rows {
        let mut cells = vec![
            r.benchmark.clone(),
            format!("{} ± {}", sig(r.baseline.mean, 6), sig(r.baseline.stderr, 6)),
        ];
        for c in &report.candidates {
            let cell = &r.candidates[c];
            cells.push(format!(
                "{} ± {}",
                sig(cell.time.mean, 6),
                sig(cell.time.stderr, 6)
            ));
            cells.push(ratio(cell.ratio));
        }
        out.push_str(&table_row(&cells));
    }
    for (label, pick) in [
        (
            GEOMEAN_ROW,
            (|s: &super::Slowdown| s.geomean) as fn(&super::Slowdown) -> f64,
        ),
        (MEDIAN_ROW, |s: &super::Slowdown| s.median),
    ] {
        let mut cells = vec![format!("**{label}**"), String::new()];
        for c in &report.candidates {
            cells.push(String::new());
            cells.push(
                report
                    .slowdowns
                    .get(c)
                    .map(|s| ratio(pick(s)))
                    .unwrap_or_default(),
            );
        }
        out.push_str(&table_row(&cells));
    }
    if let Some(cr) = &report.counters {
        out.push('\n');
        out.push_str(&counters_markdown(cr));
    }
    if !report.overhead.is_empty() {
        out.push('\n');
        out.push_str(&table_row(&["system".into(), "kernel overhead (%)".into()]));
        out.push_str(&table_row(&["---".into(), "---".into()]));
        for (system, pct) in &report.overhead {
            out.push_str(&table_row(&[system.clone(), sig(*pct, 3)]));
        }
    }
    out
}

pub fn counters_markdown(cr: &CounterReport) -> String {
    let mut out = String::new();
    let mut header = vec!["event".to_string()];
    header.extend(cr.candidates.iter().map(|c| format!("{c} / baseline")));
    out.push_str(&table_row(&header));
    out.push_str(&table_row(&vec!["---".to_string(); header.len()]));
    for e in &cr.events {
        let mut cells = vec![e.event.clone()];
        for c in &cr.candidates {
            cells.push(match e.geomeans.get(c) {
                Some((g, _)) => ratio(*g),
                None => "n/a".into(),
            });
        }
        out.push_str(&table_row(&cells));
    }
    if !cr.footnotes.is_empty() {
        out.push('\n');
        for f in &cr.footnotes {
            let _ = writeln!(out, "- {f}");
        }
    }
    out
}

/// Both CSV tables, separated by a blank line when counters are present.
pub fn to_csv(report: &Report) -> String {
    let mut out = times_csv(report);
    if let Some(cr) = &report.counters {
        out.push('\n');
        out.push_str(&counters_csv(cr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(sig(1.2345678, 6), "1.23457");
        assert_eq!(sig(1234567.0, 6), "1234570");
        assert_eq!(sig(0.000123456789, 6), "0.000123457");
        assert_eq!(sig(9.9999995, 6), "10.0000");
        assert_eq!(sig(0.0, 6), "0");
        assert_eq!(sig(370.0, 6), "370.000");
    }
}
