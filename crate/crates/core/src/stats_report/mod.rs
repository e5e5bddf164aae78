//! Statistics over benchmark runs: mean and standard error per system,
//! slowdown ratios with their geometric mean and median, and per-event
//! counter-ratio geomeans.

mod emit;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::harness::counters::{CounterSet, DEFAULT_EVENTS};
use crate::harness::RunRecord;

pub use emit::{
    counters_csv, counters_markdown, parse_counters_csv, parse_times_csv, sig, times_csv, to_csv,
    to_markdown, CounterCsvRow, TimesCsvRow, GEOMEAN_ROW, MEDIAN_ROW,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-positive value {0}")]
    NonPositive(f64),
    #[error("no event has counts for both the baseline and a candidate")]
    NoOverlap,
    #[error("benchmark {benchmark}: {message}")]
    Inconsistent { benchmark: String, message: String },
}

/// Mean and standard error of the mean. The standard error uses the
/// sample standard deviation (n - 1 denominator) and is 0 for one value.
pub fn mean_stderr(xs: &[f64]) -> Result<(f64, f64), StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Geometric mean, computed in log space.
pub fn geomean(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    if let Some(&bad) = xs
        .iter()
        .find(|x| (**x).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
    {
        return Err(StatsError::NonPositive(bad));
    }
    let logs = xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64;
    Ok(logs.exp())
}

/// Middle element, or the mean of the two middle elements.
pub fn median(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Times of one benchmark, in milliseconds, for the baseline and each
/// candidate system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTimes {
    pub benchmark: String,
    pub baseline: Vec<f64>,
    pub candidates: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateCell {
    pub time: MeanSe,
    /// Candidate mean over baseline mean.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub benchmark: String,
    pub baseline: MeanSe,
    pub candidates: BTreeMap<String, CandidateCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slowdown {
    pub geomean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub event: String,
    /// Per candidate: geomean ratio and how many benchmarks it covers.
    /// Candidates with no usable benchmark are absent.
    pub geomeans: BTreeMap<String, (f64, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterReport {
    pub candidates: Vec<String>,
    pub events: Vec<EventRow>,
    /// Exclusions: an event missing or zero for a benchmark.
    pub footnotes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub baseline: String,
    pub candidates: Vec<String>,
    /// Ordered by benchmark name.
    pub rows: Vec<BenchmarkRow>,
    pub slowdowns: BTreeMap<String, Slowdown>,
    pub counters: Option<CounterReport>,
    /// Kernel overhead percentage per system.
    pub overhead: BTreeMap<String, f64>,
}

fn mean_se(xs: &[f64], benchmark: &str) -> Result<MeanSe, StatsError> {
    if let Some(&bad) = xs
        .iter()
        .find(|x| (**x).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
    {
        return Err(StatsError::Inconsistent {
            benchmark: benchmark.to_string(),
            message: format!("time {bad} is not positive"),
        });
    }
    let (mean, stderr) = mean_stderr(xs)?;
    Ok(MeanSe { mean, stderr })
}

/// Ratios are candidate mean over baseline mean; the geomean and median of
/// each candidate are taken over the per-benchmark ratios.
pub fn build_slowdown_report(baseline: &str, times: &[BenchmarkTimes]) -> Result<Report, StatsError> {
    if times.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let candidates: Vec<String> = times[0].candidates.keys().cloned().collect();
    let mut rows = Vec::with_capacity(times.len());
    for t in times {
        if !t.candidates.keys().eq(candidates.iter()) {
            return Err(StatsError::Inconsistent {
                benchmark: t.benchmark.clone(),
                message: "candidate systems differ from the first benchmark's".into(),
            });
        }
        let base = mean_se(&t.baseline, &t.benchmark)?;
        let mut cells = BTreeMap::new();
        for (name, xs) in &t.candidates {
            let time = mean_se(xs, &t.benchmark)?;
            cells.insert(
                name.clone(),
                CandidateCell {
                    time,
                    ratio: time.mean / base.mean,
                },
            );
        }
        rows.push(BenchmarkRow {
            benchmark: t.benchmark.clone(),
            baseline: base,
            candidates: cells,
        });
    }
    rows.sort_by(|a, b| a.benchmark.cmp(&b.benchmark));
    let mut slowdowns = BTreeMap::new();
    for c in &candidates {
        let ratios: Vec<f64> = rows.iter().map(|r| r.candidates[c].ratio).collect();
        slowdowns.insert(
            c.clone(),
            Slowdown {
                geomean: geomean(&ratios)?,
                median: median(&ratios)?,
            },
        );
    }
    Ok(Report {
        baseline: baseline.to_string(),
        candidates,
        rows,
        slowdowns,
        counters: None,
        overhead: BTreeMap::new(),
    })
}

/// Default events first, in their usual order, then any others by name.
fn event_order(names: BTreeSet<String>) -> Vec<String> {
    let mut ordered: Vec<String> = DEFAULT_EVENTS
        .iter()
        .filter(|s| names.contains(s.name))
        .map(|s| s.name.to_string())
        .collect();
    ordered.extend(
        names
            .into_iter()
            .filter(|n| !DEFAULT_EVENTS.iter().any(|s| s.name == n)),
    );
    ordered
}

/// Per event and candidate: the geomean over benchmarks of candidate count
/// over baseline count. A benchmark where the event is absent or zero on
/// either side is left out of that event's geomean and footnoted.
pub fn build_counter_report(
    native: &BTreeMap<String, CounterSet>,
    candidates: &BTreeMap<String, BTreeMap<String, CounterSet>>,
) -> Result<CounterReport, StatsError> {
    let mut names = BTreeSet::new();
    for set in native
        .values()
        .chain(candidates.values().flat_map(|m| m.values()))
    {
        names.extend(set.counts.keys().cloned());
    }
    let mut report = CounterReport {
        candidates: candidates.keys().cloned().collect(),
        ..Default::default()
    };
    for event in event_order(names) {
        let mut row = EventRow {
            event: event.clone(),
            geomeans: BTreeMap::new(),
        };
        for (system, sets) in candidates {
            let mut ratios = Vec::new();
            for (bench, base) in native {
                let pair = (base.get(&event), sets.get(bench).and_then(|s| s.get(&event)));
                match pair {
                    (Some(b), Some(c)) if b > 0 && c > 0 => ratios.push(c as f64 / b as f64),
                    (b, c) => {
                        let why = match (b, c) {
                            (None, _) => "absent in the baseline",
                            (_, None) => "absent",
                            _ => "zero",
                        };
                        report
                            .footnotes
                            .push(format!("{event}: {bench} excluded for {system} ({why})"));
                    }
                }
            }
            if !ratios.is_empty() {
                row.geomeans
                    .insert(system.clone(), (geomean(&ratios)?, ratios.len()));
            }
        }
        report.events.push(row);
    }
    if report.events.iter().all(|r| r.geomeans.is_empty()) {
        return Err(StatsError::NoOverlap);
    }
    Ok(report)
}

/// Groups wall times of successful runs by benchmark. A benchmark is
/// included when the baseline and every candidate have at least one
/// successful run of it.
pub fn times_from_records(
    baseline: &[RunRecord],
    candidates: &BTreeMap<String, Vec<RunRecord>>,
) -> Vec<BenchmarkTimes> {
    fn group(records: &[RunRecord]) -> BTreeMap<String, Vec<f64>> {
        let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.succeeded() && r.wall_ms > 0.0) {
            m.entry(r.benchmark.clone()).or_default().push(r.wall_ms);
        }
        m
    }
    let base = group(baseline);
    let cands: BTreeMap<&String, BTreeMap<String, Vec<f64>>> =
        candidates.iter().map(|(k, v)| (k, group(v))).collect();
    base.into_iter()
        .filter_map(|(bench, times)| {
            let mut c = BTreeMap::new();
            for (name, g) in &cands {
                c.insert((*name).clone(), g.get(&bench)?.clone());
            }
            Some(BenchmarkTimes {
                benchmark: bench,
                baseline: times,
                candidates: c,
            })
        })
        .collect()
}

/// Counter sets of successful runs, one per benchmark: the first
/// iteration's. Runs with no counts at all are skipped.
pub fn counters_from_records(records: &[RunRecord]) -> BTreeMap<String, CounterSet> {
    let mut m = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded() && !r.counters.is_empty()) {
        m.entry(r.benchmark.clone()).or_insert_with(|| r.counters.clone());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::counters::ProviderKind;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mean_and_stderr() {
        assert_eq!(mean_stderr(&[5.0; 5]).unwrap(), (5.0, 0.0));
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(m, 3.0);
        assert!(close(se, (2.5f64).sqrt() / 5f64.sqrt(), 1e-15));
        assert_eq!(mean_stderr(&[7.5]).unwrap(), (7.5, 0.0));
        assert_eq!(mean_stderr(&[]), Err(StatsError::EmptyInput));
    }

    #[test]
    fn geomean_and_median() {
        assert!(close(geomean(&[1.0, 1.0, 1.0]).unwrap(), 1.0, 1e-15));
        assert!(close(geomean(&[2.0, 8.0]).unwrap(), 4.0, 1e-12));
        assert_eq!(geomean(&[1.0, 0.0]), Err(StatsError::NonPositive(0.0)));
        assert_eq!(median(&[3.0]).unwrap(), 3.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[]), Err(StatsError::EmptyInput));
    }

    #[test]
    fn single_benchmark_report() {
        let t = BenchmarkTimes {
            benchmark: "b".into(),
            baseline: vec![10.0],
            candidates: [("x".to_string(), vec![20.0])].into(),
        };
        let r = build_slowdown_report("base", &[t]).unwrap();
        assert_eq!(
            r.slowdowns["x"],
            Slowdown {
                geomean: 2.0,
                median: 2.0
            }
        );
    }

    fn set(pairs: &[(&str, u64)]) -> CounterSet {
        CounterSet {
            provider: ProviderKind::Software,
            counts: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn counter_geomeans_and_footnotes() {
        let native: BTreeMap<_, _> = [
            ("A".to_string(), set(&[("loads", 100), ("only-native", 5)])),
            ("B".to_string(), set(&[("loads", 200)])),
        ]
        .into();
        let cand: BTreeMap<_, _> = [
            ("A".to_string(), set(&[("loads", 202)])),
            ("B".to_string(), set(&[("loads", 398)])),
        ]
        .into();
        let r = build_counter_report(&native, &[("c".to_string(), cand)].into()).unwrap();
        let loads = r.events.iter().find(|e| e.event == "loads").unwrap();
        assert!(close(loads.geomeans["c"].0, (2.02f64 * 1.99).sqrt(), 1e-12));
        let only = r.events.iter().find(|e| e.event == "only-native").unwrap();
        assert!(only.geomeans.is_empty());
        assert_eq!(
            r.footnotes
                .iter()
                .filter(|f| f.starts_with("only-native"))
                .count(),
            2
        );
    }

    #[test]
    fn counter_report_needs_overlap() {
        let native: BTreeMap<_, _> = [("A".to_string(), set(&[("x", 1)]))].into();
        let cand: BTreeMap<_, _> = [("A".to_string(), set(&[("y", 1)]))].into();
        assert_eq!(
            build_counter_report(&native, &[("c".to_string(), cand)].into()),
            Err(StatsError::NoOverlap)
        );
    }
}
