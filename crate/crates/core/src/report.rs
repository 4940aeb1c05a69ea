//! Report bundle files.
//!
//! Tabular outputs are CSV with a fixed header; missing values are empty
//! fields. Nested outputs are pretty-printed JSON. Events and correlations can
//! be read back, which is enough to recompute correlated events.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlate::CorrelationRecord;
use crate::detect::EventRecord;
use crate::ingest::AppId;
use crate::metrics::{MetricKind, TimeWindow, WindowStat};

pub const METRICS_FILE: &str = "metrics.csv";
pub const DAILY_METRICS_FILE: &str = "metrics_daily.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const RUNS_FILE: &str = "correlation_runs.json";
pub const CORRELATED_EVENTS_FILE: &str = "correlated_events.json";
pub const SUMMARY_REQUESTS_FILE: &str = "summary_requests.json";
pub const SUMMARIES_FILE: &str = "summaries.json";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const CATALOG_FILE: &str = "catalog.json";
pub const CONFIG_FILE: &str = "config.conf";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Ingest(#[from] crate::ingest::IngestError),
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    app_id: AppId,
    metric: MetricKind,
    t0: NaiveDate,
    w: u32,
    mu: Option<f64>,
    delta: Option<f64>,
    n_obs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    app_id: AppId,
    metric: MetricKind,
    t0: NaiveDate,
    w: u32,
    e: i8,
    a: Option<f64>,
    sigma: Option<f64>,
    k: f64,
    baseline_n: usize,
    warmup: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorrelationRow {
    app_i: AppId,
    app_j: AppId,
    metric: MetricKind,
    t0: NaiveDate,
    w: u32,
    rho: Option<f64>,
    c: i8,
    n_points: usize,
}

pub const METRICS_HEADER: [&str; 7] = ["app_id", "metric", "t0", "w", "mu", "delta", "n_obs"];
pub const EVENTS_HEADER: [&str; 10] =
    ["app_id", "metric", "t0", "w", "e", "a", "sigma", "k", "baseline_n", "warmup"];
pub const CORRELATIONS_HEADER: [&str; 8] = ["app_i", "app_j", "metric", "t0", "w", "rho", "c", "n_points"];

// The header is written up front so empty tables still carry it.
fn write_rows<T: Serialize, W: Write>(
    header: &[&str],
    rows: impl IntoIterator<Item = T>,
    out: W,
) -> Result<(), ReportError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    writer.write_record(header)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>, ReportError> {
    let mut reader = csv::Reader::from_reader(input);
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}

/// Columns: `app_id,metric,t0,w,mu,delta,n_obs`.
pub fn write_metrics_csv<W: Write>(stats: &[WindowStat], out: W) -> Result<(), ReportError> {
    write_rows(
        &METRICS_HEADER,
        stats.iter().map(|s| MetricRow {
            app_id: s.app_id.clone(),
            metric: s.metric,
            t0: s.window.start,
            w: s.window.days,
            mu: s.mu,
            delta: s.delta,
            n_obs: s.n_obs,
        }),
        out,
    )
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<WindowStat>, ReportError> {
    Ok(read_rows::<MetricRow, _>(input)?
        .into_iter()
        .map(|r| WindowStat {
            app_id: r.app_id,
            metric: r.metric,
            window: TimeWindow::new(r.t0, r.w),
            mu: r.mu,
            delta: r.delta,
            n_obs: r.n_obs,
        })
        .collect())
}

/// Columns: `app_id,metric,t0,w,e,a,sigma,k,baseline_n,warmup`.
pub fn write_events_csv<W: Write>(events: &[EventRecord], out: W) -> Result<(), ReportError> {
    write_rows(
        &EVENTS_HEADER,
        events.iter().map(|e| EventRow {
            app_id: e.app_id.clone(),
            metric: e.metric,
            t0: e.window.start,
            w: e.window.days,
            e: e.e,
            a: e.a,
            sigma: e.sigma,
            k: e.k,
            baseline_n: e.baseline_n,
            warmup: e.warmup,
        }),
        out,
    )
}

pub fn read_events_csv<R: Read>(input: R) -> Result<Vec<EventRecord>, ReportError> {
    Ok(read_rows::<EventRow, _>(input)?
        .into_iter()
        .map(|r| EventRecord {
            app_id: r.app_id,
            metric: r.metric,
            window: TimeWindow::new(r.t0, r.w),
            e: r.e,
            a: r.a,
            sigma: r.sigma,
            k: r.k,
            baseline_n: r.baseline_n,
            warmup: r.warmup,
        })
        .collect())
}

/// Columns: `app_i,app_j,metric,t0,w,rho,c,n_points`.
pub fn write_correlations_csv<W: Write>(records: &[CorrelationRecord], out: W) -> Result<(), ReportError> {
    write_rows(
        &CORRELATIONS_HEADER,
        records.iter().map(|r| CorrelationRow {
            app_i: r.app_i.clone(),
            app_j: r.app_j.clone(),
            metric: r.metric,
            t0: r.window.start,
            w: r.window.days,
            rho: r.rho,
            c: r.c,
            n_points: r.n_points,
        }),
        out,
    )
}

pub fn read_correlations_csv<R: Read>(input: R) -> Result<Vec<CorrelationRecord>, ReportError> {
    Ok(read_rows::<CorrelationRow, _>(input)?
        .into_iter()
        .map(|r| CorrelationRecord {
            app_i: r.app_i,
            app_j: r.app_j,
            metric: r.metric,
            window: TimeWindow::new(r.t0, r.w),
            rho: r.rho,
            c: r.c,
            n_points: r.n_points,
        })
        .collect())
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(value: &T, mut out: W) -> Result<(), ReportError> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|source| ReportError::Io { path: "<json>".into(), source })?;
    Ok(())
}

/// Creates `dir/name` and hands a buffered writer to `write`.
pub fn write_file(
    dir: &Path,
    name: &str,
    write: impl FnOnce(&mut BufWriter<File>) -> Result<(), ReportError>,
) -> Result<(), ReportError> {
    let path = dir.join(name);
    let io_err = |source| ReportError::Io { path: path.display().to_string(), source };
    let mut out = BufWriter::new(File::create(&path).map_err(io_err)?);
    write(&mut out)?;
    out.flush().map_err(io_err)
}

pub fn open_file(dir: &Path, name: &str) -> Result<File, ReportError> {
    let path = dir.join(name);
    File::open(&path).map_err(|source| ReportError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window() -> TimeWindow {
        TimeWindow::new("2022-06-09".parse().unwrap(), 7)
    }

    #[test]
    fn events_round_trip_with_missing_values() {
        let events = vec![
            EventRecord {
                app_id: "a".into(),
                metric: MetricKind::Rating,
                window: window(),
                e: 0,
                a: None,
                sigma: None,
                k: 2.0,
                baseline_n: 0,
                warmup: true,
            },
            EventRecord {
                app_id: "b,with comma".into(),
                metric: MetricKind::Count,
                window: window(),
                e: -1,
                a: Some(-0.1 - 0.2),
                sigma: Some(1.0 / 3.0),
                k: 2.0,
                baseline_n: 9,
                warmup: false,
            },
        ];
        let mut buf = Vec::new();
        write_events_csv(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("app_id,metric,t0,w,e,a,sigma,k,baseline_n,warmup\n"));
        assert!(text.contains("a,r,2022-06-09,7,0,,,2.0,0,true"), "{text}");
        assert_eq!(read_events_csv(&buf[..]).unwrap(), events);
    }

    #[test]
    fn empty_tables_keep_headers() {
        let mut buf = Vec::new();
        write_correlations_csv(&[], &mut buf).unwrap();
        assert_eq!(buf, b"app_i,app_j,metric,t0,w,rho,c,n_points\n");
        assert!(read_correlations_csv(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn correlations_round_trip() {
        let records = vec![CorrelationRecord {
            app_i: "a".into(),
            app_j: "b".into(),
            metric: MetricKind::Polarity,
            window: TimeWindow::new("2022-06-09".parse().unwrap(), 1),
            rho: Some(0.123456789012345),
            c: 0,
            n_points: 15,
        }];
        let mut buf = Vec::new();
        write_correlations_csv(&records, &mut buf).unwrap();
        assert_eq!(read_correlations_csv(&buf[..]).unwrap(), records);
    }

    #[test]
    fn metrics_round_trip() {
        let stats = vec![WindowStat {
            app_id: "a".into(),
            metric: MetricKind::Count,
            window: window(),
            mu: Some(12.0),
            delta: None,
            n_obs: 12,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&stats, &mut buf).unwrap();
        assert_eq!(read_metrics_csv(&buf[..]).unwrap(), stats);
    }
}
