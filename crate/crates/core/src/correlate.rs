//! Pairwise correlation and correlated-event detection.
//!
//! For every app pair and metric a rolling Pearson correlation is computed at
//! `w_c` granularity over the lookback `[t0 - offset, t0 + w_c)`, then
//! thresholded at `±h` into `C ∈ {-1, 0, +1}`. Maximal runs of constant
//! non-zero `C` are intersected, through their first `w_e` days only, with the
//! events of both apps to produce correlated events (CE).

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::detect::EventRecord;
use crate::ingest::AppId;
use crate::metrics::{MetricKind, TimeWindow};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationConfig {
    /// Correlation window length in days.
    pub w_c: u32,
    /// Lookback start offset: `t_phi = t0 - offset`.
    pub lookback_offset: u32,
    /// Threshold in `(0, 1]`.
    pub h: f64,
    /// Minimum pairwise-complete points for a defined correlation.
    pub min_points: usize,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        CorrelationConfig { w_c: 1, lookback_offset: 14, h: 0.5, min_points: 8 }
    }
}

/// Unordered app pair stored as `app_i < app_j`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AppPair {
    pub app_i: AppId,
    pub app_j: AppId,
}

impl AppPair {
    pub fn new(a: impl Into<AppId>, b: impl Into<AppId>) -> Self {
        let (a, b) = (a.into(), b.into());
        assert_ne!(a, b, "a pair needs two distinct apps");
        if a < b {
            AppPair { app_i: a, app_j: b }
        } else {
            AppPair { app_i: b, app_j: a }
        }
    }

    /// Every `i < j` pair of the given apps, in sorted order.
    pub fn all<'a>(apps: impl IntoIterator<Item = &'a AppId>) -> Vec<AppPair> {
        let sorted: Vec<&AppId> = apps.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let mut pairs = Vec::new();
        for (i, a) in sorted.iter().enumerate() {
            for b in &sorted[i + 1..] {
                pairs.push(AppPair::new((*a).clone(), (*b).clone()));
            }
        }
        pairs
    }
}

/// Pearson correlation of paired samples; `None` with fewer than two points
/// or when either side is constant.
pub fn pearson(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let (x0, y0) = points[0];
    if points.iter().all(|p| p.0 == x0) || points.iter().all(|p| p.1 == y0) {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let denom = (sxx * syy).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((sxy / denom).clamp(-1.0, 1.0))
}

/// A correlation value and the number of points behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoEstimate {
    pub rho: Option<f64>,
    pub n_points: usize,
}

/// Pearson correlation of two dated series over the pairwise-complete dates in
/// `[lookback.0, lookback.1)`. Missing with fewer than `min_points` common
/// dates or a constant side.
pub fn pearson_rho(
    xs: &[(NaiveDate, f64)],
    ys: &[(NaiveDate, f64)],
    lookback: (NaiveDate, NaiveDate),
    min_points: usize,
) -> RhoEstimate {
    let in_range = |d: &NaiveDate| *d >= lookback.0 && *d < lookback.1;
    let ys: BTreeMap<NaiveDate, f64> = ys.iter().filter(|(d, _)| in_range(d)).copied().collect();
    let mut seen = BTreeSet::new();
    let points: Vec<(f64, f64)> = xs
        .iter()
        .filter(|(d, _)| in_range(d) && seen.insert(*d))
        .filter_map(|(d, x)| ys.get(d).map(|y| (*x, *y)))
        .collect();
    let rho = if points.len() < min_points { None } else { pearson(&points) };
    RhoEstimate { rho, n_points: points.len() }
}

/// `C = +1` if `rho >= h`, `-1` if `rho <= -h`, else 0 (also when missing).
pub fn detect_correlation(rho: Option<f64>, h: f64) -> i8 {
    match rho {
        Some(r) if r >= h => 1,
        Some(r) if r <= -h => -1,
        _ => 0,
    }
}

/// Correlation between two apps' like metrics for one `w_c` window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub app_i: AppId,
    pub app_j: AppId,
    pub metric: MetricKind,
    pub window: TimeWindow,
    pub rho: Option<f64>,
    pub c: i8,
    pub n_points: usize,
}

impl CorrelationRecord {
    pub fn pair(&self) -> AppPair {
        AppPair::new(self.app_i.clone(), self.app_j.clone())
    }
}

/// Rolling correlation over a contiguous `w_c` window grid. `xs[t]` and `ys[t]`
/// are the two apps' window means for `windows[t]` (`None` when absent).
pub fn correlation_series(
    pair: &AppPair,
    metric: MetricKind,
    windows: &[TimeWindow],
    xs: &[Option<f64>],
    ys: &[Option<f64>],
    config: &CorrelationConfig,
) -> Vec<CorrelationRecord> {
    assert_eq!(windows.len(), xs.len());
    assert_eq!(windows.len(), ys.len());
    let mut points = Vec::with_capacity(config.lookback_offset as usize + 1);
    windows
        .iter()
        .enumerate()
        .map(|(t, window)| {
            let phi = window.start - Duration::days(config.lookback_offset as i64);
            let lo = windows[..=t].partition_point(|w| w.start < phi);
            points.clear();
            points.extend((lo..=t).filter_map(|s| Some((xs[s]?, ys[s]?))));
            let rho = if points.len() < config.min_points { None } else { pearson(&points) };
            CorrelationRecord {
                app_i: pair.app_i.clone(),
                app_j: pair.app_j.clone(),
                metric,
                window: *window,
                rho,
                c: detect_correlation(rho, config.h),
                n_points: points.len(),
            }
        })
        .collect()
}

/// Maximal runs of constant non-zero sign as `(sign, start, end)` index ranges
/// (end exclusive).
pub fn sign_runs(cs: &[i8]) -> Vec<(i8, usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < cs.len() {
        let sign = cs[i];
        let mut j = i + 1;
        while j < cs.len() && cs[j] == sign {
            j += 1;
        }
        if sign != 0 {
            runs.push((sign, i, j));
        }
        i = j;
    }
    runs
}

/// A maximal period `[t_start, t_end)` of constant `C = sign`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationRun {
    pub app_i: AppId,
    pub app_j: AppId,
    pub metric: MetricKind,
    pub sign: i8,
    pub t_start: NaiveDate,
    pub t_end: NaiveDate,
    /// `[t_start, t_start + w_e)`, the only part intersected with events.
    pub first_interval: TimeWindow,
}

/// Extracts runs from one pair's contiguous correlation series.
pub fn extract_runs(records: &[CorrelationRecord], w_e: u32) -> Vec<CorrelationRun> {
    let cs: Vec<i8> = records.iter().map(|r| r.c).collect();
    sign_runs(&cs)
        .into_iter()
        .map(|(sign, start, end)| {
            let first = &records[start];
            CorrelationRun {
                app_i: first.app_i.clone(),
                app_j: first.app_j.clone(),
                metric: first.metric,
                sign,
                t_start: first.window.start,
                t_end: records[end - 1].window.end(),
                first_interval: TimeWindow::new(first.window.start, w_e),
            }
        })
        .collect()
}

/// A potentially correlated pair of events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedEventRecord {
    pub app_i: AppId,
    pub app_j: AppId,
    pub metric: MetricKind,
    /// The event window `[t0, t0 + w_e)` being assessed.
    pub window: TimeWindow,
    pub ce: i8,
    /// Contributing events; one may come from the preceding window.
    pub e_i: EventRecord,
    pub e_j: EventRecord,
    pub run: CorrelationRun,
}

fn ce_value(e_i: i8, e_j: i8, sign: i8) -> Option<i8> {
    if e_i == 0 || e_j == 0 {
        return None;
    }
    match sign {
        1 if e_i == e_j => Some(1),
        -1 if e_i == -e_j => Some(-1),
        _ => None,
    }
}

/// Intersects a pair's correlation runs with the events of both apps.
///
/// Each run is only assessed against event windows overlapping its first
/// interval. A window is a CE when both events fire with signs agreeing with
/// the run (equal signs for a positive run, opposite for a negative one). When
/// the same-window test fails, one app's event is taken from the immediately
/// preceding window instead, `i` first and then `j`. Each event window is
/// reported at most once per pair; the earliest run wins.
pub fn detect_correlated_events(
    events_i: &[EventRecord],
    events_j: &[EventRecord],
    runs: &[CorrelationRun],
) -> Vec<CorrelatedEventRecord> {
    let by_start = |events: &[EventRecord]| -> BTreeMap<NaiveDate, EventRecord> {
        events.iter().map(|e| (e.window.start, e.clone())).collect()
    };
    let (map_i, map_j) = (by_start(events_i), by_start(events_j));
    let mut reported = BTreeSet::new();
    let mut out = Vec::new();
    let mut runs: Vec<&CorrelationRun> = runs.iter().collect();
    runs.sort_by_key(|r| r.t_start);
    for run in runs {
        let candidates = map_i.range(..run.first_interval.end()).rev();
        let mut windows: Vec<TimeWindow> = candidates
            .map(|(_, e)| e.window)
            .take_while(|w| w.end() > run.first_interval.start)
            .filter(|w| w.overlaps(&run.first_interval))
            .collect();
        windows.reverse();
        for window in windows {
            if reported.contains(&window.start) {
                continue;
            }
            let (Some(cur_i), Some(cur_j)) = (map_i.get(&window.start), map_j.get(&window.start)) else {
                continue;
            };
            let prev = window.preceding().start;
            let mut options = vec![(cur_i, cur_j)];
            if let Some(prev_i) = map_i.get(&prev) {
                options.push((prev_i, cur_j));
            }
            if let Some(prev_j) = map_j.get(&prev) {
                options.push((cur_i, prev_j));
            }
            let hit = options
                .into_iter()
                .find_map(|(a, b)| ce_value(a.e, b.e, run.sign).map(|ce| (ce, a, b)));
            if let Some((ce, a, b)) = hit {
                reported.insert(window.start);
                out.push(CorrelatedEventRecord {
                    app_i: run.app_i.clone(),
                    app_j: run.app_j.clone(),
                    metric: run.metric,
                    window,
                    ce,
                    e_i: a.clone(),
                    e_j: b.clone(),
                    run: run.clone(),
                });
            }
        }
    }
    out.sort_by_key(|r| r.window.start);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    #[test]
    fn self_and_anti_correlation() {
        let xs: Vec<(f64, f64)> = (0..14).map(|i| ((i * i % 7) as f64, 0.0)).collect();
        let same: Vec<(f64, f64)> = xs.iter().map(|(x, _)| (*x, *x)).collect();
        assert!((pearson(&same).unwrap() - 1.0).abs() < 1e-12);
        let anti: Vec<(f64, f64)> = xs.iter().map(|(x, _)| (*x, 3.0 - *x)).collect();
        assert!((pearson(&anti).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)]), None);
        assert_eq!(pearson(&[(1.0, 2.0)]), None);
    }

    #[test]
    fn exact_half_correlation() {
        let pts: Vec<(f64, f64)> =
            (0..15).map(|i| ([1.0, 2.0, 3.0][i % 3], [0.0, -1.0, 1.0][i % 3])).collect();
        assert_eq!(pearson(&pts), Some(0.5));
        assert_eq!(detect_correlation(pearson(&pts), 0.5), 1);
    }

    #[test]
    fn thresholds() {
        assert_eq!(detect_correlation(Some(0.5), 0.5), 1);
        assert_eq!(detect_correlation(Some(-0.5), 0.5), -1);
        assert_eq!(detect_correlation(Some(0.49), 0.5), 0);
        assert_eq!(detect_correlation(None, 0.5), 0);
    }

    #[test]
    fn dated_rho_uses_common_dates_in_lookback() {
        let base = d("2022-06-09");
        let day = |i: i64| base + Duration::days(i);
        let xs: Vec<(NaiveDate, f64)> = (0..20).map(|i| (day(i), i as f64)).collect();
        let ys: Vec<(NaiveDate, f64)> =
            (0..20).filter(|i| i % 2 == 0).map(|i| (day(i), 2.0 * i as f64)).collect();
        let est = pearson_rho(&xs, &ys, (day(2), day(17)), 3);
        assert_eq!(est.n_points, 8);
        assert!((est.rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(pearson_rho(&xs, &ys, (day(2), day(17)), 9).rho, None);
    }

    #[test]
    fn run_extraction() {
        assert!(sign_runs(&[0, 0, 0]).is_empty());
        assert_eq!(sign_runs(&[0, 1, 1, 0, -1]), vec![(1, 1, 3), (-1, 4, 5)]);
        assert_eq!(sign_runs(&[1, -1, -1]), vec![(1, 0, 1), (-1, 1, 3)]);
    }

    #[test]
    fn pairs_are_canonical() {
        let p = AppPair::new("b", "a");
        assert_eq!((p.app_i.as_str(), p.app_j.as_str()), ("a", "b"));
        let apps: Vec<AppId> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(AppPair::all(&apps).len(), 3);
    }

    fn event(app: &str, start: NaiveDate, e: i8) -> EventRecord {
        EventRecord {
            app_id: app.into(),
            metric: MetricKind::Count,
            window: TimeWindow::new(start, 7),
            e,
            a: Some(e as f64),
            sigma: Some(1.0),
            k: 2.0,
            baseline_n: 10,
            warmup: false,
        }
    }

    fn run(sign: i8, start: NaiveDate) -> CorrelationRun {
        CorrelationRun {
            app_i: "a".into(),
            app_j: "b".into(),
            metric: MetricKind::Count,
            sign,
            t_start: start,
            t_end: start + Duration::days(3),
            first_interval: TimeWindow::new(start, 7),
        }
    }

    fn weeks(app: &str, es: &[i8]) -> Vec<EventRecord> {
        es.iter()
            .enumerate()
            .map(|(i, e)| event(app, d("2022-06-09") + Duration::days(7 * i as i64), *e))
            .collect()
    }

    #[test]
    fn no_events_no_ce() {
        let ei = weeks("a", &[0, 0, 0, 0]);
        let ej = weeks("b", &[0, 1, 0, 0]);
        assert!(detect_correlated_events(&ei, &ej, &[run(1, d("2022-06-16"))]).is_empty());
    }

    #[test]
    fn same_window_and_extension() {
        let ei = weeks("a", &[0, 1, 0, -1, 0]);
        let ej = weeks("b", &[0, 1, 0, 0, 1]);
        // positive run starting mid week 1 overlaps weeks 1 and 2
        let ce = detect_correlated_events(&ei, &ej, &[run(1, d("2022-06-18"))]);
        assert_eq!(ce.len(), 1);
        assert_eq!(ce[0].window.start, d("2022-06-16"));
        assert_eq!(ce[0].ce, 1);
        // negative run over week 4: E_i(week 3) = -1, E_j(week 4) = +1
        let ce = detect_correlated_events(&ei, &ej, &[run(-1, d("2022-07-07"))]);
        assert_eq!(ce.len(), 1);
        assert_eq!(ce[0].ce, -1);
        assert_eq!(ce[0].e_i.window.start, d("2022-06-30"));
        assert_eq!(ce[0].e_j.window.start, d("2022-07-07"));
        // sign mismatch: positive run cannot pair opposite events
        assert!(detect_correlated_events(&ei, &ej, &[run(1, d("2022-07-07"))]).is_empty());
    }

    #[test]
    fn both_preceding_is_not_tested() {
        let ei = weeks("a", &[0, 1, 0]);
        let ej = weeks("b", &[0, 1, 0]);
        let ce = detect_correlated_events(&ei, &ej, &[run(1, d("2022-06-23"))]);
        assert!(ce.is_empty());
    }
}
