//! Baseline-deviation event detection.
//!
//! For every `(app, metric)` series the detector keeps an expanding baseline of
//! the deltas observed since `t_omega`. A window's delta `a` is an event when it
//! leaves the band `(-k·σ, k·σ)`, where `σ` is the standard deviation of the
//! deltas of all earlier windows:
//!
//! ```text
//! E = +1  if a >=  k·σ
//! E = -1  if a <= -k·σ
//! E =  0  otherwise
//! ```
//!
//! Detection is suppressed (`E = 0`) while the baseline holds fewer than
//! `min_baseline` deltas (warm-up), when `a` or `σ` is missing, and when `σ = 0`.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ingest::AppId;
use crate::metrics::{MetricKind, TimeWindow, WindowStat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    /// Divide by `N`.
    #[default]
    Population,
    /// Divide by `N - 1`.
    Sample,
}

impl FromStr for StdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "population" => Ok(StdMode::Population),
            "sample" => Ok(StdMode::Sample),
            other => Err(format!("unknown std mode `{other}` (expected population or sample)")),
        }
    }
}

impl fmt::Display for StdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StdMode::Population => "population",
            StdMode::Sample => "sample",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Sensitivity factor, strictly positive.
    pub k: f64,
    pub min_baseline: usize,
    pub std_mode: StdMode,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { k: 2.0, min_baseline: 4, std_mode: StdMode::Population }
    }
}

/// Standard deviation of the baseline deltas, or `None` with fewer than
/// `min_baseline` values (or too few for the chosen estimator).
///
/// Uses the corrected two-pass formula: the residual sum `Σ(x - x̄)` is
/// subtracted back out to cancel rounding in the mean.
pub fn baseline_sigma(deltas: &[f64], min_baseline: usize, mode: StdMode) -> Option<f64> {
    let n = deltas.len();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample => n.checked_sub(1)?,
    };
    if n == 0 || n < min_baseline || denom == 0 {
        return None;
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let (sum_sq, sum) = deltas.iter().fold((0.0, 0.0), |(sq, s), x| {
        let d = x - mean;
        (sq + d * d, s + d)
    });
    let var = (sum_sq - sum * sum / n as f64) / denom as f64;
    Some(var.max(0.0).sqrt())
}

/// Thresholds `a` against `±k·σ`, inclusive at the boundary.
pub fn classify(a: f64, sigma: f64, k: f64) -> i8 {
    let band = k * sigma;
    if a >= band {
        1
    } else if a <= -band {
        -1
    } else {
        0
    }
}

/// Expanding baseline of deltas for one `(app, metric)` series.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub app_id: AppId,
    pub metric: MetricKind,
    pub t_omega: NaiveDate,
    /// Present deltas of windows with `t_omega <= t_i < t0`, in window order.
    pub deltas: Vec<f64>,
}

impl BaselineState {
    pub fn new(app_id: impl Into<AppId>, metric: MetricKind, t_omega: NaiveDate) -> Self {
        BaselineState { app_id: app_id.into(), metric, t_omega, deltas: Vec::new() }
    }

    pub fn sigma(&self, config: &DetectorConfig) -> Option<f64> {
        baseline_sigma(&self.deltas, config.min_baseline, config.std_mode)
    }
}

/// Detector output for one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub app_id: AppId,
    pub metric: MetricKind,
    pub window: TimeWindow,
    pub e: i8,
    /// The window's delta.
    pub a: Option<f64>,
    pub sigma: Option<f64>,
    pub k: f64,
    pub baseline_n: usize,
    /// The baseline held fewer than `min_baseline` deltas.
    pub warmup: bool,
}

impl EventRecord {
    pub fn is_event(&self) -> bool {
        self.e != 0
    }

    /// The baseline was flat (`σ = 0`), so no event could fire.
    pub fn degenerate(&self) -> bool {
        self.sigma == Some(0.0)
    }
}

/// Tests one window against the baseline, then folds the window's delta into
/// the baseline for later windows.
pub fn detect_event(stat: &WindowStat, baseline: &mut BaselineState, config: &DetectorConfig) -> EventRecord {
    debug_assert_eq!(stat.app_id, baseline.app_id);
    debug_assert_eq!(stat.metric, baseline.metric);
    let baseline_n = baseline.deltas.len();
    let warmup = baseline_n < config.min_baseline;
    let sigma = baseline.sigma(config);
    let e = match (stat.delta, sigma) {
        (Some(a), Some(s)) if !warmup && s > 0.0 => classify(a, s, config.k),
        _ => 0,
    };
    let record = EventRecord {
        app_id: stat.app_id.clone(),
        metric: stat.metric,
        window: stat.window,
        e,
        a: stat.delta,
        sigma,
        k: config.k,
        baseline_n,
        warmup,
    };
    if let Some(a) = stat.delta {
        if stat.window.start >= baseline.t_omega {
            baseline.deltas.push(a);
        }
    }
    record
}

/// Runs detection over a contiguous window series of one `(app, metric)`.
pub fn detect_series(stats: &[WindowStat], t_omega: NaiveDate, config: &DetectorConfig) -> Vec<EventRecord> {
    let Some(first) = stats.first() else {
        return Vec::new();
    };
    let mut baseline = BaselineState::new(first.app_id.clone(), first.metric, t_omega);
    stats.iter().map(|s| detect_event(s, &mut baseline, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{metric_delta, window_series};

    fn t_omega() -> NaiveDate {
        "2022-06-09".parse().unwrap()
    }

    fn series(mus: &[f64]) -> Vec<WindowStat> {
        let windows = window_series(t_omega(), t_omega() + chrono::Duration::days(7 * mus.len() as i64), 7);
        let mut stats: Vec<WindowStat> = mus
            .iter()
            .zip(windows)
            .map(|(mu, window)| WindowStat {
                app_id: "app".into(),
                metric: MetricKind::Count,
                window,
                mu: Some(*mu),
                delta: None,
                n_obs: *mu as usize,
            })
            .collect();
        metric_delta(&mut stats);
        stats
    }

    #[test]
    fn sigma_examples() {
        assert_eq!(baseline_sigma(&[0.0; 4], 4, StdMode::Population), Some(0.0));
        assert_eq!(baseline_sigma(&[1.0, -1.0, 1.0, -1.0], 4, StdMode::Population), Some(1.0));
        assert_eq!(baseline_sigma(&[1.0, -1.0, 1.0], 4, StdMode::Population), None);
        assert_eq!(baseline_sigma(&[], 0, StdMode::Population), None);
        assert_eq!(baseline_sigma(&[3.0], 1, StdMode::Sample), None);
        let s = baseline_sigma(&[1.0, -1.0, 1.0, -1.0], 4, StdMode::Sample).unwrap();
        assert!((s - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn flat_series_never_fires() {
        let events = detect_series(&series(&[40.0; 20]), t_omega(), &DetectorConfig::default());
        assert!(events.iter().all(|e| e.e == 0));
        assert!(events[10].degenerate());
        assert!(!events[10].warmup);
    }

    #[test]
    fn degenerate_baseline_ignores_any_perturbation() {
        let mut mus = vec![40.0; 10];
        mus.push(400.0);
        let events = detect_series(&series(&mus), t_omega(), &DetectorConfig::default());
        assert_eq!(events[10].e, 0);
        assert_eq!(events[10].sigma, Some(0.0));
        assert_eq!(events[10].a, Some(360.0));
    }

    #[test]
    fn boundary_is_inclusive() {
        // deltas 1,-1,1,-1 -> sigma 1; next delta 2 = k*sigma.
        let up = detect_series(&series(&[10.0, 11.0, 10.0, 11.0, 10.0, 12.0]), t_omega(), &DetectorConfig::default());
        assert_eq!(up[5].sigma, Some(1.0));
        assert_eq!(up[5].e, 1);
        let down = detect_series(&series(&[10.0, 11.0, 10.0, 11.0, 10.0, 8.0]), t_omega(), &DetectorConfig::default());
        assert_eq!(down[5].e, -1);
        let inside = detect_series(&series(&[10.0, 11.0, 10.0, 11.0, 10.0, 11.5]), t_omega(), &DetectorConfig::default());
        assert_eq!(inside[5].e, 0);
    }

    #[test]
    fn warmup_suppresses_early_windows() {
        let events = detect_series(&series(&[10.0, 11.0, 10.0, 11.0, 30.0]), t_omega(), &DetectorConfig::default());
        // window 4 sees three baseline deltas only
        assert_eq!(events[4].baseline_n, 3);
        assert!(events[4].warmup);
        assert_eq!(events[4].e, 0);
        assert_eq!(events[0].a, None);
    }

    #[test]
    fn missing_deltas_are_skipped_in_baseline() {
        let mut stats = series(&[10.0, 11.0, 10.0, 11.0, 10.0, 11.0, 10.0]);
        stats[2].mu = None;
        metric_delta(&mut stats);
        let events = detect_series(&stats, t_omega(), &DetectorConfig::default());
        assert_eq!(events[6].baseline_n, 3);
        assert_eq!(events[2].a, None);
    }
}
