//! Window metrics: review count `c`, mean normalized rating `r` and mean
//! sentence polarity `p`, computed per app over contiguous half-open windows
//! `[t0, t0 + w)` aligned to UTC midnight.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ingest::{AppId, RatingScale, RatingScales, Review};
use crate::sentiment::{score_review, PolarityScorer, Sentence};

/// The three review metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "c")]
    Count,
    #[serde(rename = "r")]
    Rating,
    #[serde(rename = "p")]
    Polarity,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Count, MetricKind::Rating, MetricKind::Polarity];

    pub fn code(self) -> &'static str {
        match self {
            MetricKind::Count => "c",
            MetricKind::Rating => "r",
            MetricKind::Polarity => "p",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            MetricKind::Count => "review count",
            MetricKind::Rating => "review rating",
            MetricKind::Polarity => "review polarity",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c" => Ok(MetricKind::Count),
            "r" => Ok(MetricKind::Rating),
            "p" => Ok(MetricKind::Polarity),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

/// Half-open window `[start, start + days)` in whole UTC days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: NaiveDate,
    pub days: u32,
}

impl TimeWindow {
    pub fn new(start: NaiveDate, days: u32) -> Self {
        assert!(days >= 1, "window length must be at least one day");
        TimeWindow { start, days }
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.days as i64)
    }

    pub fn start_instant(&self) -> DateTime<Utc> {
        day_start(self.start)
    }

    pub fn end_instant(&self) -> DateTime<Utc> {
        day_start(self.end())
    }

    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        *ts >= self.start_instant() && *ts < self.end_instant()
    }

    /// The window of the same length immediately before this one.
    pub fn preceding(&self) -> TimeWindow {
        TimeWindow { start: self.start - Duration::days(self.days as i64), days: self.days }
    }

    pub fn overlaps(&self, other: &TimeWindow) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end())
    }
}

pub fn day_start(date: NaiveDate) -> DateTime<Utc> {
    date.and_time(NaiveTime::MIN).and_utc()
}

/// Contiguous windows of `w` days covering `[t_start, t_end)`; a trailing
/// partial window is dropped.
pub fn window_series(t_start: NaiveDate, t_end: NaiveDate, w: u32) -> Vec<TimeWindow> {
    assert!(w >= 1, "window length must be at least one day");
    let span = (t_end - t_start).num_days();
    if span <= 0 {
        return Vec::new();
    }
    let count = span / w as i64;
    (0..count)
        .map(|i| TimeWindow::new(t_start + Duration::days(i * w as i64), w))
        .collect()
}

/// Affine map of a raw rating onto `0..=4`, rounding to the nearest bin
/// (halves round up). On the 1-5 scale this is `raw - 1`.
pub fn normalize_rating(raw: i64, scale: RatingScale) -> u8 {
    debug_assert!(scale.contains(raw));
    let raw = raw.clamp(scale.min, scale.max);
    let num = 4 * (raw - scale.min);
    let den = scale.max - scale.min;
    ((2 * num + den) / (2 * den)) as u8
}

/// A review with its normalized rating and scored sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredReview {
    pub review_id: String,
    pub timestamp: DateTime<Utc>,
    pub rating: u8,
    pub body: String,
    pub sentences: Vec<Sentence>,
}

impl ScoredReview {
    pub fn scored_polarities(&self) -> impl Iterator<Item = u8> + '_ {
        self.sentences.iter().filter_map(|s| s.polarity).map(|p| p.value())
    }
}

/// Normalizes and scores a time-sorted review list. When the scorer allows
/// concurrent calls the work is split across threads; output order is the
/// input order either way.
pub fn score_reviews(
    reviews: &[Review],
    scales: &RatingScales,
    scorer: &dyn PolarityScorer,
) -> Vec<ScoredReview> {
    let score_one = |r: &Review| ScoredReview {
        review_id: r.review_id.clone(),
        timestamp: r.timestamp,
        rating: normalize_rating(r.raw_rating, scales.for_source(&r.source)),
        body: r.body.clone(),
        sentences: score_review(&r.review_id, &r.body, scorer),
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if !scorer.concurrent() || threads < 2 || reviews.len() < 4096 {
        return reviews.iter().map(score_one).collect();
    }
    let chunk = reviews.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = reviews
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(score_one).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("scoring thread panicked")).collect()
    })
}

/// The slice of time-sorted reviews falling inside `window`.
pub fn reviews_in<'a>(reviews: &'a [ScoredReview], window: &TimeWindow) -> &'a [ScoredReview] {
    let lo = reviews.partition_point(|r| r.timestamp < window.start_instant());
    let hi = reviews.partition_point(|r| r.timestamp < window.end_instant());
    &reviews[lo..hi]
}

/// A window aggregate and the number of observations behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub mu: Option<f64>,
    pub n_obs: usize,
}

/// Window average of a metric over the reviews inside one window.
///
/// `c` is the review count and is never missing. `r` averages normalized
/// ratings. `p` averages every scored sentence of every review; unscored
/// sentences are ignored. `r` and `p` are missing without observations.
pub fn metric_mu(reviews: &[ScoredReview], metric: MetricKind) -> MetricValue {
    match metric {
        MetricKind::Count => MetricValue { mu: Some(reviews.len() as f64), n_obs: reviews.len() },
        MetricKind::Rating => mean_of(reviews.iter().map(|r| r.rating)),
        MetricKind::Polarity => mean_of(reviews.iter().flat_map(ScoredReview::scored_polarities)),
    }
}

fn mean_of(values: impl Iterator<Item = u8>) -> MetricValue {
    let (sum, n) = values.fold((0u64, 0usize), |(s, n), v| (s + v as u64, n + 1));
    MetricValue { mu: (n > 0).then(|| sum as f64 / n as f64), n_obs: n }
}

/// One window's metric value and its change from the preceding window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    pub app_id: AppId,
    pub metric: MetricKind,
    pub window: TimeWindow,
    pub mu: Option<f64>,
    pub delta: Option<f64>,
    pub n_obs: usize,
}

/// Fills `delta = mu(t0) - mu(t0 - w)`. The first window, and any window where
/// either mean is missing, gets no delta.
pub fn metric_delta(stats: &mut [WindowStat]) {
    for i in 0..stats.len() {
        stats[i].delta = match i.checked_sub(1).map(|p| &stats[p]) {
            Some(prev) => {
                debug_assert_eq!(prev.window.end(), stats[i].window.start, "windows must be contiguous");
                match (stats[i].mu, prev.mu) {
                    (Some(cur), Some(prev)) => Some(cur - prev),
                    _ => None,
                }
            }
            None => None,
        };
    }
}

/// Metric values and deltas for one app over a contiguous window series.
pub fn metric_series(
    app_id: &str,
    reviews: &[ScoredReview],
    metric: MetricKind,
    windows: &[TimeWindow],
) -> Vec<WindowStat> {
    let mut stats: Vec<WindowStat> = windows
        .iter()
        .map(|w| {
            let v = metric_mu(reviews_in(reviews, w), metric);
            WindowStat {
                app_id: app_id.to_owned(),
                metric,
                window: *w,
                mu: v.mu,
                delta: None,
                n_obs: v.n_obs,
            }
        })
        .collect();
    metric_delta(&mut stats);
    stats
}
