//! Review ingestion.
//!
//! Reviews arrive as flat files, either JSONL (canonical, one object per line)
//! or CSV with a header row. Parsing never fails on a bad record: each one is
//! turned into a [`Reject`] carrying the physical line number and a
//! machine-readable reason. Only an unreadable stream is fatal.
//!
//! Accepted reviews are indexed into a [`MarketCatalog`] that keeps every app's
//! reviews sorted by `(timestamp, review_id)` and flags apps whose mean monthly
//! review volume falls below a floor.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, SecondsFormat, Timelike, Utc};
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

/// Opaque app identifier.
pub type AppId = String;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable input stream: {0}")]
    Unreadable(#[from] std::io::Error),
    #[error("unreadable CSV input: {0}")]
    Csv(#[from] csv::Error),
    #[error("failed to serialize review: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Input file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputFormat {
    #[default]
    Jsonl,
    Csv,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(format!("unknown input format `{other}` (expected jsonl or csv)")),
        }
    }
}

impl fmt::Display for InputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputFormat::Jsonl => "jsonl",
            InputFormat::Csv => "csv",
        })
    }
}

/// Inclusive bounds of a source's native rating scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: i64,
    pub max: i64,
}

impl RatingScale {
    /// The usual 1-5 star scale.
    pub const FIVE_STAR: RatingScale = RatingScale { min: 1, max: 5 };

    pub fn new(min: i64, max: i64) -> Option<Self> {
        (min < max).then_some(RatingScale { min, max })
    }

    pub fn contains(&self, raw: i64) -> bool {
        (self.min..=self.max).contains(&raw)
    }
}

impl Default for RatingScale {
    fn default() -> Self {
        RatingScale::FIVE_STAR
    }
}

impl FromStr for RatingScale {
    type Err = String;

    /// Parses `min-max`, e.g. `1-5` or `0-10`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("rating scale `{s}` must look like MIN-MAX"))?;
        let lo: i64 = lo.trim().parse().map_err(|_| format!("bad scale minimum in `{s}`"))?;
        let hi: i64 = hi.trim().parse().map_err(|_| format!("bad scale maximum in `{s}`"))?;
        RatingScale::new(lo, hi).ok_or_else(|| format!("rating scale `{s}` needs MIN < MAX"))
    }
}

impl fmt::Display for RatingScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.min, self.max)
    }
}

/// Rating scales keyed by source tag, with a fallback for unknown sources.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RatingScales {
    pub default: RatingScale,
    pub per_source: BTreeMap<String, RatingScale>,
}

impl RatingScales {
    pub fn uniform(scale: RatingScale) -> Self {
        RatingScales { default: scale, per_source: BTreeMap::new() }
    }

    pub fn for_source(&self, source: &str) -> RatingScale {
        self.per_source.get(source).copied().unwrap_or(self.default)
    }
}

/// One user review.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub app_id: AppId,
    #[serde(serialize_with = "serialize_timestamp")]
    pub timestamp: DateTime<Utc>,
    #[serde(rename = "rating")]
    pub raw_rating: i64,
    pub body: String,
    pub source: String,
}

fn serialize_timestamp<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format_timestamp(ts))
}

/// ISO-8601 UTC with second precision and a trailing `Z`.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Parses an ISO-8601 timestamp carrying an explicit offset and normalizes it
/// to UTC at second precision. Timezone-less values are rejected.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let parsed = DateTime::parse_from_rfc3339(s.trim()).ok()?;
    parsed.with_timezone(&Utc).with_nanosecond(0)
}

/// Why a record was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    /// The line is not a JSON object (or the CSV row could not be read as a record).
    MalformedRecord,
    MissingField(&'static str),
    BadTimestamp,
    /// The rating is present but is not an integer.
    BadRating,
    RatingOutOfRange { raw: i64, scale: RatingScale },
}

impl RejectReason {
    /// Machine-readable reason code.
    pub fn code(&self) -> String {
        match self {
            RejectReason::MalformedRecord => "malformed_record".into(),
            RejectReason::MissingField(field) => format!("missing_field:{field}"),
            RejectReason::BadTimestamp => "bad_timestamp".into(),
            RejectReason::BadRating => "bad_rating".into(),
            RejectReason::RatingOutOfRange { .. } => "rating_out_of_range".into(),
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::RatingOutOfRange { raw, scale } => {
                write!(f, "rating {raw} outside scale {scale}")
            }
            other => f.write_str(&other.code()),
        }
    }
}

impl Serialize for RejectReason {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

/// A rejected input record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub line_no: u64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub reviews: Vec<Review>,
    pub rejects: Vec<Reject>,
}

impl ParseOutcome {
    pub fn extend(&mut self, other: ParseOutcome) {
        self.reviews.extend(other.reviews);
        self.rejects.extend(other.rejects);
    }
}

enum RawRating {
    Int(i64),
    Text(String),
    Invalid,
}

#[derive(Default)]
struct RawFields {
    review_id: Option<String>,
    app_id: Option<String>,
    timestamp: Option<String>,
    rating: Option<RawRating>,
    body: Option<String>,
    source: Option<String>,
}

impl RawFields {
    fn validate(self, scales: &RatingScales) -> Result<Review, RejectReason> {
        fn required(v: Option<String>, name: &'static str) -> Result<String, RejectReason> {
            match v {
                Some(s) if !s.trim().is_empty() => Ok(s),
                _ => Err(RejectReason::MissingField(name)),
            }
        }
        let review_id = required(self.review_id, "review_id")?;
        let app_id = required(self.app_id, "app_id")?;
        let timestamp = required(self.timestamp, "timestamp")?;
        let source = required(self.source, "source")?;
        let body = self.body.ok_or(RejectReason::MissingField("body"))?;
        let raw_rating = match self.rating {
            None => return Err(RejectReason::MissingField("rating")),
            Some(RawRating::Int(v)) => v,
            Some(RawRating::Text(t)) if t.trim().is_empty() => {
                return Err(RejectReason::MissingField("rating"))
            }
            Some(RawRating::Text(t)) => t.trim().parse().map_err(|_| RejectReason::BadRating)?,
            Some(RawRating::Invalid) => return Err(RejectReason::BadRating),
        };
        let timestamp = parse_timestamp(&timestamp).ok_or(RejectReason::BadTimestamp)?;
        let scale = scales.for_source(&source);
        if !scale.contains(raw_rating) {
            return Err(RejectReason::RatingOutOfRange { raw: raw_rating, scale });
        }
        Ok(Review { review_id, app_id, timestamp, raw_rating, body, source })
    }
}

fn json_string(v: Option<&Value>) -> Option<String> {
    match v? {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn json_fields(line: &str) -> Result<RawFields, RejectReason> {
    let value: Value = serde_json::from_str(line).map_err(|_| RejectReason::MalformedRecord)?;
    let obj = value.as_object().ok_or(RejectReason::MalformedRecord)?;
    let rating = obj.get("rating").and_then(|v| match v {
        Value::Null => None,
        Value::Number(n) => Some(n.as_i64().map_or(RawRating::Invalid, RawRating::Int)),
        Value::String(s) => Some(RawRating::Text(s.clone())),
        _ => Some(RawRating::Invalid),
    });
    Ok(RawFields {
        review_id: json_string(obj.get("review_id")),
        app_id: json_string(obj.get("app_id")),
        timestamp: json_string(obj.get("timestamp")),
        rating,
        body: obj.get("body").and_then(Value::as_str).map(str::to_owned),
        source: json_string(obj.get("source")),
    })
}

/// Parses a review dump. Malformed records become rejects; only an unreadable
/// stream (I/O failure, invalid UTF-8, unreadable CSV header) is an error.
pub fn parse_reviews<R: Read>(
    input: R,
    format: InputFormat,
    scales: &RatingScales,
) -> Result<ParseOutcome, IngestError> {
    match format {
        InputFormat::Jsonl => parse_jsonl(input, scales),
        InputFormat::Csv => parse_csv(input, scales),
    }
}

fn parse_jsonl<R: Read>(input: R, scales: &RatingScales) -> Result<ParseOutcome, IngestError> {
    let mut out = ParseOutcome::default();
    for (idx, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx as u64 + 1;
        match json_fields(&line).and_then(|raw| raw.validate(scales)) {
            Ok(review) => out.reviews.push(review),
            Err(reason) => out.rejects.push(Reject { line_no, reason }),
        }
    }
    Ok(out)
}

const COLUMNS: [&str; 6] = ["review_id", "app_id", "timestamp", "rating", "body", "source"];

fn parse_csv<R: Read>(input: R, scales: &RatingScales) -> Result<ParseOutcome, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let index: Vec<Option<usize>> = COLUMNS
        .iter()
        .map(|col| headers.iter().position(|h| h.trim() == *col))
        .collect();
    let mut out = ParseOutcome::default();
    for record in reader.records() {
        let record = record?;
        let line_no = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let get = |i: usize| index[i].and_then(|pos| record.get(pos)).map(str::to_owned);
        let raw = RawFields {
            review_id: get(0),
            app_id: get(1),
            timestamp: get(2),
            rating: get(3).map(RawRating::Text),
            body: get(4),
            source: get(5),
        };
        match raw.validate(scales) {
            Ok(review) => out.reviews.push(review),
            Err(reason) => out.rejects.push(Reject { line_no, reason }),
        }
    }
    Ok(out)
}

/// Writes reviews in the canonical JSONL format.
pub fn write_reviews_jsonl<'a, W: Write>(
    reviews: impl IntoIterator<Item = &'a Review>,
    mut out: W,
) -> Result<(), IngestError> {
    for review in reviews {
        serde_json::to_writer(&mut out, review)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes reviews as CSV with a header row.
pub fn write_reviews_csv<'a, W: Write>(
    reviews: impl IntoIterator<Item = &'a Review>,
    out: W,
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(COLUMNS)?;
    for r in reviews {
        writer.write_record([
            r.review_id.as_str(),
            r.app_id.as_str(),
            &format_timestamp(&r.timestamp),
            &r.raw_rating.to_string(),
            r.body.as_str(),
            r.source.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes the reject report: one `{"line_no","reason"}` object per line.
pub fn write_rejects_jsonl<W: Write>(rejects: &[Reject], mut out: W) -> Result<(), IngestError> {
    for reject in rejects {
        serde_json::to_writer(&mut out, reject)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-app data coverage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AppCoverage {
    #[serde(serialize_with = "serialize_timestamp")]
    pub first: DateTime<Utc>,
    #[serde(serialize_with = "serialize_timestamp")]
    pub last: DateTime<Utc>,
    pub total: usize,
    /// Review counts per calendar month (`YYYY-MM`), including empty months
    /// inside the observed span.
    pub monthly_counts: BTreeMap<String, usize>,
    pub mean_monthly: f64,
    pub insufficient: bool,
}

/// A `(source, review_id)` pair dropped because it was already seen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DuplicateReview {
    pub source: String,
    pub review_id: String,
}

/// The market: every app's time-ordered reviews plus coverage flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketCatalog {
    pub floor: f64,
    #[serde(skip)]
    pub reviews: BTreeMap<AppId, Vec<Review>>,
    pub coverage: BTreeMap<AppId, AppCoverage>,
    pub duplicates: Vec<DuplicateReview>,
}

impl MarketCatalog {
    pub fn apps(&self) -> impl Iterator<Item = &AppId> {
        self.reviews.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn review_count(&self) -> usize {
        self.reviews.values().map(Vec::len).sum()
    }

    pub fn insufficient_apps(&self) -> Vec<&AppId> {
        self.coverage.iter().filter(|(_, c)| c.insufficient).map(|(a, _)| a).collect()
    }

    /// Drops apps flagged as insufficient. The flags stay in `coverage`.
    pub fn without_insufficient(mut self) -> Self {
        let flagged: Vec<AppId> = self.insufficient_apps().into_iter().cloned().collect();
        for app in flagged {
            self.reviews.remove(&app);
        }
        self
    }

    /// Earliest review timestamp across all apps.
    pub fn first_timestamp(&self) -> Option<DateTime<Utc>> {
        self.coverage.values().map(|c| c.first).min()
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.coverage.values().map(|c| c.last).max()
    }
}

fn month_index(ts: &DateTime<Utc>) -> i64 {
    ts.year() as i64 * 12 + ts.month0() as i64
}

fn month_key(index: i64) -> String {
    format!("{:04}-{:02}", index.div_euclid(12), index.rem_euclid(12) + 1)
}

/// Indexes reviews per app. Duplicate `(source, review_id)` pairs keep the
/// first occurrence. Apps whose mean monthly count over their observed span of
/// calendar months is below `floor` are flagged, not dropped.
pub fn build_catalog(reviews: impl IntoIterator<Item = Review>, floor: f64) -> MarketCatalog {
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut duplicates = Vec::new();
    let mut per_app: BTreeMap<AppId, Vec<Review>> = BTreeMap::new();
    for review in reviews {
        if !seen.insert((review.source.clone(), review.review_id.clone())) {
            log::warn!("duplicate review {}/{} dropped", review.source, review.review_id);
            duplicates.push(DuplicateReview { source: review.source, review_id: review.review_id });
            continue;
        }
        per_app.entry(review.app_id.clone()).or_default().push(review);
    }

    let mut coverage = BTreeMap::new();
    for (app, list) in per_app.iter_mut() {
        list.sort_by(|a, b| {
            a.timestamp.cmp(&b.timestamp).then_with(|| a.review_id.cmp(&b.review_id))
        });
        let first = list[0].timestamp;
        let last = list[list.len() - 1].timestamp;
        let (lo, hi) = (month_index(&first), month_index(&last));
        let mut monthly_counts: BTreeMap<String, usize> =
            (lo..=hi).map(|m| (month_key(m), 0)).collect();
        for r in list.iter() {
            *monthly_counts.get_mut(&month_key(month_index(&r.timestamp))).unwrap() += 1;
        }
        let mean_monthly = list.len() as f64 / monthly_counts.len() as f64;
        coverage.insert(
            app.clone(),
            AppCoverage {
                first,
                last,
                total: list.len(),
                monthly_counts,
                mean_monthly,
                insufficient: mean_monthly < floor,
            },
        );
    }
    MarketCatalog { floor, reviews: per_app, coverage, duplicates }
}
