//! Summarization preparation for correlated events.
//!
//! Each contributing event yields up to three requests: `all` samples whole
//! reviews from the event window, while `positive` (`p >= 3`) and `negative`
//! (`p <= 1`) sample sentences. Requests are rendered through a text template
//! with named placeholders and handed to a [`SummarizerClient`].

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correlate::CorrelatedEventRecord;
use crate::detect::EventRecord;
use crate::ingest::AppId;
use crate::metrics::{MetricKind, ScoredReview, TimeWindow};
use crate::sentiment::Sentence;
use crate::sub_seed;

/// Default prompt template.
pub const DEFAULT_TEMPLATE: &str = include_str!("prompt_template.txt");

/// Environment variable holding credentials for a live summarizer. Passed to
/// the summarizer process through its inherited environment and never written
/// to any report.
pub const API_KEY_ENV: &str = "APPMARKET_SUMMARIZER_API_KEY";

const PLACEHOLDERS: [&str; 9] = [
    "app",
    "metric",
    "metric_name",
    "direction",
    "window_start",
    "window_end",
    "variant",
    "n_sampled",
    "items",
];

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("empty sample: no request emitted")]
    EmptySample,
    #[error("prompt template: unknown placeholder `{{{0}}}`")]
    UnknownPlaceholder(String),
    #[error("cannot read prompt template: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SummarizerError {
    #[error("summarizer timed out after {0:?}")]
    Timeout(Duration),
    #[error("summarizer failed: {0}")]
    Failed(String),
    #[error("summarizer I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    All,
    Positive,
    Negative,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::All, Variant::Positive, Variant::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::All => "all",
            Variant::Positive => "positive",
            Variant::Negative => "negative",
        }
    }

    fn item_noun(self) -> &'static str {
        match self {
            Variant::All => "reviews",
            Variant::Positive => "positive review sentences",
            Variant::Negative => "negative review sentences",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The event a request summarizes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventRef {
    pub app_id: AppId,
    pub metric: MetricKind,
    pub window: TimeWindow,
    pub e: i8,
}

impl From<&EventRecord> for EventRef {
    fn from(e: &EventRecord) -> Self {
        EventRef { app_id: e.app_id.clone(), metric: e.metric, window: e.window, e: e.e }
    }
}

/// One sampled text: a whole review or a single sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryItem {
    pub review_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sentence: Option<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRequest {
    pub event: EventRef,
    pub variant: Variant,
    pub n_requested: usize,
    pub n_available: usize,
    pub seed: u64,
    pub items: Vec<SummaryItem>,
}

impl SummaryRequest {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Sorted indices of a seeded uniform sample of `min(n, available)` out of
/// `available` without replacement. Takes everything when `available <= n`.
pub fn sample_indices(available: usize, n: usize, seed: u64) -> Vec<usize> {
    if available <= n {
        return (0..available).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, available, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Uniform sample of `n` reviews, returned in canonical (input) order.
pub fn sample_reviews(reviews: &[ScoredReview], n: usize, seed: u64) -> Vec<&ScoredReview> {
    sample_indices(reviews.len(), n, seed).into_iter().map(|i| &reviews[i]).collect()
}

/// Scored sentences split by polarity. Unscored sentences are left out.
#[derive(Debug, Default, PartialEq)]
pub struct PolarityPartition<'a> {
    pub positive: Vec<&'a Sentence>,
    pub negative: Vec<&'a Sentence>,
    pub neutral: Vec<&'a Sentence>,
}

pub fn partition_by_polarity<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> PolarityPartition<'a> {
    let mut part = PolarityPartition::default();
    for s in sentences {
        match s.polarity {
            Some(p) if p.is_positive() => part.positive.push(s),
            Some(p) if p.is_negative() => part.negative.push(s),
            Some(_) => part.neutral.push(s),
            None => {}
        }
    }
    part
}

fn request_seed(base_seed: u64, event: &EventRef, variant: Variant) -> u64 {
    sub_seed(
        base_seed,
        &format!("summary/{}/{}/{}/{}", event.app_id, event.metric, event.window.start, variant),
    )
}

/// The three requests for one event, given the app's reviews inside the event
/// window. Empty requests are included and flagged by [`SummaryRequest::is_empty`].
pub fn build_requests(event: &EventRef, window_reviews: &[ScoredReview], n: usize, base_seed: u64) -> Vec<SummaryRequest> {
    debug_assert!(window_reviews.iter().all(|r| event.window.contains(&r.timestamp)));
    let partition = partition_by_polarity(window_reviews.iter().flat_map(|r| r.sentences.iter()));
    Variant::ALL
        .iter()
        .map(|&variant| {
            let seed = request_seed(base_seed, event, variant);
            let (items, n_available) = match variant {
                Variant::All => {
                    let items = sample_reviews(window_reviews, n, seed)
                        .into_iter()
                        .map(|r| SummaryItem { review_id: r.review_id.clone(), sentence: None, text: r.body.clone() })
                        .collect();
                    (items, window_reviews.len())
                }
                Variant::Positive | Variant::Negative => {
                    let pool = if variant == Variant::Positive { &partition.positive } else { &partition.negative };
                    let items = sample_indices(pool.len(), n, seed)
                        .into_iter()
                        .map(|i| SummaryItem {
                            review_id: pool[i].review_id.clone(),
                            sentence: Some(pool[i].index),
                            text: pool[i].text.clone(),
                        })
                        .collect();
                    (items, pool.len())
                }
            };
            SummaryRequest { event: event.clone(), variant, n_requested: n, n_available, seed, items }
        })
        .collect()
}

/// Contributing events of a set of correlated events, deduplicated and sorted.
pub fn contributing_events(ces: &[CorrelatedEventRecord]) -> Vec<EventRef> {
    let set: BTreeSet<EventRef> =
        ces.iter().flat_map(|ce| [EventRef::from(&ce.e_i), EventRef::from(&ce.e_j)]).collect();
    set.into_iter().collect()
}

/// Prompt template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let name_len = after.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_')).unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            out.push(Piece::Literal(&rest[..open]));
            out.push(Piece::Placeholder(&after[..name_len]));
            rest = &after[name_len + 1..];
        } else {
            out.push(Piece::Literal(&rest[..=open]));
            rest = after;
        }
    }
    out.push(Piece::Literal(rest));
    out
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, SummarizeError> {
        let text = text.into();
        for piece in pieces(&text) {
            if let Piece::Placeholder(name) = piece {
                if !PLACEHOLDERS.contains(&name) {
                    return Err(SummarizeError::UnknownPlaceholder(name.to_owned()));
                }
            }
        }
        Ok(PromptTemplate { text })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SummarizeError> {
        PromptTemplate::new(std::fs::read_to_string(path)?)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

/// Renders a request. Empty samples produce no prompt.
pub fn build_prompt(request: &SummaryRequest, template: &PromptTemplate) -> Result<String, SummarizeError> {
    if request.is_empty() {
        return Err(SummarizeError::EmptySample);
    }
    let ev = &request.event;
    let items: String = request
        .items
        .iter()
        .map(|item| format!("- {}", item.text.split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join("\n");
    let direction = match ev.e {
        1 => "increase",
        -1 => "decrease",
        _ => "no change",
    };
    let value = |name: &str| -> String {
        match name {
            "app" => ev.app_id.clone(),
            "metric" => ev.metric.code().to_owned(),
            "metric_name" => ev.metric.describe().to_owned(),
            "direction" => direction.to_owned(),
            "window_start" => ev.window.start.to_string(),
            "window_end" => ev.window.end().to_string(),
            "variant" => request.variant.item_noun().to_owned(),
            "n_sampled" => request.items.len().to_string(),
            "items" => items.clone(),
            _ => unreachable!("placeholders are validated when the template is built"),
        }
    };
    Ok(pieces(template.text())
        .into_iter()
        .map(|p| match p {
            Piece::Literal(s) => s.to_owned(),
            Piece::Placeholder(name) => value(name),
        })
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Produces a summary for a prompt.
pub trait SummarizerClient: Send + Sync {
    fn name(&self) -> &str;

    fn summarize(&self, prompt: &str) -> Result<String, SummarizerError>;
}

/// Deterministic offline summarizer: the output is a digest of the prompt bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockSummarizer;

impl SummarizerClient for MockSummarizer {
    fn name(&self) -> &str {
        "mock"
    }

    fn summarize(&self, prompt: &str) -> Result<String, SummarizerError> {
        let digest = sha256_hex(prompt.as_bytes());
        let items = prompt.lines().filter(|l| l.starts_with("- ")).count();
        Ok(format!("[mock {}] summary of {items} items", &digest[..16]))
    }
}

/// Runs an external command per prompt: the prompt goes to stdin and the
/// summary is read from stdout. The command runs under `sh -c`.
#[derive(Debug, Clone)]
pub struct CommandSummarizer {
    pub command: String,
    pub timeout: Duration,
}

impl SummarizerClient for CommandSummarizer {
    fn name(&self) -> &str {
        "command"
    }

    fn summarize(&self, prompt: &str) -> Result<String, SummarizerError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = prompt.to_owned();
        let writer = std::thread::spawn(move || stdin.write_all(input.as_bytes()));
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let started = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if started.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(SummarizerError::Timeout(self.timeout));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        // a command that ignores stdin may close the pipe early
        let _ = writer.join();
        let output = reader.join().map_err(|_| SummarizerError::Failed("reader thread panicked".into()))??;
        if !status.success() {
            return Err(SummarizerError::Failed(format!("command exited with {status}")));
        }
        Ok(output.trim_end().to_owned())
    }
}

/// Timeout, retry and concurrency settings for live clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles for each later one.
    pub base_delay: Duration,
    pub max_in_flight: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(500), max_in_flight: 4 }
    }
}

pub fn summarize_with_retry(
    client: &dyn SummarizerClient,
    prompt: &str,
    policy: &RetryPolicy,
) -> Result<String, SummarizerError> {
    let mut attempt = 0;
    loop {
        match client.summarize(prompt) {
            Ok(s) => return Ok(s),
            Err(err) if attempt + 1 >= policy.attempts.max(1) => return Err(err),
            Err(err) => {
                log::warn!("summarizer `{}` attempt {} failed: {err}", client.name(), attempt + 1);
                std::thread::sleep(policy.base_delay * 2u32.pow(attempt));
                attempt += 1;
            }
        }
    }
}

/// A rendered, non-empty request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PreparedPrompt {
    pub event: EventRef,
    pub variant: Variant,
    pub n_requested: usize,
    pub n_available: usize,
    pub n_sampled: usize,
    pub seed: u64,
    pub prompt_sha256: String,
    pub prompt: String,
}

pub fn prepare_prompts(requests: &[SummaryRequest], template: &PromptTemplate) -> Vec<PreparedPrompt> {
    requests
        .iter()
        .filter_map(|req| {
            let prompt = build_prompt(req, template).ok()?;
            Some(PreparedPrompt {
                event: req.event.clone(),
                variant: req.variant,
                n_requested: req.n_requested,
                n_available: req.n_available,
                n_sampled: req.items.len(),
                seed: req.seed,
                prompt_sha256: sha256_hex(prompt.as_bytes()),
                prompt,
            })
        })
        .collect()
}

/// One entry of the summaries report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SummaryRecord {
    pub event: EventRef,
    pub variant: Variant,
    pub n_sampled: usize,
    pub prompt_sha256: String,
    pub summary_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Summarizes prompts with at most `max_in_flight` concurrent calls. Output
/// order follows the input.
pub fn run_summaries(
    prompts: &[PreparedPrompt],
    client: &dyn SummarizerClient,
    policy: &RetryPolicy,
) -> Vec<SummaryRecord> {
    let one = |p: &PreparedPrompt| {
        let result = summarize_with_retry(client, &p.prompt, policy);
        SummaryRecord {
            event: p.event.clone(),
            variant: p.variant,
            n_sampled: p.n_sampled,
            prompt_sha256: p.prompt_sha256.clone(),
            error: result.as_ref().err().map(ToString::to_string),
            summary_text: result.ok(),
        }
    };
    prompts
        .chunks(policy.max_in_flight.max(1))
        .flat_map(|batch| {
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch.iter().map(|p| scope.spawn(move || one(p))).collect();
                handles.into_iter().map(|h| h.join().expect("summarizer thread panicked")).collect::<Vec<_>>()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sentiment::Polarity;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn event() -> EventRef {
        EventRef {
            app_id: "Mastodon".into(),
            metric: MetricKind::Count,
            window: TimeWindow::new("2022-10-27".parse().unwrap(), 7),
            e: 1,
        }
    }

    fn review(i: usize, polarities: &[u8]) -> ScoredReview {
        let id = format!("r{i:03}");
        ScoredReview {
            review_id: id.clone(),
            timestamp: crate::ingest::parse_timestamp(&format!("2022-10-28T{:02}:00:00Z", i % 24)).unwrap(),
            rating: 2,
            body: format!("review number {i}"),
            sentences: polarities
                .iter()
                .enumerate()
                .map(|(index, p)| Sentence {
                    review_id: id.clone(),
                    index,
                    text: format!("sentence {index} of {i} with polarity {p}"),
                    polarity: Polarity::new(*p),
                })
                .collect(),
        }
    }

    #[test]
    fn small_windows_take_everything() {
        let reviews: Vec<ScoredReview> = (0..30).map(|i| review(i, &[2])).collect();
        let sample = sample_reviews(&reviews, 50, 7);
        assert_eq!(sample.len(), 30);
        assert!(sample.iter().zip(&reviews).all(|(a, b)| a.review_id == b.review_id));
        assert!(sample_reviews(&[], 50, 7).is_empty());
    }

    #[test]
    fn sampling_is_seeded_and_sorted() {
        let a = sample_indices(1000, 50, 11);
        assert_eq!(a, sample_indices(1000, 50, 11));
        assert_ne!(a, sample_indices(1000, 50, 12));
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn partition_thresholds() {
        let r = review(0, &[0, 1, 2, 3, 4]);
        let part = partition_by_polarity(&r.sentences);
        let vals = |v: &[&Sentence]| v.iter().map(|s| s.polarity.unwrap().value()).collect::<Vec<_>>();
        assert_eq!(vals(&part.negative), [0, 1]);
        assert_eq!(vals(&part.positive), [3, 4]);
        assert_eq!(vals(&part.neutral), [2]);
        let neutral = review(1, &[2, 2, 2]);
        let part = partition_by_polarity(&neutral.sentences);
        assert!(part.positive.is_empty() && part.negative.is_empty());
    }

    #[test]
    fn three_requests_with_polarity_filters() {
        let reviews: Vec<ScoredReview> = (0..10).map(|i| review(i, &[0, 1, 2, 3, 4])).collect();
        let reqs = build_requests(&event(), &reviews, 50, 3);
        assert_eq!(reqs.iter().map(|r| r.variant).collect::<Vec<_>>(), Variant::ALL);
        assert_eq!(reqs[0].items.len(), 10);
        assert_eq!(reqs[1].items.len(), 20);
        assert!(reqs[1].items.iter().all(|i| i.text.ends_with('3') || i.text.ends_with('4')));
        assert!(reqs[2].items.iter().all(|i| i.text.ends_with('0') || i.text.ends_with('1')));
    }

    #[test]
    fn prompt_substitution() {
        let reviews: Vec<ScoredReview> = (0..3).map(|i| review(i, &[3])).collect();
        let req = &build_requests(&event(), &reviews, 50, 3)[0];
        let template = PromptTemplate::new("Summarize {app}: {n_sampled} {variant}\n{items}").unwrap();
        let prompt = build_prompt(req, &template).unwrap();
        assert_eq!(prompt.matches("Mastodon").count(), 1);
        assert_eq!(prompt, build_prompt(req, &template).unwrap());
        assert!(prompt.starts_with("Summarize Mastodon: 3 reviews\n- review number 0"));
        let twice = PromptTemplate::new("{app} and {app}").unwrap();
        assert_eq!(build_prompt(req, &twice).unwrap(), "Mastodon and Mastodon");
    }

    #[test]
    fn template_errors_and_literal_braces() {
        assert!(matches!(PromptTemplate::new("{bogus}"), Err(SummarizeError::UnknownPlaceholder(_))));
        let t = PromptTemplate::new("json {\"a\": 1} {app}").unwrap();
        let reviews = vec![review(0, &[3])];
        let req = &build_requests(&event(), &reviews, 5, 1)[0];
        assert_eq!(build_prompt(req, &t).unwrap(), "json {\"a\": 1} Mastodon");
        let empty = &build_requests(&event(), &[], 5, 1)[0];
        assert!(matches!(build_prompt(empty, &t), Err(SummarizeError::EmptySample)));
    }

    #[test]
    fn mock_depends_only_on_prompt() {
        let m = MockSummarizer;
        assert_eq!(m.summarize("abc").unwrap(), m.summarize("abc").unwrap());
        assert_ne!(m.summarize("abc").unwrap(), m.summarize("abd").unwrap());
    }

    struct Flaky {
        failures: AtomicUsize,
    }

    impl SummarizerClient for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn summarize(&self, _prompt: &str) -> Result<String, SummarizerError> {
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                Err(SummarizerError::Failed("transient".into()))
            } else {
                Ok("ok".into())
            }
        }
    }

    #[test]
    fn retries_up_to_three_attempts() {
        let policy = RetryPolicy { base_delay: Duration::ZERO, ..RetryPolicy::default() };
        let two = Flaky { failures: AtomicUsize::new(2) };
        assert_eq!(summarize_with_retry(&two, "p", &policy).unwrap(), "ok");
        let three = Flaky { failures: AtomicUsize::new(3) };
        assert!(summarize_with_retry(&three, "p", &policy).is_err());
    }

    #[test]
    fn command_summarizer_round_trip_and_timeout() {
        let echo = CommandSummarizer { command: "tr a-z A-Z".into(), timeout: Duration::from_secs(5) };
        assert_eq!(echo.summarize("hello").unwrap(), "HELLO");
        let slow = CommandSummarizer { command: "sleep 5".into(), timeout: Duration::from_millis(100) };
        assert!(matches!(slow.summarize("x"), Err(SummarizerError::Timeout(_))));
        let failing = CommandSummarizer { command: "exit 3".into(), timeout: Duration::from_secs(5) };
        assert!(matches!(failing.summarize("x"), Err(SummarizerError::Failed(_))));
    }
}
