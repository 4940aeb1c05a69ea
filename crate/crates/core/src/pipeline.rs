//! End-to-end analysis: catalog, scoring, metrics, events, correlations,
//! correlated events and summary requests, plus writing the report bundle.
//!
//! Every stage is a plain function over the previous stage's output, so the
//! CLI can stop early or restart from saved reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{Days, NaiveDate};
use thiserror::Error;

use crate::config::{ConfigError, MarketConfig, SummarizerKind};
use crate::correlate::{
    correlation_series, detect_correlated_events, extract_runs, AppPair, CorrelatedEventRecord,
    CorrelationConfig, CorrelationRecord, CorrelationRun,
};
use crate::detect::{detect_series, DetectorConfig, EventRecord};
use crate::ingest::{
    build_catalog, parse_reviews, write_rejects_jsonl, AppId, InputFormat, MarketCatalog, ParseOutcome,
    RatingScales, Reject,
};
use crate::metrics::{metric_series, reviews_in, score_reviews, MetricKind, ScoredReview, TimeWindow, WindowStat};
use crate::report::{self, ReportError};
use crate::sentiment::{Lexicon, LexiconError, LexiconScorer, PolarityScorer};
use crate::summarize::{
    build_requests, contributing_events, prepare_prompts, run_summaries, CommandSummarizer, MockSummarizer,
    PreparedPrompt, PromptTemplate, RetryPolicy, SummarizeError, SummarizerClient, SummaryRecord,
    SummaryRequest,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// The dataset cannot be processed at all (unreadable or not UTF-8).
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Template(#[from] SummarizeError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

/// Input format of one file: an explicit choice wins, then a `.csv`
/// extension, then the configured default.
pub fn input_format(path: &Path, explicit: Option<InputFormat>, default: InputFormat) -> InputFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
        _ => default,
    })
}

/// Parses every input file. Record-level problems become rejects; a file that
/// cannot be read is fatal.
pub fn load_inputs(
    paths: &[PathBuf],
    explicit: Option<InputFormat>,
    default: InputFormat,
    scales: &RatingScales,
) -> Result<ParseOutcome, PipelineError> {
    let mut outcome = ParseOutcome::default();
    for path in paths {
        let dataset_err = |message: String| PipelineError::Dataset { path: path.display().to_string(), message };
        let file = fs::File::open(path).map_err(|e| dataset_err(e.to_string()))?;
        let format = input_format(path, explicit, default);
        let parsed = parse_reviews(file, format, scales).map_err(|e| dataset_err(e.to_string()))?;
        if !parsed.rejects.is_empty() {
            log::warn!("{}: {} records rejected", path.display(), parsed.rejects.len());
        }
        outcome.extend(parsed);
    }
    Ok(outcome)
}

pub fn scorer_for(config: &MarketConfig) -> Result<LexiconScorer, PipelineError> {
    Ok(match &config.lexicon {
        Some(path) => LexiconScorer::new(Lexicon::load(path)?),
        None => LexiconScorer::builtin(),
    })
}

pub fn template_for(config: &MarketConfig) -> Result<PromptTemplate, PipelineError> {
    Ok(match &config.prompt_template {
        Some(path) => PromptTemplate::load(path)?,
        None => PromptTemplate::default(),
    })
}

pub fn summarizer_for(config: &MarketConfig) -> Option<Box<dyn SummarizerClient>> {
    match config.summarizer {
        SummarizerKind::None => None,
        SummarizerKind::Mock => Some(Box::new(MockSummarizer)),
        SummarizerKind::Command => Some(Box::new(CommandSummarizer {
            command: config.summarizer_command.clone().unwrap_or_default(),
            timeout: Duration::from_secs(config.summarizer_timeout_secs),
        })),
    }
}

pub fn retry_policy(config: &MarketConfig) -> RetryPolicy {
    RetryPolicy { attempts: config.summarizer_attempts, max_in_flight: config.max_in_flight, ..RetryPolicy::default() }
}

/// The market catalog, with insufficient apps dropped when configured.
pub fn catalog_for(reviews: Vec<crate::ingest::Review>, config: &MarketConfig) -> MarketCatalog {
    let catalog = build_catalog(reviews, config.floor);
    for app in catalog.insufficient_apps() {
        log::warn!("app {app} has insufficient data (mean monthly reviews below {})", config.floor);
    }
    if config.exclude_insufficient {
        catalog.without_insufficient()
    } else {
        catalog
    }
}

/// Analysis span `[start, end)` in whole days, or `None` when it is empty.
///
/// `start` is `t_omega`, or the first review day when that is `auto`. `end`
/// is `t_end`, or the day after the last review.
pub fn analysis_span(config: &MarketConfig, catalog: &MarketCatalog) -> Option<(NaiveDate, NaiveDate)> {
    let start = config.t_omega.or_else(|| catalog.first_timestamp().map(|t| t.date_naive()))?;
    let end = config
        .t_end
        .or_else(|| catalog.last_timestamp().map(|t| t.date_naive() + Days::new(1)))?;
    (start < end).then_some((start, end))
}

pub fn score_catalog(
    catalog: &MarketCatalog,
    scales: &RatingScales,
    scorer: &dyn PolarityScorer,
) -> BTreeMap<AppId, Vec<ScoredReview>> {
    catalog.reviews.iter().map(|(app, reviews)| (app.clone(), score_reviews(reviews, scales, scorer))).collect()
}

/// Metric series for every app and metric, ordered by app, metric, window.
pub fn market_metrics(scored: &BTreeMap<AppId, Vec<ScoredReview>>, windows: &[TimeWindow]) -> Vec<WindowStat> {
    scored
        .iter()
        .flat_map(|(app, reviews)| {
            MetricKind::ALL.into_iter().flat_map(move |m| metric_series(app, reviews, m, windows))
        })
        .collect()
}

/// Groups a flat list into consecutive runs sharing a key.
fn chunk_by_key<T, K: PartialEq>(items: &[T], key: impl Fn(&T) -> K) -> Vec<&[T]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=items.len() {
        if i == items.len() || key(&items[i]) != key(&items[start]) {
            if i > start {
                out.push(&items[start..i]);
            }
            start = i;
        }
    }
    out
}

/// Runs the detector over every `(app, metric)` series of `market_metrics`.
pub fn market_events(stats: &[WindowStat], t_omega: NaiveDate, config: &DetectorConfig) -> Vec<EventRecord> {
    chunk_by_key(stats, |s| (s.app_id.clone(), s.metric))
        .into_iter()
        .flat_map(|series| detect_series(series, t_omega, config))
        .collect()
}

/// Rolling correlations for every app pair and metric over the `w_c` grid,
/// from the per-window means in `stats`.
pub fn market_correlations(
    stats: &[WindowStat],
    windows: &[TimeWindow],
    config: &CorrelationConfig,
) -> Vec<CorrelationRecord> {
    let mut series: BTreeMap<(AppId, MetricKind), Vec<Option<f64>>> = BTreeMap::new();
    for chunk in chunk_by_key(stats, |s| (s.app_id.clone(), s.metric)) {
        debug_assert_eq!(chunk.len(), windows.len());
        series.insert((chunk[0].app_id.clone(), chunk[0].metric), chunk.iter().map(|s| s.mu).collect());
    }
    let mut apps: Vec<&AppId> = series.keys().map(|(a, _)| a).collect();
    apps.dedup();
    let pairs = AppPair::all(apps);
    let jobs: Vec<(&AppPair, MetricKind)> =
        pairs.iter().flat_map(|p| MetricKind::ALL.into_iter().map(move |m| (p, m))).collect();
    let one = |(pair, metric): (&AppPair, MetricKind)| {
        let xs = &series[&(pair.app_i.clone(), metric)];
        let ys = &series[&(pair.app_j.clone(), metric)];
        correlation_series(pair, metric, windows, xs, ys, config)
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    if threads < 2 || jobs.len() < 64 {
        return jobs.into_iter().flat_map(one).collect();
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().flat_map(|&j| one(j)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("correlation thread panicked")).collect()
    })
}

/// Correlation runs and correlated events from event and correlation tables.
/// Only the tables are needed, so saved reports can be reprocessed.
pub fn market_correlated_events(
    events: &[EventRecord],
    correlations: &[CorrelationRecord],
    w_e: u32,
) -> (Vec<CorrelationRun>, Vec<CorrelatedEventRecord>) {
    let mut by_series: BTreeMap<(AppId, MetricKind), Vec<EventRecord>> = BTreeMap::new();
    for e in events {
        by_series.entry((e.app_id.clone(), e.metric)).or_default().push(e.clone());
    }
    let mut by_pair: BTreeMap<(AppId, AppId, MetricKind), Vec<CorrelationRecord>> = BTreeMap::new();
    for r in correlations {
        by_pair.entry((r.app_i.clone(), r.app_j.clone(), r.metric)).or_default().push(r.clone());
    }
    let empty = Vec::new();
    let mut all_runs = Vec::new();
    let mut ces = Vec::new();
    for ((app_i, app_j, metric), mut records) in by_pair {
        records.sort_by_key(|r| r.window.start);
        let runs = extract_runs(&records, w_e);
        let ev_i = by_series.get(&(app_i, metric)).unwrap_or(&empty);
        let ev_j = by_series.get(&(app_j, metric)).unwrap_or(&empty);
        ces.extend(detect_correlated_events(ev_i, ev_j, &runs));
        all_runs.extend(runs);
    }
    (all_runs, ces)
}

/// Summary requests for every contributing event, in event order.
pub fn market_summary_requests(
    ces: &[CorrelatedEventRecord],
    scored: &BTreeMap<AppId, Vec<ScoredReview>>,
    n: usize,
    seed: u64,
) -> Vec<SummaryRequest> {
    contributing_events(ces)
        .iter()
        .flat_map(|event| {
            let reviews = scored.get(&event.app_id).map_or(&[][..], |r| reviews_in(r, &event.window));
            build_requests(event, reviews, n, seed)
        })
        .collect()
}

/// Everything one analysis run produces.
#[derive(Debug)]
pub struct ReportBundle {
    pub config: MarketConfig,
    pub rejects: Vec<Reject>,
    pub catalog: MarketCatalog,
    pub span: Option<(NaiveDate, NaiveDate)>,
    pub metrics: Vec<WindowStat>,
    pub daily_metrics: Vec<WindowStat>,
    pub events: Vec<EventRecord>,
    pub correlations: Vec<CorrelationRecord>,
    pub runs: Vec<CorrelationRun>,
    pub correlated_events: Vec<CorrelatedEventRecord>,
    pub summary_requests: Vec<SummaryRequest>,
    pub prompts: Vec<PreparedPrompt>,
    pub summaries: Vec<SummaryRecord>,
}

impl ReportBundle {
    pub fn event_count(&self) -> usize {
        self.events.iter().filter(|e| e.is_event()).count()
    }

    pub fn correlation_count(&self) -> usize {
        self.correlations.iter().filter(|c| c.c != 0).count()
    }
}

/// Runs every stage. Summaries are produced only when `client` is given.
pub fn run_pipeline(
    config: &MarketConfig,
    parsed: ParseOutcome,
    scorer: &dyn PolarityScorer,
    template: &PromptTemplate,
    client: Option<&dyn SummarizerClient>,
) -> ReportBundle {
    let catalog = catalog_for(parsed.reviews, config);
    let span = analysis_span(config, &catalog);
    let scored = score_catalog(&catalog, &config.scales, scorer);
    let (weekly, daily) = match span {
        Some((start, end)) => (
            crate::metrics::window_series(start, end, config.w_e),
            crate::metrics::window_series(start, end, config.w_c),
        ),
        None => (Vec::new(), Vec::new()),
    };
    let metrics = market_metrics(&scored, &weekly);
    let daily_metrics = market_metrics(&scored, &daily);
    let t_omega = span.map_or(NaiveDate::MIN, |(start, _)| start);
    let events = market_events(&metrics, t_omega, &config.detector());
    let correlations = market_correlations(&daily_metrics, &daily, &config.correlation());
    let (runs, correlated_events) = market_correlated_events(&events, &correlations, config.w_e);
    let summary_requests = market_summary_requests(&correlated_events, &scored, config.n, config.seed);
    let prompts = prepare_prompts(&summary_requests, template);
    let summaries = client.map_or_else(Vec::new, |c| run_summaries(&prompts, c, &retry_policy(config)));
    log::info!(
        "{} apps, {} weekly windows: {} events, {} correlations, {} correlated events",
        catalog.reviews.len(),
        weekly.len(),
        events.iter().filter(|e| e.is_event()).count(),
        correlations.iter().filter(|c| c.c != 0).count(),
        correlated_events.len()
    );
    ReportBundle {
        config: config.clone(),
        rejects: parsed.rejects,
        catalog,
        span,
        metrics,
        daily_metrics,
        events,
        correlations,
        runs,
        correlated_events,
        summary_requests,
        prompts,
        summaries,
    }
}

fn create_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.display().to_string(), source })
}

/// Writes the full bundle into `dir`, creating it if needed.
pub fn write_bundle(bundle: &ReportBundle, dir: &Path) -> Result<(), ReportError> {
    create_dir(dir)?;
    report::write_file(dir, report::CONFIG_FILE, |w| {
        std::io::Write::write_all(w, bundle.config.to_text().as_bytes())
            .map_err(|source| ReportError::Io { path: report::CONFIG_FILE.into(), source })
    })?;
    report::write_file(dir, report::REJECTS_FILE, |w| Ok(write_rejects_jsonl(&bundle.rejects, w)?))?;
    report::write_file(dir, report::CATALOG_FILE, |w| report::write_json(&bundle.catalog, w))?;
    report::write_file(dir, report::METRICS_FILE, |w| report::write_metrics_csv(&bundle.metrics, w))?;
    report::write_file(dir, report::DAILY_METRICS_FILE, |w| report::write_metrics_csv(&bundle.daily_metrics, w))?;
    report::write_file(dir, report::EVENTS_FILE, |w| report::write_events_csv(&bundle.events, w))?;
    report::write_file(dir, report::CORRELATIONS_FILE, |w| report::write_correlations_csv(&bundle.correlations, w))?;
    report::write_file(dir, report::RUNS_FILE, |w| report::write_json(&bundle.runs, w))?;
    report::write_file(dir, report::CORRELATED_EVENTS_FILE, |w| report::write_json(&bundle.correlated_events, w))?;
    report::write_file(dir, report::SUMMARY_REQUESTS_FILE, |w| report::write_json(&bundle.prompts, w))?;
    report::write_file(dir, report::SUMMARIES_FILE, |w| report::write_json(&bundle.summaries, w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Scenario};

    fn config_for(scenario: &Scenario) -> MarketConfig {
        MarketConfig { t_omega: Some(scenario.start), t_end: Some(scenario.end()), ..MarketConfig::default() }
    }

    fn run(scenario: &Scenario) -> ReportBundle {
        let out = generate(scenario).unwrap();
        let parsed = ParseOutcome { reviews: out.reviews, rejects: Vec::new() };
        run_pipeline(&config_for(scenario), parsed, &LexiconScorer::builtin(), &PromptTemplate::default(), None)
    }

    #[test]
    fn empty_input_gives_empty_tables() {
        let cfg = MarketConfig { t_omega: None, ..MarketConfig::default() };
        let b = run_pipeline(&cfg, ParseOutcome::default(), &LexiconScorer::builtin(), &PromptTemplate::default(), None);
        assert!(b.span.is_none());
        assert!(b.metrics.is_empty() && b.events.is_empty() && b.correlations.is_empty());
    }

    #[test]
    fn injected_spike_is_found() {
        let scenario = Scenario::desk_scale(3);
        let b = run(&scenario);
        assert_eq!(b.metrics.len(), 10 * 3 * scenario.windows);
        let spike_start = scenario.start + Days::new(7 * 30);
        for app in ["app-01", "app-02"] {
            assert!(
                b.events.iter().any(|e| e.app_id == app && e.metric == MetricKind::Count
                    && e.window.start == spike_start && e.e == 1),
                "{app}"
            );
        }
        assert!(b.correlated_events.iter().any(|ce| ce.app_i == "app-01" && ce.app_j == "app-02"
            && ce.metric == MetricKind::Count && ce.window.start == spike_start));
    }

    #[test]
    fn correlated_events_can_be_rebuilt_from_tables() {
        let b = run(&Scenario::desk_scale(5));
        let (runs, ces) = market_correlated_events(&b.events, &b.correlations, b.config.w_e);
        assert_eq!(runs, b.runs);
        assert_eq!(ces, b.correlated_events);
    }

    #[test]
    fn chunking_groups_consecutive_keys() {
        let items = [1, 1, 2, 2, 2, 3];
        let chunks = chunk_by_key(&items, |x| *x);
        assert_eq!(chunks, vec![&[1, 1][..], &[2, 2, 2][..], &[3][..]]);
        assert!(chunk_by_key(&[] as &[i32], |x| *x).is_empty());
    }
}
