//! Synthetic review markets with scripted disruptions.
//!
//! A [`Scenario`] describes a set of apps (review rate, rating distribution,
//! sentence polarity mix) over a number of windows, plus injections that
//! perturb chosen windows. [`generate`] turns it into reviews in the canonical
//! format and ground-truth labels. Review bodies are assembled from lexicon
//! tokens so that the built-in scorer recovers each sentence's intended
//! polarity exactly.

use std::collections::BTreeSet;

use chrono::{Duration, NaiveDate};
use rand::distr::{Distribution, Uniform};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AppId, Review};
use crate::metrics::{day_start, MetricKind};
use crate::sentiment::Lexicon;
use crate::sub_seed;

/// Words that carry no valence and are not negators.
pub const FILLER_WORDS: [&str; 20] = [
    "the", "app", "update", "today", "feed", "timeline", "this", "version", "post", "account",
    "people", "phone", "screen", "profile", "with", "and", "it", "my", "on", "new",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountModel {
    /// Poisson-distributed count per window, days drawn uniformly.
    #[default]
    Poisson,
    /// Exactly `rate` reviews per window, spread round-robin over its days.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppProfile {
    pub app_id: AppId,
    /// Mean reviews per window.
    pub rate: f64,
    #[serde(default)]
    pub count_model: CountModel,
    /// Weights of star ratings 1..=5.
    pub rating_weights: [f64; 5],
    /// Weights of sentence polarity bins 0..=4.
    pub polarity_weights: [f64; 5],
    #[serde(default = "default_max_sentences")]
    pub max_sentences: usize,
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_max_sentences() -> usize {
    3
}

fn default_source() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    /// Multiply the window's review rate by `magnitude`. The injected apps
    /// share one random day profile, so their daily counts move together.
    CountSpike,
    /// Lower every rating by `magnitude` stars (floored at 1).
    RatingDrop,
    /// Raise every sentence's polarity bin by `magnitude` (capped at 4).
    PolarityShift,
}

impl InjectionKind {
    pub fn metric(self) -> MetricKind {
        match self {
            InjectionKind::CountSpike => MetricKind::Count,
            InjectionKind::RatingDrop => MetricKind::Rating,
            InjectionKind::PolarityShift => MetricKind::Polarity,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            InjectionKind::CountSpike | InjectionKind::PolarityShift => 1,
            InjectionKind::RatingDrop => -1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub apps: Vec<AppId>,
    pub window: usize,
    pub kind: InjectionKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub start: NaiveDate,
    pub windows: usize,
    #[serde(default = "default_window_days")]
    pub window_days: u32,
    pub seed: u64,
    pub apps: Vec<AppProfile>,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

fn default_window_days() -> u32 {
    7
}

/// Expected sign of one injected metric change.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub app_id: AppId,
    pub metric: MetricKind,
    pub window_index: usize,
    pub t0: NaiveDate,
    pub sign: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub reviews: Vec<Review>,
    pub labels: Vec<Label>,
}

fn app_ids(n: usize) -> Vec<AppId> {
    (1..=n).map(|i| format!("app-{i:02}")).collect()
}

impl Scenario {
    /// Ten apps, 52 weekly windows from 2022-06-09, about 40 reviews per window,
    /// with a ×5 count spike in week 30 for `app-01` and `app-02`.
    pub fn desk_scale(seed: u64) -> Self {
        let mut s = Scenario::null_market(seed, 10, 40.0);
        s.injections.push(Injection {
            apps: vec!["app-01".into(), "app-02".into()],
            window: 30,
            kind: InjectionKind::CountSpike,
            magnitude: 5.0,
        });
        s
    }

    /// Noisy market without injections.
    pub fn null_market(seed: u64, apps: usize, rate: f64) -> Self {
        Scenario {
            start: NaiveDate::from_ymd_opt(2022, 6, 9).expect("valid date"),
            windows: 52,
            window_days: 7,
            seed,
            apps: app_ids(apps)
                .into_iter()
                .map(|app_id| AppProfile {
                    app_id,
                    rate,
                    count_model: CountModel::Poisson,
                    rating_weights: [0.2, 0.1, 0.15, 0.2, 0.35],
                    polarity_weights: [0.1, 0.2, 0.3, 0.25, 0.15],
                    max_sentences: 3,
                    source: default_source(),
                })
                .collect(),
            injections: Vec::new(),
        }
    }

    /// Constant market: fixed counts, one rating value, one polarity bin.
    pub fn flat(seed: u64) -> Self {
        let mut s = Scenario::null_market(seed, 10, 40.0);
        for app in &mut s.apps {
            app.count_model = CountModel::Fixed;
            app.rating_weights = [0.0, 0.0, 0.0, 1.0, 0.0];
            app.polarity_weights = [0.0, 0.0, 0.0, 1.0, 0.0];
        }
        s
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.windows as i64 * self.window_days as i64)
    }

    pub fn from_json(text: &str) -> Result<Self, SynthError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let mut errors = Vec::new();
        if self.window_days == 0 {
            errors.push("window_days must be at least 1".to_string());
        }
        let mut ids = BTreeSet::new();
        for app in &self.apps {
            if !ids.insert(app.app_id.as_str()) {
                errors.push(format!("duplicate app `{}`", app.app_id));
            }
            if !(app.rate.is_finite() && app.rate >= 0.0) {
                errors.push(format!("app `{}`: rate must be non-negative", app.app_id));
            }
            for (name, w) in [("rating_weights", &app.rating_weights), ("polarity_weights", &app.polarity_weights)] {
                if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    errors.push(format!("app `{}`: {name} must be non-negative with a positive sum", app.app_id));
                }
            }
            if app.max_sentences == 0 {
                errors.push(format!("app `{}`: max_sentences must be at least 1", app.app_id));
            }
        }
        for (i, inj) in self.injections.iter().enumerate() {
            if inj.apps.is_empty() {
                errors.push(format!("injection {i}: no apps"));
            }
            for app in &inj.apps {
                if !ids.contains(app.as_str()) {
                    errors.push(format!("injection {i}: unknown app `{app}`"));
                }
            }
            if inj.window >= self.windows {
                errors.push(format!("injection {i}: window {} outside 0..{}", inj.window, self.windows));
            }
            if !(inj.magnitude.is_finite() && inj.magnitude > 0.0) {
                errors.push(format!("injection {i}: magnitude must be positive"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Invalid(errors))
        }
    }

    /// Ground-truth labels, one per injected `(app, metric, window)`.
    pub fn labels(&self) -> Vec<Label> {
        let mut labels: Vec<Label> = self
            .injections
            .iter()
            .flat_map(|inj| {
                inj.apps.iter().map(move |app| Label {
                    app_id: app.clone(),
                    metric: inj.kind.metric(),
                    window_index: inj.window,
                    t0: self.start + Duration::days(inj.window as i64 * self.window_days as i64),
                    sign: inj.kind.sign(),
                })
            })
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

/// Lexicon tokens grouped by valence `-2..=2`.
struct Vocabulary(Vec<Vec<String>>);

impl Vocabulary {
    fn new(lexicon: &Lexicon) -> Self {
        Vocabulary((-2..=2).map(|v| lexicon.tokens_with_valence(v).into_iter().map(str::to_owned).collect()).collect())
    }

    fn with_valence(&self, v: i32) -> &[String] {
        &self.0[(v + 2) as usize]
    }
}

/// Builds one sentence whose lexicon valence sum is `bin - 2`.
fn sentence_for_bin<R: Rng>(bin: u8, vocab: &Vocabulary, rng: &mut R) -> String {
    let pick = |v: i32, rng: &mut R| -> String {
        vocab.with_valence(v).choose(rng).expect("lexicon covers every valence").clone()
    };
    let target = bin as i32 - 2;
    let mut words: Vec<String> = match target {
        2 | -2 if rng.random_bool(0.5) => vec![pick(target, rng)],
        2 | -2 => vec![pick(target / 2, rng), pick(target / 2, rng)],
        1 | -1 => vec![pick(target, rng)],
        _ if rng.random_bool(0.3) => vec![pick(1, rng), pick(-1, rng)],
        _ => Vec::new(),
    };
    let fillers = rng.random_range(2..=5);
    for _ in 0..fillers {
        let at = rng.random_range(0..=words.len());
        words.insert(at, FILLER_WORDS.choose(rng).expect("non-empty").to_string());
    }
    let mut sentence = words.join(" ");
    if let Some(first) = sentence.get(..1) {
        sentence.replace_range(..1, &first.to_uppercase());
    }
    sentence.push(if rng.random_bool(0.8) { '.' } else { '!' });
    sentence
}

/// Generates the scenario's reviews (sorted by app, then time) and labels.
pub fn generate(scenario: &Scenario) -> Result<SynthOutput, SynthError> {
    scenario.validate()?;
    let vocab = Vocabulary::new(&Lexicon::builtin());
    let days = scenario.window_days as usize;

    // One shared day profile per count-spike injection.
    let profiles: Vec<Option<WeightedIndex<f64>>> = scenario
        .injections
        .iter()
        .enumerate()
        .map(|(i, inj)| {
            (inj.kind == InjectionKind::CountSpike).then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(scenario.seed, &format!("injection/{i}")));
                let weights: Vec<f64> = (0..days).map(|_| rng.random_range(0.2..1.8)).collect();
                WeightedIndex::new(weights).expect("positive weights")
            })
        })
        .collect();

    let seconds = Uniform::new(0i64, 86_400).expect("valid range");
    let mut reviews = Vec::new();
    for app in &scenario.apps {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(scenario.seed, &format!("app/{}", app.app_id)));
        let ratings = WeightedIndex::new(app.rating_weights).expect("validated weights");
        let bins = WeightedIndex::new(app.polarity_weights).expect("validated weights");
        for w in 0..scenario.windows {
            let window_start = scenario.start + Duration::days((w * days) as i64);
            let active: Vec<(usize, &Injection)> = scenario
                .injections
                .iter()
                .enumerate()
                .filter(|(_, inj)| inj.window == w && inj.apps.contains(&app.app_id))
                .collect();
            let mut rate = app.rate;
            let mut rating_drop = 0i64;
            let mut polarity_shift = 0u8;
            let mut profile = None;
            for (i, inj) in &active {
                match inj.kind {
                    InjectionKind::CountSpike => {
                        rate *= inj.magnitude;
                        profile = profiles[*i].as_ref();
                    }
                    InjectionKind::RatingDrop => rating_drop += inj.magnitude.round() as i64,
                    InjectionKind::PolarityShift => {
                        polarity_shift = polarity_shift.saturating_add(inj.magnitude.round().min(4.0) as u8)
                    }
                }
            }
            let count = match app.count_model {
                CountModel::Fixed => rate.round() as usize,
                CountModel::Poisson if rate > 0.0 => {
                    Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
                }
                CountModel::Poisson => 0,
            };
            for m in 0..count {
                let day = match (app.count_model, profile) {
                    (CountModel::Fixed, _) => m % days,
                    (_, Some(p)) => p.sample(&mut rng),
                    _ => rng.random_range(0..days),
                };
                let timestamp = day_start(window_start + Duration::days(day as i64))
                    + Duration::seconds(seconds.sample(&mut rng));
                let stars = (ratings.sample(&mut rng) as i64 + 1 - rating_drop).max(1);
                let n_sentences = rng.random_range(1..=app.max_sentences);
                let body = (0..n_sentences)
                    .map(|_| {
                        let bin = (bins.sample(&mut rng) as u8 + polarity_shift).min(4);
                        sentence_for_bin(bin, &vocab, &mut rng)
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                reviews.push(Review {
                    review_id: format!("{}-{w:03}-{m:05}", app.app_id),
                    app_id: app.app_id.clone(),
                    timestamp,
                    raw_rating: stars,
                    body,
                    source: app.source.clone(),
                });
            }
        }
    }
    reviews.sort_by(|a, b| {
        (&a.app_id, a.timestamp, &a.review_id).cmp(&(&b.app_id, b.timestamp, &b.review_id))
    });
    Ok(SynthOutput { reviews, labels: scenario.labels() })
}
