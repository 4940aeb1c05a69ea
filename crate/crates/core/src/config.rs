//! Run configuration.
//!
//! The config file is flat `key = value` text; `#` starts a comment and values
//! may be double-quoted. Every key is optional and falls back to the defaults
//! below. Validation is total: all violations are collected and reported
//! together.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `w_e` | 7 | event window length (days) |
//! | `w_c` | 1 | correlation window length (days) |
//! | `k` | 2 | event sensitivity factor, `> 0` |
//! | `h` | 0.5 | correlation threshold, in `(0, 1]` |
//! | `t_omega` | 2022-06-09 | baseline start date, or `auto` for the first review day |
//! | `t_end` | auto | end of analysis (exclusive), or `auto` for the day after the last review |
//! | `t_phi_offset` | 14 | correlation lookback, `t_phi = t0 - offset` (days) |
//! | `n` | 50 | reviews/sentences sampled per summary request |
//! | `seed` | 0 | base seed for all randomness |
//! | `min_baseline` | 4 | baseline deltas needed before events fire |
//! | `min_corr_points` | 8 | common points needed for a correlation |
//! | `std_mode` | population | `population` or `sample` standard deviation |
//! | `floor` | 20 | reviews per month below which an app is flagged |
//! | `exclude_insufficient` | true | drop flagged apps from the analysis |
//! | `scale` | 1-5 | default rating scale |
//! | `scale.<source>` | | rating scale of one source |
//! | `format` | jsonl | input format, `jsonl` or `csv` |
//! | `lexicon` | built-in | TSV lexicon path |
//! | `prompt_template` | built-in | prompt template path |
//! | `summarizer` | none | `none`, `mock` or `command` |
//! | `summarizer_command` | | shell command for `summarizer = command` |
//! | `summarizer_timeout_secs` | 60 | per-call timeout |
//! | `summarizer_attempts` | 3 | attempts per prompt |
//! | `max_in_flight` | 4 | concurrent summarizer calls |
//! | `out` | report | output directory |

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use chrono::NaiveDate;
use thiserror::Error;

use crate::correlate::CorrelationConfig;
use crate::detect::{DetectorConfig, StdMode};
use crate::ingest::{InputFormat, RatingScale, RatingScales};

#[derive(Debug, Error, PartialEq, Eq)]
pub struct ConfigError {
    pub errors: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.errors.join("; "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SummarizerKind {
    #[default]
    None,
    Mock,
    Command,
}

impl FromStr for SummarizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SummarizerKind::None),
            "mock" => Ok(SummarizerKind::Mock),
            "command" => Ok(SummarizerKind::Command),
            other => Err(format!("unknown summarizer `{other}` (expected none, mock or command)")),
        }
    }
}

impl fmt::Display for SummarizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SummarizerKind::None => "none",
            SummarizerKind::Mock => "mock",
            SummarizerKind::Command => "command",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketConfig {
    pub w_e: u32,
    pub w_c: u32,
    pub k: f64,
    pub h: f64,
    pub t_omega: Option<NaiveDate>,
    pub t_end: Option<NaiveDate>,
    pub t_phi_offset: u32,
    pub n: usize,
    pub seed: u64,
    pub min_baseline: usize,
    pub min_corr_points: usize,
    pub std_mode: StdMode,
    pub floor: f64,
    pub exclude_insufficient: bool,
    pub scales: RatingScales,
    pub format: InputFormat,
    pub lexicon: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub summarizer: SummarizerKind,
    pub summarizer_command: Option<String>,
    pub summarizer_timeout_secs: u64,
    pub summarizer_attempts: u32,
    pub max_in_flight: usize,
    pub out: PathBuf,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            w_e: 7,
            w_c: 1,
            k: 2.0,
            h: 0.5,
            t_omega: NaiveDate::from_ymd_opt(2022, 6, 9),
            t_end: None,
            t_phi_offset: 14,
            n: 50,
            seed: 0,
            min_baseline: 4,
            min_corr_points: 8,
            std_mode: StdMode::Population,
            floor: 20.0,
            exclude_insufficient: true,
            scales: RatingScales::default(),
            format: InputFormat::Jsonl,
            lexicon: None,
            prompt_template: None,
            summarizer: SummarizerKind::None,
            summarizer_command: None,
            summarizer_timeout_secs: 60,
            summarizer_attempts: 3,
            max_in_flight: 4,
            out: PathBuf::from("report"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str, errors: &mut Vec<String>) -> Option<T> {
    match value.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            errors.push(format!("{key}: cannot parse `{value}`"));
            None
        }
    }
}

fn parse_date_or_auto(key: &str, value: &str, errors: &mut Vec<String>) -> Option<Option<NaiveDate>> {
    if value == "auto" {
        return Some(None);
    }
    parse_value::<NaiveDate>(key, value, errors).map(Some)
}

fn parse_bool(key: &str, value: &str, errors: &mut Vec<String>) -> Option<bool> {
    match value {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => {
            errors.push(format!("{key}: expected true or false, got `{value}`"));
            None
        }
    }
}

fn with_error<T>(key: &str, r: Result<T, String>, errors: &mut Vec<String>) -> Option<T> {
    r.map_err(|e| errors.push(format!("{key}: {e}"))).ok()
}

/// Splits config text into `(line, key, value)` entries.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((key, value)) if !key.trim().is_empty() => {
                pairs.push((key.trim().to_owned(), unquote(value.trim()).to_owned()));
            }
            _ => errors.push(format!("line {}: expected `key = value`", idx + 1)),
        }
    }
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(ConfigError { errors })
    }
}

fn unquote(v: &str) -> &str {
    // trailing comments are only recognised outside quotes
    if let Some(inner) = v.strip_prefix('"') {
        if let Some(end) = inner.find('"') {
            return &inner[..end];
        }
    }
    v.split_once(" #").map_or(v, |(head, _)| head.trim_end())
}

impl MarketConfig {
    /// Loads and validates config text.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        MarketConfig::from_pairs(parse_pairs(text)?)
    }

    /// Applies `(key, value)` pairs over the defaults and validates the result.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut cfg = MarketConfig::default();
        let mut errors = Vec::new();
        for (key, value) in pairs {
            cfg.apply(&key, &value, &mut errors);
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError { errors })
        }
    }

    fn apply(&mut self, key: &str, value: &str, errors: &mut Vec<String>) {
        let e = errors;
        match key {
            "w_e" => self.w_e = parse_value(key, value, e).unwrap_or(self.w_e),
            "w_c" => self.w_c = parse_value(key, value, e).unwrap_or(self.w_c),
            "k" => self.k = parse_value(key, value, e).unwrap_or(self.k),
            "h" => self.h = parse_value(key, value, e).unwrap_or(self.h),
            "t_omega" => self.t_omega = parse_date_or_auto(key, value, e).unwrap_or(self.t_omega),
            "t_end" => self.t_end = parse_date_or_auto(key, value, e).unwrap_or(self.t_end),
            "t_phi_offset" => self.t_phi_offset = parse_value(key, value, e).unwrap_or(self.t_phi_offset),
            "n" => self.n = parse_value(key, value, e).unwrap_or(self.n),
            "seed" => self.seed = parse_value(key, value, e).unwrap_or(self.seed),
            "min_baseline" => self.min_baseline = parse_value(key, value, e).unwrap_or(self.min_baseline),
            "min_corr_points" => {
                self.min_corr_points = parse_value(key, value, e).unwrap_or(self.min_corr_points)
            }
            "std_mode" => self.std_mode = with_error(key, value.parse(), e).unwrap_or(self.std_mode),
            "floor" => self.floor = parse_value(key, value, e).unwrap_or(self.floor),
            "exclude_insufficient" => {
                self.exclude_insufficient = parse_bool(key, value, e).unwrap_or(self.exclude_insufficient)
            }
            "scale" => self.scales.default = with_error(key, value.parse(), e).unwrap_or(self.scales.default),
            "format" => self.format = with_error(key, value.parse(), e).unwrap_or(self.format),
            "lexicon" => self.lexicon = Some(PathBuf::from(value)),
            "prompt_template" => self.prompt_template = Some(PathBuf::from(value)),
            "summarizer" => self.summarizer = with_error(key, value.parse(), e).unwrap_or(self.summarizer),
            "summarizer_command" => self.summarizer_command = Some(value.to_owned()),
            "summarizer_timeout_secs" => {
                self.summarizer_timeout_secs = parse_value(key, value, e).unwrap_or(self.summarizer_timeout_secs)
            }
            "summarizer_attempts" => {
                self.summarizer_attempts = parse_value(key, value, e).unwrap_or(self.summarizer_attempts)
            }
            "max_in_flight" => self.max_in_flight = parse_value(key, value, e).unwrap_or(self.max_in_flight),
            "out" => self.out = PathBuf::from(value),
            _ => match key.strip_prefix("scale.") {
                Some(source) if !source.is_empty() => {
                    if let Some(scale) = with_error::<RatingScale>(key, value.parse(), e) {
                        self.scales.per_source.insert(source.to_owned(), scale);
                    }
                }
                _ => e.push(format!("unknown key `{key}`")),
            },
        }
    }

    /// Bound violations of an assembled config.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.w_e < 1 {
            v.push("w_e must be at least 1 day".to_string());
        }
        if self.w_c < 1 {
            v.push("w_c must be at least 1 day".to_string());
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            v.push("k must be positive".to_string());
        }
        if !(self.h > 0.0 && self.h <= 1.0) {
            v.push("h out of (0,1]".to_string());
        }
        if self.t_phi_offset < 1 {
            v.push("t_phi_offset must be at least 1 day".to_string());
        }
        if self.n < 1 {
            v.push("n must be at least 1".to_string());
        }
        if self.min_baseline < 1 {
            v.push("min_baseline must be at least 1".to_string());
        }
        if self.std_mode == StdMode::Sample && self.min_baseline < 2 {
            v.push("min_baseline must be at least 2 with std_mode = sample".to_string());
        }
        if self.min_corr_points < 3 {
            v.push("min_corr_points must be at least 3".to_string());
        }
        if !(self.floor.is_finite() && self.floor >= 0.0) {
            v.push("floor must be non-negative".to_string());
        }
        if let (Some(start), Some(end)) = (self.t_omega, self.t_end) {
            if start >= end {
                v.push("t_omega must be before t_end".to_string());
            }
        }
        if self.summarizer == SummarizerKind::Command && self.summarizer_command.is_none() {
            v.push("summarizer = command needs summarizer_command".to_string());
        }
        if self.summarizer_attempts < 1 {
            v.push("summarizer_attempts must be at least 1".to_string());
        }
        if self.max_in_flight < 1 {
            v.push("max_in_flight must be at least 1".to_string());
        }
        v
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig { k: self.k, min_baseline: self.min_baseline, std_mode: self.std_mode }
    }

    pub fn correlation(&self) -> CorrelationConfig {
        CorrelationConfig {
            w_c: self.w_c,
            lookback_offset: self.t_phi_offset,
            h: self.h,
            min_points: self.min_corr_points,
        }
    }

    /// Renders the config back into the file format.
    pub fn to_text(&self) -> String {
        let date = |d: Option<NaiveDate>| d.map_or("auto".to_string(), |d| d.to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("w_e", self.w_e.to_string());
        kv("w_c", self.w_c.to_string());
        kv("k", self.k.to_string());
        kv("h", self.h.to_string());
        kv("t_omega", date(self.t_omega));
        kv("t_end", date(self.t_end));
        kv("t_phi_offset", self.t_phi_offset.to_string());
        kv("n", self.n.to_string());
        kv("seed", self.seed.to_string());
        kv("min_baseline", self.min_baseline.to_string());
        kv("min_corr_points", self.min_corr_points.to_string());
        kv("std_mode", self.std_mode.to_string());
        kv("floor", self.floor.to_string());
        kv("exclude_insufficient", self.exclude_insufficient.to_string());
        kv("scale", self.scales.default.to_string());
        for (source, scale) in &self.scales.per_source {
            kv(&format!("scale.{source}"), scale.to_string());
        }
        kv("format", self.format.to_string());
        if let Some(p) = &self.lexicon {
            kv("lexicon", format!("\"{}\"", p.display()));
        }
        if let Some(p) = &self.prompt_template {
            kv("prompt_template", format!("\"{}\"", p.display()));
        }
        kv("summarizer", self.summarizer.to_string());
        if let Some(c) = &self.summarizer_command {
            kv("summarizer_command", format!("\"{c}\""));
        }
        kv("summarizer_timeout_secs", self.summarizer_timeout_secs.to_string());
        kv("summarizer_attempts", self.summarizer_attempts.to_string());
        kv("max_in_flight", self.max_in_flight.to_string());
        kv("out", format!("\"{}\"", self.out.display()));
        s
    }
}

/// Key/value overrides in `key=value` form, e.g. from the command line.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("override `{s}` must look like key=value"))
}

/// All pairs of a config file merged with later overrides.
pub fn merge_pairs(
    base: Vec<(String, String)>,
    overrides: impl IntoIterator<Item = (String, String)>,
) -> Vec<(String, String)> {
    let mut merged: BTreeMap<String, String> = base.into_iter().collect();
    merged.extend(overrides);
    merged.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = MarketConfig::default();
        assert_eq!((c.w_e, c.w_c, c.k, c.h, c.t_phi_offset, c.n), (7, 1, 2.0, 0.5, 14, 50));
        assert_eq!(c.t_omega, NaiveDate::from_ymd_opt(2022, 6, 9));
        assert_eq!(MarketConfig::from_text("").unwrap(), c);
    }

    #[test]
    fn bound_violations() {
        let err = MarketConfig::from_text("h = 1.5").unwrap_err();
        assert_eq!(err.errors, ["h out of (0,1]"]);
        let err = MarketConfig::from_text("k = 0").unwrap_err();
        assert_eq!(err.errors, ["k must be positive"]);
        let err = MarketConfig::from_text("k = -1\nh = 0\nbogus = 3\nw_e = x").unwrap_err();
        assert_eq!(err.errors.len(), 4, "{:?}", err.errors);
    }

    #[test]
    fn parses_every_kind_of_value() {
        let text = "# comment\nw_e = 14\nt_omega = auto\nt_end = \"2023-06-08\"\nscale.imdb = 0-10\n\
                    std_mode = sample\nexclude_insufficient = false\nseed = 7 # trailing\n";
        let c = MarketConfig::from_text(text).unwrap();
        assert_eq!(c.w_e, 14);
        assert_eq!(c.t_omega, None);
        assert_eq!(c.t_end, NaiveDate::from_ymd_opt(2023, 6, 8));
        assert_eq!(c.scales.for_source("imdb"), RatingScale::new(0, 10).unwrap());
        assert_eq!(c.std_mode, StdMode::Sample);
        assert!(!c.exclude_insufficient);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn text_round_trip() {
        let c = MarketConfig::from_text("scale.imdb = 0-10\nsummarizer = mock\nt_end = 2023-01-01").unwrap();
        assert_eq!(MarketConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_win() {
        let merged = merge_pairs(
            parse_pairs("k = 3\nh = 0.7").unwrap(),
            [parse_override("k=2.5").unwrap()],
        );
        let c = MarketConfig::from_pairs(merged).unwrap();
        assert_eq!((c.k, c.h), (2.5, 0.7));
        assert!(parse_override("nokey").is_err());
    }

    #[test]
    fn malformed_lines_are_reported() {
        assert!(MarketConfig::from_text("just words").is_err());
    }
}
