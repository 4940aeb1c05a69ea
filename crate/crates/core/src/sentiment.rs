//! Sentence splitting and sentence-level polarity scoring.
//!
//! Polarity is an integer in `0..=4` (0 extremely negative, 2 neutral,
//! 4 extremely positive). Scoring goes through the [`PolarityScorer`] trait; the
//! built-in [`LexiconScorer`] sums token valences from a small stemmed lexicon
//! and bins the sum.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_LEXICON: &str = include_str!("lexicon.tsv");

/// Suffixes stripped when an inflected token is not in the lexicon, longest first.
const SUFFIXES: [&str; 9] = ["ing", "est", "es", "ed", "ly", "er", "s", "d", "y"];

/// Window, in tokens, within which a negator flips a token's valence.
const NEGATION_SCOPE: usize = 2;

/// Sentence polarity in `0..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Polarity(u8);

impl Polarity {
    pub const MIN: Polarity = Polarity(0);
    pub const NEUTRAL: Polarity = Polarity(2);
    pub const MAX: Polarity = Polarity(4);

    pub fn new(value: u8) -> Option<Self> {
        (value <= 4).then_some(Polarity(value))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_positive(self) -> bool {
        self.0 >= 3
    }

    pub fn is_negative(self) -> bool {
        self.0 <= 1
    }
}

impl TryFrom<u8> for Polarity {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Polarity::new(v).ok_or_else(|| format!("polarity {v} outside 0..=4"))
    }
}

impl From<Polarity> for u8 {
    fn from(p: Polarity) -> u8 {
        p.0
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Maps a summed valence onto the five polarity bins: `<= -2 -> 0`,
/// `-1 -> 1`, `0 -> 2`, `+1 -> 3`, `>= 2 -> 4`.
pub fn bin_valence(sum: i32) -> Polarity {
    Polarity((sum.clamp(-2, 2) + 2) as u8)
}

#[derive(Debug, Error)]
#[error("scorer `{scorer}` failed: {message}")]
pub struct ScoreError {
    pub scorer: String,
    pub message: String,
}

/// A sentence-level polarity scorer. Implementations must be deterministic.
pub trait PolarityScorer: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, text: &str) -> Result<Polarity, ScoreError>;

    /// Whether `score` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
}

/// One sentence of a review with its score, or `None` if the scorer failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub review_id: String,
    pub index: usize,
    pub text: String,
    pub polarity: Option<Polarity>,
}

/// Splits text into sentences at `.`, `!` or `?` followed by whitespace, and at
/// newlines. Fragments are trimmed and empty fragments dropped.
pub fn split_sentences(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = match c {
            '\n' => Some(i),
            '.' | '!' | '?' => match chars.peek() {
                Some((_, next)) if next.is_whitespace() => Some(i + c.len_utf8()),
                _ => None,
            },
            _ => None,
        };
        if let Some(end) = end {
            push_fragment(&mut out, &body[start..end]);
            start = end;
        }
    }
    push_fragment(&mut out, &body[start..]);
    out
}

fn push_fragment(out: &mut Vec<String>, fragment: &str) {
    let trimmed = fragment.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_owned());
    }
}

/// Scores one sentence. A scorer failure is returned to the caller, which marks
/// the sentence unscored.
pub fn score_polarity(sentence: &str, scorer: &dyn PolarityScorer) -> Result<Polarity, ScoreError> {
    scorer.score(sentence)
}

/// Splits a review body and scores each sentence.
pub fn score_review(review_id: &str, body: &str, scorer: &dyn PolarityScorer) -> Vec<Sentence> {
    split_sentences(body)
        .into_iter()
        .enumerate()
        .map(|(index, text)| {
            let polarity = match score_polarity(&text, scorer) {
                Ok(p) => Some(p),
                Err(err) => {
                    log::debug!("review {review_id} sentence {index} unscored: {err}");
                    None
                }
            };
            Sentence { review_id: review_id.to_owned(), index, text, polarity }
        })
        .collect()
}

/// Mean polarity of a review's scored sentences, for display.
pub fn review_polarity(sentences: &[Sentence]) -> Option<f64> {
    let scored: Vec<f64> = sentences.iter().filter_map(|s| s.polarity).map(|p| p.0 as f64).collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot read lexicon: {0}")]
    Io(#[from] std::io::Error),
}

/// Token valence lexicon, loaded from `token<TAB>valence` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, i32>,
}

impl Lexicon {
    pub fn builtin() -> Self {
        Lexicon::from_tsv(BUILTIN_LEXICON).expect("built-in lexicon is well formed")
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        Lexicon::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn from_tsv(text: &str) -> Result<Self, LexiconError> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| LexiconError::Parse { line: line_no, message };
            let (token, valence) =
                line.split_once('\t').ok_or_else(|| err("expected token<TAB>valence".into()))?;
            let valence: i32 =
                valence.trim().parse().map_err(|_| err(format!("bad valence `{valence}`")))?;
            if !(-2..=2).contains(&valence) {
                return Err(err(format!("valence {valence} outside -2..=2")));
            }
            let token = token.trim().to_lowercase();
            if token.is_empty() {
                return Err(err("empty token".into()));
            }
            entries.insert(token, valence);
        }
        Ok(Lexicon { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Valence of a lowercase token, trying light suffix stripping when the
    /// exact form is absent.
    pub fn valence(&self, token: &str) -> Option<i32> {
        if let Some(v) = self.entries.get(token) {
            return Some(*v);
        }
        for suffix in SUFFIXES {
            if let Some(stem) = token.strip_suffix(suffix) {
                if stem.len() < 2 {
                    continue;
                }
                if let Some(v) = self.entries.get(stem) {
                    return Some(*v);
                }
                if let Some(v) = self.entries.get(&format!("{stem}e")) {
                    return Some(*v);
                }
            }
        }
        None
    }

    /// Lexicon entries with exactly this valence, sorted.
    pub fn tokens_with_valence(&self, valence: i32) -> Vec<&str> {
        let mut tokens: Vec<&str> =
            self.entries.iter().filter(|(_, v)| **v == valence).map(|(t, _)| t.as_str()).collect();
        tokens.sort_unstable();
        tokens
    }
}

fn is_negator(token: &str) -> bool {
    matches!(token, "not" | "never" | "no" | "cannot")
        || token.ends_with("n't")
        || NT_CONTRACTIONS.contains(&token)
}

const NT_CONTRACTIONS: [&str; 10] =
    ["dont", "doesnt", "didnt", "isnt", "wasnt", "cant", "wont", "arent", "werent", "shouldnt"];

/// Lowercased word tokens; apostrophes inside words are kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
        .map(|t| t.trim_matches(|c| c == '\'' || c == '\u{2019}').replace('\u{2019}', "'").to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Default scorer: sums token valences and bins the sum. A negator within the
/// two preceding tokens flips a token's valence.
#[derive(Debug, Clone)]
pub struct LexiconScorer {
    lexicon: Lexicon,
}

impl LexiconScorer {
    pub fn new(lexicon: Lexicon) -> Self {
        LexiconScorer { lexicon }
    }

    pub fn builtin() -> Self {
        LexiconScorer::new(Lexicon::builtin())
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn valence_sum(&self, text: &str) -> i32 {
        let tokens = tokenize(text);
        tokens
            .iter()
            .enumerate()
            .filter_map(|(i, tok)| {
                let v = self.lexicon.valence(tok)?;
                let negated = tokens[i.saturating_sub(NEGATION_SCOPE)..i].iter().any(|t| is_negator(t));
                Some(if negated { -v } else { v })
            })
            .sum()
    }
}

impl PolarityScorer for LexiconScorer {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn score(&self, text: &str) -> Result<Polarity, ScoreError> {
        Ok(bin_valence(self.valence_sum(text)))
    }
}
