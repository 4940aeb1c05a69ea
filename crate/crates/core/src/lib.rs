//! Event and correlated-event detection over app-store review metrics.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`ingest`]: parse JSONL/CSV review dumps into a per-app catalog.
//! 2. [`sentiment`]: split review bodies into sentences and score polarity.
//! 3. [`metrics`]: window the timeline and compute count, rating and polarity
//!    averages and their deltas.
//! 4. [`detect`]: flag windows whose delta leaves `±k·σ` of an expanding baseline.
//! 5. [`correlate`]: rolling pairwise correlation, correlation runs, and their
//!    intersection with events.
//! 6. [`summarize`]: sample reviews of correlated events and build prompts.
//!
//! [`pipeline`] wires the stages together from a [`config::MarketConfig`] and
//! [`report`] reads and writes the report bundle. [`synth`] generates labelled
//! synthetic markets for testing.

pub mod config;
pub mod correlate;
pub mod detect;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sentiment;
pub mod summarize;
pub mod synth;

use sha2::{Digest, Sha256};

/// Derives a named sub-seed from a base seed, so every random stream is
/// reproducible on its own and independent of execution order.
pub fn sub_seed(base: u64, name: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
