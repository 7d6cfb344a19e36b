//! Reference retention policies used to benchmark the deviation selector.
//!
//! Each baseline answers the same question (which positions does a layer
//! keep, given a budget and a protected set) with a deliberately simple
//! rule: keep the newest, keep a seeded random subset, or keep the rows
//! with the largest norms.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::outlier::{select_top, SelectionResult};
use crate::tensor::LayerKv;

/// Retention policy identifier carried by plans and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyId {
    /// Deviation-from-base selection; the engine's own policy.
    Flashcache,
    /// Keep attention sinks plus the most recent positions.
    RecencySink,
    /// Keep a uniformly random subset, reproducible from a seed.
    RandomSeeded,
    /// Keep the positions with the largest mean K/V row norms.
    ValueNorm,
}

impl PolicyId {
    pub const ALL: [PolicyId; 4] = [
        PolicyId::Flashcache,
        PolicyId::RecencySink,
        PolicyId::RandomSeeded,
        PolicyId::ValueNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::Flashcache => "flashcache",
            PolicyId::RecencySink => "recency_sink",
            PolicyId::RandomSeeded => "random_seeded",
            PolicyId::ValueNorm => "value_norm",
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyId::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown policy {s:?}; expected one of flashcache, recency_sink, \
                     random_seeded, value_norm"
                ))
            })
    }
}

/// Runs one baseline policy on a layer.
///
/// `sink_count` is the number of leading positions the recency policy pins
/// in addition to its recent window; the other policies ignore it. The
/// `flashcache` policy is not a baseline and is rejected here; it needs the
/// base cache and runs through the compression pipeline instead.
pub fn select_baseline(
    policy: PolicyId,
    layer: &LayerKv,
    budget: usize,
    protected: &BTreeSet<usize>,
    seed: u64,
    sink_count: usize,
) -> Result<SelectionResult> {
    let n = layer.keys.seq();
    match policy {
        PolicyId::Flashcache => Err(Error::InvalidConfig(
            "flashcache is the engine policy, not a baseline; run it through compression"
                .to_string(),
        )),
        PolicyId::RecencySink => recency_sink(n, budget, protected, sink_count),
        PolicyId::RandomSeeded => {
            let scores = random_scores(n, seed, layer.layer_index);
            select_top(&scores, budget, protected)
        }
        PolicyId::ValueNorm => {
            let scores = value_norm_scores(layer);
            select_top(&scores, budget, protected)
        }
    }
}

/// Keeps `sink_count` leading positions, then fills the rest of the budget
/// from the newest position backwards.
fn recency_sink(
    n: usize,
    budget: usize,
    protected: &BTreeSet<usize>,
    sink_count: usize,
) -> Result<SelectionResult> {
    if n == 0 {
        return Err(Error::Empty("selection scores"));
    }
    // Express the rule as scores so the feasibility checks, protected-set
    // handling, and tie-breaking stay identical across policies: sinks
    // outrank everything, then newer outranks older.
    let mut scores = vec![0.0f64; n];
    for (p, s) in scores.iter_mut().enumerate() {
        *s = if p < sink_count {
            2.0 * n as f64 - p as f64
        } else {
            p as f64
        };
    }
    select_top(&scores, budget, protected)
}

/// Uniform scores from a stream keyed by (seed, layer) so layers draw
/// independent subsets and a rerun reproduces them exactly.
fn random_scores(n: usize, seed: u64, layer_index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer_index as u64);
    (0..n).map(|_| rng.gen::<f64>()).collect()
}

/// Mean over heads of the squared row norm, summed across K and V.
fn value_norm_scores(layer: &LayerKv) -> Vec<f64> {
    let (heads, n, dim) = (
        layer.keys.heads(),
        layer.keys.seq(),
        layer.keys.dim(),
    );
    let denom = (heads * dim) as f64;
    let mut scores = vec![0.0f64; n];
    for tensor in [&layer.keys, &layer.values] {
        for h in 0..heads {
            for p in 0..n {
                let row = tensor.row(h, p);
                let mut acc = 0.0f64;
                for &x in row {
                    acc += x as f64 * x as f64;
                }
                scores[p] += acc;
            }
        }
    }
    for s in &mut scores {
        *s /= denom;
    }
    scores
}
