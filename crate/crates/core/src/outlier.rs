//! Base-cache extraction and outlier selection.
//!
//! The base cache is the low-pass reconstruction of each KV channel along the
//! position axis. Positions whose K/V rows sit far from that reconstruction
//! carry information the smooth component cannot express; they are scored by
//! squared deviation and the top scorers are retained verbatim.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::analysis::analyze_tensor;
use crate::error::{Error, Result};
use crate::spectral::{cutoff, DctPlan};
use crate::tensor::{LayerKv, Tensor3};

/// Low-pass reconstruction of one layer's K and V tensors.
#[derive(Debug, Clone)]
pub struct BaseKv {
    /// Fraction of leading position-axis modes kept by the filter.
    pub gamma: f64,
    pub keys_base: Tensor3,
    pub values_base: Tensor3,
}

/// Per-position deviation scores for one layer, averaged over heads and
/// channels. `dev[p] = dev_k[p] + dev_v[p]` holds exactly: both sides are
/// accumulated in f64 and the sum is formed once, not re-derived.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviationScores {
    pub dev: Vec<f64>,
    pub dev_k: Vec<f64>,
    pub dev_v: Vec<f64>,
}

/// Outcome of a retention decision for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Number of positions the layer was allowed to keep.
    pub budget: usize,
    /// Retained positions in ascending order.
    pub retained: Vec<usize>,
    /// Subset of `retained` that was forced in regardless of score.
    pub forced: Vec<usize>,
}

/// Reconstructs the smooth base cache for a layer by low-pass filtering every
/// channel along the position axis.
pub fn compute_base_kv(layer: &LayerKv, gamma: f64) -> Result<BaseKv> {
    let n = layer.keys.seq();
    let keep = cutoff(gamma, n)?;
    let plan = DctPlan::new(n)?;
    let keys = analyze_tensor(&layer.keys, &plan, keep, true, "keys")?;
    let values = analyze_tensor(&layer.values, &plan, keep, true, "values")?;
    Ok(BaseKv {
        gamma,
        keys_base: keys.base.expect("base requested"),
        values_base: values.base.expect("base requested"),
    })
}

/// Scores every position by its mean squared distance from the base cache.
///
/// For position `p`: `dev_k[p]` is the mean over heads and channels of
/// `(K[h,p,d] - K_base[h,p,d])^2`, likewise `dev_v`, and `dev` is their sum.
pub fn deviation_scores(layer: &LayerKv, base: &BaseKv) -> Result<DeviationScores> {
    let dev_k = tensor_deviation(&layer.keys, &base.keys_base, "keys")?;
    let dev_v = tensor_deviation(&layer.values, &base.values_base, "values")?;
    let dev = dev_k.iter().zip(&dev_v).map(|(k, v)| k + v).collect();
    Ok(DeviationScores { dev, dev_k, dev_v })
}

fn tensor_deviation(full: &Tensor3, base: &Tensor3, what: &str) -> Result<Vec<f64>> {
    if full.heads() != base.heads() || full.seq() != base.seq() || full.dim() != base.dim() {
        return Err(Error::Shape { context: format!(
            "{what}: base shape {}x{}x{} does not match tensor {}x{}x{}",
            base.heads(),
            base.seq(),
            base.dim(),
            full.heads(),
            full.seq(),
            full.dim(),
        ) });
    }
    let (heads, seq, dim) = (full.heads(), full.seq(), full.dim());
    let denom = (heads * dim) as f64;
    let mut out = vec![0.0f64; seq];
    for h in 0..heads {
        for p in 0..seq {
            let full_row = full.row(h, p);
            let base_row = base.row(h, p);
            let mut acc = 0.0f64;
            for d in 0..dim {
                let diff = full_row[d] as f64 - base_row[d] as f64;
                acc += diff * diff;
            }
            out[p] += acc;
        }
    }
    for v in &mut out {
        *v /= denom;
    }
    Ok(out)
}

/// Selects the retained positions for one layer: every protected position,
/// plus the highest-scoring free positions until the budget is filled.
pub fn select_outliers(
    scores: &DeviationScores,
    budget: usize,
    protected: &BTreeSet<usize>,
) -> Result<SelectionResult> {
    select_top(&scores.dev, budget, protected)
}

/// Core top-k routine shared by the deviation policy and the score-based
/// baselines. Ties break toward the lower position index so results do not
/// depend on sort internals.
pub(crate) fn select_top(
    scores: &[f64],
    budget: usize,
    protected: &BTreeSet<usize>,
) -> Result<SelectionResult> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Empty("selection scores"));
    }
    if let Some((i, _)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("selection score at position {i}"),
        });
    }
    if let Some(&p) = protected.iter().find(|&&p| p >= n) {
        return Err(Error::IndexOutOfRange {
            index: p,
            len: n,
            what: "protected position",
        });
    }
    if protected.len() > budget && budget < n {
        return Err(Error::InfeasibleBudget {
            floors: protected.len(),
            budget,
        });
    }
    let forced: Vec<usize> = protected.iter().copied().collect();
    if budget >= n {
        return Ok(SelectionResult {
            budget,
            retained: (0..n).collect(),
            forced,
        });
    }
    let mut free: Vec<usize> = (0..n).filter(|p| !protected.contains(p)).collect();
    // Descending score; equal scores fall back to ascending index.
    free.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });
    let mut picked: BTreeSet<usize> = protected.clone();
    for &p in free.iter().take(budget - protected.len()) {
        picked.insert(p);
    }
    Ok(SelectionResult {
        budget,
        retained: picked.into_iter().collect(),
        forced,
    })
}
