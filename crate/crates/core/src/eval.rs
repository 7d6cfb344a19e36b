//! Quality evaluation: byte accounting, retained energy, and attention
//! fidelity of a retention plan against the dump it was built from.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::retained_energy_fraction;
use crate::cache::RetentionPlan;
use crate::dump::KvDump;
use crate::error::{Error, Result};
use crate::tensor::LayerKv;

/// Format tag written into every metrics report.
pub const METRICS_FORMAT: &str = "flashcache-metrics-v1";

/// Dense matrix of probe queries, one row per query, laid out
/// `[head][channel]` to match a dump's head geometry.
#[derive(Debug, Clone)]
pub struct QueryMatrix {
    width: usize,
    data: Vec<f32>,
}

impl QueryMatrix {
    pub fn new(width: usize, data: Vec<f32>) -> Result<QueryMatrix> {
        if width == 0 {
            return Err(Error::Empty("query width"));
        }
        if data.is_empty() {
            return Err(Error::Empty("query rows"));
        }
        if data.len() % width != 0 {
            return Err(Error::Shape {
                context: format!(
                    "{} query values do not divide into rows of width {width}",
                    data.len()
                ),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("query row {} channel {}", i / width, i % width),
            });
        }
        Ok(QueryMatrix { width, data })
    }

    /// Standard-normal queries, reproducible from the seed.
    pub fn gaussian(count: usize, width: usize, seed: u64) -> Result<QueryMatrix> {
        if count == 0 {
            return Err(Error::Empty("query rows"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..count * width)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        QueryMatrix::new(width, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalMetrics {
    /// Retention ratio the plan asked for.
    pub rho_requested: f64,
    /// Achieved payload ratio `bytes_after / bytes_before`.
    pub rho_achieved: f64,
    /// K/V payload bytes of the full dump at its storage dtype.
    pub bytes_before: u64,
    /// K/V payload bytes of the retained rows at the same dtype.
    pub bytes_after: u64,
    /// Wall-clock of the compression call, when the caller measured one.
    /// Evaluation alone leaves this null.
    pub method_latency_ms: Option<f64>,
    pub num_layers: usize,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer_index: usize,
    pub quota: usize,
    /// Fraction of the layer's squared-magnitude energy kept.
    pub energy_retained: f64,
    /// Mean relative L2 attention error over probe queries and heads;
    /// null when no queries were supplied.
    pub attention_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub format: String,
    pub global: GlobalMetrics,
    pub per_layer: Vec<LayerMetrics>,
}

/// Scores a retention plan against its dump.
///
/// With `queries`, each layer also gets an attention-fidelity score: dense
/// softmax attention over all positions versus the same computation over
/// the retained positions, compared by relative L2 error and averaged over
/// queries and heads.
pub fn evaluate_plan(
    dump: &KvDump,
    plan: &RetentionPlan,
    queries: Option<&QueryMatrix>,
) -> Result<Metrics> {
    plan.validate_against(dump.meta())?;
    dump.validate_finite()?;
    let meta = dump.meta();
    if let Some(q) = queries {
        let want = meta.kv_heads * meta.head_dim;
        if q.width() != want {
            return Err(Error::Shape {
                context: format!(
                    "query width {} does not match {} head(s) x {} channel(s)",
                    q.width(),
                    meta.kv_heads,
                    meta.head_dim
                ),
            });
        }
    }

    let row_bytes = 2 * (meta.kv_heads as u64) * (meta.head_dim as u64) * (meta.dtype.bytes() as u64);
    let bytes_before = dump.kv_bytes();
    let bytes_after: u64 = plan
        .layers
        .iter()
        .map(|lp| lp.retained.len() as u64 * row_bytes)
        .sum();

    let per_layer: Vec<LayerMetrics> = dump
        .layers()
        .par_iter()
        .zip(&plan.layers)
        .map(|(layer, lp)| {
            let attention_error = queries
                .map(|q| attention_error(layer, &lp.retained, q))
                .transpose()?;
            Ok(LayerMetrics {
                layer_index: lp.layer_index,
                quota: lp.quota,
                energy_retained: retained_energy_fraction(layer, &lp.retained),
                attention_error,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Metrics {
        format: METRICS_FORMAT.to_string(),
        global: GlobalMetrics {
            rho_requested: plan.config.rho,
            rho_achieved: bytes_after as f64 / bytes_before as f64,
            bytes_before,
            bytes_after,
            method_latency_ms: None,
            num_layers: meta.num_layers,
            seq_len: meta.seq_len,
        },
        per_layer,
    })
}

/// Mean over queries and heads of `||dense - retained|| / ||dense||`.
fn attention_error(layer: &LayerKv, retained: &[usize], queries: &QueryMatrix) -> Result<f64> {
    let (heads, seq, dim) = (layer.keys.heads(), layer.keys.seq(), layer.keys.dim());
    let all: Vec<usize> = (0..seq).collect();
    let mut total = 0.0f64;
    for qi in 0..queries.count() {
        let row = queries.row(qi);
        for h in 0..heads {
            let q: Vec<f64> = row[h * dim..(h + 1) * dim]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let dense = head_attention(&q, layer, h, &all);
            let approx = head_attention(&q, layer, h, retained);
            let mut diff_sq = 0.0f64;
            let mut dense_sq = 0.0f64;
            for (a, b) in dense.iter().zip(&approx) {
                let d = a - b;
                diff_sq += d * d;
                dense_sq += a * a;
            }
            total += if dense_sq > 0.0 {
                (diff_sq / dense_sq).sqrt()
            } else if diff_sq > 0.0 {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(total / (queries.count() * heads) as f64)
}

/// Softmax attention for one head restricted to `positions`, in f64.
/// An empty position set attends to nothing and returns zeros.
fn head_attention(q: &[f64], layer: &LayerKv, head: usize, positions: &[usize]) -> Vec<f64> {
    let dim = layer.keys.dim();
    if positions.is_empty() {
        return vec![0.0; dim];
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut logits = Vec::with_capacity(positions.len());
    for &p in positions {
        let key = layer.keys.row(head, p);
        let mut dot = 0.0f64;
        for d in 0..dim {
            dot += q[d] * key[d] as f64;
        }
        logits.push(dot * scale);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut out = vec![0.0f64; dim];
    for (w, &p) in weights.iter().zip(positions) {
        let value = layer.values.row(head, p);
        let scaled = w / z;
        for d in 0..dim {
            out[d] += scaled * value[d] as f64;
        }
    }
    out
}
