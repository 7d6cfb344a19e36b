//! End-to-end compression: protected positions, budget split, per-layer
//! selection, and the serializable retention plan.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{analyze_tensor, retained_energy_fraction};
use crate::baselines::{select_baseline, PolicyId};
use crate::budget::{allocate, ratio_from_energies, AllocationMode, BudgetAllocation, LayerEnergyRatio};
use crate::dump::{DType, DumpMeta, KvDump, TokenTag};
use crate::error::{Error, Result};
use crate::outlier::{deviation_scores, select_outliers, BaseKv, DeviationScores};
use crate::spectral::{cutoff, DctPlan};
use crate::tensor::LayerKv;

/// Format tag written into every retention plan.
pub const PLAN_FORMAT: &str = "flashcache-plan-v1";

/// Which token modalities the selector may evict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionScope {
    /// Every position competes for the budget.
    AllTokens,
    /// Text positions are pinned; only vision positions compete.
    VisionOnly,
}

impl EvictionScope {
    pub fn as_str(self) -> &'static str {
        match self {
            EvictionScope::AllTokens => "all_tokens",
            EvictionScope::VisionOnly => "vision_only",
        }
    }
}

impl fmt::Display for EvictionScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvictionScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all_tokens" => Ok(EvictionScope::AllTokens),
            "vision" | "vision_only" => Ok(EvictionScope::VisionOnly),
            _ => Err(Error::InvalidConfig(format!(
                "unknown eviction scope {s:?}; expected all or vision"
            ))),
        }
    }
}

/// Tuning knobs for one compression run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Global retention ratio: fraction of all positions kept across layers.
    pub rho: f64,
    /// Fraction of leading frequency modes that defines the base cache.
    pub gamma: f64,
    /// Leading positions protected as attention sinks.
    pub sink_count: usize,
    /// Trailing positions protected as the recent window.
    pub recent_count: usize,
    pub allocation_mode: AllocationMode,
    pub eviction_scope: EvictionScope,
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.rho.is_finite() || !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidRho(self.rho));
        }
        if !self.gamma.is_finite() || !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

/// Distribution statistics of one layer's deviation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DevSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl DevSummary {
    fn of(scores: &[f64]) -> DevSummary {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &s in scores {
            min = min.min(s);
            max = max.max(s);
            sum += s;
        }
        DevSummary {
            min,
            max,
            mean: sum / scores.len() as f64,
        }
    }
}

/// Retention decision for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_index: usize,
    /// Positions this layer was allowed to keep.
    pub quota: usize,
    /// Kept positions, ascending.
    pub retained: Vec<usize>,
    /// Subset of `retained` pinned by protection rules.
    pub forced: Vec<usize>,
    /// High-band energy ratios, when spectral analysis ran.
    pub energy_ratio: Option<LayerEnergyRatio>,
    /// Deviation-score statistics, when the engine policy ran.
    pub dev_summary: Option<DevSummary>,
    /// Fraction of the layer's squared-magnitude energy that was kept.
    pub energy_retained: f64,
}

/// Complete, serializable record of one compression run. Two runs over the
/// same dump and configuration produce byte-identical plans.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetentionPlan {
    pub format: String,
    pub policy: PolicyId,
    pub seed: u64,
    pub config: CompressionConfig,
    pub geometry: DumpMeta,
    pub allocation: BudgetAllocation,
    pub layers: Vec<LayerPlan>,
}

impl RetentionPlan {
    /// Checks that this plan could have been produced from a dump with the
    /// given geometry and is internally consistent.
    pub fn validate_against(&self, meta: DumpMeta) -> Result<()> {
        let fail = |msg: String| Err(Error::PlanMismatch(msg));
        if self.format != PLAN_FORMAT {
            return fail(format!(
                "plan format {:?}, this engine reads {PLAN_FORMAT:?}",
                self.format
            ));
        }
        if self.geometry != meta {
            return fail(format!(
                "plan geometry {:?} does not match dump {:?}",
                self.geometry, meta
            ));
        }
        let layers = meta.num_layers;
        let n = meta.seq_len;
        if self.allocation.quotas.len() != layers || self.layers.len() != layers {
            return fail(format!(
                "plan describes {} quota(s) and {} layer(s) for a {layers}-layer dump",
                self.allocation.quotas.len(),
                self.layers.len()
            ));
        }
        for (i, lp) in self.layers.iter().enumerate() {
            if lp.layer_index != i {
                return fail(format!("layer slot {i} holds layer_index {}", lp.layer_index));
            }
            if lp.quota != self.allocation.quotas[i] {
                return fail(format!(
                    "layer {i} quota {} disagrees with allocation {}",
                    lp.quota, self.allocation.quotas[i]
                ));
            }
            if lp.retained.len() != lp.quota.min(n) {
                return fail(format!(
                    "layer {i} retains {} position(s) under quota {}",
                    lp.retained.len(),
                    lp.quota
                ));
            }
            if !lp.retained.windows(2).all(|w| w[0] < w[1]) {
                return fail(format!("layer {i} retained positions are not ascending"));
            }
            if lp.retained.last().is_some_and(|&p| p >= n) {
                return fail(format!("layer {i} retains a position past the sequence end"));
            }
            let retained: BTreeSet<usize> = lp.retained.iter().copied().collect();
            if !lp.forced.iter().all(|p| retained.contains(p)) {
                return fail(format!("layer {i} lists a forced position it did not retain"));
            }
        }
        Ok(())
    }
}

/// Ragged compressed cache: per layer, only the retained rows plus the map
/// back to original positions.
#[derive(Debug, Clone)]
pub struct CompressedCache {
    original_seq_len: usize,
    dtype: DType,
    layers: Vec<LayerKv>,
    position_maps: Vec<Vec<usize>>,
}

impl CompressedCache {
    pub fn new(
        original_seq_len: usize,
        dtype: DType,
        layers: Vec<LayerKv>,
        position_maps: Vec<Vec<usize>>,
    ) -> Result<CompressedCache> {
        if layers.is_empty() {
            return Err(Error::Empty("cache layers"));
        }
        if layers.len() != position_maps.len() {
            return Err(Error::Shape {
                context: format!(
                    "{} layer(s) but {} position map(s)",
                    layers.len(),
                    position_maps.len()
                ),
            });
        }
        let (heads, dim) = (layers[0].keys.heads(), layers[0].keys.dim());
        for (i, (layer, map)) in layers.iter().zip(&position_maps).enumerate() {
            if layer.layer_index != i {
                return Err(Error::Shape {
                    context: format!("cache slot {i} holds layer_index {}", layer.layer_index),
                });
            }
            if layer.keys.heads() != heads || layer.keys.dim() != dim {
                return Err(Error::Shape {
                    context: format!("layer {i} disagrees with layer 0 on heads or channels"),
                });
            }
            if layer.keys.seq() != map.len() {
                return Err(Error::Shape {
                    context: format!(
                        "layer {i} holds {} row(s) but maps {} position(s)",
                        layer.keys.seq(),
                        map.len()
                    ),
                });
            }
            if !map.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Shape {
                    context: format!("layer {i} position map is not strictly ascending"),
                });
            }
        }
        Ok(CompressedCache {
            original_seq_len,
            dtype,
            layers,
            position_maps,
        })
    }

    pub fn original_seq_len(&self) -> usize {
        self.original_seq_len
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn position_maps(&self) -> &[Vec<usize>] {
        &self.position_maps
    }

    pub fn layer(&self, index: usize) -> Result<&LayerKv> {
        self.layers.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.layers.len(),
            what: "layer",
        })
    }

    /// Serialized size of the retained K/V rows at the cache dtype,
    /// excluding headers and position maps.
    pub fn kv_bytes(&self) -> u64 {
        let per_value = self.dtype.bytes() as u64;
        self.layers
            .iter()
            .map(|l| {
                2 * (l.keys.heads() as u64) * (l.keys.seq() as u64) * (l.keys.dim() as u64)
            })
            .sum::<u64>()
            * per_value
    }

    /// Appends one freshly generated position to a layer. Rows are laid out
    /// `[head][channel]`. Returns the original-sequence position assigned to
    /// the new row; appended rows are never evicted by this cache.
    pub fn append(&mut self, layer_index: usize, k_row: &[f32], v_row: &[f32]) -> Result<usize> {
        let len = self.layers.len();
        let layer = self
            .layers
            .get_mut(layer_index)
            .ok_or(Error::IndexOutOfRange {
                index: layer_index,
                len,
                what: "layer",
            })?;
        let map = &mut self.position_maps[layer_index];
        let next = map
            .last()
            .map_or(self.original_seq_len, |&p| (p + 1).max(self.original_seq_len));
        layer.keys.append_position(k_row)?;
        layer.values.append_position(v_row)?;
        map.push(next);
        Ok(next)
    }
}

/// A retention plan together with the cache it produced.
#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub plan: RetentionPlan,
    pub cache: CompressedCache,
}

/// Positions exempt from eviction under a configuration: attention sinks,
/// the recent window, and (under `VisionOnly` scope) every text position.
pub fn protected_positions(dump: &KvDump, config: &CompressionConfig) -> BTreeSet<usize> {
    let n = dump.meta().seq_len;
    let mut protected = BTreeSet::new();
    protected.extend(0..config.sink_count.min(n));
    protected.extend(n.saturating_sub(config.recent_count)..n);
    if config.eviction_scope == EvictionScope::VisionOnly {
        protected.extend(dump.positions_tagged(TokenTag::Text));
    }
    protected
}

/// Compresses a dump with the engine's deviation-from-base policy.
pub fn compress(dump: &KvDump, config: &CompressionConfig) -> Result<CompressionOutcome> {
    compress_with_policy(dump, config, PolicyId::Flashcache, 0)
}

struct LayerWork {
    ratio: Option<LayerEnergyRatio>,
    dev: Option<DeviationScores>,
}

/// Compresses a dump under any retention policy, sharing the budget and
/// protection machinery so baselines are compared fairly.
///
/// `seed` drives the seeded-random baseline and is recorded in the plan;
/// the other policies ignore it.
pub fn compress_with_policy(
    dump: &KvDump,
    config: &CompressionConfig,
    policy: PolicyId,
    seed: u64,
) -> Result<CompressionOutcome> {
    config.validate()?;
    dump.validate_finite()?;
    let meta = dump.meta();
    let n = meta.seq_len;
    let num_layers = meta.num_layers;

    let protected = protected_positions(dump, config);
    let lens = vec![n; num_layers];
    let floors = vec![protected.len(); num_layers];

    let need_base = policy == PolicyId::Flashcache;
    let need_ratios = config.allocation_mode == AllocationMode::Dynamic;
    let works: Vec<LayerWork> = if need_base || need_ratios {
        let plan = DctPlan::new(n)?;
        let keep = cutoff(config.gamma, n)?;
        dump.layers()
            .par_iter()
            .map(|layer| {
                let i = layer.layer_index;
                let k = analyze_tensor(
                    &layer.keys,
                    &plan,
                    keep,
                    need_base,
                    &format!("layer {i} keys"),
                )?;
                let v = analyze_tensor(
                    &layer.values,
                    &plan,
                    keep,
                    need_base,
                    &format!("layer {i} values"),
                )?;
                let ratio =
                    ratio_from_energies(i, k.high_energy, k.total_energy, v.high_energy, v.total_energy);
                let dev = match (k.base, v.base) {
                    (Some(keys_base), Some(values_base)) => {
                        let base = BaseKv {
                            gamma: config.gamma,
                            keys_base,
                            values_base,
                        };
                        Some(deviation_scores(layer, &base)?)
                    }
                    _ => None,
                };
                Ok(LayerWork {
                    ratio: Some(ratio),
                    dev,
                })
            })
            .collect::<Result<_>>()?
    } else {
        (0..num_layers)
            .map(|_| LayerWork {
                ratio: None,
                dev: None,
            })
            .collect()
    };

    let ratios: Vec<LayerEnergyRatio> = if need_ratios {
        works
            .iter()
            .map(|w| w.ratio.clone().expect("analysis ran"))
            .collect()
    } else {
        Vec::new()
    };
    let allocation = allocate(&ratios, config.rho, &lens, &floors, config.allocation_mode)?;

    let mut layer_plans = Vec::with_capacity(num_layers);
    let mut out_layers = Vec::with_capacity(num_layers);
    let mut maps = Vec::with_capacity(num_layers);
    for (layer, work) in dump.layers().iter().zip(&works) {
        let i = layer.layer_index;
        let quota = allocation.quotas[i];
        let sel = match policy {
            PolicyId::Flashcache => {
                let dev = work.dev.as_ref().expect("engine policy computed scores");
                select_outliers(dev, quota, &protected)?
            }
            _ => select_baseline(policy, layer, quota, &protected, seed, config.sink_count)?,
        };
        let energy_retained = retained_energy_fraction(layer, &sel.retained);
        out_layers.push(LayerKv {
            layer_index: i,
            keys: layer.keys.select_positions(&sel.retained),
            values: layer.values.select_positions(&sel.retained),
        });
        maps.push(sel.retained.clone());
        layer_plans.push(LayerPlan {
            layer_index: i,
            quota,
            retained: sel.retained,
            forced: sel.forced,
            energy_ratio: work.ratio.clone(),
            dev_summary: work.dev.as_ref().map(|d| DevSummary::of(&d.dev)),
            energy_retained,
        });
    }

    let cache = CompressedCache::new(n, meta.dtype, out_layers, maps)?;
    let plan = RetentionPlan {
        format: PLAN_FORMAT.to_string(),
        policy,
        seed,
        config: *config,
        geometry: meta,
        allocation,
        layers: layer_plans,
    };
    Ok(CompressionOutcome { plan, cache })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor3;

    fn smooth_dump(layers: usize, n: usize) -> KvDump {
        let mut out = Vec::new();
        for l in 0..layers {
            let mut keys = Tensor3::zeros(1, n, 2);
            let mut values = Tensor3::zeros(1, n, 2);
            for p in 0..n {
                let t = p as f32 / n as f32;
                for d in 0..2 {
                    keys.set(0, p, d, (t * (l + d + 1) as f32).sin());
                    values.set(0, p, d, (t * (l + d + 2) as f32).cos());
                }
            }
            out.push(LayerKv::new(l, keys, values).unwrap());
        }
        KvDump::new(out, vec![TokenTag::Text; n], DType::F32).unwrap()
    }

    fn config(rho: f64) -> CompressionConfig {
        CompressionConfig {
            rho,
            gamma: 0.25,
            sink_count: 2,
            recent_count: 2,
            allocation_mode: AllocationMode::Dynamic,
            eviction_scope: EvictionScope::AllTokens,
        }
    }

    #[test]
    fn plan_and_cache_are_consistent() {
        let dump = smooth_dump(3, 40);
        let out = compress(&dump, &config(0.5)).unwrap();
        out.plan.validate_against(dump.meta()).unwrap();
        assert_eq!(out.plan.allocation.total_budget, 60);
        for (lp, map) in out.plan.layers.iter().zip(out.cache.position_maps()) {
            assert_eq!(&lp.retained, map);
            assert!(lp.energy_retained >= 0.0 && lp.energy_retained <= 1.0 + 1e-12);
            assert!(lp.dev_summary.is_some());
            assert!(lp.energy_ratio.is_some());
        }
        let total: usize = out.cache.position_maps().iter().map(Vec::len).sum();
        assert_eq!(total, 60);
    }

    #[test]
    fn protected_positions_cover_sinks_recents_and_text() {
        let mut tags = vec![TokenTag::Vision; 10];
        tags[4] = TokenTag::Text;
        let layers = vec![LayerKv::new(
            0,
            Tensor3::zeros(1, 10, 2),
            Tensor3::zeros(1, 10, 2),
        )
        .unwrap()];
        let dump = KvDump::new(layers, tags, DType::F32).unwrap();
        let mut cfg = config(0.5);
        cfg.sink_count = 1;
        cfg.recent_count = 2;
        cfg.eviction_scope = EvictionScope::VisionOnly;
        let got: Vec<usize> = protected_positions(&dump, &cfg).into_iter().collect();
        assert_eq!(got, vec![0, 4, 8, 9]);
    }

    #[test]
    fn full_retention_keeps_every_position() {
        let dump = smooth_dump(2, 16);
        let mut cfg = config(1.0);
        cfg.sink_count = 0;
        cfg.recent_count = 0;
        let out = compress(&dump, &cfg).unwrap();
        for lp in &out.plan.layers {
            assert_eq!(lp.retained, (0..16).collect::<Vec<_>>());
            assert!((lp.energy_retained - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.cache.kv_bytes(), dump.kv_bytes());
    }

    #[test]
    fn forced_positions_are_always_retained() {
        let dump = smooth_dump(2, 20);
        let out = compress(&dump, &config(0.3)).unwrap();
        for lp in &out.plan.layers {
            assert_eq!(lp.forced, vec![0, 1, 18, 19]);
            for f in &lp.forced {
                assert!(lp.retained.contains(f));
            }
        }
    }

    #[test]
    fn protected_floor_larger_than_budget_fails() {
        let dump = smooth_dump(1, 10);
        let mut cfg = config(0.2);
        cfg.sink_count = 3;
        cfg.recent_count = 3;
        // Budget: round(0.2 * 10) = 2 < 6 protected.
        let err = compress(&dump, &cfg).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { .. }));
    }

    #[test]
    fn baseline_runs_share_budget_and_protection() {
        let dump = smooth_dump(2, 30);
        let cfg = config(0.4);
        let out =
            compress_with_policy(&dump, &cfg, PolicyId::RandomSeeded, 9).unwrap();
        out.plan.validate_against(dump.meta()).unwrap();
        assert_eq!(out.plan.policy, PolicyId::RandomSeeded);
        assert_eq!(out.plan.seed, 9);
        for lp in &out.plan.layers {
            assert!(lp.dev_summary.is_none());
            assert!(lp.energy_ratio.is_some(), "dynamic mode still ran analysis");
            assert!(lp.retained.contains(&0));
            assert!(lp.retained.contains(&29));
        }
    }

    #[test]
    fn uniform_baseline_skips_spectral_analysis() {
        let dump = smooth_dump(2, 30);
        let mut cfg = config(0.4);
        cfg.allocation_mode = AllocationMode::Uniform;
        let out = compress_with_policy(&dump, &cfg, PolicyId::RecencySink, 0).unwrap();
        for lp in &out.plan.layers {
            assert!(lp.energy_ratio.is_none());
            assert!(lp.dev_summary.is_none());
        }
        assert_eq!(out.plan.allocation.quotas, vec![12, 12]);
    }

    #[test]
    fn nan_input_is_rejected_with_coordinates() {
        let mut dump = smooth_dump(1, 8);
        // Rebuild with a poisoned value.
        let mut keys = dump.layers()[0].keys.clone();
        keys.set(0, 3, 1, f32::NAN);
        let layers = vec![LayerKv::new(0, keys, dump.layers()[0].values.clone()).unwrap()];
        dump = KvDump::new(layers, vec![TokenTag::Text; 8], DType::F32).unwrap();
        let err = compress(&dump, &config(0.5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("position 3"), "unhelpful error: {msg}");
    }

    #[test]
    fn plan_validation_rejects_foreign_geometry() {
        let dump = smooth_dump(2, 16);
        let out = compress(&dump, &config(0.5)).unwrap();
        let other = smooth_dump(2, 18);
        let err = out.plan.validate_against(other.meta()).unwrap_err();
        assert!(matches!(err, Error::PlanMismatch(_)));
    }

    #[test]
    fn plan_validation_rejects_tampered_retention() {
        let dump = smooth_dump(1, 12);
        let out = compress(&dump, &config(0.5)).unwrap();
        let mut plan = out.plan;
        plan.layers[0].retained.pop();
        assert!(matches!(
            plan.validate_against(dump.meta()),
            Err(Error::PlanMismatch(_))
        ));
    }

    #[test]
    fn append_assigns_fresh_positions() {
        let dump = smooth_dump(1, 10);
        let mut cfg = config(0.5);
        cfg.sink_count = 1;
        cfg.recent_count = 1;
        let mut cache = compress(&dump, &cfg).unwrap().cache;
        let row = vec![1.5f32; 2];
        assert_eq!(cache.append(0, &row, &row).unwrap(), 10);
        assert_eq!(cache.append(0, &row, &row).unwrap(), 11);
        let map = &cache.position_maps()[0];
        assert_eq!(map[map.len() - 2..], [10, 11]);
        assert_eq!(cache.layers()[0].keys.seq(), map.len());
        // Appended rows carry the values verbatim.
        let k = cache.layers()[0].keys.row(0, map.len() - 1);
        assert_eq!(k, &row[..]);
    }

    #[test]
    fn append_rejects_bad_row_width() {
        let dump = smooth_dump(1, 10);
        let mut cache = compress(&dump, &config(0.5)).unwrap().cache;
        let err = cache.append(0, &[1.0; 3], &[1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn four_point_hand_case_retains_the_analytic_top_positions() {
        // 1 layer, 1 head, 1 channel, 4 positions; gamma 0.25 keeps only the
        // DC mode, so the base is the per-channel mean and the deviations
        // follow by hand: K mean 4 gives dev_k [36,4,4,4]; V mean 1.5 gives
        // dev_v [2.25,2.25,20.25,2.25]; summed [38.25,6.25,24.25,6.25].
        let keys = Tensor3::new(1, 4, 1, vec![10.0, 2.0, 2.0, 2.0]).unwrap();
        let values = Tensor3::new(1, 4, 1, vec![0.0, 0.0, 6.0, 0.0]).unwrap();
        let dump = KvDump::new(
            vec![LayerKv::new(0, keys, values).unwrap()],
            vec![TokenTag::Text; 4],
            DType::F32,
        )
        .unwrap();
        let cfg = CompressionConfig {
            rho: 0.5,
            gamma: 0.25,
            sink_count: 0,
            recent_count: 0,
            allocation_mode: AllocationMode::Dynamic,
            eviction_scope: EvictionScope::AllTokens,
        };
        let outcome = compress(&dump, &cfg).unwrap();
        assert_eq!(outcome.plan.layers[0].retained, vec![0, 2]);
    }

    #[test]
    fn eviction_scope_and_mode_parse_from_strings() {
        // Short command-line forms and the serialized names both parse.
        for (text, scope) in [
            ("all", EvictionScope::AllTokens),
            ("all_tokens", EvictionScope::AllTokens),
            ("vision", EvictionScope::VisionOnly),
            ("vision_only", EvictionScope::VisionOnly),
        ] {
            assert_eq!(text.parse::<EvictionScope>().unwrap(), scope);
        }
        assert!("everything".parse::<EvictionScope>().is_err());
    }
}
