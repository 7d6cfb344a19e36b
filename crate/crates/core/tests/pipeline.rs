//! End-to-end flows through the public API: generate, compress, serialize,
//! read back, evaluate, append.

use flashcache::{
    compress, compress_with_policy, evaluate_plan, generate, read_cache, read_dump, read_json,
    write_cache, write_dump, write_json, AllocationMode, CompressionConfig, EvictionScope,
    PolicyId, QueryMatrix, RetentionPlan, SynthSpec, TokenTag,
};
use tempfile::tempdir;

fn spec() -> SynthSpec {
    SynthSpec {
        num_layers: 3,
        kv_heads: 2,
        head_dim: 8,
        seq_len: 96,
        base_modes: 10,
        base_amplitude: 1.0,
        outliers_per_layer: 5,
        outlier_amplitude: 12.0,
        outlier_channel_fraction: 0.25,
        noise_sigma: 0.05,
        seed: 77,
        text_prefix: 6,
    }
}

fn config() -> CompressionConfig {
    CompressionConfig {
        rho: 0.4,
        gamma: 0.2,
        sink_count: 2,
        recent_count: 4,
        allocation_mode: AllocationMode::Dynamic,
        eviction_scope: EvictionScope::AllTokens,
    }
}

#[test]
fn disk_round_trip_preserves_the_whole_pipeline() {
    let dir = tempdir().unwrap();
    let dump_path = dir.path().join("dump.fkv");
    let cache_path = dir.path().join("cache.fkc");
    let plan_path = dir.path().join("plan.json");

    let (dump, _) = generate(&spec()).unwrap();
    write_dump(&dump_path, &dump).unwrap();
    let dump = read_dump(&dump_path).unwrap();

    let outcome = compress(&dump, &config()).unwrap();
    write_cache(&cache_path, &outcome.cache).unwrap();
    write_json(&plan_path, &outcome.plan).unwrap();

    let cache = read_cache(&cache_path).unwrap();
    let plan: RetentionPlan = read_json(&plan_path).unwrap();
    plan.validate_against(dump.meta()).unwrap();

    // The cache rows must be exactly the dump rows the plan says were kept.
    for ((layer_plan, cache_layer), dump_layer) in
        plan.layers.iter().zip(cache.layers()).zip(dump.layers())
    {
        for (slot, &pos) in layer_plan.retained.iter().enumerate() {
            for h in 0..dump.meta().kv_heads {
                assert_eq!(cache_layer.keys.row(h, slot), dump_layer.keys.row(h, pos));
                assert_eq!(
                    cache_layer.values.row(h, slot),
                    dump_layer.values.row(h, pos)
                );
            }
        }
    }

    // Metrics computed from the read-back plan match the in-memory ones.
    let q = QueryMatrix::gaussian(4, 16, 1).unwrap();
    let a = evaluate_plan(&dump, &outcome.plan, Some(&q)).unwrap();
    let b = evaluate_plan(&dump, &plan, Some(&q)).unwrap();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
}

#[test]
fn vision_only_scope_never_evicts_text() {
    let mut s = spec();
    s.text_prefix = 20;
    let (dump, _) = generate(&s).unwrap();
    let mut cfg = config();
    cfg.eviction_scope = EvictionScope::VisionOnly;
    cfg.rho = 0.5; // 48 per layer >= 20 text + sinks + recents
    let outcome = compress(&dump, &cfg).unwrap();
    for lp in &outcome.plan.layers {
        for p in 0..20 {
            assert!(
                lp.retained.contains(&p),
                "text position {p} evicted from layer {}",
                lp.layer_index
            );
        }
    }
}

#[test]
fn every_policy_produces_a_valid_plan_and_cache() {
    let (dump, _) = generate(&spec()).unwrap();
    let dir = tempdir().unwrap();
    for policy in [
        PolicyId::Flashcache,
        PolicyId::RecencySink,
        PolicyId::RandomSeeded,
        PolicyId::ValueNorm,
    ] {
        let outcome = compress_with_policy(&dump, &config(), policy, 3).unwrap();
        outcome.plan.validate_against(dump.meta()).unwrap();
        let path = dir.path().join(format!("{policy}.fkc"));
        write_cache(&path, &outcome.cache).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.position_maps(), outcome.cache.position_maps());
    }
}

#[test]
fn appended_rows_survive_serialization() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("grown.fkc");
    let (dump, _) = generate(&spec()).unwrap();
    let mut cache = compress(&dump, &config()).unwrap().cache;

    let width = dump.meta().kv_heads * dump.meta().head_dim;
    let k_row: Vec<f32> = (0..width).map(|i| i as f32 * 0.5).collect();
    let v_row: Vec<f32> = (0..width).map(|i| -(i as f32)).collect();
    for layer in 0..dump.meta().num_layers {
        assert_eq!(cache.append(layer, &k_row, &v_row).unwrap(), 96);
    }

    write_cache(&path, &cache).unwrap();
    let back = read_cache(&path).unwrap();
    for layer in back.layers() {
        let last = layer.keys.seq() - 1;
        let mut got_k = Vec::new();
        let mut got_v = Vec::new();
        for h in 0..dump.meta().kv_heads {
            got_k.extend_from_slice(layer.keys.row(h, last));
            got_v.extend_from_slice(layer.values.row(h, last));
        }
        assert_eq!(got_k, k_row);
        assert_eq!(got_v, v_row);
    }
    assert_eq!(back.position_maps()[0].last(), Some(&96));
}

#[test]
fn text_tags_round_trip_through_the_container() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("tagged.fkv");
    let mut s = spec();
    s.text_prefix = 13;
    let (dump, _) = generate(&s).unwrap();
    write_dump(&path, &dump).unwrap();
    let back = read_dump(&path).unwrap();
    let tags = back.token_tags();
    assert!(tags[..13].iter().all(|&t| t == TokenTag::Text));
    assert!(tags[13..].iter().all(|&t| t == TokenTag::Vision));
}
