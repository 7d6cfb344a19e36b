//! Synthetic KV dumps with known structure: smooth low-frequency channels,
//! Gaussian noise, and planted outlier positions whose locations are
//! returned as ground truth for recall experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{DType, KvDump, TokenTag};
use crate::error::{Error, Result};
use crate::spectral::DctPlan;
use crate::tensor::{LayerKv, Tensor3};

fn default_channel_fraction() -> f64 {
    0.25
}

/// Recipe for one synthetic dump. Serializable so experiments can be
/// described as JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    /// Leading frequency modes carrying the smooth component.
    pub base_modes: usize,
    /// Uniform range of the smooth component's coefficients.
    pub base_amplitude: f64,
    /// Planted outlier positions per layer.
    pub outliers_per_layer: usize,
    /// Scale of the spikes added at planted positions.
    pub outlier_amplitude: f64,
    /// Fraction of a position's channels that receive a spike.
    #[serde(default = "default_channel_fraction")]
    pub outlier_channel_fraction: f64,
    /// Standard deviation of the elementwise Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Leading positions tagged as text; the rest are vision.
    #[serde(default)]
    pub text_prefix: usize,
}

/// Ground truth accompanying a generated dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub seed: u64,
    /// Planted outlier positions per layer, ascending.
    pub planted: Vec<Vec<usize>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.num_layers == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.seq_len == 0
        {
            return bad("num_layers, kv_heads, head_dim, seq_len must be positive".into());
        }
        if self.base_modes == 0 || self.base_modes > self.seq_len {
            return bad(format!(
                "base_modes must lie in [1, {}], got {}",
                self.seq_len, self.base_modes
            ));
        }
        if self.outliers_per_layer > self.seq_len {
            return bad(format!(
                "cannot plant {} outliers in {} positions",
                self.outliers_per_layer, self.seq_len
            ));
        }
        for (name, v) in [
            ("base_amplitude", self.base_amplitude),
            ("outlier_amplitude", self.outlier_amplitude),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.outlier_channel_fraction.is_finite()
            || !(self.outlier_channel_fraction > 0.0 && self.outlier_channel_fraction <= 1.0)
        {
            return bad(format!(
                "outlier_channel_fraction must lie in (0, 1], got {}",
                self.outlier_channel_fraction
            ));
        }
        if self.text_prefix > self.seq_len {
            return bad(format!(
                "text_prefix {} exceeds seq_len {}",
                self.text_prefix, self.seq_len
            ));
        }
        if self.outliers_per_layer > 0 {
            // Spikes must stand clear of the smooth component and the noise
            // floor, otherwise recall against the ground truth is undefined.
            let floor = 10.0 * (self.base_amplitude + self.noise_sigma);
            if self.outlier_amplitude <= 0.0 || self.outlier_amplitude < floor {
                return bad(format!(
                    "outlier_amplitude {} too small: planting outliers requires at least \
                     10 * (base_amplitude + noise_sigma) = {floor}",
                    self.outlier_amplitude
                ));
            }
        }
        Ok(())
    }
}

/// Generates a dump and its ground truth. Layers draw from independent
/// streams of one seeded generator, so output is reproducible and does not
/// depend on thread scheduling.
pub fn generate(spec: &SynthSpec) -> Result<(KvDump, SynthTruth)> {
    spec.validate()?;
    let plan = DctPlan::new(spec.seq_len)?;
    let per_layer: Vec<(LayerKv, Vec<usize>)> = (0..spec.num_layers)
        .into_par_iter()
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(l as u64);
            generate_layer(spec, &plan, l, &mut rng)
        })
        .collect::<Result<_>>()?;

    let mut layers = Vec::with_capacity(spec.num_layers);
    let mut planted = Vec::with_capacity(spec.num_layers);
    for (layer, positions) in per_layer {
        layers.push(layer);
        planted.push(positions);
    }
    let tags: Vec<TokenTag> = (0..spec.seq_len)
        .map(|p| {
            if p < spec.text_prefix {
                TokenTag::Text
            } else {
                TokenTag::Vision
            }
        })
        .collect();
    let dump = KvDump::new(layers, tags, DType::F32)?;
    Ok((
        dump,
        SynthTruth {
            seed: spec.seed,
            planted,
        },
    ))
}

fn generate_layer(
    spec: &SynthSpec,
    plan: &DctPlan,
    layer_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LayerKv, Vec<usize>)> {
    let mut keys = smooth_tensor(spec, plan, rng)?;
    let mut values = smooth_tensor(spec, plan, rng)?;

    // sigma = 0 still walks the generator so runs differing only in noise
    // level visit identical planted positions.
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    for tensor in [&mut keys, &mut values] {
        for v in tensor.data_mut() {
            *v += noise.sample(rng) as f32;
        }
    }

    let mut planted: Vec<usize> =
        rand::seq::index::sample(rng, spec.seq_len, spec.outliers_per_layer).into_vec();
    planted.sort_unstable();

    let channels = spec.kv_heads * spec.head_dim;
    let subset = ((spec.outlier_channel_fraction * channels as f64).round() as usize)
        .clamp(1, channels);
    for &p in &planted {
        for tensor in [&mut keys, &mut values] {
            let chosen = rand::seq::index::sample(rng, channels, subset);
            for c in chosen.iter() {
                let spike: f64 = rng.sample::<f64, _>(StandardNormal) * spec.outlier_amplitude;
                let (h, d) = (c / spec.head_dim, c % spec.head_dim);
                let cur = tensor.at(h, p, d);
                tensor.set(h, p, d, cur + spike as f32);
            }
        }
    }
    Ok((LayerKv::new(layer_index, keys, values)?, planted))
}

/// Channels whose content lives entirely in the first `base_modes`
/// frequency modes, with uniform coefficients.
fn smooth_tensor(spec: &SynthSpec, plan: &DctPlan, rng: &mut ChaCha8Rng) -> Result<Tensor3> {
    let mut t = Tensor3::zeros(spec.kv_heads, spec.seq_len, spec.head_dim);
    let mut coeffs = vec![0.0f32; spec.seq_len];
    for c in 0..spec.kv_heads * spec.head_dim {
        for m in coeffs.iter_mut().take(spec.base_modes) {
            *m = if spec.base_amplitude > 0.0 {
                rng.gen_range(-spec.base_amplitude..=spec.base_amplitude) as f32
            } else {
                0.0
            };
        }
        let x = plan.inverse(&coeffs)?;
        t.set_channel(c / spec.head_dim, c % spec.head_dim, &x);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dct;

    fn spec() -> SynthSpec {
        SynthSpec {
            num_layers: 2,
            kv_heads: 2,
            head_dim: 4,
            seq_len: 48,
            base_modes: 6,
            base_amplitude: 1.0,
            outliers_per_layer: 3,
            outlier_amplitude: 12.0,
            outlier_channel_fraction: 0.5,
            noise_sigma: 0.05,
            seed: 42,
            text_prefix: 4,
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let (a, ta) = generate(&spec()).unwrap();
        let (b, tb) = generate(&spec()).unwrap();
        assert_eq!(ta, tb);
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.keys.data(), lb.keys.data());
            assert_eq!(la.values.data(), lb.values.data());
        }
    }

    #[test]
    fn seeds_and_layers_draw_independently() {
        let (a, ta) = generate(&spec()).unwrap();
        let mut other = spec();
        other.seed = 43;
        let (b, tb) = generate(&other).unwrap();
        assert_ne!(a.layers()[0].keys.data(), b.layers()[0].keys.data());
        assert!(ta != tb || ta.planted != tb.planted);
        assert_ne!(
            a.layers()[0].keys.data(),
            a.layers()[1].keys.data(),
            "layers share a stream"
        );
    }

    #[test]
    fn truth_lists_sorted_unique_positions() {
        let (_, truth) = generate(&spec()).unwrap();
        assert_eq!(truth.planted.len(), 2);
        for planted in &truth.planted {
            assert_eq!(planted.len(), 3);
            assert!(planted.windows(2).all(|w| w[0] < w[1]));
            assert!(planted.iter().all(|&p| p < 48));
        }
    }

    #[test]
    fn token_tags_follow_the_text_prefix() {
        let (dump, _) = generate(&spec()).unwrap();
        let tags = dump.token_tags();
        assert!(tags[..4].iter().all(|&t| t == TokenTag::Text));
        assert!(tags[4..].iter().all(|&t| t == TokenTag::Vision));
    }

    #[test]
    fn clean_smooth_dump_has_no_energy_above_base_modes() {
        let mut s = spec();
        s.outliers_per_layer = 0;
        s.noise_sigma = 0.0;
        let (dump, truth) = generate(&s).unwrap();
        assert!(truth.planted.iter().all(Vec::is_empty));
        let layer = &dump.layers()[0];
        let mut channel = vec![0.0f32; s.seq_len];
        for h in 0..s.kv_heads {
            for d in 0..s.head_dim {
                layer.keys.copy_channel(h, d, &mut channel);
                let coeffs = dct(&channel).unwrap();
                let high: f64 = coeffs[s.base_modes..]
                    .iter()
                    .map(|&c| c as f64 * c as f64)
                    .sum();
                let total: f64 = coeffs.iter().map(|&c| c as f64 * c as f64).sum();
                assert!(high <= 1e-9 * total.max(1e-12), "high band leaked: {high}");
            }
        }
    }

    #[test]
    fn weak_spikes_are_rejected() {
        let mut s = spec();
        s.outlier_amplitude = 2.0;
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
        s.outliers_per_layer = 0;
        s.validate().unwrap();
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let json = r#"{
            "num_layers": 1, "kv_heads": 1, "head_dim": 2, "seq_len": 16,
            "base_modes": 3, "base_amplitude": 1.0,
            "outliers_per_layer": 1, "outlier_amplitude": 20.0,
            "noise_sigma": 0.1, "seed": 7
        }"#;
        let parsed: SynthSpec = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.outlier_channel_fraction, 0.25);
        assert_eq!(parsed.text_prefix, 0);
        parsed.validate().unwrap();

        let unknown = json.replace("\"seed\": 7", "\"seed\": 7, \"surprise\": 1");
        assert!(serde_json::from_str::<SynthSpec>(&unknown).is_err());
    }

    #[test]
    fn planted_positions_carry_visible_spikes() {
        let (dump, truth) = generate(&spec()).unwrap();
        // Row energy at planted positions must dwarf a typical row.
        let layer = &dump.layers()[0];
        let energy = |p: usize| -> f64 {
            let mut acc = 0.0;
            for h in 0..2 {
                for &x in layer.keys.row(h, p) {
                    acc += x as f64 * x as f64;
                }
                for &x in layer.values.row(h, p) {
                    acc += x as f64 * x as f64;
                }
            }
            acc
        };
        let planted = &truth.planted[0];
        let baseline: f64 = (0..48)
            .filter(|p| !planted.contains(p))
            .map(energy)
            .sum::<f64>()
            / (48 - planted.len()) as f64;
        for &p in planted {
            assert!(
                energy(p) > 4.0 * baseline,
                "planted row {p} not separated: {} vs {baseline}",
                energy(p)
            );
        }
    }
}
