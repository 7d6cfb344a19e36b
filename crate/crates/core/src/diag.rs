//! Spectrum diagnostic: where a dump's energy sits along the frequency axis.
//!
//! Powers are averaged over channels rather than summed so numbers are
//! comparable across dumps with different head counts and widths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::KvDump;
use crate::error::{Error, Result};
use crate::spectral::{power_spectrum, DctPlan};
use crate::tensor::Tensor3;

/// Per-frequency mean power of one head's channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSpectrum {
    pub head: usize,
    pub k_power: Vec<f64>,
    pub v_power: Vec<f64>,
}

/// Per-frequency mean power of one layer, optionally split by head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer_index: usize,
    /// `k_power[m]` is the power of frequency mode `m`, averaged over every
    /// key channel in the layer.
    pub k_power: Vec<f64>,
    pub v_power: Vec<f64>,
    pub heads: Option<Vec<HeadSpectrum>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub seq_len: usize,
    pub layers: Vec<LayerSpectrum>,
}

/// Computes mean power spectra for one layer or for all of them.
pub fn spectrum_summary(
    dump: &KvDump,
    layer: Option<usize>,
    per_head: bool,
) -> Result<SpectrumSummary> {
    dump.validate_finite()?;
    let meta = dump.meta();
    if let Some(l) = layer {
        if l >= meta.num_layers {
            return Err(Error::IndexOutOfRange {
                index: l,
                len: meta.num_layers,
                what: "layer",
            });
        }
    }
    let plan = DctPlan::new(meta.seq_len)?;
    let wanted: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => (0..meta.num_layers).collect(),
    };
    let layers = wanted
        .par_iter()
        .map(|&l| {
            let kv = dump.layer(l)?;
            let k_heads = tensor_head_spectra(&kv.keys, &plan)?;
            let v_heads = tensor_head_spectra(&kv.values, &plan)?;
            let k_power = mean_bins(&k_heads);
            let v_power = mean_bins(&v_heads);
            let heads = per_head.then(|| {
                k_heads
                    .into_iter()
                    .zip(v_heads)
                    .enumerate()
                    .map(|(h, (k, v))| HeadSpectrum {
                        head: h,
                        k_power: k,
                        v_power: v,
                    })
                    .collect()
            });
            Ok(LayerSpectrum {
                layer_index: l,
                k_power,
                v_power,
                heads,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpectrumSummary {
        seq_len: meta.seq_len,
        layers,
    })
}

/// Mean power per frequency bin within each head, channels accumulated in
/// index order.
fn tensor_head_spectra(tensor: &Tensor3, plan: &DctPlan) -> Result<Vec<Vec<f64>>> {
    let (heads, seq, dim) = (tensor.heads(), tensor.seq(), tensor.dim());
    let mut out = Vec::with_capacity(heads);
    let mut channel = vec![0.0f32; seq];
    for h in 0..heads {
        let mut bins = vec![0.0f64; seq];
        for d in 0..dim {
            tensor.copy_channel(h, d, &mut channel);
            let coeffs = plan.forward(&channel)?;
            for (b, p) in bins.iter_mut().zip(power_spectrum(&coeffs)) {
                *b += p;
            }
        }
        for b in &mut bins {
            *b /= dim as f64;
        }
        out.push(bins);
    }
    Ok(out)
}

/// Mean over heads, bin by bin.
fn mean_bins(heads: &[Vec<f64>]) -> Vec<f64> {
    let bins = heads[0].len();
    let mut out = vec![0.0f64; bins];
    for head in heads {
        for (o, b) in out.iter_mut().zip(head) {
            *o += b;
        }
    }
    for o in &mut out {
        *o /= heads.len() as f64;
    }
    out
}
