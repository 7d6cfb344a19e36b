//! Shared per-channel spectral walk behind the layer-level operations.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spectral::{lowpass_at, DctPlan};
use crate::tensor::{LayerKv, Tensor3};

pub(crate) struct TensorAnalysis {
    pub base: Option<Tensor3>,
    pub high_energy: f64,
    pub total_energy: f64,
}

/// Transforms every (head, channel) sequence once, accumulating band
/// energies and, when `want_base` is set, the low-pass reconstruction.
///
/// Channels run in parallel but are reduced in index order, so results do
/// not depend on the thread count.
pub(crate) fn analyze_tensor(
    tensor: &Tensor3,
    plan: &DctPlan,
    keep: usize,
    want_base: bool,
    ctx: &str,
) -> Result<TensorAnalysis> {
    let heads = tensor.heads();
    let dim = tensor.dim();
    let seq = tensor.seq();
    debug_assert_eq!(seq, plan.signal_len());

    let per_channel: Vec<(Option<Vec<f32>>, f64, f64)> = (0..heads * dim)
        .into_par_iter()
        .map(|c| {
            let (head, channel) = (c / dim, c % dim);
            let mut x = vec![0.0f32; seq];
            tensor.copy_channel(head, channel, &mut x);
            if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("{ctx} head {head} channel {channel} position {pos}"),
                });
            }
            let coeffs = plan.forward(&x)?;
            let mut total = 0.0f64;
            let mut high = 0.0f64;
            for (m, &coeff) in coeffs.iter().enumerate() {
                let power = coeff as f64 * coeff as f64;
                total += power;
                if m >= keep {
                    high += power;
                }
            }
            let base = if want_base {
                Some(plan.inverse(&lowpass_at(&coeffs, keep))?)
            } else {
                None
            };
            Ok((base, high, total))
        })
        .collect::<Result<_>>()?;

    let mut high_energy = 0.0;
    let mut total_energy = 0.0;
    let mut base = if want_base {
        Some(Tensor3::zeros(heads, seq, dim))
    } else {
        None
    };
    for (c, (channel_base, high, total)) in per_channel.into_iter().enumerate() {
        high_energy += high;
        total_energy += total;
        if let (Some(out), Some(data)) = (base.as_mut(), channel_base) {
            out.set_channel(c / dim, c % dim, &data);
        }
    }
    Ok(TensorAnalysis {
        base,
        high_energy,
        total_energy,
    })
}

/// Squared-magnitude energy of each position, summed over heads, channels,
/// and both tensors. Accumulated sequentially so the result is independent
/// of thread count.
pub(crate) fn position_energy(layer: &LayerKv) -> Vec<f64> {
    let (heads, seq, dim) = (layer.keys.heads(), layer.keys.seq(), layer.keys.dim());
    let mut out = vec![0.0f64; seq];
    for tensor in [&layer.keys, &layer.values] {
        for h in 0..heads {
            for p in 0..seq {
                let row = tensor.row(h, p);
                let mut acc = 0.0f64;
                for d in 0..dim {
                    let x = row[d] as f64;
                    acc += x * x;
                }
                out[p] += acc;
            }
        }
    }
    out
}

/// Fraction of a layer's total energy captured by the retained positions.
/// A zero-energy layer retains everything there is, so the fraction is 1.
pub(crate) fn retained_energy_fraction(layer: &LayerKv, retained: &[usize]) -> f64 {
    let energy = position_energy(layer);
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    let kept: f64 = retained.iter().map(|&p| energy[p]).sum();
    kept / total
}
