//! High-frequency energy ratios per layer and integer budget allocation.

use serde::{Deserialize, Serialize};

use crate::analysis::analyze_tensor;
use crate::error::{Error, Result};
use crate::spectral::{cutoff, DctPlan};
use crate::tensor::LayerKv;

/// Share of spectral energy above the low-pass cutoff, per tensor and
/// combined. `r = r_k + r_v` lies in [0, 2]; zero-energy tensors score 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerEnergyRatio {
    pub layer_index: usize,
    pub r_k: f64,
    pub r_v: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationMode {
    /// Layer quotas proportional to outlier-energy ratios.
    Dynamic,
    /// Equal weight for every layer.
    Uniform,
}

impl AllocationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocationMode::Dynamic => "dynamic",
            AllocationMode::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(AllocationMode::Dynamic),
            "uniform" => Ok(AllocationMode::Uniform),
            _ => Err(Error::InvalidConfig(format!(
                "unknown allocation mode {s:?}; expected dynamic or uniform"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetAllocation {
    pub mode: AllocationMode,
    pub global_ratio: f64,
    pub total_budget: usize,
    pub quotas: Vec<usize>,
}

/// Measures how much key/value spectral energy a layer holds above the
/// cutoff for `gamma`. Power spectra are summed per head and channel.
pub fn layer_energy_ratio(layer: &LayerKv, gamma: f64) -> Result<LayerEnergyRatio> {
    let n = layer.keys.seq();
    let keep = cutoff(gamma, n)?;
    let plan = DctPlan::new(n)?;
    let keys = analyze_tensor(
        &layer.keys,
        &plan,
        keep,
        false,
        &format!("layer {} keys", layer.layer_index),
    )?;
    let values = analyze_tensor(
        &layer.values,
        &plan,
        keep,
        false,
        &format!("layer {} values", layer.layer_index),
    )?;
    Ok(ratio_from_energies(
        layer.layer_index,
        keys.high_energy,
        keys.total_energy,
        values.high_energy,
        values.total_energy,
    ))
}

pub(crate) fn ratio_from_energies(
    layer_index: usize,
    k_high: f64,
    k_total: f64,
    v_high: f64,
    v_total: f64,
) -> LayerEnergyRatio {
    let frac = |high: f64, total: f64| if total > 0.0 { high / total } else { 0.0 };
    let r_k = frac(k_high, k_total);
    let r_v = frac(v_high, v_total);
    LayerEnergyRatio {
        layer_index,
        r_k,
        r_v,
        r: r_k + r_v,
    }
}

/// Splits `round(rho * total positions)` retention slots across layers.
///
/// Every layer first receives its floor; the remainder is spread by
/// largest-remainder rounding over the layer weights (energy ratios in
/// dynamic mode, equal otherwise). Layers whose share would exceed their
/// length are pinned there and the rest is re-spread, which ends because
/// each pass pins at least one layer.
pub fn allocate(
    ratios: &[LayerEnergyRatio],
    rho: f64,
    lens: &[usize],
    floors: &[usize],
    mode: AllocationMode,
) -> Result<BudgetAllocation> {
    if !rho.is_finite() || !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidRho(rho));
    }
    let layers = lens.len();
    if layers == 0 {
        return Err(Error::Empty("layer list"));
    }
    if floors.len() != layers {
        return Err(Error::Shape {
            context: format!("{} floors for {layers} layers", floors.len()),
        });
    }
    for (i, (&floor, &len)) in floors.iter().zip(lens).enumerate() {
        if len == 0 {
            return Err(Error::Empty("layer length"));
        }
        if floor > len {
            return Err(Error::InvalidFloor {
                layer: i,
                floor,
                len,
            });
        }
    }

    let weights: Vec<f64> = match mode {
        AllocationMode::Uniform => vec![1.0; layers],
        AllocationMode::Dynamic => {
            if ratios.len() != layers {
                return Err(Error::Shape {
                    context: format!("{} energy ratios for {layers} layers", ratios.len()),
                });
            }
            for ratio in ratios {
                if !ratio.r.is_finite() || ratio.r < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "energy ratio for layer {} is {}",
                        ratio.layer_index, ratio.r
                    )));
                }
            }
            let raw: Vec<f64> = ratios.iter().map(|r| r.r).collect();
            if raw.iter().sum::<f64>() == 0.0 {
                vec![1.0; layers]
            } else {
                raw
            }
        }
    };

    let total_positions: usize = lens.iter().sum();
    let total_budget = (rho * total_positions as f64).round() as usize;
    let floor_sum: usize = floors.iter().sum();
    if total_budget < floor_sum {
        return Err(Error::InfeasibleBudget {
            floors: floor_sum,
            budget: total_budget,
        });
    }

    let mut quotas = floors.to_vec();
    let mut remaining = total_budget - floor_sum;
    let mut active: Vec<usize> = (0..layers).filter(|&i| quotas[i] < lens[i]).collect();

    while remaining > 0 {
        // remaining <= sum of active headroom, so the adds of one pass can
        // never all overflow their layers.
        assert!(!active.is_empty(), "budget left with no unpinned layers");
        let pass_weights: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
        let adds = largest_remainder(remaining, &pass_weights);
        let capped: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|&(slot, &i)| quotas[i] + adds[slot] > lens[i])
            .map(|(_, &i)| i)
            .collect();
        if capped.is_empty() {
            for (slot, &i) in active.iter().enumerate() {
                quotas[i] += adds[slot];
            }
            remaining = 0;
        } else {
            for &i in &capped {
                remaining -= lens[i] - quotas[i];
                quotas[i] = lens[i];
            }
            active.retain(|i| !capped.contains(i));
        }
    }

    Ok(BudgetAllocation {
        mode,
        global_ratio: rho,
        total_budget,
        quotas,
    })
}

/// Integer shares of `total` proportional to `weights`, summing exactly to
/// `total`. Leftover units go to the largest fractional remainders; ties
/// fall to the lower slot.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let ideals: Vec<f64> = weights
        .iter()
        .map(|&w| {
            if wsum > 0.0 {
                total as f64 * w / wsum
            } else {
                total as f64 / weights.len() as f64
            }
        })
        .collect();
    let mut out: Vec<usize> = ideals.iter().map(|&v| v.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - out[a] as f64;
        let rb = ideals[b] - out[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}
