//! Gradient quasi-sparsity diagnostics and subspace descent-bound checks.
//!
//! The central quantity is the energy fraction: how much of a gradient's
//! squared norm lives inside a set of components. A handful of components
//! carrying almost all of the energy is what makes a tiny fixed update
//! mask viable, and the bound verified here certifies it: restricted to
//! the tau steepest coordinates, the best subspace direction has cosine
//! at most `-1/sqrt(1 + eps(n - tau))` against the gradient, with
//! `eps = g_(tau+1)^2 / sum_{j<=tau} g_(j)^2` over the sorted magnitudes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{accumulate_dense_grads, MaskSelection, SiftError};
use crate::models::{ModelConfig, ParamSet};
use crate::tasks::Batch;
use crate::tensor::ElemType;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("gradient is identically zero")]
    ZeroGradient,
    #[error("tau {tau} out of range [1, {max}]")]
    TauOutOfRange { tau: usize, max: usize },
    #[error("top-{tau} energy is zero")]
    ZeroTopEnergy { tau: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("histogram needs at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("fraction {0} out of range (0, 1]")]
    FractionOutOfRange(f64),
    #[error("empty batch stream")]
    EmptyStream,
    #[error(transparent)]
    Sift(#[from] SiftError),
}

/// Cumulative top-fraction curves of a gradient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub fractions: Vec<f64>,
    /// Squared-magnitude share of the top `ceil(f * n)` components.
    pub energy_fraction: Vec<f64>,
    /// Absolute-magnitude share of the same components.
    pub abs_fraction: Vec<f64>,
    pub n: usize,
}

fn sorted_abs_desc(g: &[f64]) -> Vec<f64> {
    let mut mags: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    mags
}

/// Top-fraction energy and absolute-sum curves, accumulated in 64-bit.
pub fn sparsity_profile(g: &[f64], fractions: &[f64]) -> Result<SparsityProfile, AnalysisError> {
    if g.is_empty() || g.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::ZeroGradient);
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(AnalysisError::FractionOutOfRange(f));
        }
    }
    let n = g.len();
    let mags = sorted_abs_desc(g);
    let cum_energy: Vec<f64> = mags
        .iter()
        .scan(0.0, |acc, &m| {
            *acc += m * m;
            Some(*acc)
        })
        .collect();
    let cum_abs: Vec<f64> = mags
        .iter()
        .scan(0.0, |acc, &m| {
            *acc += m;
            Some(*acc)
        })
        .collect();
    let total_energy = cum_energy[n - 1];
    let total_abs = cum_abs[n - 1];
    let mut energy_fraction = Vec::with_capacity(fractions.len());
    let mut abs_fraction = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let k = ((f * n as f64).ceil() as usize).clamp(1, n);
        energy_fraction.push(cum_energy[k - 1] / total_energy);
        abs_fraction.push(cum_abs[k - 1] / total_abs);
    }
    Ok(SparsityProfile {
        fractions: fractions.to_vec(),
        energy_fraction,
        abs_fraction,
        n,
    })
}

/// Tight epsilon for the tau-steepest-coordinates condition:
/// `g_(tau+1)^2 = eps * sum_{j<=tau} g_(j)^2` over sorted magnitudes.
pub fn epsilon_for_tau(g: &[f64], tau: usize) -> Result<f64, AnalysisError> {
    let n = g.len();
    if tau < 1 || tau >= n {
        return Err(AnalysisError::TauOutOfRange {
            tau,
            max: n.saturating_sub(1),
        });
    }
    let mags = sorted_abs_desc(g);
    let top_energy: f64 = mags[..tau].iter().map(|m| m * m).sum();
    if top_energy == 0.0 {
        return Err(AnalysisError::ZeroTopEnergy { tau });
    }
    Ok(mags[tau] * mags[tau] / top_energy)
}

/// Exact minimizer of the cosine between a coordinate-subspace direction
/// and the gradient: `-|P_S g| / |g|`, attained at `d = -P_S g`.
pub fn min_subspace_cosine(g: &[f64], mask_indices: &[usize]) -> Result<f64, AnalysisError> {
    if mask_indices.is_empty() {
        return Err(AnalysisError::EmptyMask);
    }
    let total: f64 = g.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(AnalysisError::ZeroGradient);
    }
    let masked: f64 = mask_indices.iter().map(|&i| g[i] * g[i]).sum();
    Ok(-(masked.sqrt() / total.sqrt()))
}

/// Indices of the tau largest-magnitude components, ties toward the
/// lower index, ascending.
pub fn top_tau_indices(g: &[f64], tau: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then_with(|| a.cmp(&b)));
    let mut out: Vec<usize> = order[..tau].to_vec();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentBoundReport {
    pub tau: usize,
    pub n: usize,
    pub epsilon: f64,
    pub cosine_min: f64,
    /// `-1/sqrt(1 + eps(n - tau))`; the certified ceiling on the cosine.
    pub bound: f64,
    /// `-tau/n`, the sufficiency threshold; reported, not asserted.
    pub tau_over_n_bound: f64,
    pub holds: bool,
}

const BOUND_SLACK: f64 = 1e-12;

/// Build the top-tau mask, compute the exact minimum cosine and the
/// epsilon bound, and check the inequality.
pub fn verify_descent_bound(g: &[f64], tau: usize) -> Result<DescentBoundReport, AnalysisError> {
    let n = g.len();
    if tau < 1 || tau >= n {
        return Err(AnalysisError::TauOutOfRange {
            tau,
            max: n.saturating_sub(1),
        });
    }
    let mask = top_tau_indices(g, tau);
    let cosine_min = min_subspace_cosine(g, &mask)?;
    let epsilon = epsilon_for_tau(g, tau)?;
    let bound = -1.0 / (1.0 + epsilon * (n - tau) as f64).sqrt();
    Ok(DescentBoundReport {
        tau,
        n,
        epsilon,
        cosine_min,
        bound,
        tau_over_n_bound: -(tau as f64) / n as f64,
        holds: cosine_min <= bound + BOUND_SLACK,
    })
}

/// How much of one batch's gradient energy the fixed first-batch mask
/// captures, against that batch's own top-k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureSample {
    pub own_topk_fraction: f64,
    pub fixed_mask_fraction: f64,
}

/// Pooled capture fractions of one gradient snapshot under a fixed mask.
/// `own` uses the snapshot's own top-k (same total budget); by top-k
/// optimality `fixed <= own` always.
pub fn capture_fractions(
    grads: &BTreeMap<String, Vec<f64>>,
    mask: &MaskSelection,
) -> Result<CaptureSample, AnalysisError> {
    let mut total = 0.0;
    let mut fixed = 0.0;
    let mut pooled: Vec<f64> = Vec::new();
    for (name, g) in grads {
        total += g.iter().map(|v| v * v).sum::<f64>();
        pooled.extend(g.iter().map(|v| v.abs()));
        if let Some(idx) = mask.indices(name) {
            fixed += idx.iter().map(|&i| g[i] * g[i]).sum::<f64>();
        }
    }
    if total == 0.0 {
        return Err(AnalysisError::ZeroGradient);
    }
    let k = mask.total_selected().min(pooled.len());
    if k == 0 {
        return Err(AnalysisError::EmptyMask);
    }
    pooled.sort_by(|a, b| b.total_cmp(a));
    let own: f64 = pooled[..k].iter().map(|m| m * m).sum();
    Ok(CaptureSample {
        own_topk_fraction: own / total,
        fixed_mask_fraction: fixed / total,
    })
}

/// Per-batch capture series over `k_batches` batches: each batch's own
/// top-k energy share next to the share inside the fixed mask.
pub fn mask_capture_series(
    config: &ModelConfig,
    params: &ParamSet,
    mask_first: &MaskSelection,
    batches: &[Batch],
    k_batches: usize,
    elem: ElemType,
) -> Result<Vec<CaptureSample>, AnalysisError> {
    if batches.is_empty() || k_batches == 0 {
        return Err(AnalysisError::EmptyStream);
    }
    let names: Vec<String> = mask_first.names().cloned().collect();
    let used = k_batches.min(batches.len());
    let mut out = Vec::with_capacity(used);
    for batch in &batches[..used] {
        let grads = accumulate_dense_grads(
            config,
            params,
            &names,
            std::slice::from_ref(batch),
            elem,
        )?;
        out.push(capture_fractions(&grads, mask_first)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub log_scale: bool,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Histogram of a gradient vector. With `log_scale` the binned quantity is
/// `log10|g|`; exact zeros land in the lowest bin. Interior bins are
/// half-open, the upper edge of the last bin is closed.
pub fn grad_histogram(
    g: &[f64],
    bins: usize,
    log_scale: bool,
) -> Result<GradHistogram, AnalysisError> {
    if bins < 2 {
        return Err(AnalysisError::TooFewBins(bins));
    }
    if g.is_empty() {
        return Err(AnalysisError::ZeroGradient);
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let std = (g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let min = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let binned: Vec<f64> = if log_scale {
        g.iter().map(|&v| v.abs().log10()).collect()
    } else {
        g.to_vec()
    };
    let lo = binned.iter().cloned().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
    let hi = binned.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo, lo + 1.0)
    } else {
        (0.0, 1.0)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in &binned {
        let idx = if !v.is_finite() {
            0 // log10 of an exact zero
        } else {
            (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
        };
        counts[idx] += 1;
    }
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(GradHistogram {
        edges,
        counts,
        log_scale,
        min,
        max,
        mean,
        std,
    })
}
