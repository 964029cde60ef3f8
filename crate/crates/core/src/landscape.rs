//! 1-D and 2-D loss-landscape scans along the segment from a random
//! initialization to a pre-adapted checkpoint.
//!
//! The first direction is the parameter difference itself; the second is
//! the per-component Gaussian rescaling of the first, which keeps the two
//! axes on comparable per-component scales. Grid points are independent
//! forward-only evaluations and run in parallel.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{evaluate, ModelConfig, ModelError, ParamSet};
use crate::tape::TapeError;
use crate::tasks::Batch;
use crate::tensor::{ElemType, Tensor};

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("parameter sets are not aligned: {0}")]
    Mismatch(String),
    #[error("direction is identically zero")]
    ZeroDirection,
    #[error("empty scan grid")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Forward-only loss of a parameter assignment; implementations must be
/// deterministic (no dropout, fixed eval set).
pub trait LossEval: Sync {
    fn loss(&self, params: &ParamSet) -> Result<f64, ModelError>;
}

/// Mean loss of a model over a fixed batch list.
pub struct ModelLossEval<'a> {
    pub config: &'a ModelConfig,
    pub batches: &'a [Batch],
    pub elem: ElemType,
}

impl LossEval for ModelLossEval<'_> {
    fn loss(&self, params: &ParamSet) -> Result<f64, ModelError> {
        evaluate(self.config, params, self.batches, self.elem).map(|m| m.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectionLabel {
    /// `theta1 - theta0`.
    Delta1,
    /// Per-component Gaussian rescaling of delta1.
    Delta2 { seed: u64 },
}

/// Per-parameter direction tensors aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionVector {
    pub values: ParamSet,
    pub label: DirectionLabel,
}

fn check_aligned(a: &ParamSet, b: &ParamSet) -> Result<(), LandscapeError> {
    let na: Vec<&String> = a.names().collect();
    let nb: Vec<&String> = b.names().collect();
    if na != nb {
        return Err(LandscapeError::Mismatch(format!(
            "name sets differ ({} vs {} tensors)",
            na.len(),
            nb.len()
        )));
    }
    for (name, t) in a.iter() {
        let other = b.get(name).expect("names already aligned");
        if t.shape() != other.shape() {
            return Err(LandscapeError::Mismatch(format!(
                "`{name}` has shape {:?} vs {:?}",
                t.shape(),
                other.shape()
            )));
        }
    }
    Ok(())
}

/// `theta1 - theta0`, the primary scan direction.
pub fn delta_between(theta0: &ParamSet, theta1: &ParamSet) -> Result<DirectionVector, LandscapeError> {
    check_aligned(theta0, theta1)?;
    let mut values = ParamSet::default();
    for (name, t0) in theta0.iter() {
        let t1 = theta1.get(name).unwrap();
        let data: Vec<f64> = t1.data().iter().zip(t0.data()).map(|(a, b)| a - b).collect();
        values.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data).unwrap());
    }
    Ok(DirectionVector {
        values,
        label: DirectionLabel::Delta1,
    })
}

/// `theta0 + alpha * (theta1 - theta0)` per tensor. `alpha == 0` returns
/// `theta0` bitwise.
pub fn interpolate_params(
    theta0: &ParamSet,
    theta1: &ParamSet,
    alpha: f64,
) -> Result<ParamSet, LandscapeError> {
    check_aligned(theta0, theta1)?;
    if alpha == 0.0 {
        return Ok(theta0.clone());
    }
    let mut out = ParamSet::default();
    for (name, t0) in theta0.iter() {
        let t1 = theta1.get(name).unwrap();
        let data: Vec<f64> = t0
            .data()
            .iter()
            .zip(t1.data())
            .map(|(a, b)| a + alpha * (b - a))
            .collect();
        out.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data).unwrap());
    }
    Ok(out)
}

/// Second scan direction: `delta2[i] = d[i] * delta1[i]` with `d[i]`
/// standard normal from the seeded generator, tensor by tensor in name
/// order.
pub fn gen_second_direction(
    delta1: &DirectionVector,
    seed: u64,
) -> Result<DirectionVector, LandscapeError> {
    if delta1
        .values
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    {
        return Err(LandscapeError::ZeroDirection);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = ParamSet::default();
    for (name, t) in delta1.values.iter() {
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * v)
            .collect();
        values.insert(name.clone(), Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    Ok(DirectionVector {
        values,
        label: DirectionLabel::Delta2 { seed },
    })
}

/// Evenly spaced grid, inclusive of both ends.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![lo];
    }
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| lo + i as f64 * step).collect()
}

/// Default alpha grid: 41 points on [-0.5, 1.5].
pub fn default_alpha_grid() -> Vec<f64> {
    linspace(-0.5, 1.5, 41)
}

/// Default beta grid: 41 points on [-1, 1].
pub fn default_beta_grid() -> Vec<f64> {
    linspace(-1.0, 1.0, 41)
}

/// Grid of interpolated losses. 2-D scans store losses row-major with the
/// beta index fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeScan {
    pub alphas: Vec<f64>,
    pub betas: Option<Vec<f64>>,
    pub losses: Vec<f64>,
    /// Flag per grid point: evaluation produced a non-finite loss.
    pub non_finite: Vec<bool>,
    /// Free-form provenance (eval set id, checkpoint ids, seeds).
    pub metadata: BTreeMap<String, String>,
}

fn eval_point(eval: &dyn LossEval, params: &ParamSet) -> Result<(f64, bool), LandscapeError> {
    match eval.loss(params) {
        Ok(v) => Ok((v, false)),
        Err(ModelError::Tape(TapeError::NonFiniteLoss(v))) => Ok((v, true)),
        Err(e) => Err(e.into()),
    }
}

/// Loss along `theta0 + alpha * (theta1 - theta0)`. Endpoints alpha 0/1
/// evaluate the checkpoints themselves, bitwise.
pub fn scan_1d(
    eval: &dyn LossEval,
    theta0: &ParamSet,
    theta1: &ParamSet,
    alpha_grid: &[f64],
) -> Result<LandscapeScan, LandscapeError> {
    if alpha_grid.is_empty() {
        return Err(LandscapeError::EmptyGrid);
    }
    check_aligned(theta0, theta1)?;
    let results: Result<Vec<(f64, bool)>, LandscapeError> = alpha_grid
        .par_iter()
        .map(|&alpha| {
            let params = if alpha == 0.0 {
                theta0.clone()
            } else if alpha == 1.0 {
                theta1.clone()
            } else {
                interpolate_params(theta0, theta1, alpha)?
            };
            eval_point(eval, &params)
        })
        .collect();
    let results = results?;
    Ok(LandscapeScan {
        alphas: alpha_grid.to_vec(),
        betas: None,
        losses: results.iter().map(|r| r.0).collect(),
        non_finite: results.iter().map(|r| r.1).collect(),
        metadata: BTreeMap::new(),
    })
}

/// Compose `theta0 + alpha * delta1 + beta * delta2`, skipping terms with
/// an exactly zero coefficient so the beta = 0 row reproduces the 1-D
/// arithmetic bit for bit.
pub fn compose_point(
    theta0: &ParamSet,
    delta1: &DirectionVector,
    delta2: &DirectionVector,
    alpha: f64,
    beta: f64,
) -> ParamSet {
    let mut out = ParamSet::default();
    for (name, t0) in theta0.iter() {
        let d1 = delta1.values.get(name).unwrap();
        let d2 = delta2.values.get(name).unwrap();
        let data: Vec<f64> = (0..t0.len())
            .map(|i| {
                let mut v = t0.data()[i];
                if alpha != 0.0 {
                    v += alpha * d1.data()[i];
                }
                if beta != 0.0 {
                    v += beta * d2.data()[i];
                }
                v
            })
            .collect();
        out.insert(name.clone(), Tensor::new(t0.shape().to_vec(), data).unwrap());
    }
    out
}

/// Loss surface over `theta0 + alpha * delta1 + beta * delta2`.
pub fn scan_2d(
    eval: &dyn LossEval,
    theta0: &ParamSet,
    delta1: &DirectionVector,
    delta2: &DirectionVector,
    alpha_grid: &[f64],
    beta_grid: &[f64],
) -> Result<LandscapeScan, LandscapeError> {
    if alpha_grid.is_empty() || beta_grid.is_empty() {
        return Err(LandscapeError::EmptyGrid);
    }
    check_aligned(theta0, &delta1.values)?;
    check_aligned(theta0, &delta2.values)?;
    let points: Vec<(f64, f64)> = alpha_grid
        .iter()
        .flat_map(|&a| beta_grid.iter().map(move |&b| (a, b)))
        .collect();
    let results: Result<Vec<(f64, bool)>, LandscapeError> = points
        .par_iter()
        .map(|&(alpha, beta)| {
            let params = compose_point(theta0, delta1, delta2, alpha, beta);
            eval_point(eval, &params)
        })
        .collect();
    let results = results?;
    Ok(LandscapeScan {
        alphas: alpha_grid.to_vec(),
        betas: Some(beta_grid.to_vec()),
        losses: results.iter().map(|r| r.0).collect(),
        non_finite: results.iter().map(|r| r.1).collect(),
        metadata: BTreeMap::new(),
    })
}
