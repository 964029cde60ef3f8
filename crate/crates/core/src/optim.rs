//! AdamW over sparse increments.
//!
//! The fine-tuned parameters are the sum of the frozen pre-trained values
//! and a sparse increment: only masked components carry optimizer state,
//! so moments shrink to the selected fraction. A plain dense AdamW lives
//! alongside as the full fine-tuning path and as the reference trajectory
//! that the sparse path must reproduce at rate 1.0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::mask::{MaskSelection, SiftError};
use crate::models::ParamSet;

/// AdamW hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter `(indices, values)` pairs representing the sparse delta
/// against the pre-trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIncrement {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl SparseIncrement {
    pub fn empty() -> Self {
        SparseIncrement {
            entries: BTreeMap::new(),
        }
    }

    /// Zero increment aligned to a mask's support.
    pub fn zeros_for(mask: &MaskSelection) -> Self {
        let entries = mask
            .iter()
            .map(|(name, idx)| (name.clone(), (idx.clone(), vec![0.0; idx.len()])))
            .collect();
        SparseIncrement { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, indices: Vec<usize>, values: Vec<f64>) {
        assert_eq!(indices.len(), values.len(), "indices and values align");
        self.entries.insert(name.into(), (indices, values));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .get(name)
            .map(|(i, v)| (i.as_slice(), v.as_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Vec<usize>, Vec<f64>))> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|(i, _)| i.len()).sum()
    }

    /// Grow the support to cover a mask's indices; fresh indices start at
    /// zero, existing values (including ones no longer masked) persist.
    pub fn extend_support(&mut self, mask: &MaskSelection) {
        for (name, idx) in mask.iter() {
            let (cur_idx, cur_vals) = self
                .entries
                .entry(name.clone())
                .or_insert_with(|| (Vec::new(), Vec::new()));
            let mut merged_idx = Vec::with_capacity(cur_idx.len() + idx.len());
            let mut merged_vals = Vec::with_capacity(cur_idx.len() + idx.len());
            let (mut a, mut b) = (0usize, 0usize);
            while a < cur_idx.len() || b < idx.len() {
                match (cur_idx.get(a), idx.get(b)) {
                    (Some(&ia), Some(&ib)) if ia == ib => {
                        merged_idx.push(ia);
                        merged_vals.push(cur_vals[a]);
                        a += 1;
                        b += 1;
                    }
                    (Some(&ia), Some(&ib)) if ia < ib => {
                        merged_idx.push(ia);
                        merged_vals.push(cur_vals[a]);
                        a += 1;
                    }
                    (Some(_), Some(&ib)) => {
                        merged_idx.push(ib);
                        merged_vals.push(0.0);
                        b += 1;
                    }
                    (Some(&ia), None) => {
                        merged_idx.push(ia);
                        merged_vals.push(cur_vals[a]);
                        a += 1;
                    }
                    (None, Some(&ib)) => {
                        merged_idx.push(ib);
                        merged_vals.push(0.0);
                        b += 1;
                    }
                    (None, None) => unreachable!(),
                }
            }
            *cur_idx = merged_idx;
            *cur_vals = merged_vals;
        }
    }
}

/// Per-selected-index AdamW moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct SparseOptimState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub hyper: AdamWParams,
}

impl SparseOptimState {
    pub fn new(mask: &MaskSelection, hyper: AdamWParams) -> Self {
        let m = mask
            .iter()
            .map(|(n, idx)| (n.clone(), vec![0.0; idx.len()]))
            .collect();
        let v = mask
            .iter()
            .map(|(n, idx)| (n.clone(), vec![0.0; idx.len()]))
            .collect();
        SparseOptimState {
            m,
            v,
            step: 0,
            hyper,
        }
    }

    /// Moment element count: first plus second moments over the support.
    pub fn state_elements(&self) -> usize {
        self.m.values().map(|v| v.len()).sum::<usize>() + self.v.values().map(|v| v.len()).sum::<usize>()
    }

    /// Re-align state to a new mask: moments of surviving indices carry
    /// over, departing indices are discarded, fresh indices start at zero.
    pub fn realign(&mut self, old_mask: &MaskSelection, new_mask: &MaskSelection) {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, new_idx) in new_mask.iter() {
            let mut nm = vec![0.0; new_idx.len()];
            let mut nv = vec![0.0; new_idx.len()];
            if let (Some(old_idx), Some(om), Some(ov)) = (
                old_mask.indices(name),
                self.m.get(name),
                self.v.get(name),
            ) {
                let lookup: BTreeMap<usize, usize> =
                    old_idx.iter().enumerate().map(|(j, &i)| (i, j)).collect();
                for (j, &i) in new_idx.iter().enumerate() {
                    if let Some(&oj) = lookup.get(&i) {
                        nm[j] = om[oj];
                        nv[j] = ov[oj];
                    }
                }
            }
            m.insert(name.clone(), nm);
            v.insert(name.clone(), nv);
        }
        self.m = m;
        self.v = v;
    }
}

/// Per-parameter deltas produced by one optimizer step, aligned to the
/// mask support; callers scatter them into live parameters.
pub type StepDeltas = BTreeMap<String, Vec<f64>>;

/// One AdamW step on the masked components.
///
/// Weight decay acts on the full effective value `x_pt + dx`, which keeps
/// the rate-1.0 trajectory identical to dense AdamW.
pub fn sparse_adamw_step(
    state: &mut SparseOptimState,
    increment: &mut SparseIncrement,
    base: &ParamSet,
    mask: &MaskSelection,
    sparse_grads: &BTreeMap<String, Vec<f64>>,
) -> Result<StepDeltas, SiftError> {
    for (name, g) in sparse_grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(SiftError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    let mut deltas = StepDeltas::new();
    for (name, indices) in mask.iter() {
        let g = sparse_grads
            .get(name)
            .ok_or_else(|| SiftError::UnknownParam(name.clone()))?;
        if g.len() != indices.len() {
            return Err(SiftError::Mismatch {
                name: name.clone(),
                detail: format!("{} gradient values for {} indices", g.len(), indices.len()),
            });
        }
        let base_tensor = base
            .get(name)
            .ok_or_else(|| SiftError::UnknownParam(name.clone()))?;
        let (inc_idx, inc_vals) = increment
            .entries
            .get_mut(name)
            .map(|(i, v)| (&*i, v))
            .ok_or_else(|| SiftError::UnknownParam(name.clone()))?;
        // Fast path: support equals the mask. After a re-selection the
        // support is a superset and mask indices are located within it.
        let aligned = inc_idx == indices;
        let m = state.m.get_mut(name).expect("state aligned to mask");
        let v = state.v.get_mut(name).expect("state aligned to mask");
        let mut d = vec![0.0; indices.len()];
        for (j, &flat) in indices.iter().enumerate() {
            let slot = if aligned {
                j
            } else {
                inc_idx.binary_search(&flat).map_err(|_| SiftError::Mismatch {
                    name: name.clone(),
                    detail: format!("mask index {flat} missing from increment support"),
                })?
            };
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let effective = base_tensor.data()[flat] + inc_vals[slot];
            d[j] = -h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * effective);
            inc_vals[slot] += d[j];
        }
        deltas.insert(name.clone(), d);
    }
    Ok(deltas)
}

/// Reference dense AdamW over named tensors; the full fine-tuning path.
#[derive(Debug, Clone)]
pub struct DenseAdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub hyper: AdamWParams,
}

impl DenseAdamW {
    pub fn new(hyper: AdamWParams) -> Self {
        DenseAdamW {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            hyper,
        }
    }

    /// One decoupled-weight-decay AdamW step applied in place.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), SiftError> {
        for (name, g) in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(SiftError::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);
        for (name, g) in grads {
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| SiftError::UnknownParam(name.clone()))?;
            if tensor.len() != g.len() {
                return Err(SiftError::Mismatch {
                    name: name.clone(),
                    detail: format!("{} gradient values for {} elements", g.len(), tensor.len()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = tensor.data_mut();
            for j in 0..g.len() {
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

/// Scatter-add the increment onto pre-trained parameters. Untouched
/// entries are bit-identical to the input.
pub fn merge_increment(base: &ParamSet, inc: &SparseIncrement) -> Result<ParamSet, SiftError> {
    let mut out = base.clone();
    for (name, (indices, values)) in inc.iter() {
        let tensor = out
            .get_mut(name)
            .ok_or_else(|| SiftError::UnknownParam(name.clone()))?;
        let data = tensor.data_mut();
        for (&i, &v) in indices.iter().zip(values) {
            if i >= data.len() {
                return Err(SiftError::Mismatch {
                    name: name.clone(),
                    detail: format!("increment index {i} out of bounds for {}", data.len()),
                });
            }
            data[i] += v;
        }
    }
    Ok(out)
}
