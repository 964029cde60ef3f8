//! Training loop wiring the tape's gradient hooks into the sparse
//! optimizer: register sparse parameters, capture each dense gradient in
//! a hook, gather the masked components, step AdamW on the sparse state,
//! and fold the update back into the live parameters.
//!
//! Four methods share the loop: `full` (dense AdamW on everything),
//! `sift` (calibrated mask + dense classifier head), `random` (seeded
//! mask at the same budget), and `head-only`.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{
    calibrate_mask, gather_sparse_grad, memory_report, random_mask, select_from_gradients,
    MaskGranularity, MaskSelection, MemoryReport, SiftError, SparseGradAccumulator,
};
use crate::models::{
    evaluate, forward_loss, maskable_names, select_trainable, ModelBinding, ModelConfig,
    ModelError, ModuleFilter, ParamSet,
};
use crate::optim::{sparse_adamw_step, AdamWParams, DenseAdamW, SparseIncrement, SparseOptimState};
use crate::tape::{Tape, TapeError};
use crate::tasks::{BatchStream, Dataset, Split, TaskError};
use crate::tensor::ElemType;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("module filter {0} selects no maskable tensors for this model")]
    EmptyFilter(ModuleFilter),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sift(#[from] SiftError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    Full,
    Sift,
    Random,
    HeadOnly,
}

impl std::str::FromStr for TrainMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(TrainMethod::Full),
            "sift" => Ok(TrainMethod::Sift),
            "random" => Ok(TrainMethod::Random),
            "head-only" => Ok(TrainMethod::HeadOnly),
            other => Err(format!("unknown train method `{other}`")),
        }
    }
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TrainMethod::Full => "full",
            TrainMethod::Sift => "sift",
            TrainMethod::Random => "random",
            TrainMethod::HeadOnly => "head-only",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear-decay" => Ok(LrSchedule::LinearDecay),
            other => Err(format!("unknown lr schedule `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub method: TrainMethod,
    pub filter: ModuleFilter,
    pub epochs: usize,
    pub batch_size: usize,
    pub order_seed: u64,
    pub hyper: AdamWParams,
    pub schedule: LrSchedule,
    pub rate: f64,
    pub granularity: MaskGranularity,
    pub calibration_batches: usize,
    pub mask_seed: u64,
    /// Steps between mask re-selections; 0 keeps the first mask for the
    /// whole run.
    pub reselect_interval: usize,
    pub micro_batches: usize,
    pub elem: ElemType,
    /// Snapshot the full parameter set after every optimizer step
    /// (trajectory comparisons on small models only).
    pub track_step_params: bool,
}

impl TrainSettings {
    pub fn new(method: TrainMethod, filter: ModuleFilter) -> Self {
        TrainSettings {
            method,
            filter,
            epochs: 5,
            batch_size: 32,
            order_seed: 7,
            hyper: AdamWParams::default(),
            schedule: LrSchedule::Constant,
            rate: 0.008,
            granularity: MaskGranularity::PerTensor,
            calibration_batches: 1,
            mask_seed: 17,
            reselect_interval: 0,
            micro_batches: 1,
            elem: ElemType::F64,
            track_step_params: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

pub struct TrainOutcome {
    /// Final effective parameters (pre-trained + increment + dense-trained
    /// tensors), exported from the live tape.
    pub params: ParamSet,
    /// Sparse delta over the masked tensors; `None` for full / head-only.
    pub increment: Option<SparseIncrement>,
    pub mask: Option<MaskSelection>,
    pub memory: Option<MemoryReport>,
    /// The initial parameters with dense-trained tensors replaced by their
    /// final values; merging the increment into this reproduces `params`.
    pub merge_base: ParamSet,
    pub metrics: Vec<EpochMetrics>,
    pub steps: u64,
    /// True when a non-finite loss or gradient halted the run early;
    /// artifacts then cover the completed prefix.
    pub diverged: bool,
    pub step_params: Vec<ParamSet>,
}

fn is_divergence(err: &TrainError) -> bool {
    matches!(
        err,
        TrainError::Model(ModelError::Tape(TapeError::NonFiniteLoss(_)))
            | TrainError::Sift(SiftError::NonFiniteGradient { .. })
    )
}

/// Train `init` on one split and evaluate per epoch on another.
pub fn run_training(
    config: &ModelConfig,
    init: &ParamSet,
    dataset: &Dataset,
    train_split: Split,
    eval_split: Split,
    settings: &TrainSettings,
) -> Result<TrainOutcome, TrainError> {
    let stream = BatchStream::new(dataset, train_split, settings.batch_size, settings.order_seed)?;
    let eval_batches =
        BatchStream::new(dataset, eval_split, settings.batch_size, settings.order_seed)?.epoch(0);

    // Partition trainable tensors into masked and dense sets.
    let head_names = select_trainable(init, ModuleFilter::HeadOnly);
    let (masked_names, dense_names, mut mask) = match settings.method {
        TrainMethod::Full => (Vec::new(), select_trainable(init, ModuleFilter::All), None),
        TrainMethod::HeadOnly => (Vec::new(), head_names, None),
        TrainMethod::Sift | TrainMethod::Random => {
            let maskable = maskable_names(init, settings.filter);
            if maskable.is_empty() {
                return Err(TrainError::EmptyFilter(settings.filter));
            }
            let mask = if settings.method == TrainMethod::Sift {
                let calib = stream.epoch(0);
                calibrate_mask(
                    config,
                    init,
                    &maskable,
                    &calib,
                    settings.rate,
                    settings.calibration_batches,
                    settings.granularity,
                    settings.elem,
                )?
            } else {
                let sizes: Vec<(String, usize)> = maskable
                    .iter()
                    .map(|n| (n.clone(), init.get(n).unwrap().len()))
                    .collect();
                random_mask(&sizes, settings.rate, settings.mask_seed)?
            };
            (maskable, head_names, Some(mask))
        }
    };
    let memory = mask
        .as_ref()
        .map(|m| memory_report(m, init))
        .transpose()?;

    let trainable: BTreeSet<String> = masked_names
        .iter()
        .chain(dense_names.iter())
        .cloned()
        .collect();
    let mut tape = Tape::new(settings.elem);
    let binding = ModelBinding::bind(&mut tape, init, &trainable)?;

    // Shared mutable state between hooks and the step loop.
    let mut lengths: BTreeMap<String, usize> = BTreeMap::new();
    let mut index_cells: BTreeMap<String, Rc<RefCell<Vec<usize>>>> = BTreeMap::new();
    if let Some(m) = &mask {
        for name in &masked_names {
            let idx = m.indices(name).expect("mask covers maskable names").to_vec();
            lengths.insert(name.clone(), idx.len());
            index_cells.insert(name.clone(), Rc::new(RefCell::new(idx)));
        }
    }
    for name in &dense_names {
        lengths.insert(name.clone(), init.get(name).unwrap().len());
    }
    let acc = Rc::new(RefCell::new(SparseGradAccumulator::with_lengths(&lengths)));
    let hook_error: Rc<RefCell<Option<SiftError>>> = Rc::new(RefCell::new(None));

    for (name, id) in binding.trainable() {
        let sink = Rc::clone(&acc);
        let err_cell = Rc::clone(&hook_error);
        let name_owned = name.to_string();
        if let Some(cell) = index_cells.get(name) {
            let indices = Rc::clone(cell);
            tape.register_grad_hook(id, move |receipt| {
                let gathered = match gather_sparse_grad(receipt.dense_grad, &indices.borrow()) {
                    Ok(g) => g,
                    Err(e) => {
                        *err_cell.borrow_mut() = Some(e);
                        return;
                    }
                };
                if let Err(e) = sink.borrow_mut().add(&name_owned, &gathered) {
                    *err_cell.borrow_mut() = Some(e);
                }
            })
            .map_err(ModelError::from)?;
        } else {
            tape.register_grad_hook(id, move |receipt| {
                if let Err(e) = sink.borrow_mut().add(&name_owned, receipt.dense_grad) {
                    *err_cell.borrow_mut() = Some(e);
                }
            })
            .map_err(ModelError::from)?;
        }
    }

    let base = init.clone();
    let mut dense_live = ParamSet::default();
    for name in &dense_names {
        dense_live.insert(name.clone(), init.get(name).unwrap().clone());
    }
    let mut increment = mask.as_ref().map(SparseIncrement::zeros_for);
    let mut state = mask
        .as_ref()
        .map(|m| SparseOptimState::new(m, settings.hyper));
    let mut dense_opt = DenseAdamW::new(settings.hyper);

    let micro = settings.micro_batches.max(1);
    let steps_per_epoch = stream.num_batches().div_ceil(micro);
    let total_steps = (settings.epochs * steps_per_epoch) as u64;
    let mut steps = 0u64;
    let mut metrics = Vec::with_capacity(settings.epochs);
    let mut step_params = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 0..settings.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        let batches = stream.epoch(epoch as u64);
        for group in batches.chunks(micro) {
            for batch in group {
                let loss = match forward_loss(&mut tape, &binding, config, batch) {
                    Ok(l) => l,
                    Err(e) => {
                        let e = TrainError::from(e);
                        if is_divergence(&e) {
                            diverged = true;
                            break 'epochs;
                        }
                        return Err(e);
                    }
                };
                epoch_loss += tape.data(loss)[0];
                epoch_batches += 1;
                tape.backward(loss).map_err(ModelError::from)?;
                tape.reset();
                acc.borrow_mut().end_micro_batch();
                if let Some(e) = hook_error.borrow_mut().take() {
                    return Err(e.into());
                }
            }

            // One optimizer step per micro-batch group.
            let mean = acc.borrow_mut().take_mean();
            let mut sparse_grads = BTreeMap::new();
            let mut dense_grads = BTreeMap::new();
            for (name, g) in mean {
                if index_cells.contains_key(&name) {
                    sparse_grads.insert(name, g);
                } else {
                    dense_grads.insert(name, g);
                }
            }
            let lr_t = match settings.schedule {
                LrSchedule::Constant => settings.hyper.lr,
                LrSchedule::LinearDecay => {
                    settings.hyper.lr * (1.0 - steps as f64 / total_steps.max(1) as f64)
                }
            };
            if let (Some(state), Some(increment), Some(mask_ref)) =
                (state.as_mut(), increment.as_mut(), mask.as_ref())
            {
                state.hyper.lr = lr_t;
                let deltas = match sparse_adamw_step(state, increment, &base, mask_ref, &sparse_grads)
                {
                    Ok(d) => d,
                    Err(e) => {
                        let e = TrainError::from(e);
                        if is_divergence(&e) {
                            diverged = true;
                            break 'epochs;
                        }
                        return Err(e);
                    }
                };
                for (name, d) in &deltas {
                    let id = binding.id(name)?;
                    tape.apply_delta(id, mask_ref.indices(name).unwrap(), d);
                }
            }
            if !dense_grads.is_empty() {
                dense_opt.hyper.lr = lr_t;
                match dense_opt.step(&mut dense_live, &dense_grads) {
                    Ok(()) => {}
                    Err(e) => {
                        let e = TrainError::from(e);
                        if is_divergence(&e) {
                            diverged = true;
                            break 'epochs;
                        }
                        return Err(e);
                    }
                }
                for name in &dense_names {
                    let id = binding.id(name)?;
                    tape.set_data(id, dense_live.get(name).unwrap().data())
                        .map_err(ModelError::from)?;
                }
            }
            steps += 1;
            if settings.track_step_params {
                step_params.push(binding.export(&tape));
            }

            // Optional periodic mask re-selection from the current model's
            // gradient on the current batch group.
            if settings.reselect_interval > 0
                && steps % settings.reselect_interval as u64 == 0
                && steps < total_steps
            {
                let current = binding.export(&tape);
                let grads = crate::mask::accumulate_dense_grads(
                    config,
                    &current,
                    &masked_names,
                    group,
                    settings.elem,
                )?;
                let new_mask = select_from_gradients(
                    &grads,
                    settings.rate,
                    settings.granularity,
                    group.len(),
                )?;
                if let (Some(state), Some(increment), Some(mask_slot)) =
                    (state.as_mut(), increment.as_mut(), mask.as_mut())
                {
                    state.realign(mask_slot, &new_mask);
                    increment.extend_support(&new_mask);
                    for (name, idx) in new_mask.iter() {
                        if let Some(cell) = index_cells.get(name) {
                            *cell.borrow_mut() = idx.clone();
                        }
                        lengths.insert(name.clone(), idx.len());
                    }
                    *acc.borrow_mut() = SparseGradAccumulator::with_lengths(&lengths);
                    *mask_slot = new_mask;
                }
            }
        }

        let exported = binding.export(&tape);
        let eval = evaluate(config, &exported, &eval_batches, settings.elem)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / epoch_batches.max(1) as f64,
            eval_loss: eval.loss,
            eval_accuracy: eval.accuracy,
        });
    }

    let params = binding.export(&tape);
    let mut merge_base = init.clone();
    for (name, tensor) in dense_live.iter() {
        merge_base.insert(name.clone(), tensor.clone());
    }
    Ok(TrainOutcome {
        params,
        increment,
        mask,
        memory,
        merge_base,
        metrics,
        steps,
        diverged,
        step_params,
    })
}
