//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! The tape owns every tensor buffer. Trainable parameters are persistent
//! leaves that survive [`Tape::reset`]; batch inputs and intermediates are
//! transient. Backward walks the recorded nodes once in reverse order,
//! accumulating gradients slot by slot.
//!
//! Gradient hooks are the memory-saving contract: a parameter with a
//! registered hook receives its dense gradient exactly once per backward
//! pass, through a short-lived view, and the dense buffer is dropped the
//! moment the hook returns. Parameters without hooks retain their dense
//! gradient until the next reset. An instrumented counter tracks how many
//! dense parameter-gradient buffers are live at once so the contract is
//! testable rather than aspirational.

use std::collections::HashMap;

use thiserror::Error;

use crate::tensor::{is_suffix_broadcast, numel, ElemType, Tensor};

/// Sentinel target value: rows carrying it are excluded from the
/// cross-entropy mean.
pub const IGNORE_TARGET: u32 = u32::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Opaque handle to a tensor registered on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("loss is non-finite ({0})")]
    NonFiniteLoss(f64),
    #[error("loss tensor has {0} elements, expected a scalar")]
    NonScalarLoss(usize),
    #[error("loss tensor is not an operation output of this tape")]
    LossNotNodeOutput,
    #[error("backward called twice without a re-forward")]
    BackwardWithoutForward,
    #[error("unknown tensor id {0}")]
    UnknownTensor(usize),
    #[error("tensor {0} is not a trainable parameter")]
    NotAParameter(usize),
    #[error("duplicate gradient hook on parameter {0}")]
    DuplicateHook(usize),
    #[error("parameters must be registered before transient tensors or operations")]
    LateParameter,
    #[error("cross-entropy batch has no valid (non-ignored) targets")]
    NoValidTargets,
    #[error("data length {actual} does not match tensor length {expected}")]
    DataLength { expected: usize, actual: usize },
}

/// Read-only view of one parameter's dense gradient, valid only for the
/// duration of the hook call. The buffer is dropped when the hook returns.
pub struct GradHookReceipt<'a> {
    pub param: TensorId,
    pub dense_grad: &'a [f64],
    pub step_index: u64,
}

type Hook = Box<dyn FnMut(GradHookReceipt<'_>)>;

/// Live/peak counts of simultaneously allocated dense parameter-gradient
/// buffers, kept since the last [`Tape::reset_grad_buffer_stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradBufferStats {
    pub live_param_grads: usize,
    pub peak_param_grads: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Matmul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Gelu {
        x: usize,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
    },
    Mean {
        x: usize,
    },
    HeadSplit {
        x: usize,
        heads: usize,
    },
    HeadMerge {
        x: usize,
    },
}

impl Op {
    /// Input slots in the order backward processes them. Parameter-like
    /// inputs come first so their gradients complete before the large
    /// activation gradient is touched.
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Matmul { a, b, .. } => vec![b, a],
            Op::Add { a, b } | Op::Mul { a, b } => vec![b, a],
            Op::Relu { x }
            | Op::Gelu { x }
            | Op::Softmax { x }
            | Op::Mean { x }
            | Op::HeadMerge { x } => vec![x],
            Op::HeadSplit { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias } => vec![gain, bias, x],
            Op::Embedding { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    op: Op,
    out: usize,
}

struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

/// Reverse-mode tape over dense tensors.
pub struct Tape {
    elem: ElemType,
    bufs: Vec<Buf>,
    grads: Vec<Option<Vec<f64>>>,
    nodes: Vec<Node>,
    n_persistent: usize,
    hooks: HashMap<usize, Hook>,
    consumed: bool,
    backward_passes: u64,
    stats: GradBufferStats,
}

impl Tape {
    pub fn new(elem: ElemType) -> Self {
        Tape {
            elem,
            bufs: Vec::new(),
            grads: Vec::new(),
            nodes: Vec::new(),
            n_persistent: 0,
            hooks: HashMap::new(),
            consumed: false,
            backward_passes: 0,
            stats: GradBufferStats::default(),
        }
    }

    pub fn elem_type(&self) -> ElemType {
        self.elem
    }

    /// Register a persistent trainable leaf. Must happen before any
    /// transient tensor or operation is recorded.
    pub fn param(&mut self, t: Tensor) -> Result<TensorId, TapeError> {
        self.persistent(t, true)
    }

    /// Register a persistent non-trainable leaf (frozen weights). Survives
    /// resets like a parameter but never finalizes a gradient.
    pub fn frozen(&mut self, t: Tensor) -> Result<TensorId, TapeError> {
        self.persistent(t, false)
    }

    fn persistent(&mut self, mut t: Tensor, trainable: bool) -> Result<TensorId, TapeError> {
        if !self.nodes.is_empty() || self.bufs.len() != self.n_persistent {
            return Err(TapeError::LateParameter);
        }
        t.quantize(self.elem);
        let id = self.push_buf(t, trainable);
        self.n_persistent = self.bufs.len();
        Ok(id)
    }

    /// Register a transient leaf (batch inputs, masks, constants). Dropped
    /// on [`Tape::reset`].
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.quantize(self.elem);
        self.push_buf(t, false)
    }

    fn push_buf(&mut self, t: Tensor, trainable: bool) -> TensorId {
        let id = self.bufs.len();
        self.bufs.push(Buf {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            trainable,
        });
        self.grads.push(None);
        TensorId(id)
    }

    fn check_id(&self, id: TensorId) -> Result<usize, TapeError> {
        if id.0 < self.bufs.len() {
            Ok(id.0)
        } else {
            Err(TapeError::UnknownTensor(id.0))
        }
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.bufs[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.bufs[id.0].data
    }

    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.bufs[id.0].shape.clone(), self.bufs[id.0].data.clone())
            .expect("tape buffer is internally consistent")
    }

    /// Overwrite a leaf's values (quantized to the storage width).
    pub fn set_data(&mut self, id: TensorId, data: &[f64]) -> Result<(), TapeError> {
        let idx = self.check_id(id)?;
        let buf = &mut self.bufs[idx];
        if buf.data.len() != data.len() {
            return Err(TapeError::DataLength {
                expected: buf.data.len(),
                actual: data.len(),
            });
        }
        for (dst, &src) in buf.data.iter_mut().zip(data) {
            *dst = self.elem.quantize(src);
        }
        Ok(())
    }

    /// Add a signed update to a leaf's values in place.
    pub fn apply_delta(&mut self, id: TensorId, indices: &[usize], deltas: &[f64]) {
        let buf = &mut self.bufs[id.0];
        for (&i, &d) in indices.iter().zip(deltas) {
            buf.data[i] = self.elem.quantize(buf.data[i] + d);
        }
    }

    /// Retained dense gradient of a hookless parameter after backward.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn backward_passes(&self) -> u64 {
        self.backward_passes
    }

    pub fn grad_buffer_stats(&self) -> GradBufferStats {
        self.stats
    }

    pub fn reset_grad_buffer_stats(&mut self) {
        self.stats = GradBufferStats {
            live_param_grads: self.stats.live_param_grads,
            peak_param_grads: self.stats.live_param_grads,
        };
    }

    /// Replace dense-gradient retention for `param` with a consumer callback.
    pub fn register_grad_hook(
        &mut self,
        param: TensorId,
        hook: impl FnMut(GradHookReceipt<'_>) + 'static,
    ) -> Result<(), TapeError> {
        let idx = self.check_id(param)?;
        if !self.bufs[idx].trainable {
            return Err(TapeError::NotAParameter(idx));
        }
        if self.hooks.contains_key(&idx) {
            return Err(TapeError::DuplicateHook(idx));
        }
        self.hooks.insert(idx, Box::new(hook));
        Ok(())
    }

    /// Drop transient tensors, recorded nodes, and gradients. Persistent
    /// parameters and hooks survive.
    pub fn reset(&mut self) {
        self.bufs.truncate(self.n_persistent);
        self.nodes.clear();
        self.grads.clear();
        self.grads.resize_with(self.n_persistent, || None);
        self.consumed = false;
        self.stats.live_param_grads = 0;
    }

    /// Validate a forward pass result: scalar and finite.
    pub fn finish_forward(&self, loss: TensorId) -> Result<f64, TapeError> {
        let idx = self.check_id(loss)?;
        let buf = &self.bufs[idx];
        if buf.data.len() != 1 {
            return Err(TapeError::NonScalarLoss(buf.data.len()));
        }
        let v = buf.data[0];
        if !v.is_finite() {
            return Err(TapeError::NonFiniteLoss(v));
        }
        Ok(v)
    }

    // ── Forward primitives ──────────────────────────────────────────────

    fn record(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        let mut t = Tensor::new(shape, data).expect("op produced consistent shape/data");
        t.quantize(self.elem);
        let out = self.push_buf(t, false);
        self.nodes.push(Node { op, out: out.0 });
        out
    }

    /// Matrix product with optional right-operand transpose. `a` is
    /// `[..., m, k]`; `b` is `[k, n]` (`[n, k]` transposed) shared across
    /// the leading dimensions, or carries identical leading dimensions.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the trailing two dimensions.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(
        &mut self,
        a: TensorId,
        b: TensorId,
        transpose_b: bool,
    ) -> Result<TensorId, TapeError> {
        let ai = self.check_id(a)?;
        let bi = self.check_id(b)?;
        let (lead, m, k, n) = matmul_dims("matmul", &self.bufs[ai].shape, &self.bufs[bi].shape, transpose_b)?;
        let batch: usize = lead.iter().product();
        let b_shared = self.bufs[bi].shape.len() == 2;
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.bufs[ai].data;
            let bv = &self.bufs[bi].data;
            for bt in 0..batch {
                let ao = bt * m * k;
                let bo = if b_shared { 0 } else { bt * k * n };
                let oo = bt * m * n;
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        if transpose_b {
                            for l in 0..k {
                                acc += av[ao + i * k + l] * bv[bo + j * k + l];
                            }
                        } else {
                            for l in 0..k {
                                acc += av[ao + i * k + l] * bv[bo + l * n + j];
                            }
                        }
                        out[oo + i * n + j] = acc;
                    }
                }
            }
        }
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        Ok(self.record(
            Op::Matmul {
                a: ai,
                b: bi,
                transpose_b,
            },
            shape,
            out,
        ))
    }

    /// Elementwise sum; `b` may broadcast over the trailing dims of `a`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ai, bi) = (self.check_id(a)?, self.check_id(b)?);
        self.broadcast_check("add", ai, bi)?;
        let stride = self.bufs[bi].data.len();
        let out: Vec<f64> = self.bufs[ai]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.bufs[bi].data[i % stride])
            .collect();
        let shape = self.bufs[ai].shape.clone();
        Ok(self.record(Op::Add { a: ai, b: bi }, shape, out))
    }

    /// Elementwise product; `b` may broadcast over the trailing dims of `a`.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TapeError> {
        let (ai, bi) = (self.check_id(a)?, self.check_id(b)?);
        self.broadcast_check("mul", ai, bi)?;
        let stride = self.bufs[bi].data.len();
        let out: Vec<f64> = self.bufs[ai]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.bufs[bi].data[i % stride])
            .collect();
        let shape = self.bufs[ai].shape.clone();
        Ok(self.record(Op::Mul { a: ai, b: bi }, shape, out))
    }

    fn broadcast_check(&self, op: &'static str, ai: usize, bi: usize) -> Result<(), TapeError> {
        if !is_suffix_broadcast(&self.bufs[ai].shape, &self.bufs[bi].shape) {
            return Err(TapeError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} does not broadcast over {:?}",
                    self.bufs[bi].shape, self.bufs[ai].shape
                ),
            });
        }
        Ok(())
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.record(Op::Relu { x: xi }, shape, out))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let out: Vec<f64> = self.bufs[xi].data.iter().map(|&v| gelu_tanh(v)).collect();
        let shape = self.bufs[xi].shape.clone();
        Ok(self.record(Op::Gelu { x: xi }, shape, out))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let shape = self.bufs[xi].shape.clone();
        if shape.is_empty() {
            return Err(TapeError::ShapeMismatch {
                op: "softmax",
                detail: "rank-0 input".into(),
            });
        }
        let d = *shape.last().unwrap();
        let mut out = self.bufs[xi].data.clone();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        Ok(self.record(Op::Softmax { x: xi }, shape, out))
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TapeError> {
        let (xi, gi, bi) = (self.check_id(x)?, self.check_id(gain)?, self.check_id(bias)?);
        let shape = self.bufs[xi].shape.clone();
        let d = *shape.last().ok_or(TapeError::ShapeMismatch {
            op: "layer_norm",
            detail: "rank-0 input".into(),
        })?;
        if self.bufs[gi].shape != [d] || self.bufs[bi].shape != [d] {
            return Err(TapeError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} must both be [{d}]",
                    self.bufs[gi].shape, self.bufs[bi].shape
                ),
            });
        }
        let mut out = vec![0.0; self.bufs[xi].data.len()];
        {
            let xv = &self.bufs[xi].data;
            let gv = &self.bufs[gi].data;
            let bv = &self.bufs[bi].data;
            for (r, row) in xv.chunks(d).enumerate() {
                let (mean, var) = mean_var(row);
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..d {
                    out[r * d + j] = gv[j] * (row[j] - mean) * inv + bv[j];
                }
            }
        }
        Ok(self.record(
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
            },
            shape,
            out,
        ))
    }

    /// Row lookup: `table` is `[vocab, d]`, `ids` index rows; output shape
    /// is `id_shape + [d]`.
    pub fn embedding(
        &mut self,
        table: TensorId,
        ids: &[u32],
        id_shape: &[usize],
    ) -> Result<TensorId, TapeError> {
        let ti = self.check_id(table)?;
        let tshape = &self.bufs[ti].shape;
        if tshape.len() != 2 {
            return Err(TapeError::ShapeMismatch {
                op: "embedding",
                detail: format!("table must be rank 2, got {tshape:?}"),
            });
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        if numel(id_shape) != ids.len() {
            return Err(TapeError::ShapeMismatch {
                op: "embedding",
                detail: format!("id shape {id_shape:?} vs {} ids", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(TapeError::ShapeMismatch {
                op: "embedding",
                detail: format!("token id {bad} exceeds vocab {vocab}"),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let row = &self.bufs[ti].data[id as usize * d..(id as usize + 1) * d];
            out.extend_from_slice(row);
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        Ok(self.record(
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            shape,
            out,
        ))
    }

    /// Mean negative log-likelihood over rows of `[..., classes]` logits.
    /// Rows whose target is [`IGNORE_TARGET`] are excluded from the mean.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[u32],
    ) -> Result<TensorId, TapeError> {
        let li = self.check_id(logits)?;
        let shape = &self.bufs[li].shape;
        let classes = *shape.last().ok_or(TapeError::ShapeMismatch {
            op: "cross_entropy",
            detail: "rank-0 logits".into(),
        })?;
        let rows = self.bufs[li].data.len() / classes;
        if targets.len() != rows {
            return Err(TapeError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{rows} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != IGNORE_TARGET && t as usize >= classes)
        {
            return Err(TapeError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("target {bad} exceeds {classes} classes"),
            });
        }
        let valid = targets.iter().filter(|&&t| t != IGNORE_TARGET).count();
        if valid == 0 {
            return Err(TapeError::NoValidTargets);
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            let row = &self.bufs[li].data[r * classes..(r + 1) * classes];
            total += -log_softmax_at(row, t as usize);
        }
        let loss = total / valid as f64;
        Ok(self.record(
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
            },
            vec![],
            vec![loss],
        ))
    }

    /// Mean of all elements, reduced to a scalar.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let n = self.bufs[xi].data.len() as f64;
        let total: f64 = self.bufs[xi].data.iter().sum();
        Ok(self.record(Op::Mean { x: xi }, vec![], vec![total / n]))
    }

    /// Permute `[b, t, heads*hd]` into `[b, heads, t, hd]`.
    pub fn head_split(&mut self, x: TensorId, heads: usize) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let shape = self.bufs[xi].shape.clone();
        if shape.len() != 3 || shape[2] % heads != 0 {
            return Err(TapeError::ShapeMismatch {
                op: "head_split",
                detail: format!("{shape:?} does not split into {heads} heads"),
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let hd = d / heads;
        let mut out = vec![0.0; b * t * d];
        {
            let xv = &self.bufs[xi].data;
            for bb in 0..b {
                for h in 0..heads {
                    for tt in 0..t {
                        for e in 0..hd {
                            out[((bb * heads + h) * t + tt) * hd + e] =
                                xv[(bb * t + tt) * d + h * hd + e];
                        }
                    }
                }
            }
        }
        Ok(self.record(Op::HeadSplit { x: xi, heads }, vec![b, heads, t, hd], out))
    }

    /// Inverse of [`Tape::head_split`]: `[b, heads, t, hd]` → `[b, t, heads*hd]`.
    pub fn head_merge(&mut self, x: TensorId) -> Result<TensorId, TapeError> {
        let xi = self.check_id(x)?;
        let shape = self.bufs[xi].shape.clone();
        if shape.len() != 4 {
            return Err(TapeError::ShapeMismatch {
                op: "head_merge",
                detail: format!("expected rank 4, got {shape:?}"),
            });
        }
        let (b, heads, t, hd) = (shape[0], shape[1], shape[2], shape[3]);
        let d = heads * hd;
        let mut out = vec![0.0; b * t * d];
        {
            let xv = &self.bufs[xi].data;
            for bb in 0..b {
                for h in 0..heads {
                    for tt in 0..t {
                        for e in 0..hd {
                            out[(bb * t + tt) * d + h * hd + e] =
                                xv[((bb * heads + h) * t + tt) * hd + e];
                        }
                    }
                }
            }
        }
        Ok(self.record(Op::HeadMerge { x: xi }, vec![b, t, d], out))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Visits each recorded node once in
    /// reverse order; parameter gradients are finalized (hook or retained)
    /// the moment their last contribution lands.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TapeError> {
        if self.consumed {
            return Err(TapeError::BackwardWithoutForward);
        }
        let li = self.check_id(loss)?;
        if self.bufs[li].data.len() != 1 {
            return Err(TapeError::NonScalarLoss(self.bufs[li].data.len()));
        }
        if !self.nodes.iter().any(|n| n.out == li) {
            return Err(TapeError::LossNotNodeOutput);
        }
        self.consumed = true;
        let step_index = self.backward_passes;
        self.backward_passes += 1;

        // Remaining input-slot references per tensor; a parameter's dense
        // gradient is complete when its count reaches zero.
        let mut pending = vec![0usize; self.bufs.len()];
        for node in &self.nodes {
            for input in node.op.inputs() {
                pending[input] += 1;
            }
        }
        let referenced: Vec<bool> = pending.iter().map(|&c| c > 0).collect();

        self.grads[li] = Some(vec![1.0]);
        for ni in (0..self.nodes.len()).rev() {
            let out = self.nodes[ni].out;
            let out_grad = self.grads[out].take();
            let op = self.nodes[ni].op.clone();
            match out_grad {
                Some(g) => self.backprop_node(&op, &g, &mut pending, step_index),
                // Dead branch: no gradient flows, but slot bookkeeping must
                // still run so parameters on it finalize (with zeros).
                None => {
                    for input in op.inputs() {
                        self.consume_slot(input, &mut pending, step_index);
                    }
                }
            }
        }
        // Parameters never referenced by any node still owe their hook an
        // invocation (with a zero gradient).
        for idx in 0..self.n_persistent {
            if self.bufs[idx].trainable && !referenced[idx] {
                self.finalize_param(idx, step_index);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, op: &Op, g: &[f64], pending: &mut [usize], step: u64) {
        match *op {
            Op::Matmul { a, b, transpose_b } => {
                let (lead, m, k, n) =
                    matmul_dims("matmul", &self.bufs[a].shape, &self.bufs[b].shape, transpose_b)
                        .expect("validated at record time");
                let batch: usize = lead.iter().product();
                let b_shared = self.bufs[b].shape.len() == 2;
                // dB first (weight slot), then dA.
                let mut db = vec![0.0; self.bufs[b].data.len()];
                {
                    let av = &self.bufs[a].data;
                    for bt in 0..batch {
                        let ao = bt * m * k;
                        let bo = if b_shared { 0 } else { bt * k * n };
                        let go = bt * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                let gd = g[go + i * n + j];
                                if transpose_b {
                                    for l in 0..k {
                                        db[bo + j * k + l] += gd * av[ao + i * k + l];
                                    }
                                } else {
                                    for l in 0..k {
                                        db[bo + l * n + j] += av[ao + i * k + l] * gd;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(b, db, pending, step);
                let mut da = vec![0.0; self.bufs[a].data.len()];
                {
                    let bv = &self.bufs[b].data;
                    for bt in 0..batch {
                        let ao = bt * m * k;
                        let bo = if b_shared { 0 } else { bt * k * n };
                        let go = bt * m * n;
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = 0.0;
                                if transpose_b {
                                    for j in 0..n {
                                        acc += g[go + i * n + j] * bv[bo + j * k + l];
                                    }
                                } else {
                                    for j in 0..n {
                                        acc += g[go + i * n + j] * bv[bo + l * n + j];
                                    }
                                }
                                da[ao + i * k + l] = acc;
                            }
                        }
                    }
                }
                self.accumulate(a, da, pending, step);
            }
            Op::Add { a, b } => {
                let stride = self.bufs[b].data.len();
                let mut db = vec![0.0; stride];
                for (i, &gd) in g.iter().enumerate() {
                    db[i % stride] += gd;
                }
                self.accumulate(b, db, pending, step);
                self.accumulate(a, g.to_vec(), pending, step);
            }
            Op::Mul { a, b } => {
                let stride = self.bufs[b].data.len();
                let mut db = vec![0.0; stride];
                for (i, &gd) in g.iter().enumerate() {
                    db[i % stride] += gd * self.bufs[a].data[i];
                }
                self.accumulate(b, db, pending, step);
                let da: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gd)| gd * self.bufs[b].data[i % stride])
                    .collect();
                self.accumulate(a, da, pending, step);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self.bufs[x]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gd)| if v > 0.0 { gd } else { 0.0 })
                    .collect();
                self.accumulate(x, dx, pending, step);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = self.bufs[x]
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gd)| gd * gelu_tanh_deriv(v))
                    .collect();
                self.accumulate(x, dx, pending, step);
            }
            Op::Softmax { x } => {
                let d = *self.bufs[x].shape.last().unwrap();
                let mut dx = vec![0.0; self.bufs[x].data.len()];
                // Recompute y from x; the output buffer may already be stale
                // only if the caller mutated it, which the API forbids.
                let xv = &self.bufs[x].data;
                for (r, row) in xv.chunks(d).enumerate() {
                    let mut y = row.to_vec();
                    softmax_row(&mut y);
                    let dot: f64 = (0..d).map(|j| g[r * d + j] * y[j]).sum();
                    for j in 0..d {
                        dx[r * d + j] = y[j] * (g[r * d + j] - dot);
                    }
                }
                self.accumulate(x, dx, pending, step);
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.bufs[x].shape.last().unwrap();
                let rows = self.bufs[x].data.len() / d;
                let xv = self.bufs[x].data.clone();
                let gv = self.bufs[gain].data.clone();

                let mut dgain = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..d {
                        dgain[j] += g[r * d + j] * (row[j] - mean) * inv;
                    }
                }
                self.accumulate(gain, dgain, pending, step);

                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dbias[j] += g[r * d + j];
                    }
                }
                self.accumulate(bias, dbias, pending, step);

                let mut dx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = g[r * d + j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let dxhat = g[r * d + j] * gv[j];
                        dx[r * d + j] =
                            inv * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                    }
                }
                self.accumulate(x, dx, pending, step);
            }
            Op::Embedding { table, ref ids, .. } => {
                let d = self.bufs[table].shape[1];
                let mut dt = vec![0.0; self.bufs[table].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    let base = id as usize * d;
                    for j in 0..d {
                        dt[base + j] += g[r * d + j];
                    }
                }
                self.accumulate(table, dt, pending, step);
            }
            Op::CrossEntropy { logits, ref targets } => {
                let classes = *self.bufs[logits].shape.last().unwrap();
                let valid = targets.iter().filter(|&&t| t != IGNORE_TARGET).count() as f64;
                let scale = g[0] / valid;
                let mut dl = vec![0.0; self.bufs[logits].data.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == IGNORE_TARGET {
                        continue;
                    }
                    let row = &self.bufs[logits].data[r * classes..(r + 1) * classes];
                    let mut p = row.to_vec();
                    softmax_row(&mut p);
                    for j in 0..classes {
                        let onehot = if j == t as usize { 1.0 } else { 0.0 };
                        dl[r * classes + j] = scale * (p[j] - onehot);
                    }
                }
                self.accumulate(logits, dl, pending, step);
            }
            Op::Mean { x } => {
                let n = self.bufs[x].data.len() as f64;
                let dx = vec![g[0] / n; self.bufs[x].data.len()];
                self.accumulate(x, dx, pending, step);
            }
            Op::HeadSplit { x, heads } => {
                let shape = &self.bufs[x].shape;
                let (b, t, d) = (shape[0], shape[1], shape[2]);
                let hd = d / heads;
                let mut dx = vec![0.0; self.bufs[x].data.len()];
                for bb in 0..b {
                    for h in 0..heads {
                        for tt in 0..t {
                            for e in 0..hd {
                                dx[(bb * t + tt) * d + h * hd + e] +=
                                    g[((bb * heads + h) * t + tt) * hd + e];
                            }
                        }
                    }
                }
                self.accumulate(x, dx, pending, step);
            }
            Op::HeadMerge { x } => {
                let shape = &self.bufs[x].shape;
                let (b, heads, t, hd) = (shape[0], shape[1], shape[2], shape[3]);
                let d = heads * hd;
                let mut dx = vec![0.0; self.bufs[x].data.len()];
                for bb in 0..b {
                    for h in 0..heads {
                        for tt in 0..t {
                            for e in 0..hd {
                                dx[((bb * heads + h) * t + tt) * hd + e] +=
                                    g[(bb * t + tt) * d + h * hd + e];
                            }
                        }
                    }
                }
                self.accumulate(x, dx, pending, step);
            }
        }
    }

    /// Add one slot's contribution to a tensor's gradient, then run the
    /// completion bookkeeping for that slot.
    fn accumulate(&mut self, idx: usize, contribution: Vec<f64>, pending: &mut [usize], step: u64) {
        match &mut self.grads[idx] {
            Some(existing) => {
                for (dst, src) in existing.iter_mut().zip(&contribution) {
                    *dst = self.elem.quantize(*dst + src);
                }
            }
            slot @ None => {
                let mut c = contribution;
                self.elem.quantize_slice(&mut c);
                *slot = Some(c);
                if self.bufs[idx].trainable {
                    self.stats.live_param_grads += 1;
                    self.stats.peak_param_grads =
                        self.stats.peak_param_grads.max(self.stats.live_param_grads);
                }
            }
        }
        self.consume_slot(idx, pending, step);
    }

    fn consume_slot(&mut self, idx: usize, pending: &mut [usize], step: u64) {
        pending[idx] -= 1;
        if pending[idx] == 0 && self.bufs[idx].trainable {
            self.finalize_param(idx, step);
        }
    }

    /// A parameter's gradient is complete: deliver it to its hook (and drop
    /// the buffer immediately), or retain it densely when no hook is set.
    fn finalize_param(&mut self, idx: usize, step: u64) {
        if let Some(mut hook) = self.hooks.remove(&idx) {
            let grad = match self.grads[idx].take() {
                Some(g) => {
                    self.stats.live_param_grads -= 1;
                    g
                }
                None => vec![0.0; self.bufs[idx].data.len()],
            };
            hook(GradHookReceipt {
                param: TensorId(idx),
                dense_grad: &grad,
                step_index: step,
            });
            drop(grad);
            self.hooks.insert(idx, hook);
        } else if self.grads[idx].is_none() {
            // Hookless unused parameter: retain an explicit zero gradient.
            self.grads[idx] = Some(vec![0.0; self.bufs[idx].data.len()]);
            self.stats.live_param_grads += 1;
            self.stats.peak_param_grads =
                self.stats.peak_param_grads.max(self.stats.live_param_grads);
        }
    }
}

fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    transpose_b: bool,
) -> Result<(Vec<usize>, usize, usize, usize), TapeError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TapeError::ShapeMismatch {
            op,
            detail: format!("operands must be rank >= 2, got {a:?} and {b:?}"),
        });
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if transpose_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(TapeError::ShapeMismatch {
            op,
            detail: format!("inner dims {k} vs {bk} ({a:?} x {b:?}, transpose_b={transpose_b})"),
        });
    }
    let lead = a[..a.len() - 2].to_vec();
    if b.len() != 2 && b[..b.len() - 2] != lead[..] {
        return Err(TapeError::ShapeMismatch {
            op,
            detail: format!("leading dims differ: {a:?} vs {b:?}"),
        });
    }
    Ok((lead, m, k, n))
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - max - log_sum
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_C: f64 = 0.044715;

fn gelu_tanh(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = s * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
