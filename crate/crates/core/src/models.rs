//! Toy model zoo: an MLP classifier and a tiny pre-layer-norm decoder
//! transformer whose attention projections are individually named so
//! module-filtered sparse fine-tuning can target them.
//!
//! Parameter name grammar:
//!   `layer.<i>.attn.{q,k,v,o}`   attention projections (no biases)
//!   `layer.<i>.ln{1,2}.{g,b}`    pre-attention / pre-mlp layer norms
//!   `layer.<i>.mlp.*`            feed-forward weights and biases
//!   `embed.{tok,pos}`            token / position embeddings
//!   `head.*`                     final norm and classifier (never masked)

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tape::{Tape, TapeError, TensorId, IGNORE_TARGET};
use crate::tasks::Batch;
use crate::tensor::{ElemType, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("model/batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("unknown module filter `{0}`")]
    UnknownFilter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    /// Fully connected classifier over per-position token features;
    /// `dims = [input, hidden.., classes]`.
    Mlp { dims: Vec<usize> },
    TinyTransformer {
        hidden: usize,
        layers: usize,
        heads: usize,
        vocab: usize,
        seq_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match &self.kind {
            ModelKind::Mlp { dims } => {
                if dims.len() < 2 {
                    return Err(ModelError::InvalidConfig(format!(
                        "mlp needs at least [input, classes] dims, got {dims:?}"
                    )));
                }
                if dims.iter().any(|&d| d == 0) {
                    return Err(ModelError::InvalidConfig(format!("zero dim in {dims:?}")));
                }
            }
            ModelKind::TinyTransformer {
                hidden,
                layers,
                heads,
                vocab,
                seq_len,
            } => {
                if *hidden == 0 || *layers == 0 || *heads == 0 || *seq_len == 0 {
                    return Err(ModelError::InvalidConfig("all dims must be >= 1".into()));
                }
                if hidden % heads != 0 {
                    return Err(ModelError::InvalidConfig(format!(
                        "hidden {hidden} not divisible by heads {heads}"
                    )));
                }
                if *vocab < 2 {
                    return Err(ModelError::InvalidConfig(format!("vocab {vocab} < 2")));
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors, iterated in sorted-name order everywhere.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// `(name, element count)` pairs in name order.
    pub fn sizes(&self) -> Vec<(String, usize)> {
        self.params.iter().map(|(n, t)| (n.clone(), t.len())).collect()
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

/// Deterministic initialization: scaled normal weights (1/sqrt(fan_in)),
/// zero biases, unit layer-norm gains.
pub fn build_model(config: &ModelConfig) -> Result<ParamSet, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ps = ParamSet::default();
    match &config.kind {
        ModelKind::Mlp { dims } => {
            for i in 0..dims.len() - 2 {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                ps.insert(
                    format!("layer.{i}.mlp.fc.w"),
                    normal_tensor(&mut rng, vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
                );
                ps.insert(format!("layer.{i}.mlp.fc.b"), Tensor::zeros(vec![fan_out]));
            }
            let (fan_in, classes) = (dims[dims.len() - 2], dims[dims.len() - 1]);
            ps.insert(
                "head.out.w",
                normal_tensor(&mut rng, vec![fan_in, classes], 1.0 / (fan_in as f64).sqrt()),
            );
            ps.insert("head.out.b", Tensor::zeros(vec![classes]));
        }
        ModelKind::TinyTransformer {
            hidden,
            layers,
            heads: _,
            vocab,
            seq_len,
        } => {
            let d = *hidden;
            let scale = 1.0 / (d as f64).sqrt();
            ps.insert("embed.tok", normal_tensor(&mut rng, vec![*vocab, d], scale));
            ps.insert("embed.pos", normal_tensor(&mut rng, vec![*seq_len, d], scale));
            for i in 0..*layers {
                ps.insert(format!("layer.{i}.ln1.g"), Tensor::new(vec![d], vec![1.0; d]).unwrap());
                ps.insert(format!("layer.{i}.ln1.b"), Tensor::zeros(vec![d]));
                for proj in ["q", "k", "v", "o"] {
                    ps.insert(
                        format!("layer.{i}.attn.{proj}"),
                        normal_tensor(&mut rng, vec![d, d], scale),
                    );
                }
                ps.insert(format!("layer.{i}.ln2.g"), Tensor::new(vec![d], vec![1.0; d]).unwrap());
                ps.insert(format!("layer.{i}.ln2.b"), Tensor::zeros(vec![d]));
                ps.insert(
                    format!("layer.{i}.mlp.fc1.w"),
                    normal_tensor(&mut rng, vec![d, 4 * d], scale),
                );
                ps.insert(format!("layer.{i}.mlp.fc1.b"), Tensor::zeros(vec![4 * d]));
                ps.insert(
                    format!("layer.{i}.mlp.fc2.w"),
                    normal_tensor(&mut rng, vec![4 * d, d], 1.0 / (4.0 * d as f64).sqrt()),
                );
                ps.insert(format!("layer.{i}.mlp.fc2.b"), Tensor::zeros(vec![d]));
            }
            ps.insert("head.ln.g", Tensor::new(vec![d], vec![1.0; d]).unwrap());
            ps.insert("head.ln.b", Tensor::zeros(vec![d]));
            ps.insert(
                "head.out.w",
                normal_tensor(&mut rng, vec![d, *vocab], scale),
            );
            ps.insert("head.out.b", Tensor::zeros(vec![*vocab]));
        }
    }
    Ok(ps)
}

/// Which parameter tensors a fine-tuning run may update sparsely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleFilter {
    V,
    QV,
    QKV,
    QKVO,
    AllAttn,
    All,
    HeadOnly,
}

impl std::str::FromStr for ModuleFilter {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "V" => Ok(ModuleFilter::V),
            "QV" => Ok(ModuleFilter::QV),
            "QKV" => Ok(ModuleFilter::QKV),
            "QKVO" => Ok(ModuleFilter::QKVO),
            "ALL-ATTN" => Ok(ModuleFilter::AllAttn),
            "ALL" => Ok(ModuleFilter::All),
            "HEAD-ONLY" => Ok(ModuleFilter::HeadOnly),
            other => Err(ModelError::UnknownFilter(other.to_string())),
        }
    }
}

impl std::fmt::Display for ModuleFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModuleFilter::V => "V",
            ModuleFilter::QV => "QV",
            ModuleFilter::QKV => "QKV",
            ModuleFilter::QKVO => "QKVO",
            ModuleFilter::AllAttn => "ALL-ATTN",
            ModuleFilter::All => "ALL",
            ModuleFilter::HeadOnly => "HEAD-ONLY",
        };
        write!(f, "{s}")
    }
}

fn attn_proj_suffix(name: &str) -> Option<&str> {
    let (prefix, proj) = name.rsplit_once('.')?;
    if prefix.starts_with("layer.") && prefix.ends_with(".attn") {
        Some(proj)
    } else {
        None
    }
}

/// Deterministic sorted list of the parameter names a filter selects.
pub fn select_trainable(params: &ParamSet, filter: ModuleFilter) -> Vec<String> {
    let projs: &[&str] = match filter {
        ModuleFilter::V => &["v"],
        ModuleFilter::QV => &["q", "v"],
        ModuleFilter::QKV => &["q", "k", "v"],
        ModuleFilter::QKVO | ModuleFilter::AllAttn => &["q", "k", "v", "o"],
        ModuleFilter::All => {
            return params.names().cloned().collect();
        }
        ModuleFilter::HeadOnly => {
            return params
                .names()
                .filter(|n| n.starts_with("head."))
                .cloned()
                .collect();
        }
    };
    params
        .names()
        .filter(|n| attn_proj_suffix(n).is_some_and(|p| projs.contains(&p)))
        .cloned()
        .collect()
}

/// The subset of a filter's selection that may carry a sparse mask: the
/// classifier head and layer norms are always trained densely instead.
pub fn maskable_names(params: &ParamSet, filter: ModuleFilter) -> Vec<String> {
    select_trainable(params, filter)
        .into_iter()
        .filter(|n| !n.starts_with("head.") && !n.contains(".ln"))
        .collect()
}

/// Couples a [`ParamSet`] to tape leaves for one training run.
pub struct ModelBinding {
    entries: Vec<(String, TensorId, bool)>,
    by_name: HashMap<String, TensorId>,
}

impl ModelBinding {
    /// Register every parameter on the tape; names in `trainable` become
    /// trainable leaves, the rest are frozen.
    pub fn bind(
        tape: &mut Tape,
        params: &ParamSet,
        trainable: &BTreeSet<String>,
    ) -> Result<Self, ModelError> {
        for name in trainable {
            if params.get(name).is_none() {
                return Err(ModelError::UnknownParam(name.clone()));
            }
        }
        let mut entries = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let is_trainable = trainable.contains(name);
            let id = if is_trainable {
                tape.param(tensor.clone())?
            } else {
                tape.frozen(tensor.clone())?
            };
            entries.push((name.clone(), id, is_trainable));
            by_name.insert(name.clone(), id);
        }
        Ok(ModelBinding { entries, by_name })
    }

    pub fn id(&self, name: &str) -> Result<TensorId, ModelError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    /// `(name, id)` pairs of trainable leaves, in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.entries
            .iter()
            .filter(|(_, _, t)| *t)
            .map(|(n, id, _)| (n.as_str(), *id))
    }

    /// Snapshot current tape values back into a [`ParamSet`].
    pub fn export(&self, tape: &Tape) -> ParamSet {
        let mut ps = ParamSet::default();
        for (name, id, _) in &self.entries {
            ps.insert(name.clone(), tape.tensor(*id));
        }
        ps
    }
}

/// Record the model's forward pass, returning `(logits, loss)`.
pub fn forward_logits_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<(TensorId, TensorId), ModelError> {
    match &config.kind {
        ModelKind::Mlp { dims } => forward_mlp(tape, binding, dims, batch),
        ModelKind::TinyTransformer {
            hidden,
            layers,
            heads,
            vocab,
            seq_len,
        } => forward_transformer(tape, binding, *hidden, *layers, *heads, *vocab, *seq_len, batch),
    }
}

/// Record the forward pass and validate the scalar loss (finite, scalar).
pub fn forward_loss(
    tape: &mut Tape,
    binding: &ModelBinding,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<TensorId, ModelError> {
    let (_, loss) = forward_logits_loss(tape, binding, config, batch)?;
    tape.finish_forward(loss)?;
    Ok(loss)
}

fn forward_mlp(
    tape: &mut Tape,
    binding: &ModelBinding,
    dims: &[usize],
    batch: &Batch,
) -> Result<(TensorId, TensorId), ModelError> {
    if batch.seq != dims[0] {
        return Err(ModelError::BatchMismatch(format!(
            "mlp input dim {} but batch rows have {} tokens",
            dims[0], batch.seq
        )));
    }
    // Feature view of token rows, scaled into [-1, 1].
    let denom = (batch.tokens.iter().copied().max().unwrap_or(1).max(1)) as f64;
    let feats: Vec<f64> = batch
        .tokens
        .iter()
        .map(|&t| 2.0 * (t as f64) / denom - 1.0)
        .collect();
    let mut x = tape.constant(Tensor::new(vec![batch.batch, batch.seq], feats).unwrap());
    for i in 0..dims.len() - 2 {
        let w = binding.id(&format!("layer.{i}.mlp.fc.w"))?;
        let b = binding.id(&format!("layer.{i}.mlp.fc.b"))?;
        x = tape.matmul(x, w)?;
        x = tape.add(x, b)?;
        x = tape.relu(x)?;
    }
    let w = binding.id("head.out.w")?;
    let b = binding.id("head.out.b")?;
    let mut logits = tape.matmul(x, w)?;
    logits = tape.add(logits, b)?;
    // One classification target per row: the final supervised position.
    let mut row_targets = Vec::with_capacity(batch.batch);
    for r in 0..batch.batch {
        let row = &batch.targets[r * batch.seq..(r + 1) * batch.seq];
        let t = *row.iter().rfind(|&&t| t != IGNORE_TARGET).ok_or_else(|| {
            ModelError::BatchMismatch("mlp batch row has no supervised target".into())
        })?;
        row_targets.push(t);
    }
    let loss = tape.cross_entropy(logits, &row_targets)?;
    Ok((logits, loss))
}

#[allow(clippy::too_many_arguments)]
fn forward_transformer(
    tape: &mut Tape,
    binding: &ModelBinding,
    hidden: usize,
    layers: usize,
    heads: usize,
    _vocab: usize,
    seq_len: usize,
    batch: &Batch,
) -> Result<(TensorId, TensorId), ModelError> {
    if batch.seq != seq_len {
        return Err(ModelError::BatchMismatch(format!(
            "model seq_len {seq_len} but batch has {} tokens per row",
            batch.seq
        )));
    }
    let t = batch.seq;
    let tok = binding.id("embed.tok")?;
    let pos = binding.id("embed.pos")?;
    let emb = tape.embedding(tok, &batch.tokens, &[batch.batch, t])?;
    let mut x = tape.add(emb, pos)?;

    // Additive causal mask, shared by every layer.
    let mut mask = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            mask[i * t + j] = -1e9;
        }
    }
    let mask = tape.constant(Tensor::new(vec![t, t], mask).unwrap());
    let head_dim = hidden / heads;
    let scale = tape.constant(Tensor::scalar(1.0 / (head_dim as f64).sqrt()));

    for i in 0..layers {
        let ln1 = tape.layer_norm(
            x,
            binding.id(&format!("layer.{i}.ln1.g"))?,
            binding.id(&format!("layer.{i}.ln1.b"))?,
        )?;
        let q = tape.matmul(ln1, binding.id(&format!("layer.{i}.attn.q"))?)?;
        let k = tape.matmul(ln1, binding.id(&format!("layer.{i}.attn.k"))?)?;
        let v = tape.matmul(ln1, binding.id(&format!("layer.{i}.attn.v"))?)?;
        let qh = tape.head_split(q, heads)?;
        let kh = tape.head_split(k, heads)?;
        let vh = tape.head_split(v, heads)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.mul(scores, scale)?;
        let masked = tape.add(scaled, mask)?;
        let attn = tape.softmax(masked)?;
        let ctx = tape.matmul(attn, vh)?;
        let merged = tape.head_merge(ctx)?;
        let out = tape.matmul(merged, binding.id(&format!("layer.{i}.attn.o"))?)?;
        x = tape.add(x, out)?;

        let ln2 = tape.layer_norm(
            x,
            binding.id(&format!("layer.{i}.ln2.g"))?,
            binding.id(&format!("layer.{i}.ln2.b"))?,
        )?;
        let mut h = tape.matmul(ln2, binding.id(&format!("layer.{i}.mlp.fc1.w"))?)?;
        h = tape.add(h, binding.id(&format!("layer.{i}.mlp.fc1.b"))?)?;
        h = tape.gelu(h)?;
        h = tape.matmul(h, binding.id(&format!("layer.{i}.mlp.fc2.w"))?)?;
        h = tape.add(h, binding.id(&format!("layer.{i}.mlp.fc2.b"))?)?;
        x = tape.add(x, h)?;
    }
    let z = tape.layer_norm(x, binding.id("head.ln.g")?, binding.id("head.ln.b")?)?;
    let mut logits = tape.matmul(z, binding.id("head.out.w")?)?;
    logits = tape.add(logits, binding.id("head.out.b")?)?;
    let loss = tape.cross_entropy(logits, &batch.targets)?;
    Ok((logits, loss))
}

/// Loss and accuracy over a fixed batch list, forward-only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub supervised_positions: usize,
}

pub fn evaluate(
    config: &ModelConfig,
    params: &ParamSet,
    batches: &[Batch],
    elem: ElemType,
) -> Result<EvalMetrics, ModelError> {
    let mut total_nll = 0.0;
    let mut total_valid = 0usize;
    let mut correct = 0usize;
    for batch in batches {
        let mut tape = Tape::new(elem);
        let binding = ModelBinding::bind(&mut tape, params, &BTreeSet::new())?;
        let (logits, loss) = forward_logits_loss(&mut tape, &binding, config, batch)?;
        let loss_val = tape.finish_forward(loss)?;
        let (batch_correct, batch_valid) = batch_accuracy(&tape, logits, config, batch);
        total_nll += loss_val * batch_valid as f64;
        total_valid += batch_valid;
        correct += batch_correct;
    }
    Ok(EvalMetrics {
        loss: total_nll / total_valid.max(1) as f64,
        accuracy: correct as f64 / total_valid.max(1) as f64,
        supervised_positions: total_valid,
    })
}

/// Count argmax hits over the supervised positions of one forward pass.
pub fn batch_accuracy(
    tape: &Tape,
    logits: TensorId,
    config: &ModelConfig,
    batch: &Batch,
) -> (usize, usize) {
    let shape = tape.shape(logits);
    let classes = *shape.last().unwrap();
    let data = tape.data(logits);
    let row_target = |row: usize| -> Option<u32> {
        match &config.kind {
            ModelKind::Mlp { .. } => {
                let r = &batch.targets[row * batch.seq..(row + 1) * batch.seq];
                r.iter().rfind(|&&t| t != IGNORE_TARGET).copied()
            }
            ModelKind::TinyTransformer { .. } => {
                let t = batch.targets[row];
                (t != IGNORE_TARGET).then_some(t)
            }
        }
    };
    let rows = data.len() / classes;
    let mut correct = 0;
    let mut valid = 0;
    for r in 0..rows {
        let Some(target) = row_target(r) else { continue };
        valid += 1;
        let row = &data[r * classes..(r + 1) * classes];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == target as usize {
            correct += 1;
        }
    }
    (correct, valid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_task, BatchStream, Split, TaskKind, TaskSizes, TaskSpec};

    fn tf_config(seed: u64) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::TinyTransformer {
                hidden: 64,
                layers: 2,
                heads: 4,
                vocab: 17,
                seq_len: 8,
            },
            seed,
        }
    }

    #[test]
    fn same_seed_identical_tensors() {
        let a = build_model(&tf_config(9)).unwrap();
        let b = build_model(&tf_config(9)).unwrap();
        assert_eq!(a, b);
        let c = build_model(&tf_config(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transformer_param_count_matches_closed_form() {
        let (d, layers, vocab, seq) = (64usize, 2usize, 17usize, 8usize);
        let ps = build_model(&tf_config(0)).unwrap();
        let per_layer = 2 * d + 4 * d * d + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = vocab * d + seq * d + layers * per_layer + 2 * d + d * vocab + vocab;
        assert_eq!(ps.total_elements(), expected);
    }

    #[test]
    fn mlp_4_8_2_has_58_params() {
        let ps = build_model(&ModelConfig {
            kind: ModelKind::Mlp {
                dims: vec![4, 8, 2],
            },
            seed: 0,
        })
        .unwrap();
        assert_eq!(ps.total_elements(), 58);
    }

    #[test]
    fn invalid_dims_rejected() {
        let bad = ModelConfig {
            kind: ModelKind::TinyTransformer {
                hidden: 30,
                layers: 1,
                heads: 4,
                vocab: 10,
                seq_len: 4,
            },
            seed: 0,
        };
        assert!(matches!(build_model(&bad), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn qkvo_selects_eight_names_on_two_layers() {
        let ps = build_model(&tf_config(0)).unwrap();
        let names = select_trainable(&ps, ModuleFilter::QKVO);
        assert_eq!(names.len(), 8);
        assert!(names.iter().all(|n| n.contains(".attn.")));
        let v = select_trainable(&ps, ModuleFilter::V);
        assert_eq!(v, vec!["layer.0.attn.v", "layer.1.attn.v"]);
    }

    #[test]
    fn all_contains_qkvo_and_head_only_is_head() {
        let ps = build_model(&tf_config(0)).unwrap();
        let all: BTreeSet<String> = select_trainable(&ps, ModuleFilter::All).into_iter().collect();
        for n in select_trainable(&ps, ModuleFilter::QKVO) {
            assert!(all.contains(&n));
        }
        let head = select_trainable(&ps, ModuleFilter::HeadOnly);
        assert!(!head.is_empty());
        assert!(head.iter().all(|n| n.starts_with("head.")));
    }

    #[test]
    fn maskable_excludes_head_and_layer_norms() {
        let ps = build_model(&tf_config(0)).unwrap();
        let maskable = maskable_names(&ps, ModuleFilter::All);
        assert!(maskable.iter().all(|n| !n.starts_with("head.")));
        assert!(maskable.iter().all(|n| !n.contains(".ln")));
        assert!(maskable.iter().any(|n| n.contains(".attn.")));
        assert!(maskable.iter().any(|n| n.starts_with("embed.")));
    }

    fn eval_batches(cfg_seed: u64) -> (ModelConfig, ParamSet, Vec<Batch>) {
        let task = TaskSpec {
            kind: TaskKind::SeqClassify,
            seed: 3,
            sizes: TaskSizes {
                pretrain: 12,
                finetune_train: 12,
                finetune_eval: 12,
            },
            seq_len: 8,
            modulus: 13,
            alphabet: 17,
        };
        let data = make_task(&task).unwrap();
        let stream = BatchStream::new(&data, Split::FinetuneEval, 4, 0).unwrap();
        (tf_config(cfg_seed), build_model(&tf_config(cfg_seed)).unwrap(), stream.epoch(0))
    }

    #[test]
    fn transformer_logits_shape_and_softmax_rows() {
        let (cfg, ps, batches) = eval_batches(5);
        let batch = &batches[0];
        let mut tape = Tape::new(ElemType::F64);
        let binding = ModelBinding::bind(&mut tape, &ps, &BTreeSet::new()).unwrap();
        let (logits, _) = forward_logits_loss(&mut tape, &binding, &cfg, batch).unwrap();
        assert_eq!(tape.shape(logits), &[batch.batch, batch.seq, 17]);
        let probs = tape.softmax(logits).unwrap();
        for row in tape.data(probs).chunks(17) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_order_permutation_keeps_mean_loss() {
        let (cfg, ps, batches) = eval_batches(5);
        let fwd = evaluate(&cfg, &ps, &batches, ElemType::F64).unwrap();
        let mut reversed = batches.clone();
        reversed.reverse();
        let rev = evaluate(&cfg, &ps, &reversed, ElemType::F64).unwrap();
        assert!((fwd.loss - rev.loss).abs() < 1e-6);
        assert_eq!(fwd.supervised_positions, rev.supervised_positions);
    }

    #[test]
    fn mlp_forward_loss_on_classify_task() {
        let task = TaskSpec {
            kind: TaskKind::SeqClassify,
            seed: 3,
            sizes: TaskSizes {
                pretrain: 8,
                finetune_train: 8,
                finetune_eval: 8,
            },
            seq_len: 6,
            modulus: 13,
            alphabet: 5,
        };
        let data = make_task(&task).unwrap();
        let batches = BatchStream::new(&data, Split::Pretrain, 4, 0).unwrap().epoch(0);
        let cfg = ModelConfig {
            kind: ModelKind::Mlp {
                dims: vec![6, 16, 5],
            },
            seed: 1,
        };
        let ps = build_model(&cfg).unwrap();
        let m = evaluate(&cfg, &ps, &batches, ElemType::F64).unwrap();
        assert!(m.loss.is_finite() && m.loss > 0.0);
        assert_eq!(m.supervised_positions, 8);
    }
}
