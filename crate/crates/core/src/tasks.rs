//! Synthetic pre-train / fine-tune task suite with deterministic batching.
//!
//! Each task generates a pretrain split and a fine-tune split whose data
//! distributions differ by construction, so a model converged on the
//! pretrain split plays the role of a pre-trained checkpoint for the
//! fine-tune domain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::IGNORE_TARGET;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Next-character prediction over seeded bigram streams; the fine-tune
    /// stream uses a different transition matrix.
    CharLm,
    /// `[a, b, =] -> c` with `c = (a+b) mod m` for pretraining and
    /// `c = (a-b) mod m` for fine-tuning.
    ModularArith,
    /// Classify the token at a fixed probe position; the probe position
    /// moves between pretraining and fine-tuning.
    SeqClassify,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char-lm" => Ok(TaskKind::CharLm),
            "modular-arith" => Ok(TaskKind::ModularArith),
            "seq-classify" => Ok(TaskKind::SeqClassify),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::CharLm => "char-lm",
            TaskKind::ModularArith => "modular-arith",
            TaskKind::SeqClassify => "seq-classify",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Pretrain,
    FinetuneTrain,
    FinetuneEval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::Pretrain => "pretrain",
            Split::FinetuneTrain => "finetune-train",
            Split::FinetuneEval => "finetune-eval",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task sizes: {0}")]
    InvalidSizes(String),
    #[error("split {0} is empty")]
    EmptySplit(Split),
    #[error("{0}")]
    Invalid(String),
}

/// One supervised sequence: targets align with positions, unsupervised
/// positions carry [`IGNORE_TARGET`].
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub struct TaskSizes {
    pub pretrain: usize,
    pub finetune_train: usize,
    pub finetune_eval: usize,
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seed: u64,
    pub sizes: TaskSizes,
    /// Sequence length for char-lm / seq-classify; modular-arith is fixed
    /// at 3 tokens.
    pub seq_len: usize,
    /// Modulus for modular-arith.
    pub modulus: usize,
    /// Alphabet size for char-lm / seq-classify.
    pub alphabet: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub seed: u64,
    pretrain: Vec<Example>,
    finetune_train: Vec<Example>,
    finetune_eval: Vec<Example>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::FinetuneTrain => &self.finetune_train,
            Split::FinetuneEval => &self.finetune_eval,
        }
    }
}

pub fn make_task(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    if spec.sizes.pretrain == 0 || spec.sizes.finetune_train == 0 || spec.sizes.finetune_eval == 0 {
        return Err(TaskError::InvalidSizes("all split sizes must be positive".into()));
    }
    match spec.kind {
        TaskKind::ModularArith => make_modular_arith(spec),
        TaskKind::CharLm => make_char_lm(spec),
        TaskKind::SeqClassify => make_seq_classify(spec),
    }
}

fn make_modular_arith(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    let m = spec.modulus;
    if m < 2 {
        return Err(TaskError::Invalid(format!("modulus {m} must be >= 2")));
    }
    let total = spec.sizes.pretrain + spec.sizes.finetune_train + spec.sizes.finetune_eval;
    if total > m * m {
        return Err(TaskError::InvalidSizes(format!(
            "{total} examples requested but only {} operand pairs exist",
            m * m
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(u32, u32)> = (0..m as u32)
        .flat_map(|a| (0..m as u32).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);

    let eq = m as u32; // separator token
    let build = |pairs: &[(u32, u32)], subtract: bool| -> Vec<Example> {
        pairs
            .iter()
            .map(|&(a, b)| {
                let c = if subtract {
                    (a as i64 - b as i64).rem_euclid(m as i64) as u32
                } else {
                    (a + b) % m as u32
                };
                Example {
                    tokens: vec![a, b, eq],
                    targets: vec![IGNORE_TARGET, IGNORE_TARGET, c],
                }
            })
            .collect()
    };
    let (p, rest) = pairs.split_at(spec.sizes.pretrain);
    let (t, rest) = rest.split_at(spec.sizes.finetune_train);
    let e = &rest[..spec.sizes.finetune_eval];
    Ok(Dataset {
        kind: TaskKind::ModularArith,
        vocab: m + 1,
        seq_len: 3,
        seed: spec.seed,
        pretrain: build(p, false),
        finetune_train: build(t, true),
        finetune_eval: build(e, true),
    })
}

/// Seeded row-stochastic bigram matrix with a few dominant transitions
/// per row, so streams have learnable structure.
fn bigram_matrix(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<f64> {
    let mut mat = vec![0.0; vocab * vocab];
    for row in mat.chunks_mut(vocab) {
        for v in row.iter_mut() {
            *v = rng.gen_range(0.05..1.0);
        }
        // Boost three preferred successors per row.
        for _ in 0..3 {
            let j = rng.gen_range(0..vocab);
            row[j] += 4.0;
        }
        let total: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    mat
}

fn sample_row(rng: &mut ChaCha8Rng, row: &[f64]) -> u32 {
    let mut dart: f64 = rng.gen_range(0.0..1.0);
    for (i, &p) in row.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i as u32;
        }
    }
    (row.len() - 1) as u32
}

fn make_char_lm(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    let v = spec.alphabet;
    if v < 2 || spec.seq_len < 2 {
        return Err(TaskError::Invalid(format!(
            "char-lm needs alphabet >= 2 and seq_len >= 2, got {v}/{}",
            spec.seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pretrain_mat = bigram_matrix(&mut rng, v);
    let finetune_mat = bigram_matrix(&mut rng, v);

    let mut gen_split = |mat: &[f64], count: usize| -> Vec<Example> {
        (0..count)
            .map(|_| {
                let mut toks = Vec::with_capacity(spec.seq_len + 1);
                toks.push(rng.gen_range(0..v as u32));
                for i in 0..spec.seq_len {
                    let prev = toks[i] as usize;
                    toks.push(sample_row(&mut rng, &mat[prev * v..(prev + 1) * v]));
                }
                Example {
                    targets: toks[1..].to_vec(),
                    tokens: toks[..spec.seq_len].to_vec(),
                }
            })
            .collect()
    };
    let pretrain = gen_split(&pretrain_mat, spec.sizes.pretrain);
    let finetune_train = gen_split(&finetune_mat, spec.sizes.finetune_train);
    let finetune_eval = gen_split(&finetune_mat, spec.sizes.finetune_eval);
    Ok(Dataset {
        kind: TaskKind::CharLm,
        vocab: v,
        seq_len: spec.seq_len,
        seed: spec.seed,
        pretrain,
        finetune_train,
        finetune_eval,
    })
}

fn make_seq_classify(spec: &TaskSpec) -> Result<Dataset, TaskError> {
    let v = spec.alphabet;
    if v < 2 || spec.seq_len < 4 {
        return Err(TaskError::Invalid(format!(
            "seq-classify needs alphabet >= 2 and seq_len >= 4, got {v}/{}",
            spec.seq_len
        )));
    }
    // Probe positions: pretraining reads an early position, fine-tuning a
    // late one; the supervised position is always the last token.
    let probe_pre = 1;
    let probe_ft = spec.seq_len - 2;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gen_split = |probe: usize, count: usize| -> Vec<Example> {
        (0..count)
            .map(|_| {
                let tokens: Vec<u32> =
                    (0..spec.seq_len).map(|_| rng.gen_range(0..v as u32)).collect();
                let label = tokens[probe];
                let mut targets = vec![IGNORE_TARGET; spec.seq_len];
                targets[spec.seq_len - 1] = label;
                Example { tokens, targets }
            })
            .collect()
    };
    let pretrain = gen_split(probe_pre, spec.sizes.pretrain);
    let finetune_train = gen_split(probe_ft, spec.sizes.finetune_train);
    let finetune_eval = gen_split(probe_ft, spec.sizes.finetune_eval);
    Ok(Dataset {
        kind: TaskKind::SeqClassify,
        vocab: v,
        seq_len: spec.seq_len,
        seed: spec.seed,
        pretrain,
        finetune_train,
        finetune_eval,
    })
}

/// One forward batch: row-major `(batch, seq)` token and target ids.
#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
}

/// Deterministic shuffled batches over one split. Every epoch visits each
/// example exactly once; the final partial batch is kept.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    examples: &'a [Example],
    seq_len: usize,
    batch_size: usize,
    order_seed: u64,
}

impl<'a> BatchStream<'a> {
    pub fn new(
        dataset: &'a Dataset,
        split: Split,
        batch_size: usize,
        order_seed: u64,
    ) -> Result<Self, TaskError> {
        let examples = dataset.split(split);
        if examples.is_empty() {
            return Err(TaskError::EmptySplit(split));
        }
        Ok(BatchStream {
            examples,
            seq_len: dataset.seq_len,
            batch_size: batch_size.max(1),
            order_seed,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.examples.len().div_ceil(self.batch_size)
    }

    /// Batches for one epoch, in a seeded order that depends on the epoch
    /// index.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.order_seed ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);
        order
            .chunks(self.batch_size)
            .map(|chunk| {
                let mut tokens = Vec::with_capacity(chunk.len() * self.seq_len);
                let mut targets = Vec::with_capacity(chunk.len() * self.seq_len);
                for &i in chunk {
                    tokens.extend_from_slice(&self.examples[i].tokens);
                    targets.extend_from_slice(&self.examples[i].targets);
                }
                Batch {
                    tokens,
                    targets,
                    batch: chunk.len(),
                    seq: self.seq_len,
                }
            })
            .collect()
    }
}
