//! Finite-difference verification of every tape primitive, plus an
//! independent forward-pass oracle for the MLP.

mod support;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siftlab_core::models::{build_model, forward_loss, ModelBinding, ModelConfig, ModelKind};
use siftlab_core::tasks::Batch;
use siftlab_core::{ElemType, Tape, Tensor, IGNORE_TARGET};
use support::{mlp_forward_oracle, rel_err, ScalarFn};

const TOL: f64 = 1e-4;

fn assert_fd(case: &str, f: &ScalarFn<'_>, x: &[f64]) {
    let ad = f.autodiff_grad(x);
    let fd = f.central_diff_grad(x);
    for (i, (&a, &d)) in ad.iter().zip(&fd).enumerate() {
        assert!(
            rel_err(a, d) < TOL,
            "{case}[{i}]: autodiff {a} vs central-diff {d}"
        );
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

/// Keep relu inputs away from its kink so central differences are valid.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn matmul_variants_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for trial in 0..12 {
        let (m, k, n) = (
            rng.gen_range(1..4usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..4usize),
        );
        let b_data = rand_vec(&mut rng, k * n);
        let w = rand_vec(&mut rng, m * n);

        // x as left operand
        let build = |tape: &mut Tape, x| {
            let b = tape.constant(Tensor::new(vec![k, n], b_data.clone()).unwrap());
            let wt = tape.constant(Tensor::new(vec![m, n], w.clone()).unwrap());
            let y = tape.matmul(x, b).unwrap();
            let y = tape.mul(y, wt).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![m, k],
            build: &build,
        };
        assert_fd(&format!("matmul-left#{trial}"), &f, &rand_vec(&mut rng, m * k));

        // x as right operand, transposed
        let a_data = rand_vec(&mut rng, m * k);
        let build_t = |tape: &mut Tape, x| {
            let a = tape.constant(Tensor::new(vec![m, k], a_data.clone()).unwrap());
            let wt = tape.constant(Tensor::new(vec![m, n], w.clone()).unwrap());
            let y = tape.matmul_nt(a, x).unwrap();
            let y = tape.mul(y, wt).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![n, k],
            build: &build_t,
        };
        assert_fd(&format!("matmul-nt-right#{trial}"), &f, &rand_vec(&mut rng, n * k));
    }
}

#[test]
fn batched_matmul_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for trial in 0..8 {
        let (l, m, k, n) = (2usize, 2usize, rng.gen_range(1..4usize), 2usize);
        let b_data = rand_vec(&mut rng, l * k * n);
        let w = rand_vec(&mut rng, l * m * n);
        let build = |tape: &mut Tape, x| {
            let b = tape.constant(Tensor::new(vec![l, k, n], b_data.clone()).unwrap());
            let wt = tape.constant(Tensor::new(vec![l, m, n], w.clone()).unwrap());
            let y = tape.matmul(x, b).unwrap();
            let y = tape.mul(y, wt).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![l, m, k],
            build: &build,
        };
        assert_fd(&format!("matmul-batched#{trial}"), &f, &rand_vec(&mut rng, l * m * k));
    }
}

#[test]
fn add_mul_broadcast_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for trial in 0..10 {
        let (rows, cols) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
        let big = rand_vec(&mut rng, rows * cols);
        let w = rand_vec(&mut rng, rows * cols);

        // x as the broadcast (small) operand of add and mul.
        for op in ["add", "mul"] {
            let build = |tape: &mut Tape, x| {
                let a = tape.constant(Tensor::new(vec![rows, cols], big.clone()).unwrap());
                let wt = tape.constant(Tensor::new(vec![rows, cols], w.clone()).unwrap());
                let y = match op {
                    "add" => tape.add(a, x).unwrap(),
                    _ => tape.mul(a, x).unwrap(),
                };
                let y = tape.mul(y, wt).unwrap();
                tape.mean(y).unwrap()
            };
            let f = ScalarFn {
                shape: vec![cols],
                build: &build,
            };
            assert_fd(&format!("{op}-row-broadcast#{trial}"), &f, &rand_vec(&mut rng, cols));
        }

        // Scalar broadcast.
        let build = |tape: &mut Tape, x| {
            let a = tape.constant(Tensor::new(vec![rows, cols], big.clone()).unwrap());
            let y = tape.mul(a, x).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![],
            build: &build,
        };
        assert_fd(&format!("mul-scalar#{trial}"), &f, &rand_vec(&mut rng, 1));
    }
}

#[test]
fn activations_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..10 {
        let n = rng.gen_range(2..12usize);
        let w = rand_vec(&mut rng, n);
        for op in ["relu", "gelu", "softmax"] {
            let build = |tape: &mut Tape, x| {
                let wt = tape.constant(Tensor::new(vec![n], w.clone()).unwrap());
                let y = match op {
                    "relu" => tape.relu(x).unwrap(),
                    "gelu" => tape.gelu(x).unwrap(),
                    _ => tape.softmax(x).unwrap(),
                };
                let y = tape.mul(y, wt).unwrap();
                tape.mean(y).unwrap()
            };
            let f = ScalarFn {
                shape: vec![n],
                build: &build,
            };
            let x = rand_vec_off_zero(&mut rng, n);
            assert_fd(&format!("{op}#{trial}"), &f, &x);
        }
    }
}

#[test]
fn layer_norm_all_slots_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for trial in 0..8 {
        let (rows, d) = (rng.gen_range(1..4usize), rng.gen_range(2..6usize));
        let xv = rand_vec(&mut rng, rows * d);
        let gv = rand_vec(&mut rng, d);
        let bv = rand_vec(&mut rng, d);
        let w = rand_vec(&mut rng, rows * d);

        let project = |tape: &mut Tape, y| {
            let wt = tape.constant(Tensor::new(vec![rows, d], w.clone()).unwrap());
            let y = tape.mul(y, wt).unwrap();
            tape.mean(y).unwrap()
        };
        // x slot
        let build = |tape: &mut Tape, x| {
            let g = tape.constant(Tensor::new(vec![d], gv.clone()).unwrap());
            let b = tape.constant(Tensor::new(vec![d], bv.clone()).unwrap());
            let y = tape.layer_norm(x, g, b).unwrap();
            project(tape, y)
        };
        let f = ScalarFn {
            shape: vec![rows, d],
            build: &build,
        };
        assert_fd(&format!("layer-norm-x#{trial}"), &f, &xv);
        // gain slot
        let build = |tape: &mut Tape, g| {
            let x = tape.constant(Tensor::new(vec![rows, d], xv.clone()).unwrap());
            let b = tape.constant(Tensor::new(vec![d], bv.clone()).unwrap());
            let y = tape.layer_norm(x, g, b).unwrap();
            project(tape, y)
        };
        let f = ScalarFn {
            shape: vec![d],
            build: &build,
        };
        assert_fd(&format!("layer-norm-gain#{trial}"), &f, &gv);
        // bias slot
        let build = |tape: &mut Tape, b| {
            let x = tape.constant(Tensor::new(vec![rows, d], xv.clone()).unwrap());
            let g = tape.constant(Tensor::new(vec![d], gv.clone()).unwrap());
            let y = tape.layer_norm(x, g, b).unwrap();
            project(tape, y)
        };
        let f = ScalarFn {
            shape: vec![d],
            build: &build,
        };
        assert_fd(&format!("layer-norm-bias#{trial}"), &f, &bv);
    }
}

#[test]
fn embedding_cross_entropy_mean_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for trial in 0..10 {
        let (vocab, d, toks) = (
            rng.gen_range(3..7usize),
            rng.gen_range(2..5usize),
            rng.gen_range(2..6usize),
        );
        let ids: Vec<u32> = (0..toks).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let w = rand_vec(&mut rng, toks * d);
        // embedding table slot
        let build = |tape: &mut Tape, table| {
            let y = tape.embedding(table, &ids, &[toks]).unwrap();
            let wt = tape.constant(Tensor::new(vec![toks, d], w.clone()).unwrap());
            let y = tape.mul(y, wt).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![vocab, d],
            build: &build,
        };
        assert_fd(&format!("embedding#{trial}"), &f, &rand_vec(&mut rng, vocab * d));

        // cross-entropy logits slot (with one ignored row when possible)
        let rows = rng.gen_range(2..5usize);
        let classes = rng.gen_range(2..5usize);
        let mut targets: Vec<u32> = (0..rows)
            .map(|_| rng.gen_range(0..classes as u32))
            .collect();
        if rows > 1 {
            targets[0] = IGNORE_TARGET;
        }
        let build = |tape: &mut Tape, logits| tape.cross_entropy(logits, &targets).unwrap();
        let f = ScalarFn {
            shape: vec![rows, classes],
            build: &build,
        };
        assert_fd(&format!("cross-entropy#{trial}"), &f, &rand_vec(&mut rng, rows * classes));

        // mean
        let n = rng.gen_range(1..9usize);
        let build = |tape: &mut Tape, x| tape.mean(x).unwrap();
        let f = ScalarFn {
            shape: vec![n],
            build: &build,
        };
        assert_fd(&format!("mean#{trial}"), &f, &rand_vec(&mut rng, n));
    }
}

#[test]
fn head_split_merge_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for trial in 0..6 {
        let (b, t, heads, hd) = (2usize, 3usize, 2usize, rng.gen_range(1..3usize));
        let d = heads * hd;
        let w = rand_vec(&mut rng, b * t * d);
        let build = |tape: &mut Tape, x| {
            let s = tape.head_split(x, heads).unwrap();
            let m = tape.head_merge(s).unwrap();
            let wt = tape.constant(Tensor::new(vec![b, t, d], w.clone()).unwrap());
            let y = tape.mul(m, wt).unwrap();
            tape.mean(y).unwrap()
        };
        let f = ScalarFn {
            shape: vec![b, t, d],
            build: &build,
        };
        assert_fd(&format!("head-split-merge#{trial}"), &f, &rand_vec(&mut rng, b * t * d));
    }
}

#[test]
fn random_mlp_composite_matches_central_differences() {
    // End to end: gradient of the full MLP loss with respect to one layer.
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for trial in 0..4 {
        let dims = [3usize, 6, 4];
        let batch = 4usize;
        let feats = rand_vec(&mut rng, batch * dims[0]);
        let b1 = rand_vec(&mut rng, dims[1]);
        let (w2, b2) = (rand_vec(&mut rng, dims[1] * dims[2]), rand_vec(&mut rng, dims[2]));
        let targets: Vec<u32> = (0..batch).map(|_| rng.gen_range(0..dims[2] as u32)).collect();
        let build = |tape: &mut Tape, w1| {
            let x = tape.constant(Tensor::new(vec![batch, dims[0]], feats.clone()).unwrap());
            let b1t = tape.constant(Tensor::new(vec![dims[1]], b1.clone()).unwrap());
            let w2t = tape.constant(Tensor::new(vec![dims[1], dims[2]], w2.clone()).unwrap());
            let b2t = tape.constant(Tensor::new(vec![dims[2]], b2.clone()).unwrap());
            let h = tape.matmul(x, w1).unwrap();
            let h = tape.add(h, b1t).unwrap();
            let h = tape.relu(h).unwrap();
            let o = tape.matmul(h, w2t).unwrap();
            let o = tape.add(o, b2t).unwrap();
            tape.cross_entropy(o, &targets).unwrap()
        };
        let f = ScalarFn {
            shape: vec![dims[0], dims[1]],
            build: &build,
        };
        assert_fd(
            &format!("mlp-composite#{trial}"),
            &f,
            &rand_vec_off_zero(&mut rng, dims[0] * dims[1]),
        );
    }
}

#[test]
fn transformer_composite_gradient_matches_central_differences() {
    // Full model loss, one trainable tensor at a time, against central
    // differences computed through forward-only evaluation.
    let config = ModelConfig {
        kind: ModelKind::TinyTransformer {
            hidden: 8,
            layers: 1,
            heads: 2,
            vocab: 6,
            seq_len: 4,
        },
        seed: 42,
    };
    let params = build_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let batch = Batch {
        tokens: (0..8).map(|_| rng.gen_range(0..6u32)).collect(),
        targets: (0..8).map(|_| rng.gen_range(0..6u32)).collect(),
        batch: 2,
        seq: 4,
    };
    let loss_at = |ps: &siftlab_core::models::ParamSet| -> f64 {
        let mut tape = Tape::new(ElemType::F64);
        let binding = ModelBinding::bind(&mut tape, ps, &BTreeSet::new()).unwrap();
        let loss = forward_loss(&mut tape, &binding, &config, &batch).unwrap();
        tape.data(loss)[0]
    };
    for name in ["layer.0.attn.q", "layer.0.ln1.g", "embed.tok", "layer.0.mlp.fc1.w", "head.out.b"] {
        let mut tape = Tape::new(ElemType::F64);
        let trainable: BTreeSet<String> = [name.to_string()].into_iter().collect();
        let binding = ModelBinding::bind(&mut tape, &params, &trainable).unwrap();
        let loss = forward_loss(&mut tape, &binding, &config, &batch).unwrap();
        tape.backward(loss).unwrap();
        let id = binding.id(name).unwrap();
        let ad = tape.grad(id).unwrap().to_vec();

        let base = params.get(name).unwrap().clone();
        // Probe a bounded sample of coordinates to keep the test quick.
        let stride = (base.len() / 24).max(1);
        for i in (0..base.len()).step_by(stride) {
            let h = 1e-5 * base.data()[i].abs().max(1.0);
            let mut up = params.clone();
            up.get_mut(name).unwrap().data_mut()[i] = base.data()[i] + h;
            let mut down = params.clone();
            down.get_mut(name).unwrap().data_mut()[i] = base.data()[i] - h;
            let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            assert!(
                rel_err(ad[i], fd) < TOL,
                "{name}[{i}]: autodiff {} vs fd {fd}",
                ad[i]
            );
        }
    }
}

#[test]
fn mlp_forward_matches_independent_oracle() {
    // Fixed seed-0 weights, fixed batch; the tape forward must agree with
    // a plain-loop reimplementation.
    let dims = vec![5usize, 8, 3];
    let config = ModelConfig {
        kind: ModelKind::Mlp { dims: dims.clone() },
        seed: 0,
    };
    let params = build_model(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let batch_size = 6usize;
    let tokens: Vec<u32> = (0..batch_size * dims[0]).map(|_| rng.gen_range(0..9u32)).collect();
    let targets_per_row: Vec<u32> = (0..batch_size).map(|_| rng.gen_range(0..3u32)).collect();
    let mut targets = vec![IGNORE_TARGET; batch_size * dims[0]];
    for (r, &t) in targets_per_row.iter().enumerate() {
        targets[r * dims[0] + dims[0] - 1] = t;
    }
    let batch = Batch {
        tokens: tokens.clone(),
        targets,
        batch: batch_size,
        seq: dims[0],
    };

    let mut tape = Tape::new(ElemType::F64);
    let binding = ModelBinding::bind(&mut tape, &params, &BTreeSet::new()).unwrap();
    let loss = forward_loss(&mut tape, &binding, &config, &batch).unwrap();
    let tape_loss = tape.data(loss)[0];

    // The model scales features to [-1, 1] by the batch max token.
    let denom = *tokens.iter().max().unwrap() as f64;
    let feats: Vec<f64> = tokens.iter().map(|&t| 2.0 * t as f64 / denom - 1.0).collect();
    let weights = vec![
        (
            params.get("layer.0.mlp.fc.w").unwrap().data().to_vec(),
            params.get("layer.0.mlp.fc.b").unwrap().data().to_vec(),
        ),
        (
            params.get("head.out.w").unwrap().data().to_vec(),
            params.get("head.out.b").unwrap().data().to_vec(),
        ),
    ];
    let oracle = mlp_forward_oracle(
        &dims,
        &weights,
        &feats,
        &targets_per_row.iter().map(|&t| t as usize).collect::<Vec<_>>(),
    );
    assert!(
        (tape_loss - oracle).abs() < 1e-12,
        "tape {tape_loss} vs oracle {oracle}"
    );
}

#[test]
fn identity_map_squared_loss_is_zero() {
    // Squared loss of an identity map at x == y, composed from primitives.
    let mut tape = Tape::new(ElemType::F64);
    let x = tape.param(Tensor::from_vec(vec![0.7, -1.2, 3.0])).unwrap();
    let y = tape.constant(Tensor::from_vec(vec![0.7, -1.2, 3.0]));
    let neg = tape.constant(Tensor::scalar(-1.0));
    let neg_y = tape.mul(y, neg).unwrap();
    let diff = tape.add(x, neg_y).unwrap();
    let sq = tape.mul(diff, diff).unwrap();
    let loss = tape.mean(sq).unwrap();
    assert_eq!(tape.finish_forward(loss).unwrap(), 0.0);
}
