//! Shared test oracles: central finite differences and independent
//! reference evaluators, kept apart from the implementation they check.

use siftlab_core::{ElemType, Tape, Tensor, TensorId};

/// Relative error against a reference with an absolute floor.
pub fn rel_err(actual: f64, reference: f64) -> f64 {
    (actual - reference).abs() / (reference.abs() + 1e-8)
}

/// A scalar-valued function of one flat tensor, evaluated through a fresh
/// tape each call.
pub struct ScalarFn<'a> {
    pub shape: Vec<usize>,
    pub build: &'a dyn Fn(&mut Tape, TensorId) -> TensorId,
}

impl ScalarFn<'_> {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut tape = Tape::new(ElemType::F64);
        let p = tape
            .param(Tensor::new(self.shape.clone(), x.to_vec()).unwrap())
            .unwrap();
        let loss = (self.build)(&mut tape, p);
        tape.finish_forward(loss).unwrap()
    }

    pub fn autodiff_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(ElemType::F64);
        let p = tape
            .param(Tensor::new(self.shape.clone(), x.to_vec()).unwrap())
            .unwrap();
        let loss = (self.build)(&mut tape, p);
        tape.backward(loss).unwrap();
        tape.grad(p).unwrap().to_vec()
    }

    /// Central differences, step scaled per element.
    pub fn central_diff_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let h = 1e-5 * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = self.eval(&probe);
            probe[i] = x[i] - h;
            let down = self.eval(&probe);
            probe[i] = x[i];
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }
}

/// Independent plain-loop reimplementation of the MLP forward pass:
/// features through relu layers into a softmax cross-entropy mean.
pub fn mlp_forward_oracle(
    dims: &[usize],
    weights: &[(Vec<f64>, Vec<f64>)], // (w, b) per layer, row-major (in, out)
    features: &[f64],                 // (batch, dims[0])
    targets: &[usize],
) -> f64 {
    let batch = targets.len();
    let mut x = features.to_vec();
    let mut width = dims[0];
    for (li, (w, b)) in weights.iter().enumerate() {
        let out_w = dims[li + 1];
        let mut next = vec![0.0; batch * out_w];
        for r in 0..batch {
            for j in 0..out_w {
                let mut acc = b[j];
                for k in 0..width {
                    acc += x[r * width + k] * w[k * out_w + j];
                }
                // Hidden layers use relu; the last layer stays linear.
                next[r * out_w + j] = if li + 1 < weights.len() { acc.max(0.0) } else { acc };
            }
        }
        x = next;
        width = out_w;
    }
    let classes = *dims.last().unwrap();
    let mut total = 0.0;
    for r in 0..batch {
        let row = &x[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += -(row[targets[r]] - max - log_sum);
    }
    total / batch as f64
}
