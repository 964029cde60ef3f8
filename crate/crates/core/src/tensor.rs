//! Dense tensors: flat row-major buffers with shape metadata.
//!
//! All arithmetic in this crate runs in 64-bit. The run-wide element type
//! only controls *storage*: with [`ElemType::F32`] every stored value is
//! rounded to the nearest f32 after each operation, so buffers always hold
//! values representable in the configured width while reductions still
//! accumulate in 64-bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Run-wide storage element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    /// Round a value to the storage width.
    #[inline]
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            ElemType::F32 => x as f32 as f64,
            ElemType::F64 => x,
        }
    }

    pub fn quantize_slice(self, xs: &mut [f64]) {
        if self == ElemType::F32 {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Bytes per element when persisted.
    pub fn byte_width(self) -> usize {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }

    /// Stable on-disk tag.
    pub fn tag(self) -> u8 {
        match self {
            ElemType::F32 => 0,
            ElemType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ElemType::F32),
            1 => Some(ElemType::F64),
            _ => None,
        }
    }
}

impl std::fmt::Display for ElemType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ElemType::F32 => write!(f, "f32"),
            ElemType::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for ElemType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(ElemType::F32),
            "f64" => Ok(ElemType::F64),
            other => Err(format!("unknown element type `{other}` (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} has {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} contains a zero extent")]
    ZeroExtent(Vec<usize>),
}

/// Number of elements implied by a shape. Rank-0 shapes are scalars.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                expected,
                actual: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Round every element to the storage width in place.
    pub fn quantize(&mut self, elem: ElemType) {
        elem.quantize_slice(&mut self.data);
    }
}

/// True when `small` can broadcast against the trailing dimensions of `big`.
/// Covers equal shapes, row-style suffixes, and rank-0 scalars.
pub fn is_suffix_broadcast(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}
