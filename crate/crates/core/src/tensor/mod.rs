//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! Tensors are plain row-major values. Differentiable computation happens on a
//! [`Tape`]: every op records its inputs and a backward rule, and
//! [`Tape::backward`] replays the record in reverse. Trainable weights live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`].

mod gemm;
mod params;
mod tape;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardFault, Gradients, Tape, Var};

pub(crate) use gemm::gemm;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err("tensor", format!("shape {shape:?} must be non-empty with positive extents"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return dim_err("from_rows", "ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| crate::Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Row count of a 2-D tensor (leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols()).map(<[f64]>::to_vec).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
