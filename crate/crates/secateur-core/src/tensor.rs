//! Dense row-major `f64` tensors.
//!
//! Everything in the training path runs on 64-bit floats so the
//! finite-difference test oracles have enough headroom.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;

/// Dense tensor: shape plus contiguous row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CoreError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    /// Gaussian init, mean/sd given, driven by the run-owned generator.
    pub fn randn<R: Rng>(shape: &[usize], mean: f64, sd: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(mean + sd * crate::rngutil::standard_normal(rng));
        }
        Tensor { shape: shape.to_vec(), data, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, rg: bool) -> Self {
        self.requires_grad = rg;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, rg: bool) {
        self.requires_grad = rg;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows/cols view of a 2-d tensor; 1-d tensors count as a single row.
    pub fn dims2(&self) -> Result<(usize, usize), CoreError> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(CoreError::Shape(format!("expected at most 2 dims, got {s:?}"))),
        }
    }

    pub fn shape_string(&self) -> String {
        format!("{:?}", self.shape)
    }
}
