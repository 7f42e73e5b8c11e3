//! Dense float64 tensors and a tape-based reverse-mode autodiff graph.

mod graph;
pub(crate) mod kernels;
#[cfg(test)]
mod graph_tests;

use std::sync::Arc;

pub use graph::{Graph, Var};
pub(crate) use graph::softmax_in_place;

use crate::error::{LabError, Result};
use crate::rng::{fnv1a, RngState};

pub const MAX_RANK: usize = 4;

/// Row-major n-d array. Data is shared copy-on-write so that frozen weights can
/// be registered in many graphs without copying.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(LabError::Contract(format!(
            "tensor rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(LabError::Contract(format!(
            "tensor dims must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(LabError::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self::new(shape, vec![0.0; n]).expect("consistent")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("valid shape");
        Self::new(shape, vec![value; n]).expect("consistent")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("consistent")
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RngState) -> Self {
        let n = check_shape(shape).expect("valid shape");
        let data = (0..n).map(|_| std * rng.normal()).collect();
        Self::new(shape, data).expect("consistent")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(LabError::Dimension {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(LabError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_shared(shape.to_vec(), self.shared_data()))
    }

    /// FNV-1a over shape and the exact bit patterns of the data.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.shape.len() * 8 + self.numel() * 8);
        for &d in &self.shape {
            bytes.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in self.data.iter() {
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        fnv1a(&bytes)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl PartialEq for Tensor {
    /// Exact equality of shape and values; gradients are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
