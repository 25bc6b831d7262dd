use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(r: RawTensor) -> Result<Self> {
        Tensor::new(r.shape, r.values)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Config(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    /// Builds a tensor whose shape and length are known to agree.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    /// # Panics
    /// Panics on an empty vector.
    pub fn vector(values: Vec<f64>) -> Self {
        assert!(!values.is_empty(), "empty tensor");
        Self::from_parts(vec![values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_parts(self.shape.clone(), self.values.iter().map(|v| v * c).collect())
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
