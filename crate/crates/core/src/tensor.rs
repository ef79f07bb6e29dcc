//! Dense row-major `f64` arrays.
//!
//! This is the small substrate everything else is built on: weight and bias
//! blocks, probe inputs, coefficient matrices. Only the operations the rest
//! of the crate needs are provided (matrix multiply, 1-D valid convolution,
//! elementwise maps and a couple of reductions).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(dim_err("shape needs at least one axis"));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(dim_err(format!("axis {axis} of shape {dims:?} is zero")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| dim_err(format!("element count of {dims:?} overflows")))?;
        Ok(Self(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape.0,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(dim_err(format!(
                "shape {shape} needs {} entries, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.numel();
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != n) {
            return Err(dim_err(format!(
                "row {bad} has {} entries, expected {n}",
                rows[bad].len()
            )));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.rank());
        index
            .iter()
            .zip(self.dims())
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Contiguous slice along the last axis at the given leading index.
    pub fn lane(&self, leading: &[usize]) -> &[f64] {
        let last = *self.dims().last().unwrap();
        let mut full = leading.to_vec();
        full.push(0);
        let start = self.offset(&full);
        &self.data[start..start + last]
    }

    pub fn lane_mut(&mut self, leading: &[usize]) -> &mut [f64] {
        let last = *self.dims().last().unwrap();
        let mut full = leading.to_vec();
        full.push(0);
        let start = self.offset(&full);
        &mut self.data[start..start + last]
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "elementwise shapes differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|x| a * x)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Infinity norm of the flattened data.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Matrix product of `[m, k]` and `[k, n]`; a rank-1 right operand is
    /// treated as a column vector and the result is rank 1.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.rank() != 2 || !(1..=2).contains(&other.shape.rank()) {
            return Err(dim_err(format!(
                "matmul needs a matrix and a matrix/vector, got {} and {}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = match other.dims() {
            [k2] => (*k2, 1),
            [k2, n] => (*k2, *n),
            _ => unreachable!(),
        };
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner dimensions differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (l, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[l * n..(l + 1) * n];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        let dims = if other.shape.rank() == 1 {
            vec![m]
        } else {
            vec![m, n]
        };
        Tensor::new(dims, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.rank() != 2 {
            return Err(dim_err(format!("transpose needs a matrix, got {}", self.shape)));
        }
        let (m, n) = (self.dims()[0], self.dims()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// 1-D valid convolution (cross-correlation, no kernel flip):
/// `y[i] = Σ_j kernel[j] · signal[i + j]`, output length `n − m + 1`.
pub fn conv1d_valid(kernel: &[f64], signal: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = (kernel.len(), signal.len());
    if m == 0 || n < m {
        return Err(dim_err(format!(
            "valid convolution needs 1 ≤ kernel length ≤ signal length, got kernel {m}, signal {n}"
        )));
    }
    Ok((0..=n - m)
        .map(|i| kernel.iter().zip(&signal[i..i + m]).map(|(w, x)| w * x).sum())
        .collect())
}

/// Tensor form of [`conv1d_valid`] for rank-1 tensors.
pub fn conv1d_valid_tensor(kernel: &Tensor, signal: &Tensor) -> Result<Tensor> {
    if kernel.shape().rank() != 1 || signal.shape().rank() != 1 {
        return Err(dim_err(format!(
            "conv1d_valid needs vectors, got {} and {}",
            kernel.shape(),
            signal.shape()
        )));
    }
    Tensor::vector(conv1d_valid(kernel.data(), signal.data())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elementwise {
    Relu,
    Sin,
    Tanh,
    Abs,
    Square,
}

impl Elementwise {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Relu => x.max(0.0),
            Elementwise::Sin => x.sin(),
            Elementwise::Tanh => x.tanh(),
            Elementwise::Abs => x.abs(),
            Elementwise::Square => x * x,
        }
    }
}

pub fn elementwise(op: Elementwise, t: &Tensor) -> Tensor {
    t.map(|x| op.apply(x))
}
