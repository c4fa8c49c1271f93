//! Dense real tensors and trainable parameters.

use crate::{Error, Result};

/// Dense row-major `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &[numel], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!("expected rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// Fails with [`Error::Numeric`] on the first NaN or infinity.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("{context}: non-finite value at index {i}"))),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(mut self, alpha: f64) -> Self {
        self.scale(alpha);
        self
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `idx` of the leading axis, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            data.extend_from_slice(&self.data[i * row..][..row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    /// `self[idx[k]] += alpha * src[k]` along the leading axis.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Tensor, alpha: f64) {
        let row: usize = self.shape[1..].iter().product();
        for (k, &i) in idx.iter().enumerate() {
            let dst = &mut self.data[i * row..][..row];
            for (d, s) in dst.iter_mut().zip(&src.data[k * row..][..row]) {
                *d += alpha * s;
            }
        }
    }
}

/// A trainable tensor plus the bookkeeping the optimizer needs.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters never accumulate gradient.
    pub frozen: bool,
    /// Whether weight decay applies (latent conv/linear weights only).
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let mut value = value;
        value.grad = Some(vec![0.0; value.numel()]);
        Param {
            name: name.into(),
            value,
            frozen: false,
            decay,
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.value.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn grad(&self) -> &[f64] {
        self.value.grad.as_deref().unwrap_or(&[])
    }

    /// Adds `g` into the gradient buffer unless frozen.
    pub fn accumulate(&mut self, g: &[f64]) {
        if self.frozen {
            return;
        }
        let grad = self.value.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.value.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}
