//! Dense rank-4 arrays in `(batch, channel, height, width)` row-major order.
//!
//! Vectors and matrices are carried as rank-4 tensors with trailing unit
//! dimensions: a `B x C` statistic table is `(B, C, 1, 1)`, a batch of logits
//! is `(B, K, 1, 1)` and a scalar is `(1, 1, 1, 1)`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Self { dims, data: vec![value; numel(dims)], grad: None }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err!("dimensions must be positive, got {dims:?}"));
        }
        if data.len() != numel(dims) {
            return Err(shape_err!(
                "{} values do not fill dims {dims:?} ({} expected)",
                data.len(),
                numel(dims)
            ));
        }
        Ok(Self { dims, data, grad: None })
    }

    pub fn scalar(value: f64) -> Self {
        Self { dims: [1, 1, 1, 1], data: vec![value], grad: None }
    }

    /// A `(rows, cols, 1, 1)` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec([rows, cols, 1, 1], data)
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let data = (0..numel(dims)).map(|_| rng.sample(StandardNormal)).collect();
        Self { dims, data, grad: None }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: Dims, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(dims)).map(|_| rng.random_range(lo..hi)).collect();
        Self { dims, data, grad: None }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Elements per batch entry.
    pub fn item_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cc, hh, ww] = self.dims;
        ((b * cc + c) * hh + h) * ww + w
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(b, c, h, w);
        self.data[i] = value;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(shape_err!("gradient of length {} for tensor {:?}", grad.len(), self.dims));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, dims: Dims) -> Result<Self> {
        if numel(dims) != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {dims:?}", self.dims));
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    /// Copies the listed batch entries, in order, into a new tensor.
    pub fn select_batch(&self, idx: &[usize]) -> Result<Self> {
        let item = self.item_len();
        let mut data = Vec::with_capacity(idx.len() * item);
        for &b in idx {
            if b >= self.dims[0] {
                return Err(shape_err!("batch index {b} out of range for {:?}", self.dims));
            }
            data.extend_from_slice(&self.data[b * item..(b + 1) * item]);
        }
        Self::from_vec([idx.len(), self.dims[1], self.dims[2], self.dims[3]], data)
    }

    /// Stacks tensors along the batch axis.
    pub fn stack(parts: &[&Tensor4]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("nothing to stack"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.dims[1..] != [c, h, w] {
                return Err(shape_err!("cannot stack {:?} onto {:?}", p.dims, first.dims));
            }
            b += p.dims[0];
            data.extend_from_slice(&p.data);
        }
        Self::from_vec([b, c, h, w], data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}
