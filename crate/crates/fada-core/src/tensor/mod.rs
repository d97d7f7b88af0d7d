//! Dense tensors and reverse-mode differentiation.
//!
//! Training runs in `f32`; every operation is also instantiable at `f64`,
//! which the gradient-verification tests use exclusively.

mod adam;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{Tape, Var};

use std::fmt;

use crate::error::{Error, Result};

/// Element type of a tensor. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: fmt::Debug> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<E: Scalar> Tensor<E> {
    /// Builds a tensor, checking that the shape accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![E::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// 0-rank-style scalar, stored as shape `[1]`.
    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if !self.is_scalar() {
            return Err(Error::shape("item", format!("expected scalar, got {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(op, format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(op, format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Gathers rows (slices along the first axis) into a new tensor.
    pub fn gather_rows(&self, rows: &[u32]) -> Result<Tensor<E>> {
        if self.shape.is_empty() {
            return Err(Error::shape("gather_rows", "rank 0 tensor".to_string()));
        }
        let n = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            let r = r as usize;
            if r >= n {
                return Err(Error::invalid(
                    "gather_rows",
                    format!("row {} out of range for axis of size {}", r, n),
                ));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Splits a rank-2 tensor column-wise at `p`, recovering `concat` inputs.
    pub fn split_cols(&self, p: usize) -> Result<(Tensor<E>, Tensor<E>)> {
        let (rows, cols) = self.dims2("split_cols")?;
        if p > cols {
            return Err(Error::invalid("split_cols", format!("split {} > width {}", p, cols)));
        }
        let mut left = Vec::with_capacity(rows * p);
        let mut right = Vec::with_capacity(rows * (cols - p));
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            left.extend_from_slice(&row[..p]);
            right.extend_from_slice(&row[p..]);
        }
        Ok((Tensor { shape: vec![rows, p], data: left }, Tensor { shape: vec![rows, cols - p], data: right }))
    }

    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable (or frozen) tensor with its gradient slot.
#[derive(Clone)]
pub struct Parameter<E> {
    name: String,
    value: Tensor<E>,
    grad: Tensor<E>,
    trainable: bool,
}

impl<E: fmt::Debug> fmt::Debug for Parameter<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Parameter({} {:?})", self.name, self.value.shape)
    }
}

impl<E: Scalar> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { name: name.into(), value, grad, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<E>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<E> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<E> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = E::zero();
        }
    }

    /// Overwrites the gradient slot; `None` means the parameter was not on
    /// the loss path and its gradient is zero.
    pub fn set_grad(&mut self, grad: Option<&Tensor<E>>) {
        match grad {
            Some(g) => {
                debug_assert_eq!(g.shape(), self.value.shape());
                self.grad.data_mut().copy_from_slice(g.data());
            }
            None => self.zero_grad(),
        }
    }

    /// Bitwise fingerprint of the parameter value, for freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.value.data() {
            let bits = v.as_f64().to_bits();
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Combined checksum over a parameter list, for freeze contracts.
pub fn params_checksum<E: Scalar>(params: &[&Parameter<E>]) -> u64 {
    let mut h: u64 = 0x84222325_cbf29ce4;
    for p in params {
        h = h.rotate_left(13) ^ p.checksum();
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0f32; 6]).is_ok());
    }

    #[test]
    fn gather_rows_picks_slices() {
        let t = Tensor::new(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert_eq!(g.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.gather_rows(&[3]).is_err());
    }

    #[test]
    fn parameter_zero_grad_resets_exactly() {
        let mut p = Parameter::new("w", Tensor::full(vec![2, 2], 1.5f32));
        p.set_grad(Some(&Tensor::full(vec![2, 2], 3.0)));
        assert_eq!(p.grad().data(), &[3.0; 4]);
        p.zero_grad();
        assert!(p.grad().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn checksum_tracks_value_bits() {
        let p = Parameter::new("w", Tensor::full(vec![2], 1.0f32));
        let mut q = p.clone();
        assert_eq!(p.checksum(), q.checksum());
        q.value_mut().data_mut()[0] = 1.0 + f32::EPSILON;
        assert_ne!(p.checksum(), q.checksum());
    }
}
