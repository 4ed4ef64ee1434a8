//! Dense row-major tensors with shared, immutable storage.

mod element;
pub mod memory;

use std::fmt;
use std::sync::Arc;

use rand::Rng;

pub use element::Element;

use crate::error::{Error, Result};

struct Storage<E> {
    data: Vec<E>,
    bytes: usize,
}

impl<E> Storage<E> {
    fn new(data: Vec<E>) -> Self {
        let bytes = data.len() * std::mem::size_of::<E>();
        memory::charge(bytes);
        Storage { data, bytes }
    }
}

impl<E> Drop for Storage<E> {
    fn drop(&mut self) {
        memory::release(self.bytes);
    }
}

/// An N-dimensional array. Cloning is cheap; contents never change after
/// construction.
#[derive(Clone)]
pub struct Tensor<E: Element = f32> {
    shape: Vec<usize>,
    storage: Arc<Storage<E>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    /// Caller guarantees `numel(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Tensor {
            shape,
            storage: Arc::new(Storage::new(data)),
        }
    }

    pub fn from_slice(shape: &[usize], data: &[E]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| E::lit(rng.gen_range(low..high)))
    }

    /// Standard normal samples via Box-Muller.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            E::lit((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.storage.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.storage.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.storage.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.storage.data[0])
    }

    /// Same storage viewed under a new shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            storage: Arc::clone(&self.storage),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::from_parts(self.shape.clone(), self.data().iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(E, E) -> E) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor::from_parts(self.shape.clone(), self.data().iter().map(|v| F::lit(v.as_f64())).collect())
    }

    pub fn sum(&self) -> E {
        self.data().iter().copied().sum()
    }

    pub fn max_abs(&self) -> E {
        self.data().iter().fold(E::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

impl<E: Element> PartialEq for Tensor<E> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", E::NAME, self.shape)?;
        for (i, v) in self.data().iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.numel() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.reshape(&[4]).is_err());
        assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn storage_is_accounted() {
        memory::reset_peak();
        let before = memory::live_bytes();
        {
            let t = Tensor::<f32>::zeros(&[1000]);
            let _alias = t.reshape(&[10, 100]).unwrap();
            assert_eq!(memory::live_bytes(), before + 4000);
        }
        assert_eq!(memory::live_bytes(), before);
        assert!(memory::peak_bytes() >= before + 4000);
    }
}
