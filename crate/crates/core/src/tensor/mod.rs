//! Dense tensors, trainable parameters and the hand-derived numerics LEXNet needs.

mod gradcheck;
pub mod kernels;
pub mod ops;
mod sgd;

use std::fmt;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{finite_diff_check, GradCheck};
pub use sgd::{sgd_step, SgdConfig, WeightDecay};

/// Floating point scalar the numerics are generic over.
///
/// Models run in `f32`; gradient checks instantiate the same code in `f64`.
pub trait Real:
    Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    /// `c ← a·b + beta·c` for an `m × k` by `k × n` product, every operand
    /// addressed through (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], usize, usize), b: (&[Self], usize, usize), beta: Self, c: (&mut [Self], usize, usize));
}

fn check_operand(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, a: (&[Self], usize, usize), b: (&[Self], usize, usize), beta: Self, c: (&mut [Self], usize, usize)) {
                check_operand(a.0.len(), m, k, a.1, a.2);
                check_operand(b.0.len(), k, n, b.1, b.2);
                check_operand(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index the routine touches was bounds-checked above,
                // and `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.0.as_ptr(), a.1 as isize, a.2 as isize,
                        b.0.as_ptr(), b.1 as isize, b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(), c.1 as isize, c.2 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()], grad: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::dim("tensor", format!("at most 4 axes supported, got {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim("set_grad", format!("{} vs {}", grad.len(), self.data.len())));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)).sum()
    }

    /// Converts between scalar precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect()),
        }
    }
}

/// Which optimization stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Prototype,
    LastLayer,
}

#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    name: String,
    group: ParamGroup,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub(crate) velocity: Option<Vec<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> Self {
        Self { name: name.into(), group, tensor, trainable: true, velocity: None }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn values(&self) -> &[T] {
        self.tensor.data()
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        self.tensor.data_mut()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.tensor.grad_mut()
    }

    pub fn cast<U: Real>(&self) -> Parameter<U> {
        Parameter {
            name: self.name.clone(),
            group: self.group,
            tensor: self.tensor.cast(),
            trainable: self.trainable,
            velocity: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_enforced() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_matches_shape() {
        let mut t = Tensor::<f64>::zeros(&[3, 4]);
        assert!(t.grad().is_none());
        assert_eq!(t.grad_mut().len(), 12);
        assert!(t.set_grad(vec![0.0; 11]).is_err());
    }

    #[test]
    fn non_finite_detected() {
        let t = Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("x"), Err(Error::NonFinite("x"))));
    }
}
