//! Dense N-dimensional tensor with shared, immutable storage.
//!
//! Canonical image layout is `[N, C, H, W]`. Storage is row-major and
//! reference counted, so cloning a tensor is cheap and every constructed
//! tensor is an immutable value.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} needs {} scalars, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Internal constructor for shapes already known to match.
    pub(crate) fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    /// Rank-1 single-element tensor holding one scalar value.
    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::invalid(
                "item",
                format!("expected a scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Self {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Same storage, different shape.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        )
    }

    /// Index of the first non-finite scalar, if any. NaN/Inf detection is an
    /// explicit check rather than an implicit cost on every construction.
    pub fn find_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        match self.find_non_finite() {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                what: format!("{what} (flat index {i})"),
            }),
        }
    }

    /// Bitwise equality of shape and storage.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn offset4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset4(n, c, h, w)]
    }
}

/// Shape of the result of broadcasting `a` against `b`, or an error when the
/// shapes are incompatible. Supported forms: identical shapes, a one-element
/// tensor against anything, and equal-rank shapes with singleton axes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let a_len: usize = a.iter().product();
    let b_len: usize = b.iter().product();
    if a_len == 1 {
        return Ok(b.to_vec());
    }
    if b_len == 1 {
        return Ok(a.to_vec());
    }
    if a.len() == b.len() {
        let mut out = Vec::with_capacity(a.len());
        for (&da, &db) in a.iter().zip(b.iter()) {
            if da == db || db == 1 {
                out.push(da);
            } else if da == 1 {
                out.push(db);
            } else {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        return Ok(out);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Elementwise combine with broadcasting as described for [`broadcast_shape`].
pub fn zip_broadcast<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;

    // Fast paths: identical shapes and scalar operands.
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::new(out_shape, data));
    }
    if a.len() == 1 {
        let x = a.data()[0];
        return Ok(Tensor::new(out_shape, b.data().iter().map(|&y| f(x, y)).collect()));
    }
    if b.len() == 1 {
        let y = b.data()[0];
        return Ok(Tensor::new(out_shape, a.data().iter().map(|&x| f(x, y)).collect()));
    }

    // General equal-rank singleton broadcast via strided iteration.
    let rank = out_shape.len();
    let a_strides = singleton_strides(a.shape(), &out_shape);
    let b_strides = singleton_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    let mut ai = 0usize;
    let mut bi = 0usize;
    for _ in 0..n {
        data.push(f(ad[ai], bd[bi]));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ai += a_strides[axis];
            bi += b_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ai -= a_strides[axis] * out_shape[axis];
            bi -= b_strides[axis] * out_shape[axis];
        }
    }
    Ok(Tensor::new(out_shape, data))
}

/// Row-major strides with zeros on broadcast (singleton) axes.
fn singleton_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for axis in (0..shape.len()).rev() {
        if shape[axis] == out_shape[axis] {
            strides[axis] = acc;
        } else {
            strides[axis] = 0; // broadcast axis
        }
        acc *= shape[axis];
    }
    strides
}

/// Sum `grad` down to `target` shape, undoing broadcasting. Gradient of a
/// broadcast is the sum over the expanded axes.
pub fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let target_len: usize = target.iter().product();
    if target_len == 1 {
        return Tensor::new(target.to_vec(), vec![grad.sum()]);
    }
    debug_assert_eq!(grad.rank(), target.len());
    let out_shape = grad.shape().to_vec();
    let strides = singleton_strides(target, &out_shape);
    let mut acc = vec![T::zero(); target_len];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ti = 0usize;
    for &g in grad.data() {
        acc[ti] = acc[ti] + g;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ti += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ti -= strides[axis] * out_shape[axis];
        }
    }
    Tensor::new(target.to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_channelwise() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let a = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
        let y = zip_broadcast("mul", &a, &x, |p, q| p * q).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[3], 6.0);
        assert_eq!(y.data()[4], 12.0);
        assert_eq!(y.data()[7], 21.0);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::<f64>::full(&[2, 3, 2, 2], 1.0);
        let r = reduce_to_shape(&g, &[2, 3, 1, 1]);
        assert_eq!(r.shape(), &[2, 3, 1, 1]);
        assert!(r.data().iter().all(|&v| v == 4.0));
        let s = reduce_to_shape(&g, &[1]);
        assert_eq!(s.data()[0], 24.0);
    }

    #[test]
    fn scalar_broadcast_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(zip_broadcast("add", &a, &b, |x, y| x + y).is_err());
    }
}
