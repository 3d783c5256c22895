//! Rank-4 tensors in `(batch, channel, row, col)` layout.
//!
//! Data is dense row-major: the flat index of `(n, c, h, w)` is
//! `((n * C + c) * H + h) * W + w`. Tensors are plain values — cloning copies
//! the buffer — and are treated as immutable once built, so sharing
//! references across threads is safe. Gradients live on the [`Tape`], not on
//! the tensor itself.
//!
//! [`Tape`]: crate::tape::Tape

use crate::element::Element;
use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor: `(n, c, h, w)`.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The scalar shape `(1,1,1,1)`, used for loss values.
    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// A dense rank-4 array of [`Element`] values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor from a flat row-major buffer. The buffer length must
    /// equal `n*c*h*w` and every dimension must be at least 1.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Tensor<E>> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::dim(
                "all",
                format!("every dimension must be >= 1, got {shape}"),
            ));
        }
        if data.len() != shape.len() {
            return Err(Error::dim(
                "all",
                format!(
                    "data length {} does not match shape {shape} ({} elements)",
                    data.len(),
                    shape.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Tensor<E> {
        Tensor::full(shape, E::zero())
    }

    pub fn full(shape: Shape, value: E) -> Tensor<E> {
        assert!(shape.len() > 0, "tensor dimensions must be >= 1");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// A scalar tensor of shape `(1,1,1,1)`.
    pub fn scalar(value: E) -> Tensor<E> {
        Tensor::full(Shape::scalar(), value)
    }

    /// A per-channel vector laid out as shape `(1, c, 1, 1)`.
    pub fn channel_vec(values: Vec<E>) -> Result<Tensor<E>> {
        let c = values.len();
        Tensor::from_vec(Shape::new(1, c, 1, 1), values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && h < self.shape.h && w < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: E) {
        let i = self.idx(n, c, h, w);
        self.data[i] = value;
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.shape != Shape::scalar() {
            return Err(Error::Contract(format!(
                "item() requires a scalar tensor, got shape {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Arithmetic mean over all elements.
    pub fn mean(&self) -> E {
        let sum = self.data.iter().fold(E::zero(), |a, &b| a + b);
        sum / E::from_f64_c(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True if every element is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == E::zero() || v == E::one())
    }

    /// Elementwise conversion to another precision.
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64_c(v.to_f64_c())).collect(),
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "all",
                format!("shape mismatch {} vs {}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a.to_f64_c() - b.to_f64_c()).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Dim { .. }));
    }

    #[test]
    fn from_vec_rejects_zero_dim() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]).unwrap_err();
        assert!(matches!(err, Error::Dim { .. }));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f32>::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![0., 1., 2., 3., 4., 5., 6., 7.],
        )
        .unwrap();
        assert_eq!(t.at(0, 0, 1, 0), 2.0);
        assert_eq!(t.at(0, 1, 0, 1), 5.0);
    }

    #[test]
    fn item_requires_scalar_shape() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
        assert!(matches!(t.item(), Err(Error::Contract(_))));
        assert_eq!(Tensor::<f64>::scalar(3.5).item().unwrap(), 3.5);
    }
}
