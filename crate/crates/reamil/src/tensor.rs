//! Dense row-major arrays and the scalar abstraction they are generic over.
//!
//! Everything downstream (tape, model, trainer) works on [`Array`] values.
//! Training runs in `f32`; gradient checking instantiates the same code in
//! `f64`, where central differences have enough headroom to be meaningful.
//! Shape bookkeeping here is by assertion: constructing an array with an
//! inconsistent shape is a programmer error, not a recoverable condition.
//! Recoverable shape errors (mismatched operands at run time) are reported
//! by the tape, which names both shapes.

use std::fmt;

use num_traits::Float;

/// Floating-point element type. The two instantiations used in practice are
/// `f32` (training, checkpoints) and `f64` (gradient checks, metrics).
pub trait Scalar: Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Exact for any count that fits a tape (`n < 2^53`).
    fn from_count(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar with one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    /// Builds an array from a shape and backing data.
    ///
    /// Panics if the shape product does not equal the data length.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, data has {}",
            shape,
            numel,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Array {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Array {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: T) -> Self {
        Array {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<T>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        assert!(!rows.is_empty(), "from_rows on empty slice");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            assert_eq!(row.len(), cols, "ragged rows: {} vs {}", row.len(), cols);
            data.extend_from_slice(row);
        }
        Array {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Array {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows of a rank-2 array (a rank-1 array counts as one row).
    pub fn rows(&self) -> usize {
        match self.rank() {
            1 => 1,
            2 => self.shape[0],
            r => panic!("rows() on rank-{r} array"),
        }
    }

    /// Trailing dimension of a rank-1 or rank-2 array.
    pub fn cols(&self) -> usize {
        match self.rank() {
            1 => self.shape[0],
            2 => self.shape[1],
            r => panic!("cols() on rank-{r} array"),
        }
    }

    /// Element of a rank-2 array.
    #[inline]
    pub fn get2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// The single element of a one-element array.
    pub fn scalar_value(&self) -> T {
        assert_eq!(self.numel(), 1, "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl FnMut(T) -> T) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Elementwise cast between scalar types (used to move f32 checkpoints
    /// into the f64 gradient-check world and back).
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
