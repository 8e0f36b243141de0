//! Dense rank-3 feature volumes.
//!
//! Layout is row-major with channels fastest: element `(i, j, k)` lives at
//! `i * cols * channels + j * channels + k`. Vectors are stored as `1 x 1 x n`.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize, channels: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "all dimensions must be >= 1, got {rows}x{cols}x{channels}"
            )));
        }
        let shape = Self {
            rows,
            cols,
            channels,
        };
        shape.checked_len()?;
        Ok(shape)
    }

    /// `1 x 1 x n` shape used for flat vectors.
    pub fn vector(n: usize) -> Result<Self> {
        Self::new(1, 1, n)
    }

    pub fn checked_len(&self) -> Result<usize> {
        self.rows
            .checked_mul(self.cols)
            .and_then(|v| v.checked_mul(self.channels))
            .ok_or(Error::SizeOverflow {
                rows: self.rows,
                cols: self.cols,
                channels: self.channels,
            })
    }

    /// Element count. Shapes built through [`Shape::new`] never overflow.
    pub fn len(&self) -> usize {
        self.rows * self.cols * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial positions (`rows * cols`).
    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols && k < self.channels);
        (i * self.cols + j) * self.channels + k
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.rows, self.cols, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, fill: S) -> Result<Self> {
        let len = shape.checked_len()?;
        Ok(Self {
            shape,
            data: vec![fill; len],
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![S::zero(); shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<S>) -> Result<Self> {
        let len = shape.checked_len()?;
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} values supplied for shape {shape} ({len} expected)",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a single-channel tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|row| row.iter().map(|&v| S::of(v))).collect();
        Self::from_vec(Shape::new(r, c, 1)?, data)
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::from_vec(Shape::vector(data.len())?, data)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> S {
        self.data[self.shape.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: S) {
        let o = self.shape.offset(i, j, k);
        self.data[o] = v;
    }

    /// Copies the `h x w x channels` block whose top-left corner is `(i, j)`.
    pub fn window(&self, i: usize, j: usize, h: usize, w: usize) -> Result<Self> {
        let Shape { rows, cols, channels } = self.shape;
        let fits = h >= 1
            && w >= 1
            && i.checked_add(h).is_some_and(|e| e <= rows)
            && j.checked_add(w).is_some_and(|e| e <= cols);
        if !fits {
            return Err(Error::WindowOutOfBounds {
                i,
                j,
                h,
                w,
                rows,
                cols,
            });
        }
        let mut data = Vec::with_capacity(h * w * channels);
        for p in 0..h {
            let start = self.shape.offset(i + p, j, 0);
            data.extend_from_slice(&self.data[start..start + w * channels]);
        }
        Ok(Self {
            shape: Shape {
                rows: h,
                cols: w,
                channels,
            },
            data,
        })
    }

    /// Per-channel means when `per_channel` is set, otherwise a single global mean.
    pub fn reduce_mean(&self, per_channel: bool) -> Vec<S> {
        if !per_channel {
            let n = S::of(self.data.len() as f64);
            return vec![self.data.iter().copied().sum::<S>() / n];
        }
        let c = self.shape.channels;
        let mut sums = vec![S::zero(); c];
        for px in self.data.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v;
            }
        }
        let n = S::of(self.shape.area() as f64);
        sums.iter_mut().for_each(|s| *s /= n);
        sums
    }

    /// Values of channel `k` as a row-major `rows x cols` plane.
    pub fn channel(&self, k: usize) -> Result<Vec<S>> {
        if k >= self.shape.channels {
            return Err(Error::IndexOutOfRange {
                index: k,
                limit: self.shape.channels,
            });
        }
        Ok(self
            .data
            .iter()
            .skip(k)
            .step_by(self.shape.channels)
            .copied()
            .collect())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
