//! Dense `H×W×N×C` tensors.
//!
//! A [`LatticeField`] stores its values row-major over `[H, W, N, C]`, so the
//! channel index varies fastest and a "cell" is one `(h, w, n)` site holding
//! `C` values. Masks are defined per cell and broadcast over channels.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub n: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(h: usize, w: usize, n: usize, c: usize) -> Self {
        Self { h, w, n, c }
    }

    pub fn from_dims(dims: [usize; 4]) -> Self {
        Self::new(dims[0], dims[1], dims[2], dims[3])
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.h, self.w, self.n, self.c]
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.h * self.w * self.n * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `(h, w, n)` sites.
    pub fn cells(&self) -> usize {
        self.h * self.w * self.n
    }

    pub fn index(&self, h: usize, w: usize, n: usize, c: usize) -> usize {
        debug_assert!(h < self.h && w < self.w && n < self.n && c < self.c);
        ((h * self.w + w) * self.n + n) * self.c + c
    }

    pub fn cell_index(&self, h: usize, w: usize, n: usize) -> usize {
        (h * self.w + w) * self.n + n
    }

    /// Same spatial layout and channels, different frame count.
    pub fn with_frames(&self, n: usize) -> Self {
        Self { n, ..*self }
    }

    /// The per-cell (single channel) shape used by masks.
    pub fn cell_shape(&self) -> Self {
        Self { c: 1, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "lattice shape {self} has a zero extent"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.h, self.w, self.n, self.c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    shape: Shape,
    data: Vec<f64>,
}

impl LatticeField {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                shape,
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, n: usize, c: usize) -> f64 {
        self.data[self.shape.index(h, w, n, c)]
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: self.shape,
            });
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &LatticeField) -> Result<()> {
        other.ensure_shape(self.shape)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped fields.
    pub fn zip_map(&self, other: &LatticeField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &LatticeField) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.data {
            *x *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn dot(&self, other: &LatticeField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sq_dist(&self, other: &LatticeField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn max_abs_diff(&self, other: &LatticeField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Copy of frames `range` (along the `N` axis).
    pub fn frames(&self, range: Range<usize>) -> Result<Self> {
        if range.start > range.end || range.end > self.shape.n {
            return Err(Error::InvalidArgument(format!(
                "frame range {range:?} outside 0..{}",
                self.shape.n
            )));
        }
        let out_shape = self.shape.with_frames(range.len());
        let mut out = Vec::with_capacity(out_shape.len());
        let c = self.shape.c;
        for h in 0..self.shape.h {
            for w in 0..self.shape.w {
                let start = self.shape.index(h, w, range.start.min(self.shape.n - 1), 0);
                if range.is_empty() {
                    continue;
                }
                out.extend_from_slice(&self.data[start..start + range.len() * c]);
            }
        }
        Self::from_vec(out_shape, out)
    }

    /// Overwrite frames starting at `start` with the frames of `src`.
    pub fn set_frames(&mut self, start: usize, src: &LatticeField) -> Result<()> {
        let s = src.shape;
        if s.h != self.shape.h || s.w != self.shape.w || s.c != self.shape.c {
            return Err(Error::ShapeMismatch {
                expected: self.shape.with_frames(s.n),
                found: s,
            });
        }
        if start + s.n > self.shape.n {
            return Err(Error::InvalidArgument(format!(
                "frames {start}..{} exceed {} frames",
                start + s.n,
                self.shape.n
            )));
        }
        let c = self.shape.c;
        for h in 0..s.h {
            for w in 0..s.w {
                if s.n == 0 {
                    continue;
                }
                let dst = self.shape.index(h, w, start, 0);
                let from = s.index(h, w, 0, 0);
                self.data[dst..dst + s.n * c].copy_from_slice(&src.data[from..from + s.n * c]);
            }
        }
        Ok(())
    }

    /// Concatenate along the frame axis.
    pub fn concat_frames(parts: &[LatticeField]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let total: usize = parts.iter().map(|p| p.shape.n).sum();
        let mut out = Self::zeros(first.shape.with_frames(total));
        let mut at = 0;
        for p in parts {
            out.set_frames(at, p)?;
            at += p.shape.n;
        }
        Ok(out)
    }
}
