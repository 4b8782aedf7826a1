//! Dense row-major tensors and the non-differentiable image helpers
//! (resizing, flips, rotations, cropping) used for preprocessing.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::real::Real;

/// A dense row-major array, `f32` unless stated otherwise.
///
/// Images use the `H × W × C` layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(mismatch("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `H × W × C` image from a per-pixel function.
    pub fn image_from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            shape: vec![height, width, channels],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(mismatch("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(height, width, channels)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(invalid("dims3", "expected a rank-3 H×W×C tensor")),
        }
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        let w = self.shape[1];
        let ch = self.shape[2];
        self.data[(y * w + x) * ch + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(mismatch("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Per-channel mean of an image.
    pub fn channel_means(&self) -> Result<Vec<T>> {
        let (h, w, c) = self.dims3()?;
        let mut sums = vec![0.0f64; c];
        for px in self.data.chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v.as_f64();
            }
        }
        let n = (h * w).max(1) as f64;
        Ok(sums.into_iter().map(|s| T::of_f64(s / n)).collect())
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        Ok(Self::image_from_fn(h, w, c, |y, x, ch| {
            self.at(y, w - 1 - x, ch)
        }))
    }

    pub fn flip_vertical(&self) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        Ok(Self::image_from_fn(h, w, c, |y, x, ch| {
            self.at(h - 1 - y, x, ch)
        }))
    }

    /// Rotates counter-clockwise by `quarter_turns × 90°`.
    pub fn rot90(&self, quarter_turns: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        Ok(match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::image_from_fn(w, h, c, |y, x, ch| self.at(x, w - 1 - y, ch)),
            2 => Self::image_from_fn(h, w, c, |y, x, ch| self.at(h - 1 - y, w - 1 - x, ch)),
            _ => Self::image_from_fn(w, h, c, |y, x, ch| self.at(h - 1 - x, y, ch)),
        })
    }

    /// Copies the rectangle `[top, top+height) × [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        if top + height > h || left + width > w {
            return Err(invalid("crop", "window exceeds image bounds"));
        }
        Ok(Self::image_from_fn(height, width, c, |y, x, ch| {
            self.at(top + y, left + x, ch)
        }))
    }

    /// Writes `patch` into `self` with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, patch: &Tensor<T>, top: usize, left: usize) -> Result<()> {
        let (h, w, c) = self.dims3()?;
        let (ph, pw, pc) = patch.dims3()?;
        if pc != c || top + ph > h || left + pw > w {
            return Err(mismatch("paste", &self.shape, &patch.shape));
        }
        for y in 0..ph {
            let dst = ((top + y) * w + left) * c;
            let src = y * pw * c;
            self.data[dst..dst + pw * c].copy_from_slice(&patch.data[src..src + pw * c]);
        }
        Ok(())
    }
}

impl Tensor {
    /// FNV-1a over the raw bits; used to detect accidental mutation.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }

    /// Bilinear resize with the half-pixel (align-corners = false) convention.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        if out_h < 1 || out_w < 1 {
            return Err(invalid("resize_bilinear", "output extents must be ≥ 1"));
        }
        if h == 0 || w == 0 {
            return Err(invalid("resize_bilinear", "empty input"));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self.clone());
        }
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
            let scale = n_in as f32 / n_out as f32;
            (0..n_out)
                .map(|o| {
                    let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
                    let i0 = src as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f32)
                })
                .collect()
        };
        let ys = taps(h, out_h);
        let xs = taps(w, out_w);
        let mut data = Vec::with_capacity(out_h * out_w * c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = self.at(y0, x0, ch) * (1.0 - fx) + self.at(y0, x1, ch) * fx;
                    let bot = self.at(y1, x0, ch) * (1.0 - fx) + self.at(y1, x1, ch) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Ok(Self {
            shape: vec![out_h, out_w, c],
            data,
        })
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

impl TryFrom<(Vec<usize>, Vec<f32>)> for Tensor {
    type Error = Error;

    fn try_from((shape, data): (Vec<usize>, Vec<f32>)) -> Result<Self> {
        Tensor::new(shape, data)
    }
}
