//! Dense row-major images and per-pixel validity masks.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, T::zero())
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: T) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values cannot be {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = self.index(y, x, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the listed channels into a new image.
    pub fn select_channels(&self, channels: &[usize]) -> Self {
        Self::from_fn(self.height, self.width, channels.len(), |y, x, c| self.get(y, x, channels[c]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn cast<U: Real>(&self) -> ImageBuffer<U> {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bilinear sample at continuous `(x, y)`; pixel `(i, j)` sits at `(j, i)` exactly.
    ///
    /// Writes into `out` (length = channels) and returns `false` with zeros
    /// when the point lies outside `[0, W-1] x [0, H-1]`.
    pub fn sample_into(&self, x: T, y: T, out: &mut [T]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        let max_x = T::from_usize_lossy(self.width - 1);
        let max_y = T::from_usize_lossy(self.height - 1);
        if !(x >= T::zero() && y >= T::zero() && x <= max_x && y <= max_y) {
            out.iter_mut().for_each(|v| *v = T::zero());
            return false;
        }
        self.sample_clamped_into(x, y, out);
        true
    }

    /// Like [`Self::sample_into`], but coordinates within `tol` of the border
    /// are snapped inside first (absorbs reprojection round-off).
    pub fn sample_snapped_into(&self, x: T, y: T, tol: T, out: &mut [T]) -> bool {
        let snap = |v: T, n: usize| {
            let max = T::from_usize_lossy(n - 1);
            if v < T::zero() && v >= -tol {
                T::zero()
            } else if v > max && v <= max + tol {
                max
            } else {
                v
            }
        };
        self.sample_into(snap(x, self.width), snap(y, self.height), out)
    }

    /// Bilinear sample with clamp-to-edge addressing; never invalid.
    pub fn sample_clamped_into(&self, x: T, y: T, out: &mut [T]) {
        let (x0, x1, fx) = axis_cell(x, self.width);
        let (y0, y1, fy) = axis_cell(y, self.height);
        let w00 = (T::one() - fx) * (T::one() - fy);
        let w01 = fx * (T::one() - fy);
        let w10 = (T::one() - fx) * fy;
        let w11 = fx * fy;
        let n = self.channels;
        let texel = |y: usize, x: usize| &self.data[self.index(y, x, 0)..self.index(y, x, 0) + n];
        let (a, b, c, d) = (texel(y0, x0), texel(y0, x1), texel(y1, x0), texel(y1, x1));
        for ((((o, &a), &b), &c), &d) in out[..n].iter_mut().zip(a).zip(b).zip(c).zip(d) {
            *o = w00 * a + w01 * b + w10 * c + w11 * d;
        }
    }

    /// [`Self::sample_clamped_into`] for images with exactly `N` channels.
    #[inline]
    pub fn sample_clamped<const N: usize>(&self, x: T, y: T) -> [T; N] {
        assert_eq!(self.channels, N);
        let (x0, x1, fx) = axis_cell(x, self.width);
        let (y0, y1, fy) = axis_cell(y, self.height);
        let texel = |y: usize, x: usize| -> [T; N] {
            let i = (y * self.width + x) * N;
            self.data[i..i + N].try_into().expect("texel")
        };
        let (a, b, c, d) = (texel(y0, x0), texel(y0, x1), texel(y1, x0), texel(y1, x1));
        std::array::from_fn(|k| {
            let top = a[k] + fx * (b[k] - a[k]);
            let bottom = c[k] + fx * (d[k] - c[k]);
            top + fy * (bottom - top)
        })
    }
}

/// Lower/upper neighbor indices and fractional offset along one axis, clamped to the edge.
#[inline]
pub(crate) fn axis_cell<T: Real>(v: T, n: usize) -> (usize, usize, T) {
    let max = T::from_usize_lossy(n - 1);
    // comparisons rather than min/max, which compile to calls without SSE4.1
    let v = if !(v > T::zero()) {
        T::zero()
    } else if v > max {
        max
    } else {
        v
    };
    // truncation is floor for non-negative v
    let i0 = (v.as_f64() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    let frac = if i1 == i0 { T::zero() } else { v - T::from_usize_lossy(i0) };
    (i0, i1, frac)
}

/// Result of a bilinear lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub values: Vec<T>,
    pub valid: bool,
}

/// Bilinear interpolation at `at = (x, y)`; out-of-bounds yields zeros with `valid = false`.
pub fn bilinear_sample<T: Real>(img: &ImageBuffer<T>, at: [T; 2]) -> Sample<T> {
    let mut values = vec![T::zero(); img.channels()];
    let valid = img.sample_into(at[0], at[1], &mut values);
    Sample { values, valid }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!("mask of {} values cannot be {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }
}
