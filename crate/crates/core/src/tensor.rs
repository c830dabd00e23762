//! Dense 4-D tensors in NCHW layout.
//!
//! Every value flowing through the network is a `Tensor` with shape
//! `[batch, channels, height, width]`. Scalars are `[1, 1, 1, 1]`, per-pixel
//! maps are `[n, 1, h, w]` and pooled channel descriptors are `[n, c, 1, 1]`.
//! Values are `f64` so that central finite differences stay meaningful at a
//! 1e-4 relative tolerance.

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Single-channel map `[1, 1, h, w]` from row-major data.
    pub fn from_plane(height: usize, width: usize, data: Vec<f64>) -> Self {
        Self::new([1, 1, height, width], data)
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, low: f64, high: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.gen_range(low..high)).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// Contiguous `h * w` slice for one (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let [n, _, h, w] = parts[0].shape;
        for p in parts {
            assert_eq!((p.shape[0], p.shape[2], p.shape[3]), (n, h, w), "concat shape mismatch");
        }
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let chw = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[b * chw..(b + 1) * chw]);
            }
        }
        Self::new([n, c_total, h, w], data)
    }

    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Self::new([n, len, h, w], data)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let [_, c, h, w] = parts[0].shape;
        let mut data = Vec::with_capacity(parts.len() * c * h * w);
        for p in parts {
            assert_eq!(p.shape, [1, c, h, w], "stack_batch expects batch-1 tensors of equal shape");
            data.extend_from_slice(&p.data);
        }
        Self::new([parts.len(), c, h, w], data)
    }

    pub fn batch_item(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let chw = c * h * w;
        Self::new([1, c, h, w], self.data[n * chw..(n + 1) * chw].to_vec())
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = self.clone();
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(b, ch, y, x, self.at(b, ch, y, w - 1 - x));
                    }
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(top + height <= h && left + width <= w, "crop out of range");
        let mut data = Vec::with_capacity(n * c * height * width);
        for b in 0..n {
            for ch in 0..c {
                for y in top..top + height {
                    let row = self.index(b, ch, y, left);
                    data.extend_from_slice(&self.data[row..row + width]);
                }
            }
        }
        Self::new([n, c, height, width], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new([2, 2, 1, 2], (0..8).map(f64::from).collect());
        let cat = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), [2, 3, 1, 2]);
        assert_eq!(cat.slice_channels(0, 1), a);
        assert_eq!(cat.slice_channels(1, 2), b);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::new([1, 2, 2, 3], (0..12).map(f64::from).collect());
        assert_eq!(t.flip_horizontal().at(0, 1, 1, 0), t.at(0, 1, 1, 2));
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
    }

    #[test]
    fn crop_picks_window() {
        let t = Tensor::from_plane(3, 3, (0..9).map(f64::from).collect());
        assert_eq!(t.crop(1, 1, 2, 2).data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
