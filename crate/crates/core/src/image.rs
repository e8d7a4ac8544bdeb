//! Image and feature-map containers.
//!
//! Both are stored channel-planar (`C x H x W`, row-major) so they feed the
//! convolution kernels without reordering.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Intensities in `[0, 1]`, `channels x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Image { tensor: Tensor::new([channels, height, width], data)? })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image { tensor: Tensor::zeros([channels, height, width]) }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { tensor: Tensor::new([channels, height, width], data).expect("extents match") }
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        if t.dims3().is_none() {
            return Err(Error::shape("image", format!("expected (C, H, W), got {:?}", t.shape())));
        }
        Ok(Image { tensor: t.cast() })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        self.tensor.data_mut()[(c * h + y) * w + x] = v;
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        self.tensor.cast()
    }

    pub fn clamp01(mut self) -> Self {
        for v in self.tensor.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Image { tensor: self.tensor.map(f) }
    }
}

/// Feature activations, `channels x height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    tensor: Tensor<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(FeatureMap { tensor: Tensor::new([channels, height, width], data)? })
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self> {
        if t.dims3().is_none() {
            return Err(Error::shape("feature_map", format!("expected (C, H, W), got {:?}", t.shape())));
        }
        Ok(FeatureMap { tensor: t.cast() })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.tensor
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        self.tensor.cast()
    }

    /// Feature vector of one cell.
    pub fn cell(&self, y: usize, x: usize) -> Vec<f64> {
        let (c, h, w) = self.dims();
        (0..c).map(|ch| self.tensor.data()[(ch * h + y) * w + x]).collect()
    }
}
