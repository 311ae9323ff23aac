//! Dense tensors used throughout the codec.
//!
//! Two shapes of data move through the pipeline: rank-3 feature maps
//! (channels x height x width, the unit the codec reasons about) and the
//! rank-4 batches the training engine runs on. Everything is row-major and
//! every reduction runs in a fixed order so that repeated evaluation is
//! bit-identical; the entropy coder depends on that.

use crate::error::{Error, Result};
use num_traits::Float;

/// Scalar type the engine is generic over. Production code instantiates
/// `f32`; test oracles and gradient checks instantiate `f64`.
pub trait Scalar:
    Float + num_traits::NumCast + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn c(v: f64) -> Self {
        num_traits::cast(v).expect("scalar cast")
    }
    fn f64(self) -> f64 {
        num_traits::cast::<Self, f64>(self).expect("scalar cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Rank-3 feature map: `channels x height x width`, row-major by
/// (channel, row, column). Carries analyzer features, activations and
/// decoded reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T: Scalar = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureTensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::config(format!(
                "feature tensor data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(FeatureTensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_into<U: Scalar>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

/// Rank-4 batch tensor (`n x c x h x w`) used by the training graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
            data: vec![v],
        }
    }

    pub fn from_features(maps: &[FeatureTensor<T>]) -> Self {
        assert!(!maps.is_empty(), "empty batch");
        let (c, h, w) = maps[0].shape();
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in maps {
            assert_eq!(m.shape(), (c, h, w), "ragged batch");
            data.extend_from_slice(&m.data);
        }
        Tensor {
            n: maps.len(),
            c,
            h,
            w,
            data,
        }
    }

    pub fn from_feature(map: &FeatureTensor<T>) -> Self {
        Tensor {
            n: 1,
            c: map.channels,
            h: map.height,
            w: map.width,
            data: map.data.clone(),
        }
    }

    pub fn to_features(&self) -> Vec<FeatureTensor<T>> {
        let per = self.c * self.h * self.w;
        (0..self.n)
            .map(|i| FeatureTensor {
                channels: self.c,
                height: self.h,
                width: self.w,
                data: self.data[i * per..(i + 1) * per].to_vec(),
            })
            .collect()
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    #[inline]
    pub fn add_at(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = self.data[i] + v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Integer level map for one quantized scale; values live in `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LevelMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        LevelMap {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Presents the integer levels as reals, the form the synthesizer and
    /// context models consume.
    pub fn to_feature<T: Scalar>(&self) -> FeatureTensor<T> {
        FeatureTensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| T::c(v as f64)).collect(),
        }
    }
}

/// Per-scale quantized feature maps, finest first. Scales with zero
/// channels are represented by empty maps and skipped downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedFeatures {
    pub maps: Vec<LevelMap>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_tensor_rejects_bad_length() {
        assert!(FeatureTensor::<f32>::from_data(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(FeatureTensor::<f32>::from_data(2, 2, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn batch_round_trip() {
        let a = FeatureTensor::<f32>::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = FeatureTensor::<f32>::from_data(1, 2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let t = Tensor::from_features(&[a.clone(), b.clone()]);
        assert_eq!(t.shape(), (2, 1, 2, 2));
        let back = t.to_features();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = FeatureTensor::<f32>::from_data(2, 2, 3, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0), 0.0);
        assert_eq!(t.at(0, 1, 2), 5.0);
        assert_eq!(t.at(1, 0, 1), 7.0);
    }
}
