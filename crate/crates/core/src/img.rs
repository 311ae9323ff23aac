//! Image container: 3 x H x W pixels in [0, 1] plus the pre-padding dims.

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: FeatureTensor<f32>,
    /// Dims before padding; the decoder crops back to these.
    pub original_height: usize,
    pub original_width: usize,
}

impl Image {
    pub fn new(pixels: FeatureTensor<f32>) -> Self {
        let (c, h, w) = pixels.shape();
        assert_eq!(c, 3, "images are 3-channel RGB");
        Image {
            pixels,
            original_height: h,
            original_width: w,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    /// Mirror index for symmetric padding; handles pads larger than the dim.
    fn mirror(i: usize, n: usize) -> usize {
        let period = 2 * n;
        let t = i % period;
        if t < n {
            t
        } else {
            period - 1 - t
        }
    }

    /// Pads bottom/right with mirrored rows/columns until both dims are
    /// divisible by `mult`. Original dims are preserved for later cropping.
    pub fn pad_to_multiple(&self, mult: usize) -> Image {
        let h = self.height();
        let w = self.width();
        let ph = h.div_ceil(mult) * mult;
        let pw = w.div_ceil(mult) * mult;
        if ph == h && pw == w {
            return self.clone();
        }
        let mut out = FeatureTensor::zeros(3, ph, pw);
        for c in 0..3 {
            for y in 0..ph {
                let sy = Self::mirror(y, h);
                for x in 0..pw {
                    let sx = Self::mirror(x, w);
                    out.set(c, y, x, self.pixels.at(c, sy, sx));
                }
            }
        }
        Image {
            pixels: out,
            original_height: self.original_height,
            original_width: self.original_width,
        }
    }

    /// Crops back to the recorded original dims.
    pub fn crop_to_original(&self) -> Image {
        let (h, w) = (self.original_height, self.original_width);
        if h == self.height() && w == self.width() {
            return self.clone();
        }
        let mut out = FeatureTensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.pixels.at(c, y, x));
                }
            }
        }
        Image {
            pixels: out,
            original_height: h,
            original_width: w,
        }
    }

    /// Builds an image from 8-bit RGB rows (top to bottom, interleaved).
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != height * width * 3 {
            return Err(Error::config("rgb buffer length mismatch"));
        }
        let mut px = FeatureTensor::zeros(3, height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    px.set(c, y, x, rgb[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(Image::new(px))
    }

    /// Quantizes pixels back to interleaved 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let mut out = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (self.pixels.at(c, y, x).clamp(0.0, 1.0) * 255.0).round();
                    out[(y * w + x) * 3 + c] = v as u8;
                }
            }
        }
        out
    }

    /// Fixed-size crop with the top-left corner at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Image {
        assert!(y0 + h <= self.height() && x0 + w <= self.width(), "crop out of bounds");
        let mut out = FeatureTensor::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.pixels.at(c, y0 + y, x0 + x));
                }
            }
        }
        Image::new(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_and_crop_round_trip() {
        let mut px = FeatureTensor::zeros(3, 5, 7);
        for (i, v) in px.data.iter_mut().enumerate() {
            *v = (i % 11) as f32 / 11.0;
        }
        let img = Image::new(px);
        let padded = img.pad_to_multiple(8);
        assert_eq!(padded.height(), 8);
        assert_eq!(padded.width(), 8);
        assert_eq!(padded.original_height, 5);
        let back = Image {
            pixels: padded.pixels.clone(),
            original_height: 5,
            original_width: 7,
        }
        .crop_to_original();
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn pad_larger_than_image() {
        let img = Image::new(FeatureTensor::zeros(3, 2, 2));
        let padded = img.pad_to_multiple(16);
        assert_eq!((padded.height(), padded.width()), (16, 16));
    }

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..3 * 4 * 4).map(|v| (v * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 4, &rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
    }
}
