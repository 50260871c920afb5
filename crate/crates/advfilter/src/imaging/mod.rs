//! Core image types, dataset ingestion, and image-quality metrics.

pub mod dataset;
pub mod metrics;
pub mod synth;

pub use dataset::{load_dataset, DatasetSource};
pub use metrics::{psnr, ssim};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use ndarray::Array3;

/// H×W×3 intensity grid in [0,1], channel-last. The universal image currency.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    /// Minimum spatial extent required by the 8-block backbone's downsampling.
    pub const MIN_SIDE: usize = 8;

    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "HxWx3".into(),
                got: format!("{h}x{w}x{c}"),
            });
        }
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::ShapeMismatch {
                expected: format!("H,W >= {}", Self::MIN_SIDE),
                got: format!("{h}x{w}"),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite image values".into()));
        }
        Ok(ImageTensor { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((h, w, 3)),
        }
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Self {
        ImageTensor {
            data: Array3::from_elem((h, w, 3), v),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// From 8-bit RGB bytes in row-major H×W×3 order.
    pub fn from_u8(bytes: &[u8], h: usize, w: usize) -> Result<Self> {
        if bytes.len() != h * w * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", h * w * 3),
                got: format!("{}", bytes.len()),
            });
        }
        let data = Array3::from_shape_vec(
            (h, w, 3),
            bytes.iter().map(|b| *b as f32 / 255.0).collect(),
        )
        .expect("shape checked above");
        ImageTensor::new(data)
    }

    /// Quantize to 8-bit RGB bytes (round-to-nearest after clamping).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn clamp01(&mut self) {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.data.dim() == other.data.dim()
    }

    /// Max absolute per-pixel difference.
    pub fn linf_distance(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Pack images into an NCHW batch tensor for the network engine.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        assert!(!images.is_empty());
        let (h, w, _) = images[0].data.dim();
        let mut t = Tensor::zeros(images.len(), 3, h, w);
        for (bi, img) in images.iter().enumerate() {
            assert_eq!(img.data.dim(), (h, w, 3), "batch shape mismatch");
            let dst = t.image_mut(bi);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        dst[(c * h + y) * w + x] = img.data[(y, x, c)];
                    }
                }
            }
        }
        t
    }

    /// Extract one image from an NCHW batch tensor.
    pub fn from_batch(t: &Tensor, bi: usize) -> ImageTensor {
        assert_eq!(t.c, 3);
        let (h, w) = (t.h, t.w);
        let src = t.image(bi);
        let mut data = Array3::zeros((h, w, 3));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(y, x, c)] = src[(c * h + y) * w + x];
                }
            }
        }
        ImageTensor { data }
    }
}

/// An image with its ground-truth class index.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
}

/// Image-quality measurements for one (reference, candidate) pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QualityReport {
    /// Peak signal-to-noise ratio in dB, capped at 100.
    pub psnr: f64,
    /// Structural similarity in [-1, 1] (single-scale).
    pub ssim: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new(Array3::zeros((4, 32, 3))).is_err());
        assert!(ImageTensor::new(Array3::zeros((32, 32, 4))).is_err());
        assert!(ImageTensor::new(Array3::zeros((32, 32, 3))).is_ok());
    }

    #[test]
    fn u8_roundtrip() {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i % 256) as u8).collect();
        let img = ImageTensor::from_u8(&bytes, 8, 8).unwrap();
        assert_eq!(img.to_u8(), bytes);
    }

    #[test]
    fn batch_roundtrip() {
        let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = ImageTensor::from_u8(&bytes, 8, 8).unwrap();
        let t = ImageTensor::batch(&[&img]);
        let back = ImageTensor::from_batch(&t, 0);
        assert_eq!(img, back);
    }
}
