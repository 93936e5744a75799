//! Samples, synthetic generation, resizing and on-disk formats.

mod manifest;
pub mod pgm;
pub mod synth;

pub use manifest::{load_manifest_samples, read_manifest, write_dataset, ManifestEntry};
pub use synth::{class_name, generate, SynthConfig, CLASS_NAMES};

use crate::engine::{kernels, Scalar, Shape4, Tensor};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Data(format!(
                "image {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape4::new(1, 1, self.height, self.width),
            self.pixels.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
        .expect("image dimensions match pixel count")
    }
}

/// One image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Single-item label map of the same extent as the image.
    pub labels: LabelMap,
}

/// Stacks samples into an `(N, 1, H, W)` image batch and an `(N, H, W)` label map.
pub fn stack_batch<T: Scalar>(samples: &[&Sample]) -> Result<(Tensor<T>, LabelMap)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Usage("cannot build an empty batch".into()))?;
    let (h, w) = (first.image.height, first.image.width);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) {
            return Err(Error::Config(format!(
                "batch mixes image sizes {h}x{w} and {}x{}",
                s.image.height, s.image.width
            )));
        }
        data.extend(s.image.pixels.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    let images = Tensor::from_vec(Shape4::new(samples.len(), 1, h, w), data)?;
    let labels = LabelMap::stack(&samples.iter().map(|s| &s.labels).collect::<Vec<_>>())?;
    Ok((images, labels))
}

/// Resizes a sample to the model input size: bilinear for the image,
/// nearest-neighbour for the labels.
pub fn resize_to_model(sample: &Sample, target_h: usize, target_w: usize) -> Result<Sample> {
    if target_h == 0 || target_w == 0 || target_h % 8 != 0 || target_w % 8 != 0 {
        return Err(Error::Config(format!(
            "resize target {target_h}x{target_w} must be positive and divisible by 8"
        )));
    }
    if (target_h, target_w) == (sample.image.height, sample.image.width) {
        return Ok(sample.clone());
    }
    let resized = kernels::resize_bilinear(&sample.image.to_tensor::<f64>(), target_h, target_w);
    let pixels = resized.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Sample {
        image: Image::new(target_h, target_w, pixels)?,
        labels: sample.labels.resize_nearest(target_h, target_w),
    })
}
