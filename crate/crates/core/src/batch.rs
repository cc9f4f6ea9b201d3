use ndarray::Array4;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch/height/width/channel extents of an image tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            batch,
            height,
            width,
            channels,
        }
    }

    /// A single image.
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Self::new(1, height, width, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config(format!(
                "image shape must be positive in every dimension, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.height, self.width, self.channels)
    }

    pub fn of<T>(array: &Array4<T>) -> Self {
        let (b, h, w, c) = array.dim();
        Self::new(b, h, w, c)
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Images in `[0, 1]` laid out as `B x H x W x C`, with one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub pixels: Array4<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> ImageBatch<T> {
    /// Builds a batch, checking the label count and pixel range.
    pub fn new(pixels: Array4<T>, labels: Vec<usize>) -> Result<Self> {
        if pixels.dim().0 != labels.len() {
            return Err(Error::shape(format!(
                "batch has {} images but {} labels",
                pixels.dim().0,
                labels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::of(&self.pixels)
    }

    pub fn check_labels(&self, n_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= n_classes) {
            Some(l) => Err(Error::config(format!(
                "label {l} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Converts the pixel type, e.g. `f32` data into an `f64` batch.
    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch {
            pixels: self.pixels.mapv(|v| U::of(v.as_f64())),
            labels: self.labels.clone(),
        }
    }
}
