//! Image and feature batches passed between pipeline stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// `Z × C × H × W` images with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    images: Tensor<f32>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidShape {
                op: "image_batch",
                msg: format!("expected Z×C×H×W, got {:?}", images.shape()),
            });
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidShape {
                op: "image_batch",
                msg: format!("pixel value {v} outside [0, 1]"),
            });
        }
        Ok(ImageBatch { images })
    }

    /// Stacks single-channel `H × W` images.
    pub fn from_images(height: usize, width: usize, images: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * height * width);
        for img in images {
            if img.len() != height * width {
                return Err(Error::InvalidShape {
                    op: "image_batch",
                    msg: format!("image has {} pixels, expected {}", img.len(), height * width),
                });
            }
            data.extend_from_slice(img);
        }
        Self::new(Tensor::new(&[images.len(), 1, height, width], data)?)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn image_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.images
    }

    pub fn to_precision<T: Real>(&self) -> Tensor<T> {
        self.images.cast()
    }

    /// Images `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.images.shape();
        Self::new(Tensor::new(&[indices.len(), s[1], s[2], s[3]], data)?)
    }

    /// Appends `other` below `self`.
    pub fn concat(&self, other: &ImageBatch) -> Result<Self> {
        if self.images.shape()[1..] != other.images.shape()[1..] {
            return Err(Error::ShapeMismatch {
                op: "image_batch_concat",
                left: self.images.shape().to_vec(),
                right: other.images.shape().to_vec(),
            });
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let s = self.images.shape();
        Self::new(Tensor::new(&[self.len() + other.len(), s[1], s[2], s[3]], data)?)
    }
}

/// Where a feature batch came from in one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Student on the first augmented view.
    V1A,
    /// Student on the first mixed view.
    V1M,
    /// Teacher on the second augmented view.
    V2A,
    /// Teacher on the second mixed view.
    V2M,
    /// Feature mixup of `V2A`.
    Vm,
    Other,
}

impl Provenance {
    pub fn is_teacher_side(self) -> bool {
        matches!(self, Provenance::V2A | Provenance::V2M | Provenance::Vm)
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::V1A => "v1A",
            Provenance::V1M => "v1M",
            Provenance::V2A => "v2A",
            Provenance::V2M => "v2M",
            Provenance::Vm => "vm",
            Provenance::Other => "other",
        }
    }
}

/// `Z × D` feature rows, each of unit Euclidean norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<T: Real = f32> {
    features: Tensor<T>,
    provenance: Provenance,
}

/// Row-norm tolerance for unit-norm features.
pub const UNIT_NORM_TOL: f64 = 1e-5;

impl<T: Real> FeatureBatch<T> {
    pub fn new(features: Tensor<T>, provenance: Provenance) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op: "feature_batch",
                msg: format!("expected Z×D, got {:?}", features.shape()),
            });
        }
        let d = features.shape()[1];
        for (row, chunk) in features.data().chunks(d).enumerate() {
            let norm = chunk.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::DegenerateRow {
                    op: "feature_batch",
                    row,
                    norm,
                });
            }
        }
        Ok(FeatureBatch {
            features,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.features.row(i)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.features
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }
}
