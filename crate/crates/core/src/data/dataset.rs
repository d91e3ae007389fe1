use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labels for one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Class { classes: usize, values: Vec<usize> },
    /// Row-major `(n, classes)` matrix of 0/1 values.
    Multi { classes: usize, values: Vec<f32> },
}

impl Labels {
    pub fn class(classes: usize, values: Vec<usize>) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v >= classes) {
            return Err(Error::InvalidArgument(format!("label {v} outside 0..{classes}")));
        }
        Ok(Labels::Class { classes, values })
    }

    pub fn multi(classes: usize, values: Vec<f32>) -> Result<Self> {
        if classes == 0 || !values.len().is_multiple_of(classes) {
            return Err(Error::Shape(format!(
                "{} multi-label values do not form rows of {classes}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("multi-label values must be 0 or 1".into()));
        }
        Ok(Labels::Multi { classes, values })
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Class { values, .. } => values.len(),
            Labels::Multi { classes, values } => values.len() / classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Labels::Class { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn gather(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class { classes, values } => Labels::Class {
                classes: *classes,
                values: idx.iter().map(|&i| values[i]).collect(),
            },
            Labels::Multi { classes, values } => Labels::Multi {
                classes: *classes,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
            },
        }
    }
}

/// In-memory images with labels for one task.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Labels,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Labels) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape().n,
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(idx),
            labels: self.labels.gather(idx),
        }
    }
}
