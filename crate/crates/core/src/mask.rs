//! Image-space masks: binary sets and continuous explanation maps.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tensor::bilinear_resize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == height * width,
            InvalidInput,
            "{} bits do not fit {height}x{width}",
            bits.len()
        );
        Ok(Self { height, width, bits })
    }

    /// `values > level`.
    pub fn above(values: &[f32], height: usize, width: usize, level: f32) -> Self {
        Self {
            height,
            width,
            bits: values.iter().map(|v| *v > level).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
    }

    /// Bilinearly resamples the 0/1 indicator and re-binarizes at 0.5.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let up = bilinear_resize(&self.as_f32(), self.height, self.width, height, width);
        Self {
            height,
            width,
            bits: up.iter().map(|v| *v >= 0.5).collect(),
        }
    }

    /// `|A ∩ B| / |A ∪ B|`, defined as 0 when both sets are empty.
    pub fn iou(&self, other: &BinaryMask) -> Result<f64> {
        ensure!(
            self.height == other.height && self.width == other.width,
            InvalidInput,
            "mask shapes differ: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        Ok(if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        })
    }
}

/// Continuous defect-localisation map in `[0, 1]` at image resolution, with
/// an optional thresholded form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub threshold: Option<f32>,
    pub binary: Option<BinaryMask>,
}

impl ExplanationMask {
    /// Wraps a continuous map, attaching the `values >= θ` set when a
    /// threshold is given.
    pub fn new(height: usize, width: usize, values: Vec<f32>, threshold: Option<f32>) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            InvalidInput,
            "{} values do not fit {height}x{width}",
            values.len()
        );
        ensure!(
            values.iter().all(|v| (0.0..=1.0).contains(v)),
            InvalidInput,
            "mask values must lie in [0, 1]"
        );
        let binary = threshold.map(|t| BinaryMask {
            height,
            width,
            bits: values.iter().map(|v| *v >= t).collect(),
        });
        Ok(Self {
            height,
            width,
            values,
            threshold,
            binary,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width], None).expect("zero mask")
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![1.0; height * width], None).expect("unit mask")
    }

    pub fn binarize(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|v| *v >= threshold).collect(),
        }
    }

    /// Bilinear resampling of the continuous map to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> Vec<f32> {
        bilinear_resize(&self.values, self.height, self.width, height, width)
    }
}
