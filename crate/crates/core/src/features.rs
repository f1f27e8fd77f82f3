use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One utterance of S×D frames, stored row-major at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    frames: Vec<f32>,
    num_frames: usize,
    dim: usize,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, num_frames: usize, dim: usize, frames: Vec<f32>) -> Result<Self> {
        if num_frames == 0 || dim == 0 || frames.len() != num_frames * dim {
            return Err(Error::DataLength {
                shape: alloc::vec![num_frames, dim],
                len: frames.len(),
            });
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature frames must be finite".into()));
        }
        Ok(Self {
            id: id.into(),
            frames,
            num_frames,
            dim,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.frames.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new([self.num_frames, self.dim], data).expect("validated shape")
    }
}
