//! The three architectures: 2-D U-net, 3-D U-net, and the dual-path 3-D
//! U-net, each with hand-orchestrated forward and backward passes.
//!
//! Encoder blocks are conv -> batch norm -> ReLU; decoder blocks are
//! conv -> ReLU with no batch norm. Skip connections concatenate
//! equal-resolution feature maps. The dual-path variant runs two
//! independent U-nets (fine and wide-context) and fuses their pre-head
//! outputs with a 1x1(x1) convolution after cropping the context output to
//! the fine path's physical extent and upsampling it trilinearly.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{Gradients, Mode, Model};

use serde::{Deserialize, Serialize};

use crate::error::{MassegError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Spatial dimensionality, 2 or 3.
    pub dims: u8,
    /// Number of pooling levels.
    pub depth: usize,
    /// Channels after the first convolution block; doubles per level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_labels: usize,
    pub dual_path: bool,
    /// Down-sampling factor of the context path, in (0,1); only used when
    /// `dual_path` is set.
    pub second_path_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::single_3d(3, 16)
    }
}

impl ModelConfig {
    pub fn single_3d(depth: usize, base_channels: usize) -> Self {
        ModelConfig {
            dims: 3,
            depth,
            base_channels,
            in_channels: 1,
            num_labels: 2,
            dual_path: false,
            second_path_scale: 0.5,
        }
    }

    pub fn single_2d(depth: usize, base_channels: usize) -> Self {
        ModelConfig { dims: 2, ..Self::single_3d(depth, base_channels) }
    }

    pub fn dual_3d(depth: usize, base_channels: usize, scale: f64) -> Self {
        ModelConfig {
            dual_path: true,
            second_path_scale: scale,
            ..Self::single_3d(depth, base_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(MassegError::Config(format!(
                "dimensionality must be 2 or 3, got {}",
                self.dims
            )));
        }
        if self.depth < 1 {
            return Err(MassegError::Config("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(MassegError::Config("channel counts must be >= 1".into()));
        }
        if self.num_labels < 2 {
            return Err(MassegError::Config(format!(
                "num_labels must be >= 2, got {}",
                self.num_labels
            )));
        }
        if self.dual_path && !(self.second_path_scale > 0.0 && self.second_path_scale < 1.0) {
            return Err(MassegError::Config(format!(
                "second_path_scale must lie in (0,1), got {}",
                self.second_path_scale
            )));
        }
        Ok(())
    }

    /// Tensor rank expected at the model input.
    pub fn rank(&self) -> usize {
        self.dims as usize + 2
    }

    /// Every input spatial extent must be divisible by 2^depth.
    pub fn extent_divisor(&self) -> usize {
        1 << self.depth
    }

    /// Channel width at encoder level `level`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}
