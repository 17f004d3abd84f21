use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub num_residual_blocks: usize,
    pub channels: usize,
    pub downsample_stride: usize,
}

/// Architecture of the residual regressor: a convolutional stem, stages of
/// basic residual blocks (two 3³ convolutions each, projection shortcut when
/// the shape changes), global average pooling and a single linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dims: [usize; 3],
    #[serde(default = "one")]
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default = "three")]
    pub block_kernel: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl NetSpec {
    /// Small network used for tests and desk-scale runs.
    pub fn tiny(input_dims: [usize; 3]) -> Self {
        NetSpec {
            input_dims,
            in_channels: 1,
            stem: StemSpec { out_channels: 4, kernel: 3, stride: 2 },
            stages: vec![
                StageSpec { num_residual_blocks: 1, channels: 4, downsample_stride: 1 },
                StageSpec { num_residual_blocks: 1, channels: 8, downsample_stride: 2 },
            ],
            block_kernel: 3,
        }
    }

    /// ResNet34 layout lifted to 3D: 7³ stride-2 stem, stages of [3, 4, 6, 3] blocks.
    /// There is no max-pool after the stem.
    pub fn resnet34_3d(input_dims: [usize; 3]) -> Self {
        let stage = |n, c, s| StageSpec { num_residual_blocks: n, channels: c, downsample_stride: s };
        NetSpec {
            input_dims,
            in_channels: 1,
            stem: StemSpec { out_channels: 64, kernel: 7, stride: 2 },
            stages: vec![stage(3, 64, 1), stage(4, 128, 2), stage(6, 256, 2), stage(3, 512, 2)],
            block_kernel: 3,
        }
    }

    pub fn preset(name: &str, input_dims: [usize; 3]) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(input_dims)),
            "resnet34-3d" => Ok(Self::resnet34_3d(input_dims)),
            other => Err(Error::Config(format!(
                "unknown network preset `{other}` (expected `tiny` or `resnet34-3d`)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // layout construction checks every stage's output extent
        super::Net::new(self).map(|_| ())
    }
}
