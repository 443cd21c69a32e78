//! Scale presets: the full-resolution configuration and a desk-scale toy
//! configuration that exercises the identical pipeline in seconds.

use serde::{Deserialize, Serialize};

use crate::geometry::VoxelGridSpec;

/// Channel widths of the network trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetWidths {
    pub stem: usize,
    pub block1: usize,
    pub mid: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Full,
    Toy,
}

impl ScalePreset {
    /// Input voxel grid with its minimum corner at the world origin.
    pub fn grid_spec(&self) -> VoxelGridSpec {
        match self {
            ScalePreset::Full => VoxelGridSpec::new([240, 144, 240], 0.02, [0.0; 3])
                .expect("full preset grid is valid"),
            ScalePreset::Toy => VoxelGridSpec::new([40, 24, 40], 0.08, [0.0; 3])
                .expect("toy preset grid is valid"),
        }
    }

    pub fn widths(&self) -> NetWidths {
        match self {
            ScalePreset::Full => NetWidths { stem: 16, block1: 32, mid: 64, head: 128 },
            ScalePreset::Toy => NetWidths { stem: 4, block1: 8, mid: 16, head: 32 },
        }
    }

    pub fn default_total_steps(&self) -> usize {
        match self {
            ScalePreset::Full => 150_000,
            ScalePreset::Toy => 1_500,
        }
    }

    pub fn default_decay_step(&self) -> usize {
        match self {
            ScalePreset::Full => 100_000,
            ScalePreset::Toy => 1_000,
        }
    }
}
