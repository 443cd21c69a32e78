//! Semantic scene completion from a single depth view.
//!
//! A depth map and a 2D semantic segmentation are lifted into voxel
//! volumes — class-code channels for the semantics, a flipped truncated
//! signed distance field for the geometry — and fed to a dilated 3D
//! convolutional network that labels every voxel of the room, including
//! space the camera never saw. The crate covers the full loop: file
//! formats, volumetric encoding, a small deterministic autodiff engine for
//! 4-D tensors, the network with its fusion variants, balanced
//! cross-entropy training, and masked IoU evaluation, plus a synthetic
//! scene generator so the whole pipeline runs end to end without any
//! external data.

pub mod checkpoint;
pub mod dda;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod formats;
pub mod geometry;
pub mod network;
pub mod pipeline;
pub mod preset;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod tsdf;
pub mod volume;

pub use error::{Error, Result};
