//! Dense float volumes, label volumes and 2D label images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;

/// Number of object classes K; class ids run 1..=K, 0 is empty space.
pub const NUM_CLASSES: usize = 11;

/// Marker for voxels with no ground-truth annotation.
pub const UNKNOWN_LABEL: u8 = 255;

/// Marker for 2D pixels with no class.
pub const VOID_LABEL: u8 = 255;

/// Display names indexed by label id (0 = empty).
pub const CLASS_NAMES: [&str; NUM_CLASSES + 1] = [
    "empty", "ceiling", "floor", "wall", "window", "chair", "bed", "sofa", "table", "tv",
    "furniture", "objects",
];

/// How a class label is written into input-volume channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingVariant {
    OneChannel,
    ThreeChannel,
    OneHot,
}

/// Class-code scheme: variant plus the class count it encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingScheme {
    pub variant: EncodingVariant,
    pub num_classes: usize,
}

impl EncodingScheme {
    pub fn new(variant: EncodingVariant, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(
                "EncodingScheme::new",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        Ok(Self { variant, num_classes })
    }

    pub fn one_channel() -> Self {
        Self { variant: EncodingVariant::OneChannel, num_classes: NUM_CLASSES }
    }

    pub fn three_channel() -> Self {
        Self { variant: EncodingVariant::ThreeChannel, num_classes: NUM_CLASSES }
    }

    pub fn one_hot() -> Self {
        Self { variant: EncodingVariant::OneHot, num_classes: NUM_CLASSES }
    }

    /// Channel count of the produced volume: 1, 3 or K+1.
    pub fn channels(&self) -> usize {
        match self.variant {
            EncodingVariant::OneChannel => 1,
            EncodingVariant::ThreeChannel => 3,
            EncodingVariant::OneHot => self.num_classes + 1,
        }
    }
}

/// Multi-channel float volume over a voxel grid.
///
/// Layout: `index = c + C*(x + X*(y + Y*z))`, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    data: Vec<f32>,
}

impl DenseVolume {
    pub fn new(spec: VoxelGridSpec, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("DenseVolume::new", "channel count must be positive"));
        }
        let expect = channels * spec.voxel_count();
        if data.len() != expect {
            return Err(Error::shape(
                "DenseVolume::new",
                format!("{expect} values ({channels} channels x {:?})", spec.dims),
                data.len().to_string(),
            ));
        }
        Ok(Self { spec, channels, data })
    }

    pub fn zeros(spec: VoxelGridSpec, channels: usize) -> Self {
        let n = channels * spec.voxel_count();
        Self { spec, channels, data: vec![0.0; n] }
    }

    pub fn index(&self, c: usize, v: [usize; 3]) -> usize {
        debug_assert!(c < self.channels);
        c + self.channels * self.spec.index(v[0], v[1], v[2])
    }

    pub fn get(&self, c: usize, v: [usize; 3]) -> f32 {
        self.data[self.index(c, v)]
    }

    pub fn set(&mut self, c: usize, v: [usize; 3], value: f32) {
        let i = self.index(c, v);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Size of the raw sample payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    /// Reinterprets the volume as a network tensor; the flat layouts are
    /// identical, so this is a plain copy.
    pub fn to_tensor(&self) -> crate::tensor::Tensor<f32> {
        let [x, y, z] = self.spec.dims;
        crate::tensor::Tensor::new([self.channels, x, y, z], self.data.clone())
            .expect("volume layout matches tensor layout")
    }

    /// Wraps tensor data in a volume placed on `spec`.
    pub fn from_tensor(spec: VoxelGridSpec, t: &crate::tensor::Tensor<f32>) -> Result<Self> {
        let [c, x, y, z] = t.shape();
        if [x, y, z] != spec.dims {
            return Err(Error::shape(
                "DenseVolume::from_tensor",
                format!("{:?}", spec.dims),
                format!("{:?}", [x, y, z]),
            ));
        }
        Self::new(spec, c, t.data().to_vec())
    }
}

/// Per-voxel class labels in `{0..=K}` plus [`UNKNOWN_LABEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub spec: VoxelGridSpec,
    labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(spec: VoxelGridSpec, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != spec.voxel_count() {
            return Err(Error::shape(
                "LabelVolume::new",
                format!("{} labels for {:?}", spec.voxel_count(), spec.dims),
                labels.len().to_string(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize > NUM_CLASSES && l != UNKNOWN_LABEL) {
            return Err(Error::invalid(
                "LabelVolume::new",
                format!("label {bad} outside 0..={NUM_CLASSES} and {UNKNOWN_LABEL}"),
            ));
        }
        Ok(Self { spec, labels })
    }

    pub fn filled(spec: VoxelGridSpec, label: u8) -> Self {
        assert!(label as usize <= NUM_CLASSES || label == UNKNOWN_LABEL);
        let n = spec.voxel_count();
        Self { spec, labels: vec![label; n] }
    }

    pub fn get(&self, v: [usize; 3]) -> u8 {
        self.labels[self.spec.index(v[0], v[1], v[2])]
    }

    pub fn set(&mut self, v: [usize; 3], label: u8) {
        assert!(label as usize <= NUM_CLASSES || label == UNKNOWN_LABEL);
        let i = self.spec.index(v[0], v[1], v[2]);
        self.labels[i] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Voxels carrying an object class (1..=K).
    pub fn occupied_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != UNKNOWN_LABEL && l > 0)
            .count()
    }

    /// Majority-vote reduction by `factor` along each axis.
    ///
    /// UNKNOWN voxels do not vote; ties pick the smaller label id; blocks
    /// that are entirely UNKNOWN stay UNKNOWN.
    pub fn downsample(&self, factor: usize) -> Result<LabelVolume> {
        if factor == 0 {
            return Err(Error::invalid("LabelVolume::downsample", "factor must be positive"));
        }
        if self.spec.dims.iter().any(|&d| d % factor != 0) {
            return Err(Error::invalid(
                "LabelVolume::downsample",
                format!("dims {:?} not divisible by {factor}", self.spec.dims),
            ));
        }
        let out_spec = VoxelGridSpec::new(
            [
                self.spec.dims[0] / factor,
                self.spec.dims[1] / factor,
                self.spec.dims[2] / factor,
            ],
            self.spec.voxel_size * factor as f64,
            self.spec.origin,
        )?;
        let mut out = Vec::with_capacity(out_spec.voxel_count());
        for oz in 0..out_spec.dims[2] {
            for oy in 0..out_spec.dims[1] {
                for ox in 0..out_spec.dims[0] {
                    let mut counts = [0usize; NUM_CLASSES + 1];
                    let mut known = 0usize;
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let l = self.get([ox * factor + dx, oy * factor + dy, oz * factor + dz]);
                                if l != UNKNOWN_LABEL {
                                    counts[l as usize] += 1;
                                    known += 1;
                                }
                            }
                        }
                    }
                    if known == 0 {
                        out.push(UNKNOWN_LABEL);
                    } else {
                        let mut best = 0usize;
                        for (l, &c) in counts.iter().enumerate() {
                            if c > counts[best] {
                                best = l;
                            }
                        }
                        out.push(best as u8);
                    }
                }
            }
        }
        // Output voxel order above is x-fastest, matching the flat layout.
        LabelVolume::new(out_spec, out)
    }
}

/// Per-pixel class labels for a 2D segmentation; [`VOID_LABEL`] = no class.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub width: usize,
    pub height: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "SegmentationMap::new",
                format!("{} labels for {width}x{height}", width * height),
                labels.len().to_string(),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize > NUM_CLASSES && l != VOID_LABEL) {
            return Err(Error::invalid(
                "SegmentationMap::new",
                format!("label {bad} outside 0..={NUM_CLASSES} and {VOID_LABEL}"),
            ));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self { width, height, labels: vec![label; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        assert!(u < self.width && v < self.height);
        self.labels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, label: u8) {
        assert!(u < self.width && v < self.height);
        assert!(label as usize <= NUM_CLASSES || label == VOID_LABEL);
        self.labels[v * self.width + u] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(
                "RgbImage::new",
                format!("{} bytes for {width}x{height} RGB", 3 * width * height),
                data.len().to_string(),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn get(&self, u: usize, v: usize) -> [u8; 3] {
        assert!(u < self.width && v < self.height);
        let i = 3 * (v * self.width + u);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, u: usize, v: usize, rgb: [u8; 3]) {
        assert!(u < self.width && v < self.height);
        let i = 3 * (v * self.width + u);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}
