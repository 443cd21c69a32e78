//! Class-code schemes and projection of 2D labels into surface voxels.

use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraIntrinsics, CameraPose, DepthMap, SurfaceMask};
use crate::volume::{DenseVolume, EncodingScheme, EncodingVariant, RgbImage, SegmentationMap, VOID_LABEL};

/// The three-channel path's anchor codes, visited at t = 0, 1/4, 1/2, 3/4, 1.
const PATH_ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.0, 1.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
];

/// Channel code of class `c` (1..=K) under a scheme.
///
/// - one-channel: `c / K`
/// - one-hot: unit vector at index `c` (length K+1)
/// - three-channel: the point at `t = (c-1)/(K-1)` on the piecewise-linear
///   path through [`PATH_ANCHORS`], segments equally parameterized
pub fn class_to_code(c: u8, scheme: &EncodingScheme) -> Result<Vec<f32>> {
    let k = scheme.num_classes;
    if c == 0 || c as usize > k {
        return Err(Error::invalid(
            "class_to_code",
            format!("class {c} outside 1..={k}; empty space has no code"),
        ));
    }
    match scheme.variant {
        EncodingVariant::OneChannel => Ok(vec![(c as f64 / k as f64) as f32]),
        EncodingVariant::OneHot => {
            let mut code = vec![0.0f32; k + 1];
            code[c as usize] = 1.0;
            Ok(code)
        }
        EncodingVariant::ThreeChannel => {
            let t = (c as f64 - 1.0) / (k as f64 - 1.0);
            let scaled = t * 4.0;
            let seg = (scaled.floor() as usize).min(3);
            let local = scaled - seg as f64;
            let a = PATH_ANCHORS[seg];
            let b = PATH_ANCHORS[seg + 1];
            Ok((0..3)
                .map(|i| (a[i] * (1.0 - local) + b[i] * local) as f32)
                .collect())
        }
    }
}

fn project_codes(
    mask: &SurfaceMask,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    channels: usize,
    mut code_of_pixel: impl FnMut(usize, usize) -> Option<Vec<f32>>,
) -> Result<DenseVolume> {
    let points = unproject(depth, intr, pose)?;
    let mut volume = DenseVolume::zeros(mask.spec, channels);
    let mut claimed = vec![false; mask.spec.voxel_count()];
    for v in 0..depth.height {
        for u in 0..depth.width {
            let Some(p) = points.get(u, v) else { continue };
            let Some(voxel) = mask.spec.world_to_voxel(p) else { continue };
            if !mask.get(voxel) {
                continue;
            }
            let flat = mask.spec.index(voxel[0], voxel[1], voxel[2]);
            if claimed[flat] {
                continue;
            }
            let Some(code) = code_of_pixel(u, v) else { continue };
            claimed[flat] = true;
            for (c, value) in code.iter().enumerate() {
                volume.set(c, voxel, *value);
            }
        }
    }
    Ok(volume)
}

/// Writes each surface voxel's class code where a labeled pixel hits it.
///
/// Pixels with void or class-0 labels contribute nothing. When several
/// pixels land in one voxel, the smallest row-major pixel index wins.
/// Voxels outside the surface mask stay zero.
pub fn encode_semantic_volume(
    mask: &SurfaceMask,
    seg: &SegmentationMap,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    scheme: &EncodingScheme,
) -> Result<DenseVolume> {
    if seg.width != depth.width || seg.height != depth.height {
        return Err(Error::shape(
            "encode_semantic_volume",
            format!("segmentation sized {}x{}", depth.width, depth.height),
            format!("{}x{}", seg.width, seg.height),
        ));
    }
    if let Some(bad) = seg
        .labels()
        .iter()
        .find(|&&l| l != VOID_LABEL && l as usize > scheme.num_classes)
    {
        return Err(Error::invalid(
            "encode_semantic_volume",
            format!("segmentation label {bad} outside 0..={} and not void", scheme.num_classes),
        ));
    }
    let scheme = *scheme;
    project_codes(mask, depth, intr, pose, scheme.channels(), |u, v| {
        let label = seg.get(u, v);
        if label == 0 || label == VOID_LABEL {
            return None;
        }
        Some(class_to_code(label, &scheme).expect("segmentation labels are pre-validated"))
    })
}

/// Like [`encode_semantic_volume`] but stores normalized pixel colors
/// `(r, g, b) / 255` instead of class codes.
pub fn encode_rgb_volume(
    mask: &SurfaceMask,
    rgb: &RgbImage,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<DenseVolume> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::shape(
            "encode_rgb_volume",
            format!("image sized {}x{}", depth.width, depth.height),
            format!("{}x{}", rgb.width, rgb.height),
        ));
    }
    project_codes(mask, depth, intr, pose, 3, |u, v| {
        let [r, g, b] = rgb.get(u, v);
        Some(vec![
            r as f32 / 255.0,
            g as f32 / 255.0,
            b as f32 / 255.0,
        ])
    })
}
