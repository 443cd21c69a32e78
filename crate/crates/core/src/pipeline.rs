//! Scene assembly: turns one dataset record (depth + camera + labels) into
//! the volumes and tensors the network consumes.

use crate::encoding::encode_semantic_volume;
use crate::error::{Error, Result};
use crate::formats::{
    read_camera, read_depth_pgm, read_label_volume, read_segmentation_pgm, DatasetManifest,
    SceneRecord,
};
use crate::geometry::{unproject, CameraIntrinsics, CameraPose, SurfaceMask, VoxelGridSpec};
use crate::network::{NetworkGraph, FTSDF_INPUT, SEMANTIC_INPUT};
use crate::tensor::Tensor;
use crate::tsdf::{compute_tsdf, flip_tsdf};
use crate::volume::{DenseVolume, EncodingScheme, LabelVolume};

/// A scene with its derived volumes, ready for the network.
pub struct LoadedScene {
    pub id: String,
    pub spec: VoxelGridSpec,
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
    pub mask: SurfaceMask,
    pub semantic: DenseVolume,
    /// Signed truncated distances, present when requested at load time and
    /// the scene has at least one surface voxel.
    pub tsdf: Option<DenseVolume>,
    /// Flipped distance encoding of `tsdf`.
    pub ftsdf: Option<DenseVolume>,
    pub gt_full: Option<LabelVolume>,
    inputs: Vec<(String, Tensor<f32>)>,
}

impl LoadedScene {
    /// All network inputs this scene can provide.
    pub fn input_refs(&self) -> Vec<(&str, &Tensor<f32>)> {
        self.inputs.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// The subset of inputs one stream consumes, erroring if the scene was
    /// loaded without a volume the stream needs.
    pub fn inputs_for(&self, graph: &NetworkGraph) -> Result<Vec<(&str, &Tensor<f32>)>> {
        graph
            .input_ids()
            .into_iter()
            .map(|(id, _)| {
                self.inputs
                    .iter()
                    .find(|(n, _)| *n == id)
                    .map(|(n, t)| (n.as_str(), t))
                    .ok_or_else(|| {
                        Error::invalid(
                            "inputs_for",
                            format!("scene {:?} was loaded without the {id:?} volume", self.id),
                        )
                    })
            })
            .collect()
    }

    /// Ground truth downsampled to network output resolution.
    pub fn gt_output(&self, factor: usize) -> Result<LabelVolume> {
        self.gt_full
            .as_ref()
            .ok_or_else(|| {
                Error::invalid("gt_output", format!("scene {:?} has no ground-truth labels", self.id))
            })?
            .downsample(factor)
    }
}

/// Loads and encodes one scene.
///
/// The voxel grid comes from the ground-truth volume when the record has
/// one; otherwise `fallback_spec` must be given. `want_tsdf` controls
/// whether the (expensive) distance field is computed; it is skipped when
/// the depth map hits no voxel at all.
pub fn load_scene(
    manifest: &DatasetManifest,
    record: &SceneRecord,
    fallback_spec: Option<&VoxelGridSpec>,
    scheme: &EncodingScheme,
    want_tsdf: bool,
    d_max: f64,
) -> Result<LoadedScene> {
    let depth = read_depth_pgm(&manifest.depth_path(record))?;
    let (intr, pose) = read_camera(&manifest.camera_path(record))?;
    let seg = read_segmentation_pgm(&manifest.segmentation_path(record))?;
    if intr.width != depth.width || intr.height != depth.height {
        return Err(Error::shape(
            format!("scene {:?} camera", record.id),
            format!("{}x{} image", depth.width, depth.height),
            format!("{}x{}", intr.width, intr.height),
        ));
    }
    let gt_full = match manifest.gt_labels_path(record) {
        Some(path) => Some(read_label_volume(&path)?),
        None => None,
    };
    let spec = match (&gt_full, fallback_spec) {
        (Some(gt), Some(fb)) => {
            if !gt.spec.congruent(fb) {
                return Err(Error::shape(
                    format!("scene {:?} grid", record.id),
                    format!("{fb:?}"),
                    format!("{:?}", gt.spec),
                ));
            }
            gt.spec
        }
        (Some(gt), None) => gt.spec,
        (None, Some(fb)) => *fb,
        (None, None) => {
            return Err(Error::invalid(
                "load_scene",
                format!("scene {:?} has no ground truth and no grid was supplied", record.id),
            ))
        }
    };
    let points = unproject(&depth, &intr, &pose)?;
    let mask = SurfaceMask::from_point_map(spec, &points);
    let semantic = encode_semantic_volume(&mask, &seg, &depth, &intr, &pose, scheme)?;
    let (tsdf, ftsdf) = if want_tsdf && mask.count() > 0 {
        let t = compute_tsdf(&mask, &pose, d_max)?;
        let f = flip_tsdf(&t, d_max)?;
        (Some(t), Some(f))
    } else {
        (None, None)
    };
    let mut inputs = vec![(SEMANTIC_INPUT.to_string(), semantic.to_tensor())];
    if let Some(f) = &ftsdf {
        inputs.push((FTSDF_INPUT.to_string(), f.to_tensor()));
    }
    Ok(LoadedScene {
        id: record.id.clone(),
        spec,
        intr,
        pose,
        mask,
        semantic,
        tsdf,
        ftsdf,
        gt_full,
        inputs,
    })
}
