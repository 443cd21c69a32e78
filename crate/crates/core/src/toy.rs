//! Synthetic room scenes: labeled boxes rasterized into a ground-truth
//! volume and rendered into depth and segmentation views with the same ray
//! walker the rest of the pipeline uses, so rendered data reprojects
//! exactly onto the voxels it came from.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::dda::{traverse_segment, Step};
use crate::error::{Error, Result};
use crate::formats::{
    write_camera, write_depth_pgm, write_label_volume, write_segmentation_pgm, DatasetManifest,
    SceneRecord,
};
use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap, VoxelGridSpec};
use crate::preset::ScalePreset;
use crate::train::mix_seed;
use crate::tsdf::{slab_interval, voxel_box};
use crate::volume::{LabelVolume, SegmentationMap, NUM_CLASSES, UNKNOWN_LABEL, VOID_LABEL};

/// Shortest hit interval, in camera-z meters, a rendered pixel may keep.
/// Depth files quantize to millimeters, moving the stored midpoint by at
/// most 0.5 mm along the pixel ray; requiring at least 4 mm between entry
/// and exit keeps the reprojected point inside the voxel the ray hit.
pub const MIN_HIT_INTERVAL_M: f64 = 0.004;

/// An axis-aligned box carrying a class label, in meters.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    pub label: u8,
}

impl LabeledBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>, label: u8) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::degenerate(
                "LabeledBox::new",
                format!("min {:?} must be strictly below max {:?}", min, max),
            ));
        }
        if label == 0 || label as usize > NUM_CLASSES {
            return Err(Error::invalid(
                "LabeledBox::new",
                format!("label must be in 1..={NUM_CLASSES}, got {label}"),
            ));
        }
        Ok(Self { min, max, label })
    }
}

/// Rasterizes boxes into a label volume. A voxel takes the label of the
/// last listed box whose half-open extent `[min, max)` contains the voxel
/// center.
pub fn rasterize_boxes(spec: VoxelGridSpec, boxes: &[LabeledBox]) -> Result<LabelVolume> {
    let mut labels = vec![0u8; spec.voxel_count()];
    for (i, label) in labels.iter_mut().enumerate() {
        let c = spec.voxel_center(spec.coords(i));
        for b in boxes {
            if (0..3).all(|a| c[a] >= b.min[a] && c[a] < b.max[a]) {
                *label = b.label;
            }
        }
    }
    LabelVolume::new(spec, labels)
}

/// Camera pose looking from `eye` toward `target`: the view direction
/// becomes the camera z axis, the image-down axis is the view direction
/// crossed with the image-right axis, and `up` fixes the roll.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<CameraPose> {
    let f = target - eye;
    if f.norm() < 1e-9 {
        return Err(Error::degenerate("look_at", "eye and target coincide"));
    }
    let f = f.normalize();
    let r = f.cross(&up);
    if r.norm() < 1e-9 {
        return Err(Error::degenerate("look_at", "view direction is parallel to up"));
    }
    let r = r.normalize();
    let d = f.cross(&r);
    CameraPose::new(Matrix3::from_columns(&[r, d, f]), eye)
}

/// Renders depth and segmentation views of a label volume.
///
/// Each pixel casts the exact ray the depth format reprojects along; the
/// recorded depth is the camera-z midpoint of the first occupied voxel's
/// entry/exit interval. Pixels whose ray hits nothing, starts inside the
/// hit voxel, or crosses it for less than [`MIN_HIT_INTERVAL_M`] stay
/// empty. Errors when no pixel at all hits a surface.
pub fn render_views(
    gt: &LabelVolume,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
) -> Result<(DepthMap, SegmentationMap)> {
    let spec = gt.spec;
    let origin = pose.center();
    let mut depth = DepthMap::zeros(intr.width, intr.height);
    let mut seg = SegmentationMap::filled(intr.width, intr.height, VOID_LABEL);
    let mut hits = 0usize;
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir_cam = Vector3::new(
                (u as f64 - intr.cx) / intr.fx,
                (v as f64 - intr.cy) / intr.fy,
                1.0,
            );
            let dir = pose.rotation * dir_cam;
            let mut hit: Option<[usize; 3]> = None;
            traverse_segment(&spec, origin, dir, 19.0, |vox| {
                let l = gt.get(vox);
                if l != 0 && l != UNKNOWN_LABEL {
                    hit = Some(vox);
                    Step::Stop
                } else {
                    Step::Continue
                }
            });
            let Some(vox) = hit else { continue };
            let (lo, hi) = voxel_box(&spec, vox);
            let Some((t_in, t_out)) = slab_interval(lo, hi, origin, dir) else { continue };
            if t_in > 0.0 && t_out - t_in >= MIN_HIT_INTERVAL_M {
                depth.set(u, v, (0.5 * (t_in + t_out)) as f32);
                seg.set(u, v, gt.get(vox));
                hits += 1;
            }
        }
    }
    if hits == 0 {
        return Err(Error::empty("render_views", "no surface visible from the camera"));
    }
    Ok((depth, seg))
}

/// A generated scene, ready to be written or fed straight into encoding.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub gt: LabelVolume,
    pub depth: DepthMap,
    pub seg: SegmentationMap,
    pub intr: CameraIntrinsics,
    pub pose: CameraPose,
}

/// Generates one random room on the toy grid: floor, back wall, and a few
/// boxes on the floor, viewed by a jittered camera near the front.
pub fn generate_scene(seed: u64) -> Result<ToyScene> {
    let spec = ScalePreset::Toy.grid_spec();
    let vs = spec.voxel_size;
    let ext = [
        spec.dims[0] as f64 * vs,
        spec.dims[1] as f64 * vs,
        spec.dims[2] as f64 * vs,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut boxes = vec![
        // Floor: one voxel layer of class 2.
        LabeledBox::new(
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(ext[0], vs, ext[2]),
            2,
        )?,
        // Back wall: one voxel slab of class 3.
        LabeledBox::new(
            Vector3::new(0.0, 0.0, ext[2] - vs),
            Vector3::new(ext[0], ext[1], ext[2]),
            3,
        )?,
    ];
    for _ in 0..rng.random_range(2..=3usize) {
        let w = rng.random_range(0.3..0.7);
        let d = rng.random_range(0.3..0.7);
        let h = rng.random_range(0.25..0.8);
        let cx = rng.random_range(0.5 + w / 2.0..ext[0] - 0.5 - w / 2.0);
        let cz = rng.random_range(1.2 + d / 2.0..ext[2] - vs - 0.2 - d / 2.0);
        let label = rng.random_range(4..=NUM_CLASSES as u8);
        boxes.push(LabeledBox::new(
            Vector3::new(cx - w / 2.0, vs, cz - d / 2.0),
            Vector3::new(cx + w / 2.0, vs + h, cz + d / 2.0),
            label,
        )?);
    }
    let gt = rasterize_boxes(spec, &boxes)?;

    // Camera above every box top (floor voxel + 0.8 m), inside the room,
    // looking down toward the far floor/wall region.
    let eye = Vector3::new(
        ext[0] / 2.0 + rng.random_range(-0.3..0.3),
        1.3 + rng.random_range(-0.15..0.15),
        0.2 + rng.random_range(0.0..0.15),
    );
    let target = Vector3::new(
        ext[0] / 2.0 + rng.random_range(-0.2..0.2),
        0.5,
        ext[2] - 0.4,
    );
    let pose = look_at(eye, target, Vector3::new(0.0, 1.0, 0.0))?;
    let intr = CameraIntrinsics::new(72.0, 72.0, 48.0, 36.0, 96, 72)?;
    let (depth, seg) = render_views(&gt, &intr, &pose)?;
    Ok(ToyScene { gt, depth, seg, intr, pose })
}

/// Generates `count` scenes and writes a complete dataset — depth and
/// segmentation images, camera files, ground-truth volumes, and the
/// manifest — into `dir`. Returns the loaded (validated) manifest.
pub fn write_toy_dataset(dir: &Path, count: usize, seed: u64) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::invalid("write_toy_dataset", "count must be positive"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let scene = generate_scene(mix_seed(seed, i as u64))?;
        let id = format!("toy_{i:03}");
        let depth = format!("{id}_depth.pgm");
        let camera = format!("{id}_camera.txt");
        let segmentation = format!("{id}_seg.pgm");
        let gt_labels = format!("{id}_gt.sscv");
        write_depth_pgm(&dir.join(&depth), &scene.depth)?;
        write_camera(&dir.join(&camera), &scene.intr, &scene.pose)?;
        write_segmentation_pgm(&dir.join(&segmentation), &scene.seg)?;
        write_label_volume(&dir.join(&gt_labels), &scene.gt)?;
        records.push(SceneRecord {
            id,
            depth: depth.into(),
            camera: camera.into(),
            segmentation: segmentation.into(),
            gt_labels: Some(gt_labels.into()),
        });
    }
    let manifest_path = dir.join("manifest.json");
    DatasetManifest::save(&manifest_path, &records)?;
    DatasetManifest::load(&manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_camera_z_at_the_target() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let target = Vector3::new(4.0, 1.0, 7.0);
        let pose = look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)).unwrap();
        let pc = pose.world_to_cam(target);
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12);
        assert!((pc.z - (target - eye).norm()).abs() < 1e-12);
    }

    #[test]
    fn look_at_rejects_vertical_view_with_default_up() {
        let eye = Vector3::new(0.0, 0.0, 0.0);
        let target = Vector3::new(0.0, 5.0, 0.0);
        assert!(look_at(eye, target, Vector3::new(0.0, 1.0, 0.0)).is_err());
        assert!(look_at(eye, eye, Vector3::new(0.0, 1.0, 0.0)).is_err());
    }

    #[test]
    fn rasterize_includes_min_face_and_excludes_max_face() {
        let spec = VoxelGridSpec::new([4, 2, 2], 1.0, [0.0; 3]).unwrap();
        // Half-open box [0, 2.5) in x: centers 0.5 and 1.5 inside, 2.5 out.
        let b = LabeledBox::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.5, 2.0, 2.0), 5).unwrap();
        let vol = rasterize_boxes(spec, &[b]).unwrap();
        assert_eq!(vol.get([0, 0, 0]), 5);
        assert_eq!(vol.get([1, 0, 0]), 5);
        assert_eq!(vol.get([2, 0, 0]), 0, "center exactly on the max face is out");
        assert_eq!(vol.get([3, 0, 0]), 0);
    }

    #[test]
    fn rasterize_later_boxes_overwrite_earlier() {
        let spec = VoxelGridSpec::new([3, 1, 1], 1.0, [0.0; 3]).unwrap();
        let a = LabeledBox::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(3.0, 1.0, 1.0), 4).unwrap();
        let b = LabeledBox::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(2.0, 1.0, 1.0), 9).unwrap();
        let vol = rasterize_boxes(spec, &[a, b]).unwrap();
        assert_eq!(vol.labels(), &[4, 9, 4]);
    }

    #[test]
    fn labeled_box_rejects_empty_and_unlabeled() {
        let lo = Vector3::new(0.0, 0.0, 0.0);
        let hi = Vector3::new(1.0, 1.0, 1.0);
        assert!(LabeledBox::new(hi, lo, 3).is_err());
        assert!(LabeledBox::new(lo, hi, 0).is_err());
        assert!(LabeledBox::new(lo, hi, NUM_CLASSES as u8 + 1).is_err());
    }

    #[test]
    fn center_pixel_depth_is_the_slab_midpoint() {
        let spec = VoxelGridSpec::new([5, 5, 5], 1.0, [0.0; 3]).unwrap();
        let mut labels = vec![0u8; 125];
        labels[2 + 5 * (2 + 5 * 2)] = 7; // voxel [2,2,2], box z in [2,3]
        let gt = LabelVolume::new(spec, labels).unwrap();
        let pose = look_at(
            Vector3::new(2.5, 2.5, 0.1),
            Vector3::new(2.5, 2.5, 2.5),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let intr = CameraIntrinsics::new(50.0, 50.0, 24.0, 24.0, 48, 48).unwrap();
        let (depth, seg) = render_views(&gt, &intr, &pose).unwrap();
        // Pixel (24,24) casts straight along the view axis; the hit voxel
        // spans camera z [1.9, 2.9], so the midpoint is 2.4.
        let d = depth.get(24, 24).unwrap();
        assert!((d - 2.4).abs() < 1e-6, "depth {d}");
        assert_eq!(seg.get(24, 24), 7);
    }

    #[test]
    fn rendering_an_empty_volume_fails() {
        let spec = VoxelGridSpec::new([4, 4, 4], 1.0, [0.0; 3]).unwrap();
        let gt = LabelVolume::filled(spec, 0);
        let pose = look_at(
            Vector3::new(2.0, 2.0, -1.0),
            Vector3::new(2.0, 2.0, 2.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let intr = CameraIntrinsics::new(20.0, 20.0, 10.0, 10.0, 20, 20).unwrap();
        assert!(render_views(&gt, &intr, &pose).is_err());
    }

    #[test]
    fn generated_scene_has_surface_and_differs_by_seed() {
        let a = generate_scene(1).unwrap();
        let b = generate_scene(2).unwrap();
        let valid = a.depth.data().iter().filter(|&&d| d > 0.0).count();
        assert!(valid > 500, "only {valid} of {} pixels carry depth", 96 * 72);
        assert_ne!(a.gt.labels(), b.gt.labels());
        let again = generate_scene(1).unwrap();
        assert_eq!(a.depth.data(), again.depth.data());
        assert_eq!(a.gt.labels(), again.gt.labels());
    }

    /// Every depth pixel written by the renderer must land back in an
    /// occupied ground-truth voxel after the millimeter round trip — the
    /// invariant the minimum-interval rule exists for.
    #[test]
    fn written_scene_reprojects_onto_occupied_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_toy_dataset(dir.path(), 2, 42).unwrap();
        assert_eq!(manifest.records.len(), 2);
        for record in &manifest.records {
            let scene = crate::pipeline::load_scene(
                &manifest,
                record,
                None,
                &crate::volume::EncodingScheme::three_channel(),
                false,
                crate::tsdf::DEFAULT_D_MAX,
            )
            .unwrap();
            let gt = scene.gt_full.as_ref().unwrap();
            assert!(scene.mask.count() > 100, "mask has {} voxels", scene.mask.count());
            for i in 0..scene.spec.voxel_count() {
                if scene.mask.as_slice()[i] {
                    assert_ne!(gt.labels()[i], 0, "voxel {i} hit by depth but empty in gt");
                }
            }
        }
    }

    #[test]
    fn datasets_regenerate_byte_identically() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_toy_dataset(d1.path(), 1, 9).unwrap();
        write_toy_dataset(d2.path(), 1, 9).unwrap();
        for name in ["toy_000_depth.pgm", "toy_000_seg.pgm", "toy_000_gt.sscv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }
}
