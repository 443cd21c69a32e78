//! Voxel-state classification, evaluation masks and IoU metrics.
//!
//! Predictions are scored only where scoring is meaningful: inside the room,
//! inside the camera frustum, and — depending on the task — on occluded
//! voxels (scene completion) or additionally on the visible surface shell
//! (semantic scene completion).

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::dda::{trace_visibility, Visibility};
use crate::error::{Error, Result};
use crate::geometry::{in_view, CameraIntrinsics, CameraPose, SurfaceMask, VoxelGridSpec};
use crate::volume::{DenseVolume, LabelVolume, CLASS_NAMES, NUM_CLASSES, UNKNOWN_LABEL};

/// What one voxel is, from the camera's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelState {
    /// Outside the room's bounding box.
    OutsideRoom,
    /// Above the room's ceiling plane.
    OutsideCeiling,
    /// On the measured surface.
    Surface,
    /// Inside the room but never imaged by the camera.
    OutsideFov,
    /// Visible empty space between camera and surface.
    FreeSpace,
    /// Empty space hidden behind the surface.
    Occluded,
}

/// Axis-aligned room extents used to discard voxels outside the scene.
#[derive(Debug, Clone, Copy)]
pub struct RoomBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl RoomBounds {
    /// The whole voxel grid counts as room.
    pub fn from_grid(spec: &VoxelGridSpec) -> Self {
        Self { min: spec.min_corner(), max: spec.max_corner() }
    }

    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        if (0..3).any(|a| !(min[a] < max[a])) {
            return Err(Error::degenerate(
                "RoomBounds::new",
                format!("min {:?} must be strictly below max {:?}", min, max),
            ));
        }
        Ok(Self { min, max })
    }
}

/// Classifies one voxel. The checks are ordered: room bounds win over
/// everything, the ceiling plane wins over the other walls, surface voxels
/// win over the view test, and only in-view empty voxels are ray-traced.
pub fn classify_voxel(
    v: [usize; 3],
    mask: &SurfaceMask,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    bounds: &RoomBounds,
) -> VoxelState {
    let c = mask.spec.voxel_center(v);
    if c.y > bounds.max.y {
        return VoxelState::OutsideCeiling;
    }
    if (0..3).any(|a| c[a] < bounds.min[a] || c[a] > bounds.max[a]) {
        return VoxelState::OutsideRoom;
    }
    if mask.get(v) {
        return VoxelState::Surface;
    }
    if !in_view(c, intr, pose) {
        return VoxelState::OutsideFov;
    }
    match trace_visibility(mask, pose.center(), v) {
        Visibility::Reached => VoxelState::FreeSpace,
        Visibility::Blocked => VoxelState::Occluded,
    }
}

/// Classifies every voxel of the grid. Pure per-voxel work, so the result
/// does not depend on the parallel schedule.
pub fn classify_volume(
    mask: &SurfaceMask,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    bounds: &RoomBounds,
) -> Vec<VoxelState> {
    (0..mask.spec.voxel_count())
        .into_par_iter()
        .map(|i| classify_voxel(mask.spec.coords(i), mask, intr, pose, bounds))
        .collect()
}

/// Boolean evaluation masks at the network's output resolution.
///
/// `ssc` selects voxels scored for semantic completion: the surface shell,
/// occluded space, and visible space within the distance band of the
/// surface. `sc` selects occluded space only, for binary completion. A
/// low-resolution cell is selected when any of its high-resolution voxels
/// is.
#[derive(Debug, Clone)]
pub struct EvalMasks {
    pub dims: [usize; 3],
    pub ssc: Vec<bool>,
    pub sc: Vec<bool>,
}

impl EvalMasks {
    pub fn ssc_count(&self) -> usize {
        self.ssc.iter().filter(|&&b| b).count()
    }

    pub fn sc_count(&self) -> usize {
        self.sc.iter().filter(|&&b| b).count()
    }
}

fn pool_any(dims: [usize; 3], full: &[bool], factor: usize) -> Result<([usize; 3], Vec<bool>)> {
    if factor == 0 {
        return Err(Error::invalid("pool_any", "factor must be positive"));
    }
    if dims.iter().any(|&d| d % factor != 0) {
        return Err(Error::invalid(
            "pool_any",
            format!("dims {dims:?} not divisible by {factor}"),
        ));
    }
    let od = [dims[0] / factor, dims[1] / factor, dims[2] / factor];
    let mut out = vec![false; od[0] * od[1] * od[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if full[x + dims[0] * (y + dims[1] * z)] {
                    let o = (x / factor) + od[0] * ((y / factor) + od[1] * (z / factor));
                    out[o] = true;
                }
            }
        }
    }
    Ok((od, out))
}

/// Builds both masks from the full-resolution surface mask and signed
/// distance volume, pooled down by `factor`.
pub fn build_eval_masks(
    mask: &SurfaceMask,
    tsdf: &DenseVolume,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    bounds: &RoomBounds,
    d_max: f64,
    factor: usize,
) -> Result<EvalMasks> {
    let dims = mask.spec.dims;
    if tsdf.spec.dims != dims || tsdf.channels != 1 {
        return Err(Error::shape(
            "build_eval_masks",
            format!("1-channel distance volume over {dims:?}"),
            format!("{} channels over {:?}", tsdf.channels, tsdf.spec.dims),
        ));
    }
    if !(d_max > 0.0) || !d_max.is_finite() {
        return Err(Error::invalid("build_eval_masks", "d_max must be positive and finite"));
    }
    let states = classify_volume(mask, intr, pose, bounds);
    let d = tsdf.data();
    let mut ssc = vec![false; states.len()];
    let mut sc = vec![false; states.len()];
    for (i, s) in states.iter().enumerate() {
        match s {
            VoxelState::Surface => ssc[i] = true,
            VoxelState::Occluded => {
                ssc[i] = true;
                sc[i] = true;
            }
            VoxelState::FreeSpace => {
                // Compare in f32 so voxels clamped to the truncation
                // distance fall outside the band exactly.
                if d[i].abs() < d_max as f32 {
                    ssc[i] = true;
                }
            }
            _ => {}
        }
    }
    let (od, ssc) = pool_any(dims, &ssc, factor)?;
    let (_, sc) = pool_any(dims, &sc, factor)?;
    Ok(EvalMasks { dims: od, ssc, sc })
}

/// Confusion counts of one binary decision.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl BinaryCounts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn precision(&self) -> Option<f64> {
        let denom = self.tp + self.fp;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// Scores of one scene (or of many scenes accumulated together).
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    /// Index `c - 1` holds the counts of class `c`.
    pub per_class: [BinaryCounts; NUM_CLASSES],
    /// Binary occupancy counts on occluded voxels.
    pub sc: BinaryCounts,
}

impl EvalReport {
    /// Mean IoU over classes whose IoU is defined (appearing in prediction
    /// or ground truth); `None` when no class is defined.
    pub fn ssc_avg_iou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class.iter().filter_map(|c| c.iou()).collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }

    /// Adds another report's counts (for averaging over a dataset).
    pub fn merge(&mut self, other: &EvalReport) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
        self.sc.tp += other.sc.tp;
        self.sc.fp += other.sc.fp;
        self.sc.fn_ += other.sc.fn_;
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
        }
        let mut s = String::from("semantic scene completion (masked voxels)\n");
        s.push_str(&format!("  {:<12} {:>8} {:>8} {:>8} {:>8}\n", "class", "IoU", "tp", "fp", "fn"));
        for (i, c) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "  {:<12} {:>8} {:>8} {:>8} {:>8}\n",
                CLASS_NAMES[i + 1],
                opt(c.iou()),
                c.tp,
                c.fp,
                c.fn_
            ));
        }
        s.push_str(&format!("  {:<12} {:>8}\n", "average", opt(self.ssc_avg_iou())));
        s.push_str("scene completion (occluded voxels)\n");
        s.push_str(&format!(
            "  IoU {}   precision {}   recall {}\n",
            opt(self.sc.iou()),
            opt(self.sc.precision()),
            opt(self.sc.recall())
        ));
        s
    }

    /// Machine-readable CSV with one row per class, the average, and the
    /// binary completion row. Undefined values are `NA`.
    pub fn render_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
        }
        let mut s = String::from("section,name,iou,precision,recall,tp,fp,fn\n");
        for (i, c) in self.per_class.iter().enumerate() {
            s.push_str(&format!(
                "ssc,{},{},{},{},{},{},{}\n",
                CLASS_NAMES[i + 1],
                opt(c.iou()),
                opt(c.precision()),
                opt(c.recall()),
                c.tp,
                c.fp,
                c.fn_
            ));
        }
        s.push_str(&format!(
            "ssc,average,{},NA,NA,NA,NA,NA\n",
            opt(self.ssc_avg_iou())
        ));
        s.push_str(&format!(
            "sc,occupied,{},{},{},{},{},{}\n",
            opt(self.sc.iou()),
            opt(self.sc.precision()),
            opt(self.sc.recall()),
            self.sc.tp,
            self.sc.fp,
            self.sc.fn_
        ));
        s
    }
}

/// Scores a prediction against ground truth on the evaluation masks.
///
/// Ground-truth voxels without annotation are skipped even inside the
/// masks; predictions must not contain unknown labels.
pub fn compute_metrics(pred: &LabelVolume, gt: &LabelVolume, masks: &EvalMasks) -> Result<EvalReport> {
    if pred.spec.dims != masks.dims || gt.spec.dims != masks.dims {
        return Err(Error::shape(
            "compute_metrics",
            format!("{:?}", masks.dims),
            format!("pred {:?}, gt {:?}", pred.spec.dims, gt.spec.dims),
        ));
    }
    if let Some(i) = pred.labels().iter().position(|&l| l as usize > NUM_CLASSES) {
        return Err(Error::invalid(
            "compute_metrics",
            format!("prediction voxel {i} has label {}", pred.labels()[i]),
        ));
    }
    let mut report = EvalReport::default();
    for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
        if g == UNKNOWN_LABEL {
            continue;
        }
        if masks.ssc[i] {
            for c in 1..=NUM_CLASSES as u8 {
                let counts = &mut report.per_class[c as usize - 1];
                match (p == c, g == c) {
                    (true, true) => counts.tp += 1,
                    (true, false) => counts.fp += 1,
                    (false, true) => counts.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        if masks.sc[i] {
            match (p != 0, g != 0) {
                (true, true) => report.sc.tp += 1,
                (true, false) => report.sc.fp += 1,
                (false, true) => report.sc.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A 9x5x5 corridor with a full wall at x = 5, camera on the axis
    /// looking down +x.
    fn corridor() -> (SurfaceMask, CameraIntrinsics, CameraPose) {
        let spec = VoxelGridSpec::new([9, 5, 5], 1.0, [0.0; 3]).unwrap();
        let mut mask = SurfaceMask::empty(spec);
        for y in 0..5 {
            for z in 0..5 {
                mask.set([5, y, z], true);
            }
        }
        let intr = CameraIntrinsics::new(80.0, 80.0, 40.0, 30.0, 80, 60).unwrap();
        // Camera at the middle of the -x face looking down world +x: the
        // image right axis is world +z, the image down axis is world -y.
        let pose = CameraPose::new(
            nalgebra::Matrix3::from_columns(&[
                Vector3::new(0.0, 0.0, 1.0),
                Vector3::new(0.0, -1.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
            ]),
            Vector3::new(0.5, 2.5, 2.5),
        )
        .unwrap();
        (mask, intr, pose)
    }

    #[test]
    fn corridor_states_follow_the_wall() {
        let (mask, intr, pose) = corridor();
        let bounds = RoomBounds::from_grid(&mask.spec);
        assert_eq!(classify_voxel([2, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::FreeSpace);
        assert_eq!(classify_voxel([5, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::Surface);
        assert_eq!(classify_voxel([7, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::Occluded);
    }

    #[test]
    fn narrow_frustum_marks_edges_out_of_view() {
        let (mask, _, pose) = corridor();
        // fx large relative to width: only a thin cone around +x is seen.
        let intr = CameraIntrinsics::new(400.0, 400.0, 20.0, 15.0, 40, 30).unwrap();
        let bounds = RoomBounds::from_grid(&mask.spec);
        assert_eq!(classify_voxel([2, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::FreeSpace);
        assert_eq!(
            classify_voxel([2, 4, 4], &mask, &intr, &pose, &bounds),
            VoxelState::OutsideFov,
            "corner voxel close to the camera falls outside the narrow cone"
        );
        // Surface stays surface even out of view.
        assert_eq!(classify_voxel([5, 4, 4], &mask, &intr, &pose, &bounds), VoxelState::Surface);
    }

    #[test]
    fn bounds_trump_every_other_state() {
        let (mask, intr, pose) = corridor();
        let bounds = RoomBounds::new(Vector3::new(0.0, 0.0, 0.0), Vector3::new(4.0, 4.0, 5.0)).unwrap();
        // x = 5 wall voxel now sits outside the room box.
        assert_eq!(classify_voxel([5, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::OutsideRoom);
        // Voxel above the ceiling plane, even though also outside in x.
        assert_eq!(
            classify_voxel([6, 4, 2], &mask, &intr, &pose, &bounds),
            VoxelState::OutsideCeiling,
            "the ceiling check comes before the general box check"
        );
        assert_eq!(classify_voxel([2, 2, 2], &mask, &intr, &pose, &bounds), VoxelState::FreeSpace);
    }

    #[test]
    fn classify_volume_matches_per_voxel_calls() {
        let (mask, intr, pose) = corridor();
        let bounds = RoomBounds::from_grid(&mask.spec);
        let states = classify_volume(&mask, &intr, &pose, &bounds);
        assert_eq!(states.len(), mask.spec.voxel_count());
        for i in 0..states.len() {
            assert_eq!(states[i], classify_voxel(mask.spec.coords(i), &mask, &intr, &pose, &bounds));
        }
    }

    fn flat_tsdf(spec: VoxelGridSpec, value: f32) -> DenseVolume {
        DenseVolume::new(spec, 1, vec![value; spec.voxel_count()]).unwrap()
    }

    #[test]
    fn eval_masks_select_surface_occluded_and_near_band() {
        let (mask, intr, pose) = corridor();
        let bounds = RoomBounds::from_grid(&mask.spec);
        let tsdf = crate::tsdf::compute_tsdf(&mask, &pose, 1.5).unwrap();
        let m = build_eval_masks(&mask, &tsdf, &intr, &pose, &bounds, 1.5, 1).unwrap();
        let idx = |v: [usize; 3]| v[0] + 9 * (v[1] + 5 * v[2]);
        // Occluded voxel behind the wall: in both masks.
        assert!(m.ssc[idx([7, 2, 2])] && m.sc[idx([7, 2, 2])]);
        // Surface: ssc only.
        assert!(m.ssc[idx([5, 2, 2])] && !m.sc[idx([5, 2, 2])]);
        // Free space one voxel in front of the wall: inside the band.
        assert!(m.ssc[idx([4, 2, 2])] && !m.sc[idx([4, 2, 2])]);
        // Free space far from the wall: outside the band.
        assert!(!m.ssc[idx([1, 2, 2])] && !m.sc[idx([1, 2, 2])]);
    }

    #[test]
    fn eval_masks_pool_any_true_per_block() {
        let spec = VoxelGridSpec::new([4, 4, 4], 1.0, [0.0; 3]).unwrap();
        let mut mask = SurfaceMask::empty(spec);
        mask.set([0, 0, 0], true); // single surface voxel in block (0,0,0)
        let intr = CameraIntrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30).unwrap();
        let pose = CameraPose::identity();
        let bounds = RoomBounds::from_grid(&spec);
        let tsdf = flat_tsdf(spec, 10.0); // band never triggers
        let m = build_eval_masks(&mask, &tsdf, &intr, &pose, &bounds, 0.5, 2).unwrap();
        assert_eq!(m.dims, [2, 2, 2]);
        assert!(m.ssc[0], "block containing the surface voxel is selected");
        // Far corner block: no surface, out of view, band disabled.
        assert!(!m.ssc[7] && !m.sc[7]);
    }

    #[test]
    fn eval_masks_reject_indivisible_dims() {
        let spec = VoxelGridSpec::new([5, 4, 4], 1.0, [0.0; 3]).unwrap();
        let mut mask = SurfaceMask::empty(spec);
        mask.set([1, 1, 1], true);
        let intr = CameraIntrinsics::new(40.0, 40.0, 20.0, 15.0, 40, 30).unwrap();
        let pose = CameraPose::identity();
        let bounds = RoomBounds::from_grid(&spec);
        let tsdf = flat_tsdf(spec, 10.0);
        assert!(build_eval_masks(&mask, &tsdf, &intr, &pose, &bounds, 0.5, 2).is_err());
    }

    #[test]
    fn sc_mask_is_subset_of_ssc_mask() {
        let (mask, intr, pose) = corridor();
        let bounds = RoomBounds::from_grid(&mask.spec);
        let tsdf = crate::tsdf::compute_tsdf(&mask, &pose, 0.8).unwrap();
        let m = build_eval_masks(&mask, &tsdf, &intr, &pose, &bounds, 0.8, 1).unwrap();
        for (s, c) in m.ssc.iter().zip(&m.sc) {
            assert!(!c || *s);
        }
    }

    fn all_true_masks(dims: [usize; 3]) -> EvalMasks {
        let n = dims[0] * dims[1] * dims[2];
        EvalMasks { dims, ssc: vec![true; n], sc: vec![true; n] }
    }

    fn volume(dims: [usize; 3], labels: &[u8]) -> LabelVolume {
        let spec = VoxelGridSpec::new(dims, 1.0, [0.0; 3]).unwrap();
        LabelVolume::new(spec, labels.to_vec()).unwrap()
    }

    #[test]
    fn metrics_match_hand_counted_confusions() {
        let gt = volume([2, 2, 1], &[1, 1, 2, 0]);
        let pred = volume([2, 2, 1], &[1, 2, 2, 2]);
        let m = all_true_masks([2, 2, 1]);
        let r = compute_metrics(&pred, &gt, &m).unwrap();
        // class 1: tp {v0}; fn {v1}; fp {}.
        assert_eq!(r.per_class[0], BinaryCounts { tp: 1, fp: 0, fn_: 1 });
        assert_eq!(r.per_class[0].iou(), Some(0.5));
        // class 2: tp {v2}; fp {v1, v3}; fn {}.
        assert_eq!(r.per_class[1], BinaryCounts { tp: 1, fp: 2, fn_: 0 });
        assert!((r.per_class[1].iou().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // classes 3..: absent everywhere -> undefined.
        assert_eq!(r.per_class[2].iou(), None);
        // average over the two defined classes.
        assert!((r.ssc_avg_iou().unwrap() - (0.5 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
        // occupancy: tp {v0,v1,v2}; fp {v3}; fn {}.
        assert_eq!(r.sc, BinaryCounts { tp: 3, fp: 1, fn_: 0 });
    }

    #[test]
    fn metrics_skip_voxels_outside_the_masks() {
        let gt = volume([2, 2, 1], &[1, 1, 2, 0]);
        let pred = volume([2, 2, 1], &[1, 2, 2, 2]);
        let mut m = all_true_masks([2, 2, 1]);
        m.ssc[1] = false; // drop the class-1 fn / class-2 fp voxel
        m.sc = vec![false; 4];
        let r = compute_metrics(&pred, &gt, &m).unwrap();
        assert_eq!(r.per_class[0], BinaryCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(r.per_class[1], BinaryCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.sc, BinaryCounts::default());
        assert_eq!(r.sc.iou(), None);
    }

    #[test]
    fn metrics_skip_unannotated_ground_truth() {
        let gt = volume([2, 2, 1], &[1, UNKNOWN_LABEL, 2, 0]);
        let pred = volume([2, 2, 1], &[1, 2, 2, 2]);
        let r = compute_metrics(&pred, &gt, &all_true_masks([2, 2, 1])).unwrap();
        assert_eq!(r.per_class[1], BinaryCounts { tp: 1, fp: 1, fn_: 0 }, "voxel 1 ignored");
    }

    #[test]
    fn metrics_reject_unknown_predictions() {
        let gt = volume([2, 2, 1], &[1, 1, 2, 0]);
        let pred = volume([2, 2, 1], &[1, UNKNOWN_LABEL, 2, 2]);
        assert!(compute_metrics(&pred, &gt, &all_true_masks([2, 2, 1])).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere_defined() {
        let labels = [1, 2, 3, 0, 11, 0, 7, 7];
        let gt = volume([2, 2, 2], &labels);
        let pred = volume([2, 2, 2], &labels);
        let r = compute_metrics(&pred, &gt, &all_true_masks([2, 2, 2])).unwrap();
        assert_eq!(r.ssc_avg_iou(), Some(1.0));
        assert_eq!(r.sc.iou(), Some(1.0));
        assert_eq!(r.sc.precision(), Some(1.0));
        assert_eq!(r.sc.recall(), Some(1.0));
    }

    /// Independent recomputation of every count with naive per-class loops.
    #[test]
    fn metrics_agree_with_naive_recount_on_random_volumes() {
        let dims = [6, 6, 6];
        let n = 216;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let gt_l: Vec<u8> = (0..n)
            .map(|_| match rng.random_range(0..6) {
                0 => 0,
                1 => UNKNOWN_LABEL,
                _ => rng.random_range(1..=NUM_CLASSES as u8),
            })
            .collect();
        let pred_l: Vec<u8> = (0..n)
            .map(|_| if rng.random_range(0..3) == 0 { 0 } else { rng.random_range(1..=NUM_CLASSES as u8) })
            .collect();
        let ssc: Vec<bool> = (0..n).map(|_| rng.random_range(0..4) != 0).collect();
        let sc: Vec<bool> = (0..n).map(|i| ssc[i] && rng.random_range(0..2) == 0).collect();
        let masks = EvalMasks { dims, ssc: ssc.clone(), sc: sc.clone() };
        let r = compute_metrics(&volume(dims, &pred_l), &volume(dims, &gt_l), &masks).unwrap();
        for c in 1..=NUM_CLASSES as u8 {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for i in 0..n {
                if !ssc[i] || gt_l[i] == UNKNOWN_LABEL {
                    continue;
                }
                if pred_l[i] == c && gt_l[i] == c {
                    tp += 1;
                } else if pred_l[i] == c {
                    fp += 1;
                } else if gt_l[i] == c {
                    fn_ += 1;
                }
            }
            assert_eq!(r.per_class[c as usize - 1], BinaryCounts { tp, fp, fn_ }, "class {c}");
        }
        let mut occ = BinaryCounts::default();
        for i in 0..n {
            if !sc[i] || gt_l[i] == UNKNOWN_LABEL {
                continue;
            }
            match (pred_l[i] != 0, gt_l[i] != 0) {
                (true, true) => occ.tp += 1,
                (true, false) => occ.fp += 1,
                (false, true) => occ.fn_ += 1,
                (false, false) => {}
            }
        }
        assert_eq!(r.sc, occ);
    }

    #[test]
    fn merged_reports_add_counts() {
        let gt = volume([2, 2, 1], &[1, 1, 2, 0]);
        let pred = volume([2, 2, 1], &[1, 2, 2, 2]);
        let m = all_true_masks([2, 2, 1]);
        let single = compute_metrics(&pred, &gt, &m).unwrap();
        let mut doubled = EvalReport::default();
        doubled.merge(&single);
        doubled.merge(&single);
        assert_eq!(doubled.per_class[0].tp, 2 * single.per_class[0].tp);
        assert_eq!(doubled.sc.fp, 2 * single.sc.fp);
        assert_eq!(doubled.ssc_avg_iou(), single.ssc_avg_iou(), "ratios survive doubling");
    }

    #[test]
    fn reports_render_all_classes_in_order_with_na_for_undefined() {
        let gt = volume([2, 2, 1], &[1, 1, 2, 0]);
        let pred = volume([2, 2, 1], &[1, 2, 2, 2]);
        let r = compute_metrics(&pred, &gt, &all_true_masks([2, 2, 1])).unwrap();
        let table = r.render_table();
        let ceiling_pos = table.find("ceiling").unwrap();
        let floor_pos = table.find("floor").unwrap();
        let objects_pos = table.find("objects").unwrap();
        assert!(ceiling_pos < floor_pos && floor_pos < objects_pos);
        assert!(table.contains("NA"), "absent classes print NA");
        assert!(table.contains("average"));
        let csv = r.render_csv();
        assert_eq!(csv.lines().count(), 1 + NUM_CLASSES + 2, "header, classes, average, occupancy");
        assert!(csv.lines().nth(1).unwrap().starts_with("ssc,ceiling,"));
        assert!(csv.lines().last().unwrap().starts_with("sc,occupied,"));
    }

    #[test]
    fn room_bounds_reject_inverted_boxes() {
        assert!(RoomBounds::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.5, 2.0, 2.0)).is_err());
    }
}
