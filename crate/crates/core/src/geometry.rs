//! Camera model, depth unprojection, voxel grids and room alignment.
//!
//! Conventions used throughout the crate:
//! - Camera frame: +x right, +y down, +z forward (optical axis).
//! - Image origin is the top-left pixel; pixel (u, v) indexes column u, row v.
//! - Poses are camera-to-world: `p_world = R * p_cam + t`.
//! - Voxel grids are axis-aligned in world space; voxel (0, 0, 0) has its
//!   minimum corner at the grid origin.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::invalid(
                "CameraIntrinsics::new",
                format!("focal lengths must be positive and finite, got fx={fx}, fy={fy}"),
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid(
                "CameraIntrinsics::new",
                format!("image size must be at least 1x1, got {width}x{height}"),
            ));
        }
        if !cx.is_finite() || !cy.is_finite() || cx < 0.0 || cy < 0.0 || cx >= width as f64 || cy >= height as f64 {
            return Err(Error::invalid(
                "CameraIntrinsics::new",
                format!("principal point must lie inside the image, got cx={cx}, cy={cy} for {width}x{height}"),
            ));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-6;

impl CameraPose {
    /// Builds a pose, rejecting rotations that are not orthonormal with
    /// determinant +1 (within `1e-6`).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation * rotation.transpose();
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::invalid(
                "CameraPose::new",
                format!("rotation is not orthonormal (max |R R^T - I| = {err:.3e})"),
            ));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::invalid(
                "CameraPose::new",
                format!("rotation must have determinant +1, got {det}"),
            ));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(
                "CameraPose::new",
                "translation must be finite".to_string(),
            ));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn cam_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn world_to_cam(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Dense per-pixel depth in meters; `0.0` marks missing measurements.
/// Valid depths are below 20 m (indoor sanity bound).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

/// Upper sanity bound on indoor depth measurements, meters.
pub const MAX_DEPTH_M: f32 = 20.0;

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                "DepthMap::new",
                format!("{} samples for {width}x{height}", width * height),
                data.len().to_string(),
            ));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d < 0.0 || **d >= MAX_DEPTH_M) {
            return Err(Error::invalid(
                "DepthMap::new",
                format!("depths must be finite and in [0, {MAX_DEPTH_M}) meters, got {bad}"),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    /// Depth at (u, v), or `None` when missing or out of bounds.
    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        if u >= self.width || v >= self.height {
            return None;
        }
        let d = self.data[v * self.width + u];
        if d > 0.0 { Some(d) } else { None }
    }

    pub fn set(&mut self, u: usize, v: usize, depth: f32) {
        assert!(u < self.width && v < self.height, "pixel ({u}, {v}) out of bounds");
        assert!(
            depth.is_finite() && (0.0..MAX_DEPTH_M).contains(&depth),
            "depth {depth} outside [0, {MAX_DEPTH_M})"
        );
        self.data[v * self.width + u] = depth;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Per-pixel 3D samples; `None` where the source depth was missing.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMap {
    pub width: usize,
    pub height: usize,
    pub points: Vec<Option<Vector3<f64>>>,
}

impl PointMap {
    pub fn get(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        if u >= self.width || v >= self.height {
            return None;
        }
        self.points[v * self.width + u]
    }
}

/// Lifts every valid depth sample to a world-space point.
pub fn unproject(depth: &DepthMap, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<PointMap> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::shape(
            "unproject",
            format!("{}x{} image", intr.width, intr.height),
            format!("{}x{} depth map", depth.width, depth.height),
        ));
    }
    let mut points = vec![None; depth.width * depth.height];
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some(d) = depth.get(u, v) {
                let d = d as f64;
                let p_cam = Vector3::new(
                    d * (u as f64 - intr.cx) / intr.fx,
                    d * (v as f64 - intr.cy) / intr.fy,
                    d,
                );
                points[v * depth.width + u] = Some(pose.cam_to_world(p_cam));
            }
        }
    }
    Ok(PointMap { width: depth.width, height: depth.height, points })
}

/// Projects a world point into the image. Returns `(u, v, z_cam)`; `u`/`v`
/// are continuous pixel coordinates and `z_cam` is the camera-frame depth.
pub fn project(p: Vector3<f64>, intr: &CameraIntrinsics, pose: &CameraPose) -> (f64, f64, f64) {
    let pc = pose.world_to_cam(p);
    let u = intr.fx * pc.x / pc.z + intr.cx;
    let v = intr.fy * pc.y / pc.z + intr.cy;
    (u, v, pc.z)
}

/// Whether a world point projects inside the image with positive depth.
pub fn in_view(p: Vector3<f64>, intr: &CameraIntrinsics, pose: &CameraPose) -> bool {
    let (u, v, z) = project(p, intr, pose);
    z > 0.0 && u >= 0.0 && v >= 0.0 && u < intr.width as f64 && v < intr.height as f64
}

/// Axis-aligned voxel grid: `dims` voxels of edge `voxel_size` meters,
/// minimum corner at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl VoxelGridSpec {
    pub fn new(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "VoxelGridSpec::new",
                format!("dims must be positive, got {dims:?}"),
            ));
        }
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::invalid(
                "VoxelGridSpec::new",
                format!("voxel_size must be positive and finite, got {voxel_size}"),
            ));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "VoxelGridSpec::new",
                format!("origin must be finite, got {origin:?}"),
            ));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index with x fastest, then y, then z.
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims[0] && iy < self.dims[1] && iz < self.dims[2]);
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let ix = index % self.dims[0];
        let rest = index / self.dims[0];
        [ix, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World-space center of a voxel.
    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (v[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (v[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (v[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Voxel containing a world point, or `None` outside the grid. Points on
    /// a boundary plane belong to the voxel with the larger coordinate.
    pub fn world_to_voxel(&self, p: Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.voxel_size;
            let i = rel.floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            out[a] = i as usize;
        }
        Some(out)
    }

    /// World-space minimum corner.
    pub fn min_corner(&self) -> Vector3<f64> {
        Vector3::new(self.origin[0], self.origin[1], self.origin[2])
    }

    /// World-space maximum corner.
    pub fn max_corner(&self) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        )
    }

    /// Whether two grids describe the same placement, up to the precision
    /// lost by the single-precision size/origin fields of the volume files.
    pub fn congruent(&self, other: &VoxelGridSpec) -> bool {
        const TOL: f64 = 1e-6;
        self.dims == other.dims
            && (self.voxel_size - other.voxel_size).abs() <= TOL
            && (0..3).all(|a| (self.origin[a] - other.origin[a]).abs() <= TOL)
    }
}

/// Boolean occupancy over a voxel grid, marking voxels hit by depth samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMask {
    pub spec: VoxelGridSpec,
    occ: Vec<bool>,
}

impl SurfaceMask {
    pub fn empty(spec: VoxelGridSpec) -> Self {
        let n = spec.voxel_count();
        Self { spec, occ: vec![false; n] }
    }

    /// Marks every voxel that contains at least one point of the map.
    /// Points outside the grid are ignored.
    pub fn from_point_map(spec: VoxelGridSpec, points: &PointMap) -> Self {
        let mut mask = Self::empty(spec);
        for p in points.points.iter().flatten() {
            if let Some(v) = spec.world_to_voxel(*p) {
                mask.set(v, true);
            }
        }
        mask
    }

    pub fn get(&self, v: [usize; 3]) -> bool {
        self.occ[self.spec.index(v[0], v[1], v[2])]
    }

    pub fn set(&mut self, v: [usize; 3], value: bool) {
        let i = self.spec.index(v[0], v[1], v[2]);
        self.occ[i] = value;
    }

    pub fn count(&self) -> usize {
        self.occ.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.occ
    }
}

/// Per-pixel unit surface normals oriented to face the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    pub fn get(&self, u: usize, v: usize) -> Option<Vector3<f64>> {
        if u >= self.width || v >= self.height {
            return None;
        }
        self.normals[v * self.width + u]
    }

    /// All valid normals in row-major pixel order.
    pub fn valid(&self) -> Vec<Vector3<f64>> {
        self.normals.iter().flatten().copied().collect()
    }
}

/// Estimates normals by central differences over the point map.
///
/// A pixel needs all four of its horizontal and vertical neighbors; the
/// normal is `du x dv` normalized and flipped so it points toward the camera
/// center. A wall seen head-on by a camera looking down +z gets `(0, 0, -1)`.
pub fn estimate_normals(points: &PointMap, pose: &CameraPose) -> NormalMap {
    let cam = pose.center();
    let mut normals = vec![None; points.width * points.height];
    for v in 1..points.height.saturating_sub(1) {
        for u in 1..points.width.saturating_sub(1) {
            let (Some(pl), Some(pr), Some(pu), Some(pd)) = (
                points.get(u - 1, v),
                points.get(u + 1, v),
                points.get(u, v - 1),
                points.get(u, v + 1),
            ) else {
                continue;
            };
            let Some(p) = points.get(u, v) else { continue };
            let du = pr - pl;
            let dv = pd - pu;
            let n = du.cross(&dv);
            let len = n.norm();
            if len < 1e-12 {
                continue;
            }
            let mut n = n / len;
            if n.dot(&(p - cam)) > 0.0 {
                n = -n;
            }
            normals[v * points.width + u] = Some(n);
        }
    }
    NormalMap { width: points.width, height: points.height, normals }
}

const DEGENERATE_EIGENVALUE_RATIO: f64 = 1e-9;

/// Estimates the room's principal directions from surface normals.
///
/// The returned rotation has the eigenvectors of the normal scatter matrix
/// as rows, ordered by descending eigenvalue. Row signs are fixed so each
/// diagonal entry is non-negative, then the last row is flipped if needed to
/// make the determinant +1. Fails when the normals span fewer than two
/// directions.
pub fn pca_room_alignment(normals: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
    if normals.is_empty() {
        return Err(Error::empty("pca_room_alignment", "no normals provided"));
    }
    let mut scatter = Matrix3::<f64>::zeros();
    for n in normals {
        scatter += n * n.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues of a real symmetric matrix are finite")
            .then(a.cmp(&b))
    });
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if lambda[0] <= 0.0 || lambda[1] <= lambda[0] * DEGENERATE_EIGENVALUE_RATIO {
        return Err(Error::degenerate(
            "pca_room_alignment",
            format!("normals span fewer than two directions (eigenvalues {lambda:?})"),
        ));
    }
    let mut r = Matrix3::<f64>::zeros();
    for (row, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        if v[row] < 0.0 {
            v = -v;
        }
        r.set_row(row, &v.transpose());
    }
    if r.determinant() < 0.0 {
        let flipped = -r.row(2).into_owned();
        r.set_row(2, &flipped);
    }
    Ok(r)
}

/// Rotates a camera pose into the aligned frame: the scene (and camera) are
/// rotated by `r_align` about the world origin before voxelization.
pub fn align_pose(pose: &CameraPose, r_align: &Matrix3<f64>) -> Result<CameraPose> {
    CameraPose::new(r_align * pose.rotation, r_align * pose.translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    #[test]
    fn intrinsics_reject_bad_values() {
        assert!(CameraIntrinsics::new(0.0, 100.0, 32.0, 24.0, 64, 48).is_err());
        assert!(CameraIntrinsics::new(100.0, -1.0, 32.0, 24.0, 64, 48).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, f64::NAN, 24.0, 64, 48).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 0, 48).is_err());
    }

    #[test]
    fn pose_rejects_non_orthonormal_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 2.0;
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_rejects_reflection() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(CameraPose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn unproject_center_pixel_lies_on_optical_axis() {
        let intr = test_intrinsics();
        let pose = CameraPose::identity();
        let mut depth = DepthMap::zeros(64, 48);
        depth.set(32, 24, 2.0);
        let pm = unproject(&depth, &intr, &pose).unwrap();
        let p = pm.get(32, 24).unwrap();
        assert_relative_eq!(p.x, 0.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 2.0);
        assert!(pm.get(0, 0).is_none());
    }

    #[test]
    fn unproject_offsets_scale_with_depth_and_focal_length() {
        let intr = test_intrinsics();
        let pose = CameraPose::identity();
        let mut depth = DepthMap::zeros(64, 48);
        depth.set(42, 24, 1.0);
        let pm = unproject(&depth, &intr, &pose).unwrap();
        let p = pm.get(42, 24).unwrap();
        assert_relative_eq!(p.x, 10.0 / 100.0);
        assert_relative_eq!(p.y, 0.0);
        assert_relative_eq!(p.z, 1.0);
    }

    #[test]
    fn project_inverts_unproject() {
        let intr = test_intrinsics();
        let angle = 0.3_f64;
        let rot = Matrix3::new(
            angle.cos(), 0.0, angle.sin(),
            0.0, 1.0, 0.0,
            -angle.sin(), 0.0, angle.cos(),
        );
        let pose = CameraPose::new(rot, Vector3::new(0.5, -0.2, 1.0)).unwrap();
        let mut depth = DepthMap::zeros(64, 48);
        depth.set(10, 40, 1.7);
        let pm = unproject(&depth, &intr, &pose).unwrap();
        let p = pm.get(10, 40).unwrap();
        let (u, v, z) = project(p, &intr, &pose);
        assert_relative_eq!(u, 10.0, epsilon = 1e-9);
        assert_relative_eq!(v, 40.0, epsilon = 1e-9);
        // Depth maps store f32, so the round trip reproduces the f32 value.
        assert_relative_eq!(z, f64::from(1.7f32), epsilon = 1e-9);
    }

    #[test]
    fn world_to_voxel_boundaries() {
        let spec = VoxelGridSpec::new([4, 4, 4], 0.5, [1.0, 0.0, -1.0]).unwrap();
        assert_eq!(spec.world_to_voxel(Vector3::new(1.0, 0.0, -1.0)), Some([0, 0, 0]));
        assert_eq!(spec.world_to_voxel(Vector3::new(1.5, 0.0, -1.0)), Some([1, 0, 0]));
        assert_eq!(spec.world_to_voxel(Vector3::new(0.999, 0.0, -1.0)), None);
        assert_eq!(spec.world_to_voxel(Vector3::new(3.0, 0.0, -1.0)), None);
        assert_eq!(spec.world_to_voxel(Vector3::new(2.999, 1.999, 0.999)), Some([3, 3, 3]));
    }

    #[test]
    fn voxel_center_roundtrip() {
        let spec = VoxelGridSpec::new([5, 3, 7], 0.25, [-1.0, 2.0, 0.5]).unwrap();
        for iz in 0..7 {
            for iy in 0..3 {
                for ix in 0..5 {
                    let c = spec.voxel_center([ix, iy, iz]);
                    assert_eq!(spec.world_to_voxel(c), Some([ix, iy, iz]));
                }
            }
        }
    }

    #[test]
    fn flat_index_is_x_fastest() {
        let spec = VoxelGridSpec::new([3, 4, 5], 1.0, [0.0; 3]).unwrap();
        assert_eq!(spec.index(0, 0, 0), 0);
        assert_eq!(spec.index(1, 0, 0), 1);
        assert_eq!(spec.index(0, 1, 0), 3);
        assert_eq!(spec.index(0, 0, 1), 12);
        for i in 0..spec.voxel_count() {
            let [x, y, z] = spec.coords(i);
            assert_eq!(spec.index(x, y, z), i);
        }
    }

    #[test]
    fn surface_mask_from_points_ignores_outside() {
        let spec = VoxelGridSpec::new([2, 2, 2], 1.0, [0.0; 3]).unwrap();
        let points = PointMap {
            width: 3,
            height: 1,
            points: vec![
                Some(Vector3::new(0.5, 0.5, 0.5)),
                Some(Vector3::new(1.5, 1.5, 1.5)),
                Some(Vector3::new(5.0, 0.0, 0.0)),
            ],
        };
        let mask = SurfaceMask::from_point_map(spec, &points);
        assert_eq!(mask.count(), 2);
        assert!(mask.get([0, 0, 0]));
        assert!(mask.get([1, 1, 1]));
    }

    #[test]
    fn normals_of_frontoparallel_wall_point_back_at_camera() {
        let intr = test_intrinsics();
        let pose = CameraPose::identity();
        let mut depth = DepthMap::zeros(64, 48);
        for v in 0..48 {
            for u in 0..64 {
                depth.set(u, v, 2.0);
            }
        }
        let pm = unproject(&depth, &intr, &pose).unwrap();
        let nm = estimate_normals(&pm, &pose);
        let n = nm.get(32, 24).unwrap();
        assert_relative_eq!(n.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(n.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(n.z, -1.0, epsilon = 1e-9);
        assert!(nm.get(0, 0).is_none(), "border pixels have no central difference");
    }

    #[test]
    fn pca_alignment_recovers_axis_aligned_scene() {
        let mut normals = Vec::new();
        for _ in 0..8 {
            normals.push(Vector3::new(1.0, 0.0, 0.0));
            normals.push(Vector3::new(-1.0, 0.0, 0.0));
        }
        for _ in 0..4 {
            normals.push(Vector3::new(0.0, 1.0, 0.0));
        }
        for _ in 0..2 {
            normals.push(Vector3::new(0.0, 0.0, -1.0));
        }
        let r = pca_room_alignment(&normals).unwrap();
        assert_relative_eq!((r - Matrix3::identity()).abs().max(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn pca_alignment_undoes_a_known_rotation() {
        let angle = 0.7_f64;
        let rot = Matrix3::new(
            angle.cos(), -angle.sin(), 0.0,
            angle.sin(), angle.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let mut normals = Vec::new();
        for (count, axis) in [(9, 0usize), (5, 1), (3, 2)] {
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            let n = rot * e;
            for _ in 0..count {
                normals.push(n);
                normals.push(-n);
            }
        }
        let r = pca_room_alignment(&normals).unwrap();
        for (i, &(count, axis)) in [(9usize, 0usize), (5, 1), (3, 2)].iter().enumerate() {
            let _ = count;
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            let world = rot * e;
            let aligned = r * world;
            let mut expected = Vector3::zeros();
            expected[i] = if aligned[i] >= 0.0 { 1.0 } else { -1.0 };
            assert_relative_eq!((aligned - expected).norm(), 0.0, epsilon = 1e-9);
        }
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn pca_alignment_rejects_rank_one_normals() {
        let normals = vec![Vector3::new(0.0, 0.0, 1.0); 10];
        let err = pca_room_alignment(&normals).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry { .. }));
    }

    #[test]
    fn align_pose_rotates_rotation_and_translation() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let aligned = align_pose(&pose, &r).unwrap();
        assert_relative_eq!(aligned.translation.x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(aligned.translation.y, 1.0, epsilon = 1e-12);
        // Camera-frame (0,1,0) sat at world (1,1,0) before alignment, so the
        // quarter turn about z must carry it to (-1,1,0).
        let p = aligned.cam_to_world(Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(p.x, -1.0, epsilon = 1e-12);
        assert_relative_eq!(p.y, 1.0, epsilon = 1e-12);
    }
}
