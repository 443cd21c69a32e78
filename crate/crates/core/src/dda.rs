//! Voxel ray traversal.
//!
//! A single amortized-constant-time grid walk is shared by the signed
//! distance computation, the visibility classification and the test-scene
//! renderer, so all of them agree on which voxels a ray passes through.

use nalgebra::Vector3;

use crate::geometry::{SurfaceMask, VoxelGridSpec};

/// Caller decision after visiting a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    Stop,
}

/// Outcome of tracing from a camera toward a voxel center.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    /// The ray reached the voxel without crossing an occupied voxel first.
    Reached,
    /// An occupied voxel blocked the ray before it arrived.
    Blocked,
}

/// Walks the voxels pierced by `origin + t * dir` for `t` in `[0, t_max]`,
/// in order of increasing `t`, calling `visit` for each.
///
/// When the ray crosses several boundary planes at exactly the same `t`, the
/// x step is taken first, then y, then z. Rays that never intersect the grid
/// visit nothing.
pub fn traverse_segment(
    spec: &VoxelGridSpec,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t_max: f64,
    mut visit: impl FnMut([usize; 3]) -> Step,
) {
    let min = spec.min_corner();
    let max = spec.max_corner();

    // Clip the segment to the grid box.
    let mut t0 = 0.0_f64;
    let mut t1 = t_max;
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < min[a] || origin[a] > max[a] {
                return;
            }
            continue;
        }
        let ta = (min[a] - origin[a]) / dir[a];
        let tb = (max[a] - origin[a]) / dir[a];
        let (enter, exit) = if ta < tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(enter);
        t1 = t1.min(exit);
    }
    if t0 > t1 {
        return;
    }

    // Starting voxel, clamped so exact max-face entries stay in range.
    let p0 = origin + dir * t0;
    let mut voxel = [0usize; 3];
    for a in 0..3 {
        let rel = ((p0[a] - min[a]) / spec.voxel_size).floor();
        let clamped = rel.max(0.0).min(spec.dims[a] as f64 - 1.0);
        voxel[a] = clamped as usize;
    }

    let mut step = [0isize; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = min[a] + (voxel[a] as f64 + 1.0) * spec.voxel_size;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = spec.voxel_size / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = min[a] + voxel[a] as f64 * spec.voxel_size;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = spec.voxel_size / -dir[a];
        }
    }

    loop {
        if visit(voxel) == Step::Stop {
            return;
        }
        let mut axis = 0;
        if t_next[1] < t_next[axis] {
            axis = 1;
        }
        if t_next[2] < t_next[axis] {
            axis = 2;
        }
        if t_next[axis] > t1 {
            return;
        }
        let next = voxel[axis] as isize + step[axis];
        if next < 0 || next >= spec.dims[axis] as isize {
            return;
        }
        voxel[axis] = next as usize;
        t_next[axis] += t_delta[axis];
    }
}

/// Traces from `camera` toward the center of `target` and reports whether
/// the ray arrives before crossing any other occupied voxel. The target
/// voxel never blocks itself.
pub fn trace_visibility(mask: &SurfaceMask, camera: Vector3<f64>, target: [usize; 3]) -> Visibility {
    let center = mask.spec.voxel_center(target);
    let dir = center - camera;
    let mut result = Visibility::Reached;
    traverse_segment(&mask.spec, camera, dir, 1.0, |v| {
        if v == target {
            Step::Stop
        } else if mask.get(v) {
            result = Visibility::Blocked;
            Step::Stop
        } else {
            Step::Continue
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_spec(dims: [usize; 3]) -> VoxelGridSpec {
        VoxelGridSpec::new(dims, 1.0, [0.0; 3]).unwrap()
    }

    fn collect(spec: &VoxelGridSpec, origin: Vector3<f64>, dir: Vector3<f64>, t_max: f64) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        traverse_segment(spec, origin, dir, t_max, |v| {
            out.push(v);
            Step::Continue
        });
        out
    }

    #[test]
    fn axis_ray_visits_row_in_order() {
        let spec = unit_spec([4, 2, 2]);
        let visited = collect(&spec, Vector3::new(-1.0, 0.5, 0.5), Vector3::new(1.0, 0.0, 0.0), f64::INFINITY);
        assert_eq!(visited, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
    }

    #[test]
    fn diagonal_tie_steps_x_then_y_then_z() {
        let spec = unit_spec([2, 2, 2]);
        let visited = collect(&spec, Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0), f64::INFINITY);
        assert_eq!(visited, vec![[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]]);
    }

    #[test]
    fn ray_missing_grid_visits_nothing() {
        let spec = unit_spec([2, 2, 2]);
        let visited = collect(&spec, Vector3::new(-1.0, 5.0, 0.5), Vector3::new(1.0, 0.0, 0.0), f64::INFINITY);
        assert!(visited.is_empty());
    }

    #[test]
    fn ray_pointing_away_visits_nothing() {
        let spec = unit_spec([2, 2, 2]);
        let visited = collect(&spec, Vector3::new(-1.0, 0.5, 0.5), Vector3::new(-1.0, 0.0, 0.0), f64::INFINITY);
        assert!(visited.is_empty());
    }

    #[test]
    fn t_max_truncates_walk() {
        let spec = unit_spec([8, 1, 1]);
        let visited = collect(&spec, Vector3::new(0.5, 0.5, 0.5), Vector3::new(1.0, 0.0, 0.0), 2.0);
        assert_eq!(visited, vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]]);
    }

    #[test]
    fn start_inside_grid_begins_at_containing_voxel() {
        let spec = unit_spec([3, 3, 3]);
        let visited = collect(&spec, Vector3::new(1.5, 1.5, 1.5), Vector3::new(0.0, 0.0, 1.0), f64::INFINITY);
        assert_eq!(visited, vec![[1, 1, 1], [1, 1, 2]]);
    }

    #[test]
    fn early_stop_halts_traversal() {
        let spec = unit_spec([8, 1, 1]);
        let mut seen = 0;
        traverse_segment(
            &spec,
            Vector3::new(-0.5, 0.5, 0.5),
            Vector3::new(1.0, 0.0, 0.0),
            f64::INFINITY,
            |_| {
                seen += 1;
                if seen == 2 { Step::Stop } else { Step::Continue }
            },
        );
        assert_eq!(seen, 2);
    }

    #[test]
    fn visibility_clear_corridor_reaches_target() {
        let spec = unit_spec([5, 3, 3]);
        let mask = SurfaceMask::empty(spec);
        let cam = Vector3::new(0.5, 1.5, 1.5);
        assert_eq!(trace_visibility(&mask, cam, [4, 1, 1]), Visibility::Reached);
    }

    #[test]
    fn visibility_wall_blocks_target_behind_it() {
        let spec = unit_spec([5, 3, 3]);
        let mut mask = SurfaceMask::empty(spec);
        mask.set([2, 1, 1], true);
        let cam = Vector3::new(0.5, 1.5, 1.5);
        assert_eq!(trace_visibility(&mask, cam, [4, 1, 1]), Visibility::Blocked);
        assert_eq!(trace_visibility(&mask, cam, [1, 1, 1]), Visibility::Reached);
    }

    #[test]
    fn visibility_surface_voxel_does_not_block_itself() {
        let spec = unit_spec([5, 3, 3]);
        let mut mask = SurfaceMask::empty(spec);
        mask.set([2, 1, 1], true);
        let cam = Vector3::new(0.5, 1.5, 1.5);
        assert_eq!(trace_visibility(&mask, cam, [2, 1, 1]), Visibility::Reached);
    }

    #[test]
    fn visibility_camera_outside_grid() {
        let spec = unit_spec([5, 3, 3]);
        let mut mask = SurfaceMask::empty(spec);
        mask.set([0, 1, 1], true);
        let cam = Vector3::new(-2.0, 1.5, 1.5);
        assert_eq!(trace_visibility(&mask, cam, [3, 1, 1]), Visibility::Blocked);
        assert_eq!(trace_visibility(&mask, cam, [0, 1, 1]), Visibility::Reached);
    }
}
