//! Shared coordinate conventions and camera geometry.
//!
//! Frames:
//! - world: z up, fixed; the ego starts at the origin.
//! - ego: x forward, y left, z up; poses are ego-to-world rigid transforms.
//! - camera: x right, y down, z forward (optical axis); extrinsics are
//!   camera-to-ego transforms.
//!
//! Image coordinates are continuous: `u` grows with columns, `v` with rows,
//! and pixel `(i, j)` covers `[j, j+1) x [i, i+1)` with its center at +0.5.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::CoreError;

pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Vec3 = Vector3<f64>;

/// Pinhole intrinsics. `matrix()` yields the usual upper-triangular K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn flat(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }
}

/// Planar rigid transform as a 4x4 (rotation about z plus translation).
pub fn pose_2d(x: f64, y: f64, yaw: f64) -> Mat4 {
    let (s, c) = yaw.sin_cos();
    Mat4::new(
        c, -s, 0.0, x, //
        s, c, 0.0, y, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

pub fn transform_point(m: &Mat4, p: Vec3) -> Vec3 {
    let q = m * Vector4::new(p.x, p.y, p.z, 1.0);
    Vec3::new(q.x, q.y, q.z)
}

/// Minimum camera-frame depth treated as "in front of" the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Projects an ego-frame point through a pinhole camera.
///
/// Returns `(u, v, depth)` in continuous image coordinates; points at or
/// behind the imaging plane produce [`CoreError::BehindCamera`] so the caller
/// can mask the sample.
pub fn project_to_camera(
    p_ego: Vec3,
    intr: &Intrinsics,
    cam_to_ego: &Mat4,
) -> Result<(f64, f64, f64), CoreError> {
    let ego_to_cam = cam_to_ego.try_inverse().expect("extrinsics must be invertible");
    let p = transform_point(&ego_to_cam, p_ego);
    if p.z <= MIN_DEPTH {
        return Err(CoreError::BehindCamera { depth: p.z });
    }
    Ok((intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy, p.z))
}

/// Inverse of [`project_to_camera`] at a given depth.
pub fn unproject_from_camera(
    u: f64,
    v: f64,
    depth: f64,
    intr: &Intrinsics,
    cam_to_ego: &Mat4,
) -> Vec3 {
    let x = (u - intr.cx) / intr.fx * depth;
    let y = (v - intr.cy) / intr.fy * depth;
    transform_point(cam_to_ego, Vec3::new(x, y, depth))
}

/// Square BEV grid: x and y both span `[-extent, extent)` in `cell`-sized
/// bins, so the side length is `2 * extent / cell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub extent: f64,
    pub cell: f64,
}

impl GridSpec {
    pub fn new(extent: f64, cell: f64) -> Result<Self, CoreError> {
        let spec = Self { extent, cell };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let mut problems = Vec::new();
        if !(self.extent > 0.0) {
            problems.push(format!("extent must be positive, got {}", self.extent));
        }
        if !(self.cell > 0.0) {
            problems.push(format!("cell must be positive, got {}", self.cell));
        }
        if self.extent > 0.0 && self.cell > 0.0 {
            let n = 2.0 * self.extent / self.cell;
            if (n - n.round()).abs() > 1e-9 {
                problems.push(format!(
                    "cell {} must evenly divide the 2*extent span {}",
                    self.cell,
                    2.0 * self.extent
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "grid spec".into(), problems })
        }
    }

    /// Cells per side.
    pub fn side(&self) -> usize {
        (2.0 * self.extent / self.cell).round() as usize
    }

    pub fn n_cells(&self) -> usize {
        self.side() * self.side()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= -self.extent && x < self.extent && y >= -self.extent && y < self.extent
    }

    /// (ix, iy) bin of a point, if inside the extent.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let ix = ((x + self.extent) / self.cell) as usize;
        let iy = ((y + self.extent) / self.cell) as usize;
        let side = self.side();
        Some((ix.min(side - 1), iy.min(side - 1)))
    }

    /// Center of bin (ix, iy).
    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            -self.extent + (ix as f64 + 0.5) * self.cell,
            -self.extent + (iy as f64 + 0.5) * self.cell,
        )
    }

    /// Continuous (fractional) grid coordinates of a metric point, in units
    /// of cells with 0 at the first cell *center*.
    pub fn frac_index(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + self.extent) / self.cell - 0.5, (y + self.extent) / self.cell - 0.5)
    }
}

/// Voxel grid: a BEV grid extruded over `[z_min, z_max)` in `z_cell` layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSpec {
    pub xy: GridSpec,
    pub z_min: f64,
    pub z_max: f64,
    pub z_cell: f64,
}

impl VoxelSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.xy.validate()?;
        let mut problems = Vec::new();
        if !(self.z_max > self.z_min) {
            problems.push(format!("z range [{}, {}) is empty", self.z_min, self.z_max));
        }
        if !(self.z_cell > 0.0) {
            problems.push(format!("z_cell must be positive, got {}", self.z_cell));
        } else {
            let n = (self.z_max - self.z_min) / self.z_cell;
            if (n - n.round()).abs() > 1e-9 {
                problems.push(format!(
                    "z_cell {} must evenly divide the z span {}",
                    self.z_cell,
                    self.z_max - self.z_min
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CoreError::Validation { what: "voxel spec".into(), problems })
        }
    }

    pub fn z_layers(&self) -> usize {
        ((self.z_max - self.z_min) / self.z_cell).round() as usize
    }

    pub fn n_voxels(&self) -> usize {
        self.xy.n_cells() * self.z_layers()
    }

    pub fn z_index(&self, z: f64) -> Option<usize> {
        if z < self.z_min || z >= self.z_max {
            return None;
        }
        let iz = ((z - self.z_min) / self.z_cell) as usize;
        Some(iz.min(self.z_layers() - 1))
    }

    /// Shape as [x, y, z].
    pub fn dims(&self) -> [usize; 3] {
        [self.xy.side(), self.xy.side(), self.z_layers()]
    }
}

/// Axis-aligned BEV IoU of two boxes given as (cx, cy, l, w); yaw ignored.
pub fn bev_iou_axis_aligned(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax, ay, al, aw) = a;
    let (bx, by, bl, bw) = b;
    let x_overlap = ((ax + al / 2.0).min(bx + bl / 2.0) - (ax - al / 2.0).max(bx - bl / 2.0)).max(0.0);
    let y_overlap = ((ay + aw / 2.0).min(by + bw / 2.0) - (ay - aw / 2.0).max(by - bw / 2.0)).max(0.0);
    let inter = x_overlap * y_overlap;
    let union = al * aw + bl * bw - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Whether two oriented rectangles (center, half-extents, yaw) overlap,
/// via the separating-axis test on both boxes' edge normals.
pub fn obb_overlap(
    ca: (f64, f64),
    half_a: (f64, f64),
    yaw_a: f64,
    cb: (f64, f64),
    half_b: (f64, f64),
    yaw_b: f64,
) -> bool {
    let corners = |c: (f64, f64), h: (f64, f64), yaw: f64| -> [(f64, f64); 4] {
        let (s, co) = yaw.sin_cos();
        let mut out = [(0.0, 0.0); 4];
        for (i, (dx, dy)) in
            [(h.0, h.1), (h.0, -h.1), (-h.0, -h.1), (-h.0, h.1)].iter().enumerate()
        {
            out[i] = (c.0 + co * dx - s * dy, c.1 + s * dx + co * dy);
        }
        out
    };
    let ca_pts = corners(ca, half_a, yaw_a);
    let cb_pts = corners(cb, half_b, yaw_b);
    let axes = [
        (yaw_a.cos(), yaw_a.sin()),
        (-yaw_a.sin(), yaw_a.cos()),
        (yaw_b.cos(), yaw_b.sin()),
        (-yaw_b.sin(), yaw_b.cos()),
    ];
    for (ax, ay) in axes {
        let proj = |pts: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(x, y) in pts {
                let p = x * ax + y * ay;
                lo = lo.min(p);
                hi = hi.max(p);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca_pts);
        let (blo, bhi) = proj(&cb_pts);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}
