use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertices at or in front of this depth are clipped.
pub const NEAR_PLANE: f64 = 1e-4;

/// Pinhole camera looking down +Z, image y growing downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub focal_length: f64,
    pub principal_point: (f64, f64),
    pub image_width: usize,
    pub image_height: usize,
}

impl Camera {
    /// Centered principal point; the focal length frames the synthetic face
    /// at the canonical depth of 5 units.
    pub fn for_size(width: usize, height: usize) -> Self {
        Self {
            focal_length: 2.4 * width.min(height) as f64,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
            image_width: width,
            image_height: height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length.is_finite() && self.focal_length > 0.0) {
            return Err(Error::invalid("focal length must be positive"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let (cx, cy) = self.principal_point;
        if !(0.0..=self.image_width as f64).contains(&cx)
            || !(0.0..=self.image_height as f64).contains(&cy)
        {
            return Err(Error::invalid("principal point outside the image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedVertex {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub clipped: bool,
}

/// `R = Rz(c) * Ry(b) * Rx(a)` for pose angles `(a, b, c)`, row-major.
pub fn rotation_matrix(angles: &[f64]) -> [[f64; 3]; 3] {
    rotation_with_derivatives(angles).0
}

/// Rotation and its partial derivatives with respect to each angle.
pub(crate) fn rotation_with_derivatives(angles: &[f64]) -> ([[f64; 3]; 3], [[[f64; 3]; 3]; 3]) {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    let drx = [[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]];
    let dry = [[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]];
    let drz = [[-sc, -cc, 0.0], [cc, -sc, 0.0], [0.0, 0.0, 0.0]];
    let r = matmul(&rz, &matmul(&ry, &rx));
    let d = [
        matmul(&rz, &matmul(&ry, &drx)),
        matmul(&rz, &matmul(&dry, &rx)),
        matmul(&drz, &matmul(&ry, &rx)),
    ];
    (r, d)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rigid transform followed by perspective division. `pose` is the 6-entry
/// pose segment (three angles, then translation).
pub fn project_vertices(geometry: &[f64], pose: &[f64], camera: &Camera) -> Vec<ProjectedVertex> {
    debug_assert_eq!(pose.len(), 6);
    let r = rotation_matrix(&pose[..3]);
    let t = &pose[3..6];
    let (cx, cy) = camera.principal_point;
    let f = camera.focal_length;
    geometry
        .chunks_exact(3)
        .map(|v| {
            let p: [f64; 3] =
                std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + t[i]);
            let clipped = p[2] <= NEAR_PLANE;
            let z = p[2].max(NEAR_PLANE);
            ProjectedVertex {
                x: f * p[0] / z + cx,
                y: f * p[1] / z + cy,
                depth: p[2],
                clipped,
            }
        })
        .collect()
}

/// Vector-Jacobian product of [`project_vertices`] for the flat
/// `(x, y, depth)` output layout. Returns gradients for geometry and pose.
pub(crate) fn project_backward(
    geometry: &[f64],
    pose: &[f64],
    camera: &Camera,
    g_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (r, dr) = rotation_with_derivatives(&pose[..3]);
    let t = &pose[3..6];
    let f = camera.focal_length;
    let mut g_geo = vec![0.0; geometry.len()];
    let mut g_pose = vec![0.0; 6];
    for (k, v) in geometry.chunks_exact(3).enumerate() {
        let p: [f64; 3] =
            std::array::from_fn(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2] + t[i]);
        let (gx, gy, gz) = (g_out[3 * k], g_out[3 * k + 1], g_out[3 * k + 2]);
        let mut gp = [0.0, 0.0, gz];
        if p[2] > NEAR_PLANE {
            let z = p[2];
            gp[0] = gx * f / z;
            gp[1] = gy * f / z;
            gp[2] += -(gx * f * p[0] + gy * f * p[1]) / (z * z);
        } else {
            gp[0] = gx * f / NEAR_PLANE;
            gp[1] = gy * f / NEAR_PLANE;
        }
        for j in 0..3 {
            g_geo[3 * k + j] = (0..3).map(|i| r[i][j] * gp[i]).sum();
        }
        for (a, d) in dr.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..3 {
                s += gp[i] * (d[i][0] * v[0] + d[i][1] * v[1] + d[i][2] * v[2]);
            }
            g_pose[a] += s;
        }
        for i in 0..3 {
            g_pose[3 + i] += gp[i];
        }
    }
    (g_geo, g_pose)
}
