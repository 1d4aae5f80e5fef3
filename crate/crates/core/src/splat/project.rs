use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::gaussian::Gaussian;
use crate::scene::Camera;

/// Primitives closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.1;
/// Screen-space low-pass added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;

/// A primitive in screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean: [f64; 2],
    /// Symmetric 2x2 covariance as `[xx, xy, yy]`, low-pass included.
    pub cov: [f64; 3],
    /// Inverse of `cov`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub p_cam: Vector3<f64>,
}

impl Projected {
    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], self.cov[1], self.cov[1], self.cov[2])
    }

    /// Largest eigenvalue of the screen covariance.
    pub fn max_eigenvalue(&self) -> f64 {
        let [a, b, c] = self.cov;
        let mid = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        mid + disc
    }
}

/// Margin on the view frustum beyond which the Jacobian is evaluated at
/// the clamped direction, so near off-screen primitives keep bounded
/// footprints.
pub const FRUSTUM_MARGIN: f64 = 1.3;

/// Camera-space `x/z` and `y/z` clamped to the widened frustum, and
/// whether each was clamped.
pub fn clamped_ratios(camera: &Camera, p: &Vector3<f64>) -> ([f64; 2], [bool; 2]) {
    let lim = |c: f64, size: usize, f: f64| {
        (
            -FRUSTUM_MARGIN * (c + 0.5) / f,
            FRUSTUM_MARGIN * (size as f64 - 0.5 - c) / f,
        )
    };
    let (lx, hx) = lim(camera.cx, camera.width, camera.fx);
    let (ly, hy) = lim(camera.cy, camera.height, camera.fy);
    let (tx, ty) = (p.x / p.z, p.y / p.z);
    (
        [tx.clamp(lx, hx), ty.clamp(ly, hy)],
        [tx < lx || tx > hx, ty < ly || ty > hy],
    )
}

/// Perspective Jacobian of the pinhole projection at a camera-space point,
/// with the direction clamped by [`clamped_ratios`].
pub fn projection_jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let ([tx, ty], _) = clamped_ratios(camera, p);
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * tx * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * ty * iz,
    )
}

/// Screen-space mean, covariance `J W Σ Wᵀ Jᵀ + 0.3 I` and depth. Returns
/// `None` (culled) at or in front of the near plane.
pub fn project(g: &Gaussian, camera: &Camera) -> Option<Projected> {
    let view: Matrix3<f64> = camera.view_rotation();
    let p = camera.world_to_camera(&g.mean_vec());
    if p.z <= NEAR_PLANE {
        return None;
    }
    let j = projection_jacobian(camera, &p);
    let cov_cam = view * g.covariance() * view.transpose();
    let c2 = j * cov_cam * j.transpose();
    let a = c2[(0, 0)] + LOW_PASS;
    let b = 0.5 * (c2[(0, 1)] + c2[(1, 0)]);
    let c = c2[(1, 1)] + LOW_PASS;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    Some(Projected {
        mean: [
            camera.fx * p.x / p.z + camera.cx,
            camera.fy * p.y / p.z + camera.cy,
        ],
        cov: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: p.z,
        opacity: g.opacity(),
        color: g.color,
        p_cam: p,
    })
}
