//! Shared test oracles. Kept independent of the library's projection and
//! compositing code so that agreement is meaningful.
#![allow(dead_code)]

use lidarpaint::geometry::Pose;
use lidarpaint::scene::Camera;
use lidarpaint::splat::Gaussian;
pub mod gradients;

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(width: usize, height: usize, pose: Pose) -> Camera {
    Camera {
        pose,
        fx: 0.9 * width as f64,
        fy: 0.9 * width as f64,
        cx: 0.5 * (width as f64 - 1.0),
        cy: 0.5 * (height as f64 - 1.0),
        width,
        height,
    }
}

/// Random primitives in front of an identity camera.
pub fn random_gaussians(rng: &mut impl Rng, n: usize) -> Vec<Gaussian> {
    (0..n)
        .map(|_| {
            let z = rng.random_range(2.0..8.0);
            let mean = [rng.random_range(-0.6..0.6) * z, rng.random_range(-0.6..0.6) * z, z];
            let scale = [0; 3].map(|_| rng.random_range(0.03..0.4));
            let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
            let opacity = rng.random_range(0.05..0.95);
            let color = [0; 3].map(|_| rng.random_range(0.0..1.0));
            Gaussian::new(mean, scale, q, opacity, color)
        })
        .collect()
}

struct Footprint {
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
}

fn footprint(g: &Gaussian, cam: &Camera) -> Option<Footprint> {
    let rot_wc = cam.pose.rotation;
    let w = rot_wc.transpose();
    let p = w * (Vector3::from(g.mean) - cam.pose.translation);
    if p.z <= 0.1 {
        return None;
    }
    let [qw, qx, qy, qz] = g.rotation;
    let r = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz)).to_rotation_matrix();
    let s = Matrix3::from_diagonal(&Vector3::from(g.log_scale.map(f64::exp)));
    let m = r.matrix() * s;
    let sigma = m * m.transpose();
    // Jacobian direction limited to 1.3x the image half-extent.
    let tx = (p.x / p.z).max(-1.3 * (cam.cx + 0.5) / cam.fx).min(1.3 * (cam.width as f64 - 0.5 - cam.cx) / cam.fx);
    let ty = (p.y / p.z).max(-1.3 * (cam.cy + 0.5) / cam.fy).min(1.3 * (cam.height as f64 - 0.5 - cam.cy) / cam.fy);
    let jac = nalgebra::Matrix2x3::new(cam.fx / p.z, 0.0, -cam.fx * tx / p.z, 0.0, cam.fy / p.z, -cam.fy * ty / p.z);
    let cov = jac * w * sigma * w.transpose() * jac.transpose() + Matrix2::identity() * 0.3;
    let conic = cov.try_inverse()?;
    Some(Footprint {
        mean: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        conic,
        depth: p.z,
        opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
        color: g.color,
    })
}

/// Per-pixel compositing over every primitive with no tiling. Weights
/// below `alpha_min` are skipped and blending stops once transmittance
/// falls below `t_min`.
pub fn brute_force(gs: &[Gaussian], cam: &Camera, bg: [f64; 3], alpha_min: f64, t_min: f64) -> Vec<f64> {
    let mut fps: Vec<(usize, Footprint)> = gs
        .iter()
        .enumerate()
        .filter_map(|(i, g)| footprint(g, cam).map(|f| (i, f)))
        .collect();
    fps.sort_by(|a, b| a.1.depth.partial_cmp(&b.1.depth).unwrap().then(a.0.cmp(&b.0)));
    let mut out = vec![0.0; cam.width * cam.height * 3];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for (_, f) in &fps {
                let d = Vector2::new(x as f64, y as f64) - f.mean;
                let a = f.opacity * (-0.5 * (d.transpose() * f.conic * d)[0]).exp();
                if a < alpha_min {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += f.color[ch] * a * t;
                }
                t *= 1.0 - a;
                if t < t_min {
                    break;
                }
            }
            let i = 3 * (y * cam.width + x);
            for ch in 0..3 {
                out[i + ch] = c[ch] + t * bg[ch];
            }
        }
    }
    out
}

/// Central difference of `f` at `x[i]`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let fp = f(x);
    x[i] = orig - h;
    let fm = f(x);
    x[i] = orig;
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
