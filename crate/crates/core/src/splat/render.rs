//! Tiled front-to-back alpha compositing of depth-sorted primitives and
//! its exact reverse-mode gradient.
//!
//! Per pixel, with `a_i = α_i exp(-½ dᵀ Σ₂⁻¹ d)`:
//! `C = Σ c_i a_i Π_{j<i} (1 - a_j) + T_final · background`.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::gaussian::{Gaussian, GaussianScene, Origin};
use super::project::{clamped_ratios, project, projection_jacobian, Projected};
use crate::geometry::{normalize_quat_backward, quat_left_matrix, quat_to_matrix, quat_to_matrix_backward};
use crate::image::Image;
use crate::scene::Camera;

pub const TILE_SIZE: usize = 16;
pub const DEFAULT_ALPHA_MIN: f64 = 1.0 / 255.0;
pub const DEFAULT_TRANSMITTANCE_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Contributions with `a_i` below this are skipped.
    pub alpha_min: f64,
    /// Blending stops once transmittance drops below this.
    pub transmittance_min: f64,
    pub background: [f64; 3],
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_min: DEFAULT_ALPHA_MIN,
            transmittance_min: DEFAULT_TRANSMITTANCE_MIN,
            background: [0.0; 3],
            tile_size: TILE_SIZE,
        }
    }
}

impl RenderOptions {
    /// Settings for oracle comparison: no early termination and a
    /// negligible contribution cutoff.
    pub fn exact() -> Self {
        Self {
            alpha_min: 1e-12,
            transmittance_min: 0.0,
            ..Self::default()
        }
    }

    pub fn with_background(mut self, background: [f64; 3]) -> Self {
        self.background = background;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 - T_final` per pixel.
    pub alpha: Vec<f64>,
}

/// Gradient w.r.t. one primitive's optimizer-space parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
    /// Norm of the screen-space mean gradient (densification statistic,
    /// not a parameter gradient).
    pub screen: f64,
}

impl GaussianGrad {
    pub fn to_array(&self) -> [f64; Gaussian::PARAMS] {
        let mut out = [0.0; Gaussian::PARAMS];
        out[0..3].copy_from_slice(&self.mean);
        out[3..6].copy_from_slice(&self.log_scale);
        out[6..10].copy_from_slice(&self.rotation);
        out[10] = self.opacity_logit;
        out[11..14].copy_from_slice(&self.color);
        out
    }

    fn add(&mut self, o: &GaussianGrad) {
        for i in 0..3 {
            self.mean[i] += o.mean[i];
            self.log_scale[i] += o.log_scale[i];
            self.color[i] += o.color[i];
        }
        for i in 0..4 {
            self.rotation[i] += o.rotation[i];
        }
        self.opacity_logit += o.opacity_logit;
        self.screen += o.screen;
    }
}

/// Gradients for every primitive of a [`GaussianScene`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneGradients {
    pub background: Vec<GaussianGrad>,
    pub actors: Vec<Vec<GaussianGrad>>,
}

impl SceneGradients {
    pub fn zeros_like(scene: &GaussianScene) -> Self {
        Self {
            background: vec![GaussianGrad::default(); scene.background.len()],
            actors: scene
                .actors
                .iter()
                .map(|a| vec![GaussianGrad::default(); a.len()])
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &GaussianGrad> {
        self.background.iter().chain(self.actors.iter().flatten())
    }
}

struct Splat {
    source: usize,
    proj: Projected,
}

/// Per-entry screen gradient: mean (2), conic full-matrix entries
/// `xx, xy, yy` (3), opacity (1), color (3).
type ScreenGrad = [f64; 9];

/// Projection, depth sort and tile binning for one camera; shared by the
/// forward and backward passes.
pub struct RenderPass<'a> {
    gaussians: &'a [Gaussian],
    camera: Camera,
    opts: RenderOptions,
    splats: Vec<Splat>,
    packed: Vec<Packed>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

/// Hot-loop copy of a splat's screen parameters.
#[derive(Clone, Copy)]
struct Packed {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    /// Beyond this Mahalanobis distance the weight is surely below
    /// `alpha_min`.
    q_cut: f64,
}

impl<'a> RenderPass<'a> {
    pub fn new(gaussians: &'a [Gaussian], camera: &Camera, opts: &RenderOptions) -> Self {
        let (w, h) = (camera.width, camera.height);
        let ts = opts.tile_size.max(1);
        let tiles_x = w.div_ceil(ts);
        let tiles_y = h.div_ceil(ts);

        let mut splats: Vec<(Splat, [usize; 4])> = gaussians
            .iter()
            .enumerate()
            .filter_map(|(source, g)| {
                let proj = project(g, camera)?;
                if opts.alpha_min > 0.0 && proj.opacity < opts.alpha_min {
                    return None;
                }
                // Axis-aligned bounds of the ellipse where the weight can
                // reach `alpha_min`.
                let (rx, ry) = if opts.alpha_min > 0.0 {
                    let q_max = 2.0 * (proj.opacity / opts.alpha_min).ln();
                    ((proj.cov[0] * q_max.max(0.0)).sqrt(), (proj.cov[2] * q_max.max(0.0)).sqrt())
                } else {
                    (f64::INFINITY, f64::INFINITY)
                };
                let [mx, my] = proj.mean;
                let x0 = (mx - rx).floor().max(0.0);
                let y0 = (my - ry).floor().max(0.0);
                let x1 = (mx + rx).ceil().min(w as f64 - 1.0);
                let y1 = (my + ry).ceil().min(h as f64 - 1.0);
                if !(x0 <= x1 && y0 <= y1) {
                    return None;
                }
                let rect = [x0 as usize, y0 as usize, x1 as usize, y1 as usize];
                Some((Splat { source, proj }, rect))
            })
            .collect();
        splats.sort_by(|a, b| {
            a.0.proj
                .depth
                .total_cmp(&b.0.proj.depth)
                .then(a.0.source.cmp(&b.0.source))
        });

        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        for (k, (_, rect)) in splats.iter().enumerate() {
            for ty in rect[1] / ts..=rect[3] / ts {
                for tx in rect[0] / ts..=rect[2] / ts {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        let splats: Vec<Splat> = splats.into_iter().map(|(s, _)| s).collect();
        let packed = splats
            .iter()
            .map(|s| {
                let q_cut = if opts.alpha_min > 0.0 {
                    // Margin keeps the prefilter conservative under rounding;
                    // the exact test happens after the exponential.
                    2.0 * (s.proj.opacity / opts.alpha_min).ln() + 1e-6
                } else {
                    f64::INFINITY
                };
                Packed {
                    mean: s.proj.mean,
                    conic: s.proj.conic,
                    opacity: s.proj.opacity,
                    q_cut,
                }
            })
            .collect();
        Self {
            gaussians,
            camera: *camera,
            opts: *opts,
            splats,
            packed,
            tiles,
            tiles_x,
        }
    }

    fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let ts = self.opts.tile_size.max(1);
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        let x1 = (x0 + ts).min(self.camera.width);
        let y1 = (y0 + ts).min(self.camera.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    /// Weight `a` of a splat at pixel `(x, y)` with the pixel offset and
    /// the Gaussian falloff.
    #[inline]
    fn eval(&self, k: u32, x: usize, y: usize) -> (f64, f64, f64, f64) {
        let p = &self.packed[k as usize];
        let dx = x as f64 - p.mean[0];
        let dy = y as f64 - p.mean[1];
        let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
        if q > p.q_cut {
            return (0.0, 0.0, dx, dy);
        }
        let falloff = (-0.5 * q).exp();
        (p.opacity * falloff, falloff, dx, dy)
    }

    pub fn forward(&self) -> RenderOutput {
        let (w, h) = (self.camera.width, self.camera.height);
        let bg = self.opts.background;
        let per_tile: Vec<Vec<(usize, [f64; 3], f64)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                self.tile_pixels(t)
                    .map(|(x, y)| {
                        let mut color = [0.0; 3];
                        let mut trans = 1.0;
                        for &k in list {
                            let (a, _, _, _) = self.eval(k, x, y);
                            if a < self.opts.alpha_min {
                                continue;
                            }
                            let c = self.splats[k as usize].proj.color;
                            for ch in 0..3 {
                                color[ch] += c[ch] * a * trans;
                            }
                            trans *= 1.0 - a;
                            if trans < self.opts.transmittance_min {
                                break;
                            }
                        }
                        for ch in 0..3 {
                            color[ch] += trans * bg[ch];
                        }
                        (y * w + x, color, 1.0 - trans)
                    })
                    .collect()
            })
            .collect();
        let mut image = Image::new(w, h);
        let mut alpha = vec![0.0; w * h];
        for tile in per_tile {
            for (i, c, a) in tile {
                image.data[3 * i..3 * i + 3].copy_from_slice(&c);
                alpha[i] = a;
            }
        }
        RenderOutput { image, alpha }
    }

    /// Screen-space gradients of `Σ grad_image ⊙ C`, one entry per splat.
    fn screen_backward(&self, grad_image: &[f64]) -> Vec<ScreenGrad> {
        let w = self.camera.width;
        let bg = self.opts.background;
        let per_tile: Vec<Vec<ScreenGrad>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                let mut acc = vec![[0.0; 9]; list.len()];
                // (slot, a, falloff, dx, dy, transmittance before)
                let mut hits: Vec<(usize, f64, f64, f64, f64, f64)> = Vec::with_capacity(list.len());
                for (x, y) in self.tile_pixels(t) {
                    let pi = y * w + x;
                    let g = [grad_image[3 * pi], grad_image[3 * pi + 1], grad_image[3 * pi + 2]];
                    if g == [0.0; 3] {
                        continue;
                    }
                    hits.clear();
                    let mut trans = 1.0;
                    for (slot, &k) in list.iter().enumerate() {
                        let (a, falloff, dx, dy) = self.eval(k, x, y);
                        if a < self.opts.alpha_min {
                            continue;
                        }
                        hits.push((slot, a, falloff, dx, dy, trans));
                        trans *= 1.0 - a;
                        if trans < self.opts.transmittance_min {
                            break;
                        }
                    }
                    // Color seen from just behind the current splat.
                    let mut behind = bg;
                    for &(slot, a, falloff, dx, dy, t_before) in hits.iter().rev() {
                        let p = &self.splats[list[slot] as usize].proj;
                        let c = p.color;
                        let e = &mut acc[slot];
                        let mut d_a = 0.0;
                        for ch in 0..3 {
                            e[6 + ch] += g[ch] * a * t_before;
                            d_a += g[ch] * (c[ch] - behind[ch]);
                        }
                        d_a *= t_before;
                        for ch in 0..3 {
                            behind[ch] = c[ch] * a + (1.0 - a) * behind[ch];
                        }
                        e[5] += d_a * falloff;
                        let d_q = -0.5 * a * d_a;
                        let [cxx, cxy, cyy] = p.conic;
                        e[0] += d_q * -2.0 * (cxx * dx + cxy * dy);
                        e[1] += d_q * -2.0 * (cxy * dx + cyy * dy);
                        e[2] += d_q * dx * dx;
                        e[3] += d_q * dx * dy;
                        e[4] += d_q * dy * dy;
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![[0.0; 9]; self.splats.len()];
        for (t, acc) in per_tile.into_iter().enumerate() {
            for (slot, e) in acc.into_iter().enumerate() {
                let dst = &mut out[self.tiles[t][slot] as usize];
                for i in 0..9 {
                    dst[i] += e[i];
                }
            }
        }
        out
    }

    /// Parameter gradients of `Σ grad_image ⊙ C`, indexed like the input
    /// primitives.
    pub fn backward(&self, grad_image: &[f64]) -> Vec<GaussianGrad> {
        assert_eq!(
            grad_image.len(),
            self.camera.width * self.camera.height * 3,
            "gradient image shape"
        );
        let screen = self.screen_backward(grad_image);
        let mut grads = vec![GaussianGrad::default(); self.gaussians.len()];
        let view = self.camera.view_rotation();
        let (fx, fy) = (self.camera.fx, self.camera.fy);
        for (splat, sg) in self.splats.iter().zip(&screen) {
            let g = &self.gaussians[splat.source];
            let p = splat.proj.p_cam;
            let (x, y, z) = (p.x, p.y, p.z);
            let out = &mut grads[splat.source];

            let [cxx, cxy, cyy] = splat.proj.conic;
            let conic = Matrix2::new(cxx, cxy, cxy, cyy);
            let g_conic = Matrix2::new(sg[2], sg[3], sg[3], sg[4]);
            let g_cov2 = -(conic * g_conic * conic);

            let jac = projection_jacobian(&self.camera, &p);
            let scale = g.scale();
            let q_unit = g.unit_rotation();
            let rot = quat_to_matrix(q_unit);
            let m = rot * Matrix3::from_diagonal(&Vector3::from(scale));
            let sigma = m * m.transpose();
            let s_cam = view * sigma * view.transpose();

            let g_s = jac.transpose() * g_cov2 * jac;
            let g_j = 2.0 * g_cov2 * jac * s_cam;
            let g_sigma = view.transpose() * g_s * view;
            let g_m = 2.0 * g_sigma * m;

            let mut g_rot = Matrix3::zeros();
            for k in 0..3 {
                let mut ds = 0.0;
                for i in 0..3 {
                    ds += g_m[(i, k)] * rot[(i, k)];
                    g_rot[(i, k)] = g_m[(i, k)] * scale[k];
                }
                out.log_scale[k] += ds * scale[k];
            }
            let dq = normalize_quat_backward(g.rotation, quat_to_matrix_backward(q_unit, &g_rot));
            for i in 0..4 {
                out.rotation[i] += dq[i];
            }

            let (gu, gv) = (sg[0], sg[1]);
            let iz = 1.0 / z;
            let iz2 = iz * iz;
            let iz3 = iz2 * iz;
            let mut dp = Vector3::new(gu * fx * iz, gv * fy * iz, -gu * fx * x * iz2 - gv * fy * y * iz2);
            // J02 = -fx·tx/z: with tx = x/z free it varies with x and z,
            // with tx clamped it is -fx·k/z.
            let ([tx, ty], [clamp_x, clamp_y]) = clamped_ratios(&self.camera, &p);
            dp.z += g_j[(0, 0)] * -fx * iz2 + g_j[(1, 1)] * -fy * iz2;
            if clamp_x {
                dp.z += g_j[(0, 2)] * fx * tx * iz2;
            } else {
                dp.x += g_j[(0, 2)] * -fx * iz2;
                dp.z += g_j[(0, 2)] * 2.0 * fx * x * iz3;
            }
            if clamp_y {
                dp.z += g_j[(1, 2)] * fy * ty * iz2;
            } else {
                dp.y += g_j[(1, 2)] * -fy * iz2;
                dp.z += g_j[(1, 2)] * 2.0 * fy * y * iz3;
            }
            let dmu = view.transpose() * dp;
            for i in 0..3 {
                out.mean[i] += dmu[i];
            }

            let alpha = splat.proj.opacity;
            out.opacity_logit += sg[5] * alpha * (1.0 - alpha);
            for ch in 0..3 {
                out.color[ch] += sg[6 + ch];
            }
            out.screen += (gu * gu + gv * gv).sqrt();
        }
        grads
    }
}

pub fn render_gaussians(gaussians: &[Gaussian], camera: &Camera, opts: &RenderOptions) -> RenderOutput {
    RenderPass::new(gaussians, camera, opts).forward()
}

/// Renders the scene with actors placed at `frame`.
pub fn render(scene: &GaussianScene, frame: usize, camera: &Camera, opts: &RenderOptions) -> RenderOutput {
    let (gs, _) = scene.composed(frame);
    render_gaussians(&gs, camera, opts)
}

/// Routes world-frame gradients back to background and box-local actor
/// parameters.
pub fn scatter_to_scene(
    scene: &GaussianScene,
    frame: usize,
    origins: &[Origin],
    world: &[GaussianGrad],
) -> SceneGradients {
    let mut out = SceneGradients::zeros_like(scene);
    for (o, g) in origins.iter().zip(world) {
        match *o {
            Origin::Background(i) => out.background[i].add(g),
            Origin::Actor { actor, index } => {
                let pose = scene.actor_poses[actor][frame].expect("composed actors have poses");
                let dmu = pose.rotation.transpose() * Vector3::from(g.mean);
                let l = quat_left_matrix(pose.rotation_quat());
                let mut dq = [0.0; 4];
                for (j, dqj) in dq.iter_mut().enumerate() {
                    *dqj = (0..4).map(|i| l[i][j] * g.rotation[i]).sum();
                }
                let local = GaussianGrad {
                    mean: dmu.into(),
                    rotation: dq,
                    ..*g
                };
                out.actors[actor][index].add(&local);
            }
        }
    }
    out
}

/// Forward render and parameter gradients of `Σ grad_image ⊙ C` in one go.
pub fn render_with_backward(
    scene: &GaussianScene,
    frame: usize,
    camera: &Camera,
    opts: &RenderOptions,
    grad_fn: impl FnOnce(&RenderOutput) -> Vec<f64>,
) -> (RenderOutput, SceneGradients) {
    let (gs, origins) = scene.composed(frame);
    let pass = RenderPass::new(&gs, camera, opts);
    let out = pass.forward();
    let grad_image = grad_fn(&out);
    let world = pass.backward(&grad_image);
    let grads = scatter_to_scene(scene, frame, &origins, &world);
    (out, grads)
}

/// Gradients of `L = Σ grad_image ⊙ C` for every scene parameter.
pub fn render_backward(
    scene: &GaussianScene,
    frame: usize,
    camera: &Camera,
    grad_image: &[f64],
    opts: &RenderOptions,
) -> SceneGradients {
    render_with_backward(scene, frame, camera, opts, |_| grad_image.to_vec()).1
}
