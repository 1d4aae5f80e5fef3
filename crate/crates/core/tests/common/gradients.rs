//! Finite-difference gradient checks shared by the test targets. Each
//! check panics with the failing parameter on mismatch.

use super::*;
use lidarpaint::image::Image;
use lidarpaint::losses::{
    l1, l1_grad, l2, l2_grad, ms_ssim_loss_with_grad, ssim, ssim_with_grad, weighted_loss, AuxMasks, LossHooks,
    LossWeights,
};
use lidarpaint::geometry::Pose;
use lidarpaint::painter::{Grads, PainterConfig, PainterModel, Skips, Tensor};
use lidarpaint::splat::{render_backward, render_gaussians, Gaussian, GaussianScene, RenderOptions, RenderPass};
use nalgebra::Vector3;
use rand::Rng;

// Renderer.

fn weighted_sum(img: &[f64], w: &[f64]) -> f64 {
    img.iter().zip(w).map(|(a, b)| a * b).sum()
}

pub fn render_backward_matches_finite_differences(cases: u64) {
    let (w, h) = (24, 20);
    for seed in 0..cases {
        let mut r = rng(1000 + seed);
        let mut gs = random_gaussians(&mut r, 6);
        // Pull primitives toward the image so every one contributes.
        for g in &mut gs {
            g.mean[0] *= 0.5;
            g.mean[1] *= 0.5;
            g.log_scale = g.log_scale.map(|s| s + 0.7);
        }
        let cam = camera(w, h, Pose::identity());
        let opts = RenderOptions::exact().with_background([0.3, 0.5, 0.7]);
        let weights: Vec<f64> = (0..w * h * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads = RenderPass::new(&gs, &cam, &opts).backward(&weights);
        for (gi, g) in gs.iter().enumerate() {
            let analytic = grads[gi].to_array();
            assert!(analytic.iter().filter(|v| v.abs() > 1e-3).count() >= 8, "seed {seed} prim {gi} inert");
            let mut x = g.to_array();
            for p in 0..Gaussian::PARAMS {
                let numeric = central_difference(&mut x, p, FD_STEP, |x| {
                    let mut gs2 = gs.clone();
                    gs2[gi] = Gaussian::from_array(x.try_into().unwrap());
                    weighted_sum(&render_gaussians(&gs2, &cam, &opts).image.data, &weights)
                });
                let e = rel_error(analytic[p], numeric);
                assert!(e <= FD_TOL, "seed {seed} prim {gi} param {p}: {} vs {numeric}", analytic[p]);
            }
        }
    }
}

pub fn actor_gradients_route_to_local_frame(cases: u64) {
    let (w, h) = (20, 16);
    for seed in 0..cases {
        let mut r = rng(2000 + seed);
        let local: Vec<Gaussian> = random_gaussians(&mut r, 3)
            .into_iter()
            .map(|mut g| {
                g.mean = [g.mean[0] * 0.1, g.mean[1] * 0.1, g.mean[2] * 0.1];
                g.log_scale = g.log_scale.map(|s| s + 0.8);
                g
            })
            .collect();
        let pose = Pose::from_axis_angle(Vector3::new(0.3, 1.0, -0.2), 0.7, Vector3::new(0.1, 0.0, 4.0));
        let mut scene = GaussianScene {
            background: random_gaussians(&mut r, 2),
            actors: vec![local],
            actor_poses: vec![vec![Some(pose)]],
        };
        let cam = camera(w, h, Pose::identity());
        let opts = RenderOptions::exact();
        let weights: Vec<f64> = (0..w * h * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads = render_backward(&scene, 0, &cam, &weights, &opts);
        for k in 0..scene.actors[0].len() {
            let analytic = grads.actors[0][k].to_array();
            let mut x = scene.actors[0][k].to_array();
            for p in 0..Gaussian::PARAMS {
                let numeric = central_difference(&mut x, p, FD_STEP, |x| {
                    scene.actors[0][k] = Gaussian::from_array(x.try_into().unwrap());
                    let (gs, _) = scene.composed(0);
                    weighted_sum(&render_gaussians(&gs, &cam, &opts).image.data, &weights)
                });
                scene.actors[0][k] = Gaussian::from_array(&x.clone());
                let e = rel_error(analytic[p], numeric);
                assert!(e <= FD_TOL, "seed {seed} actor prim {k} param {p}: {} vs {numeric}", analytic[p]);
            }
        }
    }
}

pub fn clamped_jacobian_gradients_match_finite_differences(cases: u64) {
    let (w, h) = (24, 20);
    let cam = camera(w, h, Pose::identity());
    let opts = RenderOptions::exact().with_background([0.2, 0.4, 0.1]);
    for seed in 0..cases {
        let mut r = rng(3000 + seed);
        // Directions beyond the widened frustum on one or both axes, with
        // footprints large enough to reach into the image.
        let gs: Vec<Gaussian> = (0..3)
            .map(|k| {
                let z = r.random_range(2.0..4.0);
                let sx = if k % 2 == 0 { 1.0 } else { -1.0 };
                let tx = sx * r.random_range(0.8..0.95);
                let ty = if k == 2 { r.random_range(0.8..0.9) } else { r.random_range(-0.3..0.3) };
                let scale = [0; 3].map(|_| r.random_range(0.6..1.0) * z);
                let q = [0; 4].map(|_| r.random_range(-1.0..1.0));
                Gaussian::new([tx * z, ty * z, z], scale, q, r.random_range(0.3..0.9), [0; 3].map(|_| r.random_range(0.0..1.0)))
            })
            .collect();
        let weights: Vec<f64> = (0..w * h * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let grads = RenderPass::new(&gs, &cam, &opts).backward(&weights);
        for (gi, g) in gs.iter().enumerate() {
            let analytic = grads[gi].to_array();
            let mut x = g.to_array();
            for p in 0..Gaussian::PARAMS {
                let numeric = central_difference(&mut x, p, FD_STEP, |x| {
                    let mut gs2 = gs.clone();
                    gs2[gi] = Gaussian::from_array(x.try_into().unwrap());
                    weighted_sum(&render_gaussians(&gs2, &cam, &opts).image.data, &weights)
                });
                let e = rel_error(analytic[p], numeric);
                assert!(e <= FD_TOL, "seed {seed} prim {gi} param {p}: {} vs {numeric}", analytic[p]);
            }
        }
    }
}

// Painter.

fn small(seed: u64) -> PainterModel {
    let mut c = PainterConfig::with_widths([4, 5], 3, 6);
    c.attention_channels = 4;
    c.predictor_blocks = 2;
    c.time_embedding = 8;
    // Keep the decoder input at unit scale so checks are well conditioned.
    c.decode_gain = 1.0;
    PainterModel::new(c, seed).unwrap()
}

fn random_tensor(rng: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_data(c, h, w, (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// Checks every parameter gradient against central differences of `f`.
fn check_params(model: &PainterModel, grads: &Grads, what: &str, f: impl Fn(&PainterModel) -> f64) {
    let mut m = model.clone();
    let mut checked = 0;
    for b in 0..m.blocks.len() {
        for i in 0..m.blocks[b].data.len() {
            let orig = m.blocks[b].data[i];
            m.blocks[b].data[i] = orig + FD_STEP;
            let fp = f(&m);
            m.blocks[b].data[i] = orig - FD_STEP;
            let fm = f(&m);
            m.blocks[b].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let analytic = grads.0[b][i];
            assert!(
                rel_error(analytic, numeric) <= FD_TOL,
                "{what}: {}[{i}] analytic {analytic} numeric {numeric}",
                m.blocks[b].name
            );
            if analytic != 0.0 {
                checked += 1;
            }
        }
    }
    assert!(checked > 0, "{what}: no parameter reached");
}

fn check_input(x: &Tensor, analytic: &Tensor, what: &str, f: impl Fn(&Tensor) -> f64) {
    let mut x = x.clone();
    for i in 0..x.data.len() {
        let numeric = central_difference(&mut x.data, i, FD_STEP, |d| {
            let t = Tensor::from_data(analytic.channels, analytic.height, analytic.width, d.to_vec()).unwrap();
            f(&t)
        });
        assert!(
            rel_error(analytic.data[i], numeric) <= FD_TOL,
            "{what}: input {i} analytic {} numeric {numeric}",
            analytic.data[i]
        );
    }
}

pub fn encode_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(seed);
        let m = small(seed);
        let img = random_tensor(&mut r, 3, 16, 8, 0.0, 1.0);
        let (enc, cache) = m.encode_forward(&img).unwrap();
        let wz = random_tensor(&mut r, 3, 2, 1, -1.0, 1.0);
        let ws = Skips {
            input: random_tensor(&mut r, 3, 16, 8, -1.0, 1.0),
            s1: random_tensor(&mut r, 4, 8, 4, -1.0, 1.0),
            s2: random_tensor(&mut r, 5, 4, 2, -1.0, 1.0),
        };
        let loss = |m: &PainterModel, x: &Tensor| {
            let e = m.encode_forward(x).unwrap().0;
            dot(&e.latent, &wz) + dot(&e.skips.input, &ws.input) + dot(&e.skips.s1, &ws.s1) + dot(&e.skips.s2, &ws.s2)
        };
        let mut grads = m.zero_grads();
        let d_img = m.encode_backward(&enc, &cache, &wz, Some(&ws), &mut grads);
        check_input(&img, &d_img, "encode", |x| loss(&m, x));
        check_params(&m, &grads, "encode", |m| loss(m, &img));
    }
}

pub fn predict_noise_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(100 + seed);
        let m = small(seed);
        let za = random_tensor(&mut r, 3, 4, 2, -1.0, 1.0);
        let zl = random_tensor(&mut r, 3, 4, 2, -1.0, 1.0);
        let t = r.random_range(1..=1000);
        let w = random_tensor(&mut r, 3, 4, 2, -1.0, 1.0);
        let (out, cache) = m.predict_noise_forward(&za, &zl, t).unwrap();
        let _ = out;
        let mut grads = m.zero_grads();
        let (ga, gl) = m.predict_noise_backward(&cache, t, &w, &mut grads);
        check_input(&za, &ga, "predict_noise zA", |x| dot(&m.predict_noise(x, &zl, t).unwrap(), &w));
        check_input(&zl, &gl, "predict_noise zL", |x| dot(&m.predict_noise(&za, x, t).unwrap(), &w));
        check_params(&m, &grads, "predict_noise", |m| dot(&m.predict_noise(&za, &zl, t).unwrap(), &w));
    }
}

pub fn attention_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(200 + seed);
        let m = small(seed);
        let za = random_tensor(&mut r, 3, 2, 4, -1.0, 1.0);
        let zl = random_tensor(&mut r, 3, 2, 4, -1.0, 1.0);
        let w = random_tensor(&mut r, 1, 2, 4, -1.0, 1.0);
        let (att, cache) = m.attention_forward(&za, &zl).unwrap();
        assert!(att.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut grads = m.zero_grads();
        let (ga, gl) = m.attention_backward(&cache, &w, &mut grads);
        check_input(&za, &ga, "attention zA", |x| dot(&m.attention_weights(x, &zl).unwrap(), &w));
        check_input(&zl, &gl, "attention zL", |x| dot(&m.attention_weights(&za, x).unwrap(), &w));
        check_params(&m, &grads, "attention", |m| dot(&m.attention_weights(&za, &zl).unwrap(), &w));
    }
}

pub fn decode_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(300 + seed);
        let m = small(seed);
        let skips = |r: &mut _| Skips {
            input: random_tensor(r, 3, 8, 16, 0.0, 1.0),
            s1: random_tensor(r, 4, 4, 8, -1.0, 1.0),
            s2: random_tensor(r, 5, 2, 4, -1.0, 1.0),
        };
        let sa = skips(&mut r);
        let sl = skips(&mut r);
        let zd = random_tensor(&mut r, 3, 1, 2, -1.0, 1.0);
        let w = random_tensor(&mut r, 3, 8, 16, -1.0, 1.0);
        let (_, cache) = m.decode_forward(&zd, &sa, &sl).unwrap();
        let mut grads = m.zero_grads();
        let (gz, gsa, gsl) = m.decode_backward(&cache, &w, &mut grads);
        let f = |m: &PainterModel, zd: &Tensor, sa: &Skips, sl: &Skips| dot(&m.decode(zd, sa, sl).unwrap(), &w);
        check_input(&zd, &gz, "decode zD", |x| f(&m, x, &sa, &sl));
        check_input(&sa.s2, &gsa.s2, "decode skip a.s2", |x| f(&m, &zd, &Skips { s2: x.clone(), ..sa.clone() }, &sl));
        check_input(&sl.s1, &gsl.s1, "decode skip l.s1", |x| f(&m, &zd, &sa, &Skips { s1: x.clone(), ..sl.clone() }));
        check_input(&sa.input, &gsa.input, "decode skip a.input", |x| {
            f(&m, &zd, &Skips { input: x.clone(), ..sa.clone() }, &sl)
        });
        check_params(&m, &grads, "decode", |m| f(m, &zd, &sa, &sl));
    }
}

pub fn full_paint_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(400 + seed);
        let mut m = small(seed);
        m.config.decode_gain = 40.0;
        let a = random_tensor(&mut r, 3, 8, 8, 0.0, 1.0);
        let l = random_tensor(&mut r, 3, 8, 8, 0.0, 1.0);
        let w = random_tensor(&mut r, 3, 8, 8, -1.0, 1.0);
        let (_, cache) = m.paint_forward(&a, &l).unwrap();
        let mut grads = m.zero_grads();
        m.paint_backward(&cache, &w, &mut grads);
        check_params(&m, &grads, "paint", |m| dot(&m.paint_forward(&a, &l).unwrap().0, &w));
    }
}

// Losses.

fn random_image(r: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| r.random_range(0.05..0.95)).collect()).unwrap()
}

/// Target at least 0.01 away from `a` per value, so central differences
/// never straddle the L1 kink.
fn separated(r: &mut impl Rng, a: &Image) -> Image {
    let data = a
        .data
        .iter()
        .map(|&v| {
            let d = r.random_range(0.01..0.3);
            if v + d <= 1.0 && (v - d < 0.0 || r.random()) { v + d } else { v - d }
        })
        .collect();
    Image::from_data(a.width, a.height, data).unwrap()
}

fn check(name: &str, a: &Image, b: &Image, grad: &[f64], f: impl Fn(&Image, &Image) -> f64, stride: usize) {
    let mut x = a.data.clone();
    for i in (0..x.len()).step_by(stride) {
        let numeric = central_difference(&mut x, i, FD_STEP, |d| {
            f(&Image::from_data(a.width, a.height, d.to_vec()).unwrap(), b)
        });
        assert!(rel_error(grad[i], numeric) <= FD_TOL, "{name}[{i}]: {} vs {numeric}", grad[i]);
    }
}

pub fn pixel_loss_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(seed);
        let a = random_image(&mut r, 12, 12);
        let b = separated(&mut r, &a);
        check("l1", &a, &b, &l1_grad(&a, &b).unwrap(), |a, b| l1(a, b).unwrap(), 1);
        check("l2", &a, &b, &l2_grad(&a, &b).unwrap(), |a, b| l2(a, b).unwrap(), 1);
    }
}

pub fn ssim_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(50 + seed);
        let a = random_image(&mut r, 16, 14);
        let b = separated(&mut r, &a);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        check("ssim", &a, &b, &g, |a, b| ssim(a, b).unwrap(), 1);
    }
}

pub fn ms_ssim_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(80 + seed);
        let a = random_image(&mut r, 24, 24);
        let b = separated(&mut r, &a);
        let (_, g) = ms_ssim_loss_with_grad(&a, &b).unwrap();
        check("ms_ssim", &a, &b, &g, |a, b| ms_ssim_loss_with_grad(a, b).unwrap().0, 3);
    }
}

pub fn composite_loss_gradients(cases: u64) {
    for seed in 0..cases {
        let mut r = rng(120 + seed);
        let a = random_image(&mut r, 24, 24);
        let b = separated(&mut r, &a);
        for w in [LossWeights::PAINTER, LossWeights::ORIGINAL, LossWeights::NOVEL.scaled(0.5)] {
            let (_, g) = weighted_loss(&a, &b, &w, LossHooks::default(), &AuxMasks::default(), true).unwrap();
            let f = |a: &Image, b: &Image| {
                weighted_loss(a, b, &w, LossHooks::default(), &AuxMasks::default(), false)
                    .unwrap()
                    .0
                    .total
            };
            check("weighted", &a, &b, &g.unwrap(), f, 5);
        }
    }
}
