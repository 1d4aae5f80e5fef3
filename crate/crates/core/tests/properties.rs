//! Randomized checks of the stated invariants of each stage.

mod common;

use common::{camera, random_gaussians, rng};
use lidarpaint::geometry::Pose;
use lidarpaint::image::Image;
use lidarpaint::lidar::aggregate_background;
use lidarpaint::losses::{l1, l2, ms_ssim_loss_with_grad, ssim};
use lidarpaint::painter::{
    denoise_step, fuse_latents, sample_gradients, DiffusionSchedule, PainterConfig, PainterModel, PainterSample,
    ScheduleConfig, Tensor,
};
use lidarpaint::scene::{split_points, synchronize, BoundingBox, LidarFrame, LidarPoint, LidarSweep, SceneBundle};
use lidarpaint::splat::{compose_actor, render_gaussians, Gaussian, RenderOptions};
use lidarpaint::synth::{self, Intrinsics, SynthConfig, World};
use lidarpaint::trainer::{Draw, Sampler};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn random_image(r: &mut impl Rng, w: usize, h: usize) -> Image {
    Image::from_data(w, h, (0..w * h * 3).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

fn random_tensor(r: &mut impl Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_data(c, h, w, (0..c * h * w).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_pose(r: &mut impl Rng) -> Pose {
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let t = Vector3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-1.0..1.0));
    Pose::from_axis_angle(axis, r.random_range(-3.0..3.0), t)
}

/// Bundle with `frames` identical cameras, random points and overlapping boxes.
fn random_bundle(r: &mut impl Rng, frames: usize, actors: usize, points: usize) -> SceneBundle {
    let mut boxes = Vec::new();
    for a in 0..actors {
        for f in 0..frames {
            boxes.push(BoundingBox {
                pose: random_pose(r),
                half_extents: Vector3::new(r.random_range(0.5..3.0), r.random_range(0.5..3.0), r.random_range(0.5..2.0)),
                actor_id: a,
                frame_index: f,
            });
        }
    }
    let lidar = (0..frames)
        .map(|f| LidarFrame {
            frame_index: f,
            timestamp: f as f64 * 0.1,
            points: (0..points)
                .map(|_| {
                    LidarPoint::new(
                        r.random_range(-6.0..6.0),
                        r.random_range(-6.0..6.0),
                        r.random_range(-2.0..2.0),
                        r.random_range(0.0..1.0),
                    )
                })
                .collect(),
        })
        .collect();
    SceneBundle {
        cameras: vec![camera(16, 16, Pose::identity()); frames],
        timestamps: (0..frames).map(|f| f as f64 * 0.1).collect(),
        lidar,
        boxes,
        images: vec![Image::new(16, 16); frames],
        actor_count: actors,
        sync_tolerance: 0.05,
    }
}

fn bits(p: &LidarPoint) -> [u64; 4] {
    [p.position.x.to_bits(), p.position.y.to_bits(), p.position.z.to_bits(), p.intensity.to_bits()]
}

fn tiny_painter() -> PainterConfig {
    let mut c = PainterConfig::with_widths([4, 8], 4, 8);
    c.predictor_blocks = 1;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_points_is_a_partition(seed in 0u64..10_000, actors in 0usize..4) {
        let mut r = rng(seed);
        let b = random_bundle(&mut r, 1, actors, 400);
        let split = split_points(&b, 0).unwrap();
        let total = split.background.len() + split.actors.iter().map(Vec::len).sum::<usize>();
        prop_assert_eq!(total, 400);
        // Map every output point back to world space and match it to one input.
        let mut used = vec![false; 400];
        let mut claim = |p: &LidarPoint| -> bool {
            let hit = b.lidar[0].points.iter().enumerate().find(|(i, q)| {
                !used[*i] && (q.position - p.position).norm() < 1e-9 && q.intensity == p.intensity
            });
            match hit {
                Some((i, _)) => {
                    used[i] = true;
                    true
                }
                None => false,
            }
        };
        for p in &split.background {
            prop_assert!(claim(p));
        }
        for (a, pts) in split.actors.iter().enumerate() {
            let pose = b.box_for(a, 0).unwrap().pose;
            for p in pts {
                let world = LidarPoint { position: pose.transform_point(&p.position), ..*p };
                prop_assert!(claim(&world));
            }
        }
        prop_assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn exact_timestamp_sweeps_survive_sync(seed in 0u64..10_000, tolerance in 0.0f64..0.2) {
        let mut r = rng(seed);
        let cams: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let mut times: Vec<f64> = cams.iter().copied().filter(|_| r.random_bool(0.5)).collect();
        times.extend((0..5).map(|_| r.random_range(0.0..1.0)));
        times.sort_by(f64::total_cmp);
        times.dedup();
        let sweeps = times.iter().map(|&t| LidarSweep { timestamp: t, points: vec![] }).collect();
        let frames = synchronize(&cams, sweeps, tolerance);
        for (i, &c) in cams.iter().enumerate() {
            if times.contains(&c) {
                let f = frames.iter().find(|f| f.frame_index == i);
                prop_assert!(f.is_some_and(|f| f.timestamp == c), "frame {} lost its exact sweep", i);
            }
        }
    }

    #[test]
    fn full_window_aggregation_is_the_union(seed in 0u64..10_000, frames in 1usize..6) {
        let mut r = rng(seed);
        let b = random_bundle(&mut r, frames, 2, 60);
        let f = r.random_range(0..frames);
        let mut got: Vec<_> = aggregate_background(&b, f, 2 * frames + 1).unwrap().iter().map(bits).collect();
        let mut want: Vec<_> = (0..frames)
            .flat_map(|k| split_points(&b, k).unwrap().background)
            .map(|p| bits(&p))
            .collect();
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn rendered_values_stay_in_range_and_ignore_input_order(seed in 0u64..10_000, n in 1usize..120) {
        let mut r = rng(seed);
        let gs = random_gaussians(&mut r, n);
        let cam = camera(32, 24, Pose::identity());
        let opts = RenderOptions::default();
        let out = render_gaussians(&gs, &cam, &opts);
        prop_assert!(out.image.data.iter().all(|&v| (0.0..1.0).contains(&v)));
        prop_assert!(out.alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        let mut shuffled = gs.clone();
        shuffled.shuffle(&mut r);
        let again = render_gaussians(&shuffled, &cam, &opts);
        prop_assert_eq!(&out.image.data, &again.image.data);
        prop_assert_eq!(&out.alpha, &again.alpha);
        prop_assert_eq!(render_gaussians(&gs, &cam, &opts).image.data, out.image.data);
    }

    #[test]
    fn composing_with_inverse_pose_recovers_primitives(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let gs = random_gaussians(&mut r, 20);
        let pose = random_pose(&mut r);
        let back = compose_actor(&compose_actor(&gs, &pose), &pose.inverse());
        for (a, b) in gs.iter().zip(&back) {
            prop_assert!((a.mean_vec() - b.mean_vec()).norm() < 1e-9);
            prop_assert!((a.covariance() - b.covariance()).abs().max() < 1e-9);
            prop_assert_eq!(a.log_scale, b.log_scale);
            prop_assert_eq!(a.opacity_logit, b.opacity_logit);
            prop_assert_eq!(a.color, b.color);
        }
    }

    #[test]
    fn fused_latent_lies_between_inputs(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let za = random_tensor(&mut r, 4, 3, 5, -3.0, 3.0);
        let zl = random_tensor(&mut r, 4, 3, 5, -3.0, 3.0);
        let w = random_tensor(&mut r, 1, 3, 5, 0.0, 1.0);
        let z = fuse_latents(&za, &zl, &w).unwrap();
        for i in 0..z.data.len() {
            let (lo, hi) = (za.data[i].min(zl.data[i]), za.data[i].max(zl.data[i]));
            prop_assert!(lo - 1e-12 <= z.data[i] && z.data[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn denoise_step_is_jointly_linear(seed in 0u64..10_000, t in 1usize..=1000, a in -4.0f64..4.0) {
        let mut r = rng(seed);
        let s = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let x = random_tensor(&mut r, 2, 3, 3, -2.0, 2.0);
        let y = random_tensor(&mut r, 2, 3, 3, -2.0, 2.0);
        let e = random_tensor(&mut r, 2, 3, 3, -2.0, 2.0);
        let lhs = denoise_step(&x.scaled(a), &y.scaled(a), t, &s, Some(&e.scaled(a))).unwrap();
        let rhs = denoise_step(&x, &y, t, &s, Some(&e)).unwrap().scaled(a);
        for (u, v) in lhs.data.iter().zip(&rhs.data) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn losses_are_nonnegative_symmetric_and_vanish_on_equal_images(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = random_image(&mut r, 24, 24);
        let b = random_image(&mut r, 24, 24);
        for f in [l1, l2] {
            prop_assert!(f(&a, &b).unwrap() > 0.0);
            prop_assert_eq!(f(&a, &b).unwrap(), f(&b, &a).unwrap());
            prop_assert_eq!(f(&a, &a).unwrap(), 0.0);
        }
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ms_ssim_loss_with_grad(&a, &b).unwrap().0 > 0.0);
        prop_assert!(ms_ssim_loss_with_grad(&a, &a).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn sampler_respects_edge_probabilities(seed in 0u64..10_000, frames in 1usize..20, guidance in 1usize..20) {
        let mut s = Sampler::new(seed);
        for _ in 0..200 {
            prop_assert!(matches!(s.expanded(0.0, frames, guidance), Draw::Original(f) if f < frames));
            prop_assert!(matches!(s.expanded(1.0, frames, guidance), Draw::Novel(g) if g < guidance));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn painter_is_deterministic_and_every_block_gets_a_gradient(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let model = PainterModel::new(tiny_painter(), seed).unwrap();
        let sample = PainterSample {
            artifact: random_image(&mut r, 16, 16),
            lidar: random_image(&mut r, 16, 16),
            target: random_image(&mut r, 16, 16),
        };
        let p = model.paint(&sample.artifact, &sample.lidar).unwrap();
        prop_assert_eq!(&p, &model.paint(&sample.artifact, &sample.lidar).unwrap());
        let (loss, grads) = sample_gradients(&model, &sample).unwrap();
        prop_assert!(loss.is_finite());
        for (block, g) in model.blocks.iter().zip(&grads.0) {
            prop_assert!(g.iter().all(|v| v.is_finite()), "{} has a non-finite gradient", block.name);
            prop_assert!(g.iter().any(|&v| v != 0.0), "{} receives no gradient", block.name);
        }
    }

    #[test]
    fn synthetic_bundles_validate_and_match_the_ray_caster(seed in 0u64..10_000) {
        let cfg = SynthConfig {
            seed,
            frames: 3,
            camera: Intrinsics::with_fov(24, 16, 70.0),
            lidar_azimuth_steps: 90,
            lidar_channels: 8,
            holdout_offsets: vec![[1.0, 0.0], [0.0, 0.5]],
            holdout_stride: 1,
            ..SynthConfig::default()
        };
        let out = synth::generate(&cfg).unwrap();
        prop_assert!(out.bundle.validate().is_ok());
        let world = World::generate(&cfg);
        for h in &out.holdout {
            let t = out.bundle.timestamps[h.frame_index];
            prop_assert_eq!(&world.at_time(t).render(&h.camera, cfg.supersample).quantized(), &h.image);
        }
        for (i, img) in out.bundle.images.iter().enumerate() {
            let cam = &out.bundle.cameras[i];
            prop_assert_eq!(&world.at_time(out.bundle.timestamps[i]).render(cam, cfg.supersample).quantized(), img);
        }
    }
}

#[test]
fn box_membership_matches_brute_force_containment() {
    let mut r = rng(3);
    let b = random_bundle(&mut r, 1, 3, 1000);
    let split = split_points(&b, 0).unwrap();
    let mut counts = vec![0usize; 3];
    let mut background = 0;
    for p in &b.lidar[0].points {
        let owner = (0..3).find(|&a| {
            let bx = b.box_for(a, 0).unwrap();
            let local = bx.pose.inverse().transform_point(&p.position);
            (0..3).all(|k| local[k].abs() <= bx.half_extents[k])
        });
        match owner {
            Some(a) => counts[a] += 1,
            None => background += 1,
        }
    }
    assert_eq!(split.actors.iter().map(Vec::len).collect::<Vec<_>>(), counts);
    assert_eq!(split.background.len(), background);
}

#[test]
fn primitives_with_unit_colors_stay_below_one() {
    let g = Gaussian::new([0.0, 0.0, 3.0], [0.5; 3], [1.0, 0.0, 0.0, 0.0], 0.999, [1.0; 3]);
    let cam = camera(16, 16, Pose::identity());
    let out = render_gaussians(&vec![g; 30], &cam, &RenderOptions::exact());
    assert!(out.image.data.iter().all(|&v| v < 1.0));
}
