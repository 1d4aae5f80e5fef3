//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero if any fails. `LIDARPAINT_ACCEPTANCE=1,7` restricts
//! the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{brute_force, camera, gradients, random_gaussians, rng};
use lidarpaint::geometry::Pose;
use lidarpaint::lidar::{render_condition, LidarRasterConfig};
use lidarpaint::losses::psnr;
use lidarpaint::painter::{
    denoise_step, evaluate_l2, load_painter, save_painter, train_painter, DiffusionSchedule, InputMode, PainterConfig,
    PainterModel, PainterSample, PainterTrainConfig, ScheduleConfig, Tensor,
};
use lidarpaint::scene::{actor_clouds, load_bundle};
use lidarpaint::splat::{load_scene, render, render_gaussians, save_scene, GaussianScene, RenderOptions};
use lidarpaint::synth::{self, corruption_pairs, Intrinsics, SynthConfig};
use lidarpaint::trainer::{evaluate_training_views, evaluate_views, Draw, GuidanceSet, Sampler, TrainConfig, Trainer};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---- 1: rasterizer oracle --------------------------------------------------

fn rasterizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(10_000 + seed);
        let n = r.random_range(1..=200);
        let gs = random_gaussians(&mut r, n);
        let cam = camera(64, 64, Pose::identity());
        let opts = if seed % 2 == 0 {
            RenderOptions::exact()
        } else {
            RenderOptions::default()
        }
        .with_background([0.2, 0.5, 0.8]);
        let tiled = render_gaussians(&gs, &cam, &opts);
        let t_min = if seed % 2 == 0 { 0.0 } else { opts.transmittance_min };
        let oracle = brute_force(&gs, &cam, opts.background, opts.alpha_min, t_min);
        let max = tiled.image.data.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(max);
    }
    let t = secs(start.elapsed());
    check(worst <= 1e-5 && t < 60.0, format!("50 scenes, max |diff| {worst:.2e} (<= 1e-5), {t:.1} s (< 60 s)"))
}

// ---- 2: gradient suite -----------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = 10;
    gradients::render_backward_matches_finite_differences(cases);
    gradients::clamped_jacobian_gradients_match_finite_differences(cases);
    gradients::actor_gradients_route_to_local_frame(cases);
    gradients::encode_gradients(cases);
    gradients::predict_noise_gradients(cases);
    gradients::attention_gradients(cases);
    gradients::decode_gradients(cases);
    gradients::full_paint_gradients(cases);
    gradients::pixel_loss_gradients(cases);
    gradients::ssim_gradients(cases);
    gradients::ms_ssim_gradients(cases);
    gradients::composite_loss_gradients(cases);
    let t = secs(start.elapsed());
    check(t < 300.0, format!("12 operations x {cases} cases within rel. error 1e-3, {t:.1} s (< 300 s)"))
}

// ---- 3: denoise step oracle ------------------------------------------------

/// Linear per-step betas, cumulative signal and posterior deviation,
/// computed from scratch for one timestep.
fn oracle_coefficients(cfg: &ScheduleConfig, t: usize) -> (f64, f64, f64) {
    let n = cfg.timesteps as f64;
    let step_beta = |s: usize| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (s as f64 - 1.0) / (n - 1.0);
    let alpha_bar = |s: usize| (1..=s).map(|k| 1.0 - step_beta(k)).product::<f64>();
    let (a_prev, a_t) = (alpha_bar(t - 1), alpha_bar(t));
    let noise = |a: f64| 1.0 - a;
    let b_t = noise(a_t);
    let b_prev = if t == 1 { noise(alpha_bar(1)) } else { noise(a_prev) };
    let sigma = (step_beta(t) * (1.0 - a_prev) / (1.0 - a_t)).sqrt();
    (a_prev.sqrt() * b_t / b_prev, a_t.sqrt() * b_prev / b_t, sigma)
}

fn denoise_oracle() -> Outcome {
    let cfg = ScheduleConfig::default();
    let schedule = DiffusionSchedule::new(cfg).map_err(|e| e.to_string())?;
    let mut r = rng(33);
    let mut worst: f64 = 0.0;
    let (mut zero_sigma, mut zero_pred) = (0, 0);
    for case in 0..100 {
        let t = match case {
            0..=4 => 1,
            5..=9 => cfg.timesteps,
            _ => r.random_range(1..=cfg.timesteps),
        };
        let len = 6;
        let pred: Vec<f64> = if case % 7 == 0 {
            vec![0.0; len]
        } else {
            (0..len).map(|_| r.random_range(-3.0..3.0)).collect()
        };
        let fused: Vec<f64> = (0..len).map(|_| r.random_range(-3.0..3.0)).collect();
        let eps: Vec<f64> = (0..len).map(|_| r.random_range(-2.0..2.0)).collect();
        let (kp, kf, sigma) = oracle_coefficients(&cfg, t);
        zero_sigma += usize::from(sigma == 0.0);
        zero_pred += usize::from(pred.iter().all(|&v| v == 0.0));
        let tensor = |d: &[f64]| Tensor::from_data(1, 2, 3, d.to_vec()).unwrap();
        let out = denoise_step(&tensor(&pred), &tensor(&fused), t, &schedule, Some(&tensor(&eps)))
            .map_err(|e| e.to_string())?;
        for i in 0..len {
            let expect = kp * pred[i] + kf * fused[i] + sigma * eps[i];
            worst = worst.max((out.data[i] - expect).abs() / expect.abs().max(1.0));
        }
    }
    check(
        worst <= 1e-12 && zero_sigma > 0 && zero_pred > 0,
        format!("100 triples ({zero_sigma} with sigma = 0, {zero_pred} with zero prediction), max error {worst:.1e} (<= 1e-12)"),
    )
}

// ---- 4: fusion ablation ----------------------------------------------------

fn small_synth(seed: u64, size: usize, frames: usize) -> SynthConfig {
    SynthConfig {
        seed,
        frames,
        camera: Intrinsics::with_fov(size, size, 70.0),
        holdout_offsets: vec![[1.5, 0.0], [-1.5, 0.0], [0.0, 1.0]],
        holdout_stride: 2,
        ..SynthConfig::default()
    }
}

fn benchmark_pairs(seed: u64, size: usize, frames: usize, severity: [f64; 2]) -> Vec<PainterSample> {
    let out = synth::generate(&small_synth(seed, size, frames)).unwrap();
    corruption_pairs(&out.bundle, &out.holdout, severity, seed, &LidarRasterConfig::default()).unwrap()
}

fn toy_painter(mode: InputMode) -> PainterConfig {
    let mut c = PainterConfig::with_widths([8, 16], 4, 16);
    c.predictor_blocks = 1;
    c.input_mode = mode;
    c
}

const ABLATION_STEPS: usize = 500;

/// Each variant trains on ten scenes and is scored on two others, so the
/// comparison measures generalization rather than memorized textures.
fn fusion_ablation() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let train: Vec<PainterSample> = (0..10).flat_map(|k| benchmark_pairs(400 + 10 * seed + k, 64, 5, [0.3, 1.0])).collect();
        let test: Vec<PainterSample> = (0..2).flat_map(|k| benchmark_pairs(500 + 10 * seed + k, 64, 8, [0.3, 1.0])).collect();
        let tc = PainterTrainConfig {
            steps: ABLATION_STEPS,
            learning_rate: 2e-3,
            seed,
            ..PainterTrainConfig::default()
        };
        let l2 = |mode| {
            let mut m = PainterModel::new(toy_painter(mode), seed).unwrap();
            train_painter(&mut m, &train, &tc).unwrap();
            evaluate_l2(&m, &test).unwrap()
        };
        let (both, art, lid) = (l2(InputMode::Both), l2(InputMode::ArtifactOnly), l2(InputMode::LidarOnly));
        wins += usize::from(both < art && both < lid);
        lines.push(format!("{both:.4}/{art:.4}/{lid:.4}"));
    }
    let t = secs(start.elapsed());
    check(
        wins >= 8 && t < 1800.0,
        format!("fusion wins {wins}/10 (>= 8), {t:.0} s (< 1800 s); held-out L2 both/artifact/lidar {}", lines.join(" ")),
    )
}

// ---- 5: painter efficacy ---------------------------------------------------

fn painter_efficacy() -> Outcome {
    let mut train = Vec::new();
    for s in 0..3 {
        train.extend(benchmark_pairs(600 + s, 64, 8, [0.3, 1.0]));
    }
    let mut test = Vec::new();
    let mut s = 700;
    while test.len() < 100 {
        test.extend(benchmark_pairs(s, 64, 8, [0.3, 1.0]));
        s += 1;
    }
    test.truncate(100);
    let mut m = PainterModel::new(toy_painter(InputMode::Both), 5).unwrap();
    let tc = PainterTrainConfig {
        steps: 400,
        learning_rate: 3e-3,
        seed: 5,
        ..PainterTrainConfig::default()
    };
    train_painter(&mut m, &train, &tc).unwrap();
    let mut improved = 0;
    let (mut before, mut after) = (0.0, 0.0);
    for p in &test {
        let a = psnr(&p.artifact, &p.target).unwrap();
        let b = psnr(&m.paint(&p.artifact, &p.lidar).unwrap(), &p.target).unwrap();
        improved += usize::from(b > a);
        before += a / 100.0;
        after += b / 100.0;
    }
    check(
        improved >= 90,
        format!("{improved}/100 held-out pairs improved (>= 90); mean PSNR {before:.2} -> {after:.2} dB"),
    )
}

// ---- 6: pipeline efficacy --------------------------------------------------

const AC6_TS: usize = 1500;
const AC6_TE: usize = 6000;

fn ac6_scene(seed: u64, offsets: Vec<[f64; 2]>, stride: usize) -> SynthConfig {
    SynthConfig {
        seed,
        holdout_offsets: offsets,
        holdout_stride: stride,
        ..SynthConfig::default()
    }
}

/// Painter trained on real initial-phase renders of separate scenes at
/// shifted cameras, paired with their LiDAR conditions.
fn pipeline_painter() -> PainterModel {
    let lcfg = LidarRasterConfig::default();
    let offsets = vec![[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0], [3.0, 0.0], [-3.0, 0.0], [0.0, 1.5]];
    let mut data = Vec::new();
    for s in 0..2u64 {
        let out = synth::generate(&ac6_scene(1000 + s, offsets.clone(), 1)).unwrap();
        let b = &out.bundle;
        let cfg = TrainConfig {
            t_s: AC6_TS,
            t_e: AC6_TS + 1,
            seed: s,
            ..TrainConfig::default()
        };
        let mut t = Trainer::from_lidar(b, cfg).unwrap();
        t.train_initial().unwrap();
        let clouds = actor_clouds(b).unwrap();
        let opts = t.render_options();
        for h in &out.holdout {
            let artifact = render(&t.scene, h.frame_index, &h.camera, &opts).image.quantized();
            let lidar = render_condition(b, &clouds, h.frame_index, &h.camera, &lcfg)
                .unwrap()
                .to_condition_image(lcfg.near_depth)
                .quantized();
            data.push(PainterSample {
                artifact,
                lidar,
                target: h.image.clone(),
            });
        }
    }
    let mut pc = PainterConfig::with_widths([16, 32], 8, 32);
    pc.predictor_blocks = 2;
    let mut model = PainterModel::new(pc, 7).unwrap();
    let tc = PainterTrainConfig {
        steps: 600,
        learning_rate: 2e-3,
        ..PainterTrainConfig::default()
    };
    train_painter(&mut model, &data, &tc).unwrap();
    model
}

/// Trains on the even frames of a 40-frame drive. The odd frames are the
/// held-out original trajectory; the 2 m lateral views are the novel ones.
fn pipeline_efficacy() -> Outcome {
    let painter = pipeline_painter();
    let mut wins = 0;
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    let mut slowest: f64 = 0.0;
    let mut lines = Vec::new();
    for seed in 0..10u64 {
        let start = Instant::now();
        let mut sc = ac6_scene(seed, vec![[2.0, 0.0]], 2);
        sc.frames = 40;
        sc.frame_spacing = 0.75;
        let out = synth::generate(&sc).unwrap();
        let full = &out.bundle;
        let even: Vec<usize> = (0..full.frame_count()).step_by(2).collect();
        let b = &full.select_frames(&even).unwrap();
        let cfg = TrainConfig {
            t_s: AC6_TS,
            t_e: AC6_TE,
            p_novel: 0.4,
            seed,
            ..TrainConfig::default()
        };
        let mut guided = Trainer::from_lidar(b, cfg).unwrap();
        guided.train_initial().unwrap();
        // Both runs share the initial phase.
        let mut base = guided.clone();
        base.set_p_novel(0.0).unwrap();
        base.train_expanded(&GuidanceSet::default(), AC6_TE - AC6_TS).unwrap();
        let guidance = guided.make_guidance(&painter).unwrap();
        guided.train_expanded(&guidance, AC6_TE - AC6_TS).unwrap();
        let eval = |t: &Trainer| {
            let train = evaluate_training_views(&t.scene, t.background, b).unwrap().psnr;
            let mut scene = t.scene.clone();
            scene.actor_poses = GaussianScene::poses_from_bundle(full);
            let odd = (1..full.frame_count()).step_by(2).map(|i| (i, &full.cameras[i], &full.images[i]));
            let orig = evaluate_views(&scene, t.background, odd).unwrap().psnr;
            let views = out.holdout.iter().map(|h| (h.frame_index, &h.camera, &h.image));
            let novel = evaluate_views(&scene, t.background, views).unwrap().psnr;
            (train, orig, novel)
        };
        let (bt, bo, bn) = eval(&base);
        let (gt, go, gn) = eval(&guided);
        wins += usize::from(gn > bn);
        worst_drop = worst_drop.max(bo - go);
        slowest = slowest.max(secs(start.elapsed()));
        lines.push(format!("s{seed} novel {bn:.2}->{gn:.2} orig {bo:.2}->{go:.2} train {bt:.2}->{gt:.2}"));
    }
    check(
        wins >= 8 && worst_drop <= 0.2 && slowest < 1200.0,
        format!(
            "novel 2 m PSNR improved in {wins}/10 seeds (>= 8), worst held-out trajectory drop {worst_drop:.2} dB (<= 0.2), slowest seed {slowest:.0} s (< 1200 s); {}",
            lines.join("; ")
        ),
    )
}

// ---- 7: sampler statistics -------------------------------------------------

fn sampler_statistics() -> Outcome {
    let mut s = Sampler::new(2024);
    let steps = 23_000;
    let novel = (0..steps).filter(|_| matches!(s.expanded(0.4, 20, 100), Draw::Novel(_))).count();
    let f = novel as f64 / steps as f64;
    check((f - 0.4).abs() <= 0.02, format!("novel fraction {f:.4} over {steps} steps (0.4 +/- 0.02)"))
}

// ---- 8: CLI determinism ----------------------------------------------------

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_lidarpaint"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Every subcommand once into `root`; returns each command's stdout.
fn cli_pipeline(root: &Path) -> Vec<Vec<u8>> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    fs::write(
        root.join("synth.json"),
        r#"{"frames": 4, "actors": 2, "camera": {"width": 32, "height": 32, "fx": 22.85, "fy": 22.85, "cx": 15.5, "cy": 15.5}, "lidar_azimuth_steps": 240, "lidar_channels": 16}"#,
    )
    .unwrap();
    fs::write(
        root.join("painter.json"),
        r#"{"model": {"encoder_channels": [4, 8], "latent_channels": 4, "predictor_channels": 8, "predictor_blocks": 1, "attention_channels": 4}, "train": {"steps": 3, "batch_size": 2}}"#,
    )
    .unwrap();
    fs::write(root.join("train.json"), r#"{"t_s": 4, "t_e": 8, "rounds": 2, "p_novel": 0.4}"#).unwrap();
    let mut outs = vec![cli(&["synth", "--config", &p("synth.json"), "--out", &p("bundle"), "--seed", "3"])];
    outs.push(cli(&["ingest-validate", "--bundle", &p("bundle")]));
    outs.push(cli(&["render-lidar", "--bundle", &p("bundle"), "--out", &p("lidar"), "--frames", "0,2", "--offset=-2,0"]));
    outs.push(cli(&["train-painter", "--bundle", &p("bundle"), "--config", &p("painter.json"), "--out", &p("painter.lpm")]));
    outs.push(cli(&[
        "paint",
        "--model",
        &p("painter.lpm"),
        "--artifact",
        &p("bundle/holdout/000000.ppm"),
        "--lidar",
        &p("lidar/frame_000000_00_condition.ppm"),
        "--out",
        &p("painted.ppm"),
    ]));
    outs.push(cli(&[
        "train",
        "--bundle",
        &p("bundle"),
        "--config",
        &p("train.json"),
        "--painter",
        &p("painter.lpm"),
        "--out",
        &p("run"),
    ]));
    outs.push(cli(&["eval", "--run", &p("run"), "--bundle", &p("bundle"), "--out", &p("metrics.jsonl")]));
    outs.push(cli(&["eval", "--a", &p("painted.ppm"), "--b", &p("bundle/holdout/000000.ppm")]));
    outs
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (sa, sb) = (cli_pipeline(a.path()), cli_pipeline(b.path()));
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names = |t: &[(PathBuf, Vec<u8>)]| t.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    let differing: Vec<String> =
        ta.iter().zip(&tb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
    check(
        sa == sb && names(&ta) == names(&tb) && differing.is_empty(),
        format!("7 subcommands, {} output files byte-identical across runs; differing: {differing:?}", ta.len()),
    )
}

// ---- 9: format round-trips -------------------------------------------------

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut r = rng(99);
    let scene = GaussianScene {
        background: random_gaussians(&mut r, 40),
        actors: vec![random_gaussians(&mut r, 7), Vec::new()],
        actor_poses: Vec::new(),
    };
    save_scene(&scene, &d.join("a.gsb")).unwrap();
    save_scene(&load_scene(&d.join("a.gsb")).unwrap(), &d.join("b.gsb")).unwrap();
    let gsb = fs::read(d.join("a.gsb")).unwrap() == fs::read(d.join("b.gsb")).unwrap();

    let model = PainterModel::new(toy_painter(InputMode::Both), 4).unwrap();
    save_painter(&model, &d.join("a.lpm")).unwrap();
    save_painter(&load_painter(&d.join("a.lpm")).unwrap(), &d.join("b.lpm")).unwrap();
    let lpm = fs::read(d.join("a.lpm")).unwrap() == fs::read(d.join("b.lpm")).unwrap();

    let out = synth::generate(&small_synth(12, 48, 5)).unwrap();
    synth::write_output(&out, &d.join("bundle")).unwrap();
    let loaded = load_bundle(&d.join("bundle")).is_ok();
    let status = Command::new(env!("CARGO_BIN_EXE_lidarpaint"))
        .args(["ingest-validate", "--bundle"])
        .arg(d.join("bundle"))
        .output()
        .unwrap()
        .status;
    check(
        gsb && lpm && loaded && status.success(),
        format!("gsb identical {gsb}, lpm identical {lpm}, synthetic bundle loads {loaded}, ingest-validate exit {status}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("rasterizer oracle", rasterizer_oracle),
        ("gradient suite", gradient_suite),
        ("denoise step oracle", denoise_oracle),
        ("fusion ablation", fusion_ablation),
        ("painter efficacy", painter_efficacy),
        ("pipeline efficacy", pipeline_efficacy),
        ("sampler statistics", sampler_statistics),
        ("CLI determinism", cli_determinism),
        ("format round-trips", format_round_trips),
    ];
    let only: Option<Vec<usize>> = std::env::var("LIDARPAINT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // `cargo test -- --list` and similar probes pass flags; nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = k + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let t = secs(start.elapsed());
        match result {
            Ok(m) => println!("acceptance {id} {name}: PASS ({t:.1} s) {m}"),
            Err(m) => {
                failed += 1;
                println!("acceptance {id} {name}: FAIL ({t:.1} s) {m}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
