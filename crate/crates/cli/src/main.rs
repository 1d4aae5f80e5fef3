use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use lidarpaint::image::Image;
use lidarpaint::lidar::{render_condition, LidarRasterConfig};
use lidarpaint::losses::{l1, psnr, ssim};
use lidarpaint::painter::{load_painter, save_painter, train_painter, PainterConfig, PainterModel, PainterTrainConfig};
use lidarpaint::scene::{actor_clouds, load_bundle, SceneBundle};
use lidarpaint::splat::{load_scene, GaussianScene};
use lidarpaint::synth::{self, SynthConfig};
use lidarpaint::trainer::{self, evaluate_training_views, evaluate_views, init_from_lidar, run_rounds, IdentityPainter, TrainConfig};

/// LiDAR-conditioned novel-view painting for driving-scene reconstruction.
#[derive(Debug, Parser)]
#[command(name = "lidarpaint", version)]
struct Cli {
    /// Worker threads (falls back to LIDARPAINT_THREADS, then all cores).
    #[arg(long, global = true, env = "LIDARPAINT_THREADS")]
    threads: Option<usize>,
    /// Seed overriding the one in any configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs instead of refusing to write.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic bundle with held-out novel views.
    Synth(SynthArgs),
    /// Load and validate a bundle, printing a JSON summary.
    IngestValidate(BundleArgs),
    /// Rasterize aggregated LiDAR for bundle cameras.
    RenderLidar(RenderLidarArgs),
    /// Train a painter on corrupted views of synthetic bundles.
    TrainPainter(TrainPainterArgs),
    /// Repair one artifact image with a trained painter.
    Paint(PaintArgs),
    /// Reconstruct a scene with novel-view guidance.
    Train(TrainArgs),
    /// Image metrics as JSON lines.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// SynthConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BundleArgs {
    #[arg(long)]
    bundle: PathBuf,
}

#[derive(Debug, Args)]
struct RenderLidarArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Frames to render (comma separated); all frames when omitted.
    #[arg(long, value_delimiter = ',')]
    frames: Vec<usize>,
    /// Camera-frame shift "lateral,vertical" in meters; repeatable.
    #[arg(long = "offset", value_parser = parse_offset, allow_hyphen_values = true)]
    offsets: Vec<[f64; 2]>,
    #[arg(long, default_value_t = lidarpaint::lidar::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = lidarpaint::lidar::DEFAULT_SPLAT_RADIUS)]
    splat_radius: usize,
}

#[derive(Debug, Args)]
struct TrainPainterArgs {
    /// Synthetic bundle directories (with optional holdout/); repeatable.
    #[arg(long = "bundle", required = true)]
    bundles: Vec<PathBuf>,
    /// PainterJob JSON (model, train, severity, lidar).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.steps from the config.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct PaintArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    artifact: PathBuf,
    #[arg(long)]
    lidar: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// TrainConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Painter checkpoint; required when p_novel > 0.
    #[arg(long)]
    painter: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// First image of a pair comparison.
    #[arg(long, requires = "b", conflicts_with_all = ["run", "bundle"])]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// Training output directory to evaluate.
    #[arg(long, requires = "bundle")]
    run: Option<PathBuf>,
    #[arg(long, requires = "run")]
    bundle: Option<PathBuf>,
    /// Round to evaluate; the last one when omitted.
    #[arg(long)]
    round: Option<usize>,
    /// Also write the JSON lines to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Painter training job read by `train-painter`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PainterJob {
    model: PainterConfig,
    train: PainterTrainConfig,
    severity: [f64; 2],
    lidar: LidarRasterConfig,
}

impl Default for PainterJob {
    fn default() -> Self {
        Self {
            model: PainterConfig::default(),
            train: PainterTrainConfig::default(),
            severity: [0.3, 1.0],
            lidar: LidarRasterConfig::default(),
        }
    }
}

/// Bad command-line input; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_offset(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"lateral,vertical\", got {s:?}"));
    }
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([p(parts[0])?, p(parts[1])?])
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Ensures `dir` is absent or empty, clearing it under `--overwrite`.
fn prepare_dir(dir: &Path, overwrite: bool) -> anyhow::Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        if !overwrite {
            return Err(usage(format!("{} is not empty (pass --overwrite)", dir.display())));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn prepare_file(path: &Path, overwrite: bool) -> anyhow::Result<()> {
    if path.exists() && !overwrite {
        return Err(usage(format!("{} exists (pass --overwrite)", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn emit(lines: &[serde_json::Value], out: Option<&Path>) -> anyhow::Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text)?;
    }
    Ok(())
}

fn synth_cmd(cli: &Cli, a: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = read_config(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_dir(&a.out, cli.overwrite)?;
    let out = synth::generate(&cfg)?;
    synth::write_output(&out, &a.out)?;
    emit(
        &[json!({
            "frames": out.bundle.frame_count(),
            "actors": out.bundle.actor_count,
            "points": out.bundle.total_points(),
            "holdout": out.holdout.len(),
        })],
        None,
    )
}

fn ingest_cmd(a: &BundleArgs) -> anyhow::Result<()> {
    let b = load_bundle(&a.bundle)?;
    let holdout = if a.bundle.join("holdout").join("holdout.json").exists() {
        synth::load_holdout(&a.bundle)?.len()
    } else {
        0
    };
    emit(
        &[json!({
            "valid": true,
            "frames": b.frame_count(),
            "actors": b.actor_count,
            "boxes": b.boxes.len(),
            "points": b.total_points(),
            "holdout": holdout,
        })],
        None,
    )
}

fn render_lidar_cmd(cli: &Cli, a: &RenderLidarArgs) -> anyhow::Result<()> {
    let b = load_bundle(&a.bundle)?;
    let frames: Vec<usize> = if a.frames.is_empty() { (0..b.frame_count()).collect() } else { a.frames.clone() };
    if let Some(&f) = frames.iter().find(|&&f| f >= b.frame_count()) {
        return Err(usage(format!("frame {f} out of range for {} frames", b.frame_count())));
    }
    let offsets = if a.offsets.is_empty() { vec![[0.0, 0.0]] } else { a.offsets.clone() };
    let cfg = LidarRasterConfig {
        window: a.window,
        splat_radius: a.splat_radius,
        ..LidarRasterConfig::default()
    };
    prepare_dir(&a.out, cli.overwrite)?;
    let clouds = actor_clouds(&b)?;
    let mut lines = Vec::new();
    for &f in &frames {
        for (k, &off) in offsets.iter().enumerate() {
            let cam = b.cameras[f].shifted(off[0], off[1]);
            let img = render_condition(&b, &clouds, f, &cam, &cfg)?;
            let stem = format!("frame_{f:06}_{k:02}");
            img.intensity_image().write_ppm(&a.out.join(format!("{stem}.ppm")))?;
            fs::write(a.out.join(format!("{stem}.depth")), img.depth_bytes())?;
            img.to_condition_image(cfg.near_depth)
                .write_ppm(&a.out.join(format!("{stem}_condition.ppm")))?;
            lines.push(json!({"frame": f, "offset": off, "file": stem, "filled": img.filled_pixels()}));
        }
    }
    emit(&lines, None)
}

fn train_painter_cmd(cli: &Cli, a: &TrainPainterArgs) -> anyhow::Result<()> {
    let mut job: PainterJob = read_config(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        job.train.seed = s;
    }
    if let Some(n) = a.steps {
        job.train.steps = n;
    }
    job.model.validate()?;
    prepare_file(&a.out, cli.overwrite)?;
    let mut data = Vec::new();
    for (k, dir) in a.bundles.iter().enumerate() {
        let b = load_bundle(dir)?;
        let holdout = if dir.join("holdout").join("holdout.json").exists() {
            synth::load_holdout(dir)?
        } else {
            Vec::new()
        };
        let seed = job.train.seed.wrapping_add(k as u64);
        data.extend(synth::corruption_pairs(&b, &holdout, job.severity, seed, &job.lidar)?);
    }
    let mut model = PainterModel::new(job.model.clone(), job.train.seed)?;
    let report = train_painter(&mut model, &data, &job.train)?;
    save_painter(&model, &a.out)?;
    emit(
        &[json!({
            "samples": data.len(),
            "steps": report.losses.len(),
            "initial_loss": report.losses.first(),
            "final_loss": report.losses.last(),
            "parameters": model.parameter_count(),
        })],
        None,
    )
}

fn paint_cmd(cli: &Cli, a: &PaintArgs) -> anyhow::Result<()> {
    let model = load_painter(&a.model)?;
    let artifact = Image::read_ppm(&a.artifact)?;
    let lidar = Image::read_ppm(&a.lidar)?;
    prepare_file(&a.out, cli.overwrite)?;
    model.paint(&artifact, &lidar)?.write_ppm(&a.out)?;
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let painter = match (&a.painter, cfg.p_novel > 0.0) {
        (Some(p), _) => Some(load_painter(p)?),
        (None, true) => return Err(usage("p_novel > 0 requires --painter")),
        (None, false) => None,
    };
    let bundle = load_bundle(&a.bundle)?;
    prepare_dir(&a.out, cli.overwrite)?;
    fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let scene = init_from_lidar(&bundle, &cfg.init)?;
    let result = match &painter {
        Some(m) => run_rounds(scene, &bundle, m, &cfg, Some(&a.out))?,
        None => run_rounds(scene, &bundle, &IdentityPainter, &cfg, Some(&a.out))?,
    };
    let (scene, bg) = result.final_scene();
    let m = evaluate_training_views(scene, bg, &bundle)?;
    emit(
        &[json!({
            "iterations": cfg.total_iterations(),
            "rounds": result.rounds.len(),
            "gaussians": scene.len(),
            "train_psnr": m.psnr,
        })],
        None,
    )
}

fn last_round(run: &Path) -> anyhow::Result<usize> {
    let mut best = None;
    for e in fs::read_dir(run).with_context(|| format!("reading {}", run.display()))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(k) = name.strip_prefix("round_").and_then(|k| k.parse::<usize>().ok()) {
            best = best.max(Some(k));
        }
    }
    best.ok_or_else(|| usage(format!("no round_K checkpoints in {}", run.display())))
}

fn load_round(run: &Path, round: Option<usize>, bundle: &SceneBundle) -> anyhow::Result<(GaussianScene, [f64; 3])> {
    let k = match round {
        Some(k) => k,
        None => last_round(run)?,
    };
    let dir = run.join(format!("round_{k}"));
    let mut scene = load_scene(&dir.join("scene.gsb"))?;
    scene.actor_poses = GaussianScene::poses_from_bundle(bundle);
    scene.validate(bundle.actor_count)?;
    let state = trainer::load_state(&dir)?;
    Ok((scene, state.background))
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> anyhow::Result<()> {
    if let Some(out) = &a.out {
        prepare_file(out, cli.overwrite)?;
    }
    if let (Some(pa), Some(pb)) = (&a.a, &a.b) {
        let (x, y) = (Image::read_ppm(pa)?, Image::read_ppm(pb)?);
        let line = json!({"psnr": psnr(&x, &y)?, "ssim": ssim(&x, &y)?, "l1": l1(&x, &y)?});
        return emit(&[line], a.out.as_deref());
    }
    let (Some(run), Some(bdir)) = (&a.run, &a.bundle) else {
        return Err(usage("eval needs either --a/--b or --run/--bundle"));
    };
    let bundle = load_bundle(bdir)?;
    let (scene, bg) = load_round(run, a.round, &bundle)?;
    let m = evaluate_training_views(&scene, bg, &bundle)?;
    let mut lines = vec![json!({"set": "train", "psnr": m.psnr, "ssim": m.ssim, "l1": m.l1, "count": m.count})];
    if bdir.join("holdout").join("holdout.json").exists() {
        let holdout = synth::load_holdout(bdir)?;
        let mut offsets: Vec<[f64; 2]> = Vec::new();
        for h in &holdout {
            if !offsets.contains(&h.offset) {
                offsets.push(h.offset);
            }
        }
        for off in offsets {
            let views = holdout.iter().filter(|h| h.offset == off).map(|h| (h.frame_index, &h.camera, &h.image));
            let m = evaluate_views(&scene, bg, views)?;
            lines.push(json!({"set": "holdout", "offset": off, "psnr": m.psnr, "ssim": m.ssim, "l1": m.l1, "count": m.count}));
        }
    }
    emit(&lines, a.out.as_deref())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("thread pool: {e}"))?;
    }
    match &cli.command {
        Command::Synth(a) => synth_cmd(cli, a),
        Command::IngestValidate(a) => ingest_cmd(a),
        Command::RenderLidar(a) => render_lidar_cmd(cli, a),
        Command::TrainPainter(a) => train_painter_cmd(cli, a),
        Command::Paint(a) => paint_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
    }
}

/// 1 for bad input (including missing input files), 2 for failures while
/// running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    let missing = |e: &std::io::Error| e.kind() == std::io::ErrorKind::NotFound;
    match err.downcast_ref::<lidarpaint::Error>() {
        Some(e) if e.is_validation() => 1,
        Some(lidarpaint::Error::Io(e)) if missing(e) => 1,
        Some(_) => 2,
        None if err.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(missing)) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
