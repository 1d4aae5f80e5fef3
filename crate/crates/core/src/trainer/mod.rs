//! Two-phase scene reconstruction: original-trajectory training up to
//! `t_s`, then mixed training with painted novel-view guidance up to `t_e`,
//! optionally repeated for several rounds.

pub mod guidance;
pub mod init;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lidar::LidarRasterConfig;
use crate::losses::{l1, psnr, ssim, weighted_loss, AuxMasks, LossHooks, LossTerms, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scene::{Camera, SceneBundle};
use crate::splat::{render, render_with_backward, save_scene, Gaussian, GaussianScene, RenderOptions, SceneGradients};

pub use guidance::{make_guidance, GuidancePainter, GuidanceSample, GuidanceSet, IdentityPainter};
pub use init::{init_from_lidar, InitConfig};

/// Per-group learning rates. The mean rate is multiplied by the scene's
/// spatial scale and decays exponentially to `mean_final`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub mean: f64,
    pub mean_final: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub background: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            mean_final: 1.6e-6,
            scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            background: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub interval: usize,
    /// Threshold on the mean view-space positional gradient norm.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Primitives larger than this fraction of the spatial scale are split,
    /// smaller ones are cloned.
    pub split_fraction: f64,
    /// Last iteration at which densification runs.
    pub until: usize,
    pub max_gaussians: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 500,
            grad_threshold: 2e-4,
            prune_opacity: 0.005,
            split_fraction: 0.01,
            until: usize::MAX,
            max_gaussians: 60_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub t_s: usize,
    pub t_e: usize,
    pub p_novel: f64,
    pub lambda_novel: f64,
    pub rounds: usize,
    pub seed: u64,
    /// (lateral, vertical) camera-frame shifts in meters.
    pub novel_offsets: Vec<[f64; 2]>,
    pub learning_rates: LearningRates,
    /// Scene radius for the mean learning rate; derived from the camera
    /// centers when absent.
    pub spatial_scale: Option<f64>,
    pub densify: Option<DensifyConfig>,
    pub init: InitConfig,
    pub lidar: LidarRasterConfig,
    pub background: [f64; 3],
    pub learn_background: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_s: 1500,
            t_e: 6000,
            p_novel: 0.4,
            lambda_novel: 0.2,
            rounds: 1,
            seed: 0,
            novel_offsets: vec![[2.0, 0.0], [-2.0, 0.0], [3.0, 0.0], [-3.0, 0.0], [0.0, 1.5]],
            learning_rates: LearningRates::default(),
            spatial_scale: None,
            densify: None,
            init: InitConfig::default(),
            lidar: LidarRasterConfig::default(),
            background: [0.5; 3],
            learn_background: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: String| Err(Error::validation(f, m));
        if self.t_s >= self.t_e {
            return bad("t_s", format!("t_s ({}) must be below t_e ({})", self.t_s, self.t_e));
        }
        if !(0.0..=1.0).contains(&self.p_novel) {
            return bad("p_novel", format!("{} is not a probability", self.p_novel));
        }
        if !(self.lambda_novel >= 0.0) {
            return bad("lambda_novel", format!("{} must be >= 0", self.lambda_novel));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if let Some(s) = self.spatial_scale {
            if !(s > 0.0) {
                return bad("spatial_scale", format!("{s} must be positive"));
            }
        }
        if let Some(d) = &self.densify {
            if d.interval == 0 {
                return bad("densify.interval", "must be at least 1".into());
            }
        }
        self.init.validate()
    }

    /// Iterations across all rounds; each extra round adds `t_e - t_s`.
    pub fn total_iterations(&self) -> usize {
        self.t_e + (self.rounds - 1) * (self.t_e - self.t_s)
    }
}

/// What one training step supervises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Original(usize),
    Novel(usize),
}

/// Seeded frame and guidance sampler shared by both phases.
#[derive(Debug, Clone)]
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn original(&mut self, frames: usize) -> Draw {
        Draw::Original(self.rng.random_range(0..frames))
    }

    /// A novel draw happens iff `u < p_novel` for `u` uniform in [0, 1), so
    /// `p_novel = 0` never and `p_novel = 1` always draws guidance.
    pub fn expanded(&mut self, p_novel: f64, frames: usize, guidance: usize) -> Draw {
        let u: f64 = self.rng.random();
        if u < p_novel && guidance > 0 {
            Draw::Novel(self.rng.random_range(0..guidance))
        } else {
            Draw::Original(self.rng.random_range(0..frames))
        }
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub round: usize,
    pub kind: String,
    pub frame: usize,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub psnr: f64,
}

const GROUP_WIDTHS: [usize; 5] = [3, 3, 4, 1, 3];
const GROUP_OFFSETS: [usize; 5] = [0, 3, 6, 10, 11];

/// Radius of the camera centers around their mean, padded by 10%.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let mean = cameras.iter().map(Camera::center).sum::<Vector3<f64>>() / cameras.len() as f64;
    let r = cameras.iter().map(|c| (c.center() - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

/// Mutable training state: scene, background color, optimizer moments
/// and sampler.
#[derive(Clone)]
pub struct Trainer<'b> {
    bundle: &'b SceneBundle,
    cfg: TrainConfig,
    pub scene: GaussianScene,
    pub background: [f64; 3],
    /// Optimizers per primitive set (background, then actors) and group.
    optimizers: Vec<[Optimizer; 5]>,
    background_opt: Optimizer,
    sampler: Sampler,
    densify_rng: ChaCha8Rng,
    densify_acc: Vec<Vec<(f64, u32)>>,
    spatial_scale: f64,
    pub iteration: usize,
    pub round: usize,
    pub log: Vec<StepRecord>,
}

fn set_sizes(scene: &GaussianScene) -> Vec<usize> {
    std::iter::once(scene.background.len())
        .chain(scene.actors.iter().map(Vec::len))
        .collect()
}

fn group_optimizers(n: usize) -> [Optimizer; 5] {
    GROUP_WIDTHS.map(|w| Optimizer::new(OptimizerKind::ADAM, n * w))
}

impl<'b> Trainer<'b> {
    pub fn new(scene: GaussianScene, bundle: &'b SceneBundle, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        bundle.validate()?;
        scene.validate(bundle.actor_count)?;
        let sizes = set_sizes(&scene);
        let spatial_scale = cfg.spatial_scale.unwrap_or_else(|| camera_extent(&bundle.cameras));
        Ok(Self {
            bundle,
            optimizers: sizes.iter().map(|&n| group_optimizers(n)).collect(),
            background_opt: Optimizer::new(OptimizerKind::ADAM, 3),
            sampler: Sampler::new(cfg.seed),
            densify_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_de75),
            densify_acc: sizes.iter().map(|&n| vec![(0.0, 0); n]).collect(),
            spatial_scale,
            background: cfg.background,
            iteration: 0,
            round: 0,
            log: Vec::new(),
            scene,
            cfg,
        })
    }

    /// Initializes the scene from the bundle's LiDAR.
    pub fn from_lidar(bundle: &'b SceneBundle, cfg: TrainConfig) -> Result<Self> {
        let scene = init_from_lidar(bundle, &cfg.init)?;
        Self::new(scene, bundle, cfg)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the novel-draw probability for later expanded steps.
    pub fn set_p_novel(&mut self, p: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("p_novel {p} outside [0, 1]")));
        }
        self.cfg.p_novel = p;
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions::default().with_background(self.background)
    }

    fn mean_lr(&self) -> f64 {
        let lr = &self.cfg.learning_rates;
        let t = (self.iteration as f64 / self.cfg.total_iterations() as f64).clamp(0.0, 1.0);
        let (a, b) = (lr.mean.max(1e-300).ln(), lr.mean_final.max(1e-300).ln());
        (a + (b - a) * t).exp() * self.spatial_scale
    }

    /// One optimization step on the drawn target.
    pub fn step(&mut self, draw: Draw, guidance: Option<&GuidanceSet>) -> Result<StepRecord> {
        let (frame, camera, target, weights, kind) = match draw {
            Draw::Original(f) => (
                f,
                self.bundle.cameras[f],
                &self.bundle.images[f],
                LossWeights::ORIGINAL,
                "original",
            ),
            Draw::Novel(j) => {
                let s = guidance
                    .and_then(|g| g.samples.get(j))
                    .ok_or_else(|| Error::Config(format!("guidance sample {j} does not exist")))?;
                (s.frame_index, s.camera, &s.guidance, LossWeights::NOVEL.scaled(self.cfg.lambda_novel), "novel")
            }
        };
        let opts = self.render_options();
        let mut outcome: Option<Result<(LossTerms, Vec<f64>)>> = None;
        let (out, grads) = render_with_backward(&self.scene, frame, &camera, &opts, |out| {
            let aux = AuxMasks { alpha: Some(&out.alpha) };
            let res = weighted_loss(&out.image, target, &weights, LossHooks::default(), &aux, true)
                .map(|(t, g)| (t, g.unwrap_or_else(|| vec![0.0; out.image.data.len()])));
            let g = match &res {
                Ok((_, g)) => g.clone(),
                Err(_) => vec![0.0; out.image.data.len()],
            };
            outcome = Some(res);
            g
        });
        let (terms, grad_image) = outcome.expect("gradient callback runs")?;
        let finite = terms.total.is_finite() && grad_image.iter().all(|v| v.is_finite()) && grads.iter().all(|g| g.to_array().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Training {
                step: self.iteration,
                message: format!("non-finite loss or gradient on {kind} frame {frame}"),
            });
        }
        self.apply(&grads, &grad_image, &out.alpha);
        self.accumulate_densify(&grads, camera.width);
        let record = StepRecord {
            iteration: self.iteration,
            round: self.round,
            kind: kind.into(),
            frame,
            terms,
            psnr: psnr(&out.image, target)?,
        };
        self.iteration += 1;
        self.maybe_densify();
        self.log.push(record.clone());
        Ok(record)
    }

    fn apply(&mut self, grads: &SceneGradients, grad_image: &[f64], alpha: &[f64]) {
        let lr = &self.cfg.learning_rates;
        let rates = [self.mean_lr(), lr.scale, lr.rotation, lr.opacity, lr.color];
        let grad_sets = std::iter::once(&grads.background).chain(grads.actors.iter());
        let param_sets = std::iter::once(&mut self.scene.background).chain(self.scene.actors.iter_mut());
        for ((params, grads), opts) in param_sets.zip(grad_sets).zip(self.optimizers.iter_mut()) {
            for (k, opt) in opts.iter_mut().enumerate() {
                let (o, w) = (GROUP_OFFSETS[k], GROUP_WIDTHS[k]);
                let mut p: Vec<f64> = params.iter().flat_map(|g| g.to_array()[o..o + w].to_vec()).collect();
                let d: Vec<f64> = grads.iter().flat_map(|g| g.to_array()[o..o + w].to_vec()).collect();
                opt.step(&mut p, &d, rates[k]);
                for (i, g) in params.iter_mut().enumerate() {
                    let mut a = g.to_array();
                    a[o..o + w].copy_from_slice(&p[i * w..(i + 1) * w]);
                    *g = Gaussian::from_array(&a);
                }
            }
        }
        if self.cfg.learn_background {
            let mut d = [0.0; 3];
            for (i, a) in alpha.iter().enumerate() {
                for ch in 0..3 {
                    d[ch] += grad_image[3 * i + ch] * (1.0 - a);
                }
            }
            self.background_opt.step(&mut self.background, &d, lr.background);
            self.background = self.background.map(|c| c.clamp(0.0, 1.0));
        }
    }

    fn accumulate_densify(&mut self, grads: &SceneGradients, width: usize) {
        if self.cfg.densify.is_none() {
            return;
        }
        // Pixel-space gradients scaled to normalized device coordinates.
        let ndc = 0.5 * width as f64;
        let sets = std::iter::once(&grads.background).chain(grads.actors.iter());
        for (acc, g) in self.densify_acc.iter_mut().zip(sets) {
            for (a, g) in acc.iter_mut().zip(g) {
                if g.screen > 0.0 {
                    a.0 += g.screen * ndc;
                    a.1 += 1;
                }
            }
        }
    }

    fn maybe_densify(&mut self) {
        let Some(d) = self.cfg.densify else { return };
        if self.iteration % d.interval != 0 || self.iteration > d.until {
            return;
        }
        let big = d.split_fraction * self.spatial_scale;
        let mut budget = d.max_gaussians.saturating_sub(self.scene.len());
        let sets = std::iter::once(&mut self.scene.background).chain(self.scene.actors.iter_mut());
        for ((gs, acc), opts) in sets.zip(self.densify_acc.iter_mut()).zip(self.optimizers.iter_mut()) {
            let mut keep = Vec::with_capacity(gs.len());
            let mut added = Vec::new();
            for (i, g) in gs.iter().enumerate() {
                let (sum, n) = acc[i];
                let grown = n > 0 && sum / n as f64 > d.grad_threshold && budget > 0;
                if grown && g.scale().iter().cloned().fold(0.0, f64::max) > big {
                    // Split into two samples drawn from the primitive.
                    let cov_root = crate::geometry::quat_to_matrix(g.unit_rotation()) * Matrix3::from_diagonal(&Vector3::from(g.scale()));
                    for _ in 0..2 {
                        let z = Vector3::new(
                            self.densify_rng.sample::<f64, _>(StandardNormal),
                            self.densify_rng.sample::<f64, _>(StandardNormal),
                            self.densify_rng.sample::<f64, _>(StandardNormal),
                        );
                        let m = g.mean_vec() + cov_root * z;
                        added.push(Gaussian {
                            mean: m.into(),
                            log_scale: g.log_scale.map(|s| s - 1.6f64.ln()),
                            ..*g
                        });
                    }
                    budget = budget.saturating_sub(1);
                    continue;
                }
                if g.opacity() < d.prune_opacity {
                    continue;
                }
                keep.push(i);
                if grown {
                    added.push(*g);
                    budget -= 1;
                }
            }
            let mut next: Vec<Gaussian> = keep.iter().map(|&i| gs[i]).collect();
            next.extend(added.iter().copied());
            for (k, opt) in opts.iter_mut().enumerate() {
                opt.remap(&keep, added.len(), GROUP_WIDTHS[k]);
            }
            *gs = next;
            *acc = vec![(0.0, 0); gs.len()];
        }
    }

    /// Original-trajectory training up to iteration `t_s`.
    pub fn train_initial(&mut self) -> Result<()> {
        let frames = self.bundle.frame_count();
        while self.iteration < self.cfg.t_s {
            let draw = self.sampler.original(frames);
            self.step(draw, None)?;
        }
        Ok(())
    }

    /// Mixed training for `steps` iterations.
    pub fn train_expanded(&mut self, guidance: &GuidanceSet, steps: usize) -> Result<()> {
        if self.cfg.p_novel > 0.0 && guidance.is_empty() {
            return Err(Error::Config("p_novel > 0 requires non-empty guidance".into()));
        }
        let frames = self.bundle.frame_count();
        for _ in 0..steps {
            let draw = self.sampler.expanded(self.cfg.p_novel, frames, guidance.len());
            self.step(draw, Some(guidance))?;
        }
        Ok(())
    }

    pub fn make_guidance(&self, painter: &dyn GuidancePainter) -> Result<GuidanceSet> {
        make_guidance(
            &self.scene,
            &self.render_options(),
            self.bundle,
            painter,
            &self.cfg.novel_offsets,
            &self.cfg.lidar,
        )
    }

    /// Writes `scene.gsb` and `state.json` into `dir`.
    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_scene(&self.scene, &dir.join("scene.gsb"))?;
        let state = TrainState {
            iteration: self.iteration,
            background: self.background,
        };
        crate::scene::write_json(&dir.join("state.json"), &state)
    }
}

/// Scalars stored next to a scene checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub background: [f64; 3],
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    crate::scene::read_json(&dir.join("state.json"))
}

/// Scene after one round, plus the guidance it was trained with.
#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: usize,
    pub iteration: usize,
    pub scene: GaussianScene,
    pub background: [f64; 3],
    pub guidance: GuidanceSet,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub initial: (GaussianScene, [f64; 3]),
    pub rounds: Vec<RoundResult>,
    pub log: Vec<StepRecord>,
}

impl RunResult {
    pub fn final_scene(&self) -> (&GaussianScene, [f64; 3]) {
        let r = self.rounds.last().expect("at least one round");
        (&r.scene, r.background)
    }
}

fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Initial phase, then `rounds` of guidance generation and expanded
/// training. Each round adds `t_e - t_s` iterations. With `out`, writes
/// `metrics.jsonl`, `round_K/scene.gsb`, `round_K/state.json` and the
/// round's guidance cache under `round_K/guidance_cache/`.
pub fn run_rounds(
    scene: GaussianScene,
    bundle: &SceneBundle,
    painter: &dyn GuidancePainter,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<RunResult> {
    let mut trainer = Trainer::new(scene, bundle, cfg.clone())?;
    let metrics = out.map(|d| d.join("metrics.jsonl"));
    if let Some(d) = out {
        fs::create_dir_all(d)?;
        if let Some(m) = &metrics {
            fs::write(m, b"")?;
        }
    }
    trainer.train_initial()?;
    if let Some(m) = &metrics {
        append_log(m, &trainer.log)?;
    }
    let initial = (trainer.scene.clone(), trainer.background);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for k in 1..=cfg.rounds {
        trainer.round = k;
        let mut guidance = if cfg.p_novel > 0.0 {
            trainer.make_guidance(painter)?
        } else {
            GuidanceSet::default()
        };
        let logged = trainer.log.len();
        if let Some(d) = out {
            let cache = d.join(format!("round_{k}")).join("guidance_cache");
            guidance.save(&cache)?;
            guidance = GuidanceSet::load(&cache)?;
        }
        trainer.train_expanded(&guidance, cfg.t_e - cfg.t_s)?;
        if let Some(d) = out {
            trainer.checkpoint(&d.join(format!("round_{k}")))?;
        }
        if let Some(m) = &metrics {
            append_log(m, &trainer.log[logged..])?;
        }
        rounds.push(RoundResult {
            round: k,
            iteration: trainer.iteration,
            scene: trainer.scene.clone(),
            background: trainer.background,
            guidance,
        });
    }
    Ok(RunResult {
        initial,
        rounds,
        log: trainer.log,
    })
}

/// Mean image metrics over a set of views.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub count: usize,
}

/// Renders each `(frame, camera, target)` and averages PSNR, SSIM and L1.
pub fn evaluate_views<'a>(
    scene: &GaussianScene,
    background: [f64; 3],
    views: impl IntoIterator<Item = (usize, &'a Camera, &'a Image)>,
) -> Result<ViewMetrics> {
    let opts = RenderOptions::default().with_background(background);
    let mut m = ViewMetrics::default();
    for (frame, cam, target) in views {
        let img = render(scene, frame, cam, &opts).image;
        m.psnr += psnr(&img, target)?;
        m.ssim += ssim(&img, target)?;
        m.l1 += l1(&img, target)?;
        m.count += 1;
    }
    if m.count > 0 {
        let n = m.count as f64;
        m.psnr /= n;
        m.ssim /= n;
        m.l1 /= n;
    }
    Ok(m)
}

/// Metrics on the bundle's own frames.
pub fn evaluate_training_views(scene: &GaussianScene, background: [f64; 3], bundle: &SceneBundle) -> Result<ViewMetrics> {
    evaluate_views(
        scene,
        background,
        bundle.cameras.iter().zip(&bundle.images).enumerate().map(|(f, (c, i))| (f, c, i)),
    )
}
