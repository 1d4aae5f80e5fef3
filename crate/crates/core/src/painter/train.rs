//! Mini-batch training of the painter on (artifact, lidar, target) triples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Grads, PainterModel};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{weighted_loss, AuxMasks, LossHooks, LossWeights};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone)]
pub struct PainterSample {
    pub artifact: Image,
    pub lidar: Image,
    pub target: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PainterTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Steps of noise-prediction pretraining for the predictor before the
    /// reconstruction objective.
    pub pretrain_steps: usize,
}

impl Default for PainterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::ADAM,
            seed: 0,
            pretrain_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PainterTrainReport {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    pub pretrain_losses: Vec<f64>,
}

/// Composite painter objective and its gradient w.r.t. the output tensor.
pub fn painter_loss(output: &Tensor, target: &Image) -> Result<(f64, Tensor)> {
    let img = output.to_image();
    let (terms, grad) = weighted_loss(
        &img,
        target,
        &LossWeights::PAINTER,
        LossHooks::default(),
        &AuxMasks::default(),
        true,
    )?;
    let grad = Image::from_data(img.width, img.height, grad.expect("gradient requested"))?;
    Ok((terms.total, Tensor::from_image(&grad)))
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &PainterModel, sample: &PainterSample) -> Result<(f64, Grads)> {
    let (out, cache) = model.paint_forward(&Tensor::from_image(&sample.artifact), &Tensor::from_image(&sample.lidar))?;
    let (loss, d_out) = painter_loss(&out, &sample.target)?;
    let mut grads = model.zero_grads();
    model.paint_backward(&cache, &d_out, &mut grads);
    Ok((loss, grads))
}

/// Deterministic epoch-shuffled batch order.
struct Batches {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    at: usize,
}

impl Batches {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            at: n,
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.at == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.at = 0;
                }
                self.at += 1;
                self.order[self.at - 1]
            })
            .collect()
    }
}

fn apply(model: &mut PainterModel, opts: &mut [Optimizer], grads: &Grads, lr: f64) {
    for ((block, opt), g) in model.blocks.iter_mut().zip(opts.iter_mut()).zip(&grads.0) {
        opt.step(&mut block.data, g, lr);
    }
}

/// Trains in place. Batches are reduced in sample order, so results do not
/// depend on the worker count.
pub fn train_painter(model: &mut PainterModel, data: &[PainterSample], cfg: &PainterTrainConfig) -> Result<PainterTrainReport> {
    if data.is_empty() {
        return Err(Error::Argument("painter training set is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    let mut report = PainterTrainReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batches = Batches::new(data.len(), ChaCha8Rng::seed_from_u64(rng.random()));

    if cfg.pretrain_steps > 0 {
        let mut opts: Vec<Optimizer> = model.blocks.iter().map(|b| Optimizer::new(cfg.optimizer, b.data.len())).collect();
        let t_max = model.schedule.timesteps();
        for step in 0..cfg.pretrain_steps {
            let idx = batches.next(cfg.batch_size);
            let mut grads = model.zero_grads();
            let mut total = 0.0;
            for &i in &idx {
                let s = &data[i];
                let target = Tensor::from_image(&s.target);
                let (h, w) = (target.height / 8, target.width / 8);
                let t = rng.random_range(1..=t_max);
                let noise = Tensor::from_data(
                    model.config.latent_channels,
                    h,
                    w,
                    (0..model.config.latent_channels * h * w).map(|_| rng.sample(StandardNormal)).collect(),
                )?;
                total += model.noise_prediction_loss(&target, &Tensor::from_image(&s.lidar), t, &noise, &mut grads)?;
            }
            let loss = total / idx.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "non-finite noise-prediction loss".into(),
                });
            }
            grads.scale(1.0 / idx.len() as f64);
            report.pretrain_losses.push(loss);
            apply(model, &mut opts, &grads, cfg.learning_rate);
        }
    }

    let mut opts: Vec<Optimizer> = model.blocks.iter().map(|b| Optimizer::new(cfg.optimizer, b.data.len())).collect();
    for step in 0..cfg.steps {
        let idx = batches.next(cfg.batch_size);
        let per: Vec<Result<(f64, Grads)>> = idx.par_iter().map(|&i| sample_gradients(model, &data[i])).collect();
        let mut grads = model.zero_grads();
        let mut total = 0.0;
        for r in per {
            let (l, g) = r?;
            total += l;
            grads.add(&g);
        }
        let loss = total / idx.len() as f64;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training {
                step,
                message: "non-finite painter loss or gradient".into(),
            });
        }
        grads.scale(1.0 / idx.len() as f64);
        report.losses.push(loss);
        apply(model, &mut opts, &grads, cfg.learning_rate);
    }
    Ok(report)
}

/// Mean per-pixel squared error of painted outputs over a held-out set.
pub fn evaluate_l2(model: &PainterModel, data: &[PainterSample]) -> Result<f64> {
    let per: Vec<Result<f64>> = data
        .par_iter()
        .map(|s| crate::losses::l2(&model.paint(&s.artifact, &s.lidar)?, &s.target))
        .collect();
    let mut total = 0.0;
    for v in per {
        total += v?;
    }
    Ok(total / data.len().max(1) as f64)
}
