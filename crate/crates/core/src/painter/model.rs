//! The painter network: a shared strided-conv encoder, a time-conditioned
//! noise predictor over the stacked latents, a pixel-wise fusion attention
//! head, and a skip-connected decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::{denoise_step, DiffusionSchedule, ScheduleConfig};
use super::tensor::{
    sigmoid, sigmoid_backward, silu, silu_backward, upsample2, upsample2_backward, ConvShape, Tensor,
};
use crate::error::{Error, Result};
use crate::image::Image;

/// Which guidance images the painter sees. A missing input is replaced by
/// zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Both,
    ArtifactOnly,
    LidarOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PainterConfig {
    /// Widths of the two full-activation encoder stages.
    pub encoder_channels: [usize; 2],
    pub latent_channels: usize,
    pub predictor_channels: usize,
    pub predictor_blocks: usize,
    pub attention_channels: usize,
    pub time_embedding: usize,
    pub schedule: ScheduleConfig,
    /// Inference timestep.
    pub t_star: usize,
    /// Scale applied to the denoised latent before decoding.
    pub decode_gain: f64,
    pub input_mode: InputMode,
    /// Replaces the attention output with a constant when set.
    pub fusion_override: Option<f64>,
}

impl Default for PainterConfig {
    fn default() -> Self {
        Self::with_widths([32, 64], 8, 48)
    }
}

impl PainterConfig {
    /// Default schedule and `t* = T`, with the given layer widths. The
    /// decode gain normalizes the two denoise coefficients to sum to one.
    pub fn with_widths(encoder_channels: [usize; 2], latent_channels: usize, predictor_channels: usize) -> Self {
        let schedule = ScheduleConfig::default();
        let t_star = schedule.timesteps;
        let mut cfg = Self {
            encoder_channels,
            latent_channels,
            predictor_channels,
            predictor_blocks: 4,
            attention_channels: 2 * latent_channels,
            time_embedding: 16,
            schedule,
            t_star,
            decode_gain: 1.0,
            input_mode: InputMode::Both,
            fusion_override: None,
        };
        cfg.decode_gain = cfg.unit_gain().expect("default schedule is valid");
        cfg
    }

    /// `1 / (k_pred + k_fused)` at `t*`.
    pub fn unit_gain(&self) -> Result<f64> {
        let s = DiffusionSchedule::new(self.schedule)?;
        let (a, b) = s.coefficients(self.t_star)?;
        Ok(1.0 / (a + b))
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.encoder_channels[0],
            self.encoder_channels[1],
            self.latent_channels,
            self.predictor_channels,
            self.attention_channels,
        ];
        if widths.contains(&0) {
            return Err(Error::Config("painter layer widths must be positive".into()));
        }
        if self.time_embedding == 0 || self.time_embedding % 2 != 0 {
            return Err(Error::Config("time_embedding must be a positive even number".into()));
        }
        if self.t_star == 0 || self.t_star > self.schedule.timesteps {
            return Err(Error::Config(format!(
                "t_star {} outside 1..={}",
                self.t_star, self.schedule.timesteps
            )));
        }
        if !self.decode_gain.is_finite() {
            return Err(Error::Config("decode_gain must be finite".into()));
        }
        if let Some(w) = self.fusion_override {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("fusion_override {w} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// A named, flat parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradient storage parallel to a model's parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    shape: ConvShape,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layers {
    enc: [Conv; 3],
    time: Dense,
    pred_in: Conv,
    pred_blocks: Vec<Conv>,
    pred_out: Conv,
    att: [Conv; 2],
    dec: [Conv; 3],
    mix: [Conv; 3],
    out: Conv,
}

struct Builder {
    blocks: Vec<ParamBlock>,
}

impl Builder {
    fn block(&mut self, name: String, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        self.blocks.push(ParamBlock {
            name,
            shape,
            data: vec![0.0; n],
        });
        self.blocks.len() - 1
    }

    fn conv(&mut self, name: &str, shape: ConvShape, bias: bool) -> Conv {
        let weight = self.block(
            format!("{name}.weight"),
            vec![shape.out_channels, shape.in_channels, shape.kernel, shape.kernel],
        );
        let bias = bias.then(|| self.block(format!("{name}.bias"), vec![shape.out_channels]));
        Conv { shape, weight, bias }
    }
}

fn build_layers(cfg: &PainterConfig) -> (Vec<ParamBlock>, Layers) {
    let [c1, c2] = cfg.encoder_channels;
    let cz = cfg.latent_channels;
    let cp = cfg.predictor_channels;
    let ca = cfg.attention_channels;
    let mut b = Builder { blocks: Vec::new() };
    let c3 = |i, o| ConvShape::new(i, o, 3, 1);
    let enc = [
        b.conv("encoder.0", ConvShape::new(3, c1, 3, 2), true),
        b.conv("encoder.1", ConvShape::new(c1, c2, 3, 2), true),
        b.conv("encoder.2", ConvShape::new(c2, cz, 3, 2), true),
    ];
    let time = Dense {
        inputs: cfg.time_embedding,
        outputs: cp,
        weight: b.block("predictor.time.weight".into(), vec![cp, cfg.time_embedding]),
        bias: b.block("predictor.time.bias".into(), vec![cp]),
    };
    let pred_in = b.conv("predictor.in", c3(2 * cz, cp), true);
    let pred_blocks = (0..cfg.predictor_blocks)
        .map(|i| b.conv(&format!("predictor.block{i}"), c3(cp, cp), true))
        .collect();
    let pred_out = b.conv("predictor.out", c3(cp, cz), true);
    let att = [
        b.conv("attention.0", c3(2 * cz, ca), true),
        b.conv("attention.1", c3(ca, 1), true),
    ];
    let dec = [
        b.conv("decoder.2", c3(cz, c2), true),
        b.conv("decoder.1", c3(c2, c1), true),
        b.conv("decoder.0", c3(c1, c1), true),
    ];
    let mix = [
        b.conv("skip.2", ConvShape::new(2 * c2, c2, 1, 1), false),
        b.conv("skip.1", ConvShape::new(2 * c1, c1, 1, 1), false),
        b.conv("skip.0", ConvShape::new(6, c1, 1, 1), false),
    ];
    let out = b.conv("decoder.out", c3(c1, 3), true);
    let layers = Layers {
        enc,
        time,
        pred_in,
        pred_blocks,
        pred_out,
        att,
        dec,
        mix,
        out,
    };
    (b.blocks, layers)
}

/// Encoder activations reused by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Skips {
    /// The encoder input at full resolution.
    pub input: Tensor,
    /// First stage, half resolution.
    pub s1: Tensor,
    /// Second stage, quarter resolution.
    pub s2: Tensor,
}

impl Skips {
    pub fn zeros_like(&self) -> Skips {
        Skips {
            input: self.input.zeros_like(),
            s1: self.s1.zeros_like(),
            s2: self.s2.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub latent: Tensor,
    pub skips: Skips,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    pre1: Tensor,
    pre2: Tensor,
}

#[derive(Debug, Clone)]
pub struct PredictCache {
    input: Tensor,
    /// Residual stream before each block and after the last one.
    stream: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Tensor,
    pre: Tensor,
    hidden: Tensor,
    weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecodeCache {
    levels: Vec<DecodeLevel>,
    top: Tensor,
    output: Tensor,
}

#[derive(Debug, Clone)]
struct DecodeLevel {
    up: Tensor,
    skip: Tensor,
    pre: Tensor,
}

/// Everything `paint_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct PaintCache {
    enc_a: (Encoded, EncodeCache),
    enc_l: (Encoded, EncodeCache),
    predict: PredictCache,
    attention: Option<AttentionCache>,
    weights: Tensor,
    decode: DecodeCache,
    coefficients: (f64, f64),
}

/// Intermediate tensors of one paint pass, for inspection.
#[derive(Debug, Clone)]
pub struct PaintTrace {
    pub latent_artifact: Tensor,
    pub latent_lidar: Tensor,
    pub predicted: Tensor,
    pub weights: Tensor,
    pub fused: Tensor,
    pub denoised: Tensor,
    pub output: Image,
}

#[derive(Debug, Clone)]
pub struct PainterModel {
    pub config: PainterConfig,
    pub schedule: DiffusionSchedule,
    pub blocks: Vec<ParamBlock>,
    layers: Layers,
}

/// Sinusoidal embedding of a timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// `w ⊙ zA + (1 - w) ⊙ zL` with `w` broadcast across channels.
pub fn fuse_latents(za: &Tensor, zl: &Tensor, w: &Tensor) -> Result<Tensor> {
    za.same_shape(zl, "fuse_latents")?;
    if w.channels != 1 || w.height != za.height || w.width != za.width {
        return Err(Error::Shape("fuse_latents: weights must be 1 x H x W".into()));
    }
    let mut out = za.zeros_like();
    let p = za.plane();
    for c in 0..za.channels {
        for i in 0..p {
            let k = c * p + i;
            out.data[k] = w.data[i] * za.data[k] + (1.0 - w.data[i]) * zl.data[k];
        }
    }
    Ok(out)
}

impl PainterModel {
    /// Fresh model with seeded random weights.
    pub fn new(config: PainterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = DiffusionSchedule::new(config.schedule)?;
        let (mut blocks, layers) = build_layers(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut blocks {
            if b.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = b.shape[1..].iter().product();
            let std = (1.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            b.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        // Residual branches start small so the predictor begins near its
        // input projection.
        for conv in &layers.pred_blocks {
            blocks[conv.weight].data.iter_mut().for_each(|v| *v *= 0.1);
        }
        Ok(Self {
            config,
            schedule,
            blocks,
            layers,
        })
    }

    /// Model with the given config whose blocks are filled from `named`,
    /// matched by name and shape.
    pub fn from_blocks(config: PainterConfig, named: Vec<ParamBlock>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter blocks, got {}",
                model.blocks.len(),
                named.len()
            )));
        }
        for (dst, src) in model.blocks.iter_mut().zip(named) {
            if dst.name != src.name || dst.data.len() != src.data.len() {
                return Err(Error::Shape(format!(
                    "parameter block {} ({} values) does not match {} ({} values)",
                    src.name,
                    src.data.len(),
                    dst.name,
                    dst.data.len()
                )));
            }
            dst.data = src.data;
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect())
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    fn conv(&self, c: &Conv, x: &Tensor) -> Tensor {
        let bias = c.bias.map(|b| self.blocks[b].data.as_slice()).unwrap_or(&[]);
        c.shape.forward(&self.blocks[c.weight].data, bias, x)
    }

    fn conv_back(&self, c: &Conv, x: &Tensor, dy: &Tensor, grads: &mut Grads) -> Tensor {
        let mut db = c.bias.map(|b| std::mem::take(&mut grads.0[b])).unwrap_or_default();
        let dx = c.shape.backward(&self.blocks[c.weight].data, x, dy, &mut grads.0[c.weight], &mut db);
        if let Some(b) = c.bias {
            grads.0[b] = db;
        }
        dx
    }

    fn check_image(&self, t: &Tensor) -> Result<()> {
        if t.channels != 3 || t.height == 0 || t.width == 0 || t.height % 8 != 0 || t.width % 8 != 0 {
            return Err(Error::Shape(format!(
                "painter images must be 3 x H x W with H, W positive multiples of 8, got {:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor, what: &str) -> Result<()> {
        if z.channels != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "{what}: expected {} latent channels, got {}",
                self.config.latent_channels, z.channels
            )));
        }
        Ok(())
    }

    // ---- encoder -------------------------------------------------------

    pub fn encode_forward(&self, image: &Tensor) -> Result<(Encoded, EncodeCache)> {
        self.check_image(image)?;
        let [e0, e1, e2] = &self.layers.enc;
        let pre1 = self.conv(e0, image);
        let s1 = pre1.map(silu);
        let pre2 = self.conv(e1, &s1);
        let s2 = pre2.map(silu);
        let latent = self.conv(e2, &s2);
        let skips = Skips {
            input: image.clone(),
            s1,
            s2,
        };
        Ok((Encoded { latent, skips }, EncodeCache { pre1, pre2 }))
    }

    pub fn encode(&self, image: &Image) -> Result<Encoded> {
        Ok(self.encode_forward(&Tensor::from_image(image))?.0)
    }

    /// Accumulates parameter gradients; returns `dL/dimage`.
    pub fn encode_backward(
        &self,
        enc: &Encoded,
        cache: &EncodeCache,
        d_latent: &Tensor,
        d_skips: Option<&Skips>,
        grads: &mut Grads,
    ) -> Tensor {
        let [e0, e1, e2] = &self.layers.enc;
        let mut d_s2 = self.conv_back(e2, &enc.skips.s2, d_latent, grads);
        if let Some(ds) = d_skips {
            d_s2.add_assign(&ds.s2);
        }
        let d_pre2 = silu_backward(&cache.pre2, &d_s2);
        let mut d_s1 = self.conv_back(e1, &enc.skips.s1, &d_pre2, grads);
        if let Some(ds) = d_skips {
            d_s1.add_assign(&ds.s1);
        }
        let d_pre1 = silu_backward(&cache.pre1, &d_s1);
        let mut d_img = self.conv_back(e0, &enc.skips.input, &d_pre1, grads);
        if let Some(ds) = d_skips {
            d_img.add_assign(&ds.input);
        }
        d_img
    }

    // ---- noise predictor ----------------------------------------------

    pub fn predict_noise_forward(&self, za: &Tensor, zl: &Tensor, t: usize) -> Result<(Tensor, PredictCache)> {
        za.same_shape(zl, "predict_noise")?;
        self.check_latent(za, "predict_noise")?;
        self.schedule.check_timestep(t)?;
        let input = Tensor::concat(&[za, zl])?;
        let mut h = self.conv(&self.layers.pred_in, &input);
        let d = &self.layers.time;
        let emb = time_embedding(t, d.inputs);
        let w = &self.blocks[d.weight].data;
        let b = &self.blocks[d.bias].data;
        for o in 0..d.outputs {
            let shift = b[o] + (0..d.inputs).map(|i| w[o * d.inputs + i] * emb[i]).sum::<f64>();
            h.channel_mut(o).iter_mut().for_each(|v| *v += shift);
        }
        let mut stream = vec![h];
        for blk in &self.layers.pred_blocks {
            let last = stream.last().expect("non-empty");
            let mut next = self.conv(blk, &last.map(silu));
            next.add_assign(last);
            stream.push(next);
        }
        let out = self.conv(&self.layers.pred_out, &stream.last().expect("non-empty").map(silu));
        Ok((out, PredictCache { input, stream }))
    }

    pub fn predict_noise(&self, za: &Tensor, zl: &Tensor, t: usize) -> Result<Tensor> {
        Ok(self.predict_noise_forward(za, zl, t)?.0)
    }

    /// Returns `(dL/dzA, dL/dzL)`.
    pub fn predict_noise_backward(&self, cache: &PredictCache, t: usize, d_out: &Tensor, grads: &mut Grads) -> (Tensor, Tensor) {
        let n = cache.stream.len();
        let last = &cache.stream[n - 1];
        let d_act = self.conv_back(&self.layers.pred_out, &last.map(silu), d_out, grads);
        let mut d_h = silu_backward(last, &d_act);
        for (k, blk) in self.layers.pred_blocks.iter().enumerate().rev() {
            let h = &cache.stream[k];
            let d_branch = self.conv_back(blk, &h.map(silu), &d_h, grads);
            d_h.add_assign(&silu_backward(h, &d_branch));
        }
        let d = &self.layers.time;
        let emb = time_embedding(t, d.inputs);
        for o in 0..d.outputs {
            let g: f64 = d_h.channel(o).iter().sum();
            grads.0[d.bias][o] += g;
            for i in 0..d.inputs {
                grads.0[d.weight][o * d.inputs + i] += g * emb[i];
            }
        }
        let d_in = self.conv_back(&self.layers.pred_in, &cache.input, &d_h, grads);
        let cz = self.config.latent_channels;
        let mut parts = d_in.split(&[cz, cz]).into_iter();
        (parts.next().expect("two parts"), parts.next().expect("two parts"))
    }

    // ---- fusion attention ---------------------------------------------

    pub fn attention_forward(&self, za: &Tensor, zl: &Tensor) -> Result<(Tensor, AttentionCache)> {
        za.same_shape(zl, "attention_weights")?;
        self.check_latent(za, "attention_weights")?;
        let input = Tensor::concat(&[za, zl])?;
        let pre = self.conv(&self.layers.att[0], &input);
        let hidden = pre.map(silu);
        let weights = self.conv(&self.layers.att[1], &hidden).map(sigmoid);
        Ok((
            weights.clone(),
            AttentionCache {
                input,
                pre,
                hidden,
                weights,
            },
        ))
    }

    pub fn attention_weights(&self, za: &Tensor, zl: &Tensor) -> Result<Tensor> {
        Ok(self.attention_forward(za, zl)?.0)
    }

    pub fn attention_backward(&self, cache: &AttentionCache, d_w: &Tensor, grads: &mut Grads) -> (Tensor, Tensor) {
        let d_logit = sigmoid_backward(&cache.weights, d_w);
        let d_hidden = self.conv_back(&self.layers.att[1], &cache.hidden, &d_logit, grads);
        let d_pre = silu_backward(&cache.pre, &d_hidden);
        let d_in = self.conv_back(&self.layers.att[0], &cache.input, &d_pre, grads);
        let cz = self.config.latent_channels;
        let mut parts = d_in.split(&[cz, cz]).into_iter();
        (parts.next().expect("two parts"), parts.next().expect("two parts"))
    }

    // ---- decoder ------------------------------------------------------

    fn check_skips(&self, z: &Tensor, s: &Skips) -> Result<()> {
        let [c1, c2] = self.config.encoder_channels;
        let (h, w) = (z.height, z.width);
        let ok = s.s2.shape() == (c2, 2 * h, 2 * w)
            && s.s1.shape() == (c1, 4 * h, 4 * w)
            && s.input.shape() == (3, 8 * h, 8 * w);
        if !ok {
            return Err(Error::Shape("decode: skip activations do not match the latent size".into()));
        }
        Ok(())
    }

    pub fn decode_forward(&self, zd: &Tensor, skips_a: &Skips, skips_l: &Skips) -> Result<(Tensor, DecodeCache)> {
        self.check_latent(zd, "decode")?;
        self.check_skips(zd, skips_a)?;
        self.check_skips(zd, skips_l)?;
        let mut h = zd.scaled(self.config.decode_gain);
        let pairs = [
            (&skips_a.s2, &skips_l.s2),
            (&skips_a.s1, &skips_l.s1),
            (&skips_a.input, &skips_l.input),
        ];
        let mut levels = Vec::with_capacity(3);
        for (k, (sa, sl)) in pairs.into_iter().enumerate() {
            let up = upsample2(&h);
            let skip = Tensor::concat(&[sa, sl])?;
            let mut pre = self.conv(&self.layers.dec[k], &up);
            pre.add_assign(&self.conv(&self.layers.mix[k], &skip));
            h = pre.map(silu);
            levels.push(DecodeLevel { up, skip, pre });
        }
        let output = self.conv(&self.layers.out, &h).map(sigmoid);
        Ok((
            output.clone(),
            DecodeCache {
                levels,
                top: h,
                output,
            },
        ))
    }

    /// Decoded image as a `3 × H × W` tensor in (0, 1).
    pub fn decode(&self, zd: &Tensor, skips_a: &Skips, skips_l: &Skips) -> Result<Tensor> {
        Ok(self.decode_forward(zd, skips_a, skips_l)?.0)
    }

    /// Returns `(dL/dzD, dL/dskips_a, dL/dskips_l)`.
    pub fn decode_backward(&self, cache: &DecodeCache, d_out: &Tensor, grads: &mut Grads) -> (Tensor, Skips, Skips) {
        let d_logit = sigmoid_backward(&cache.output, d_out);
        let mut d_h = self.conv_back(&self.layers.out, &cache.top, &d_logit, grads);
        let [c1, c2] = self.config.encoder_channels;
        let split = [c2, c1, 3];
        let mut d_skip_parts: Vec<(Tensor, Tensor)> = Vec::with_capacity(3);
        for k in (0..3).rev() {
            let lvl = &cache.levels[k];
            let d_pre = silu_backward(&lvl.pre, &d_h);
            let d_skip = self.conv_back(&self.layers.mix[k], &lvl.skip, &d_pre, grads);
            let mut halves = d_skip.split(&[split[k], split[k]]).into_iter();
            d_skip_parts.push((halves.next().expect("two"), halves.next().expect("two")));
            let d_up = self.conv_back(&self.layers.dec[k], &lvl.up, &d_pre, grads);
            d_h = upsample2_backward(&d_up);
        }
        // Levels were visited full resolution first, so popping yields the
        // quarter-resolution skip first.
        let (s2_a, s2_l) = d_skip_parts.pop().expect("quarter level");
        let (s1_a, s1_l) = d_skip_parts.pop().expect("half level");
        let (in_a, in_l) = d_skip_parts.pop().expect("full level");
        let d_zd = d_h.scaled(self.config.decode_gain);
        (
            d_zd,
            Skips {
                input: in_a,
                s1: s1_a,
                s2: s2_a,
            },
            Skips {
                input: in_l,
                s1: s1_l,
                s2: s2_l,
            },
        )
    }

    // ---- full pipeline --------------------------------------------------

    fn masked_inputs(&self, artifact: &Tensor, lidar: &Tensor) -> (Tensor, Tensor) {
        match self.config.input_mode {
            InputMode::Both => (artifact.clone(), lidar.clone()),
            InputMode::ArtifactOnly => (artifact.clone(), lidar.zeros_like()),
            InputMode::LidarOnly => (artifact.zeros_like(), lidar.clone()),
        }
    }

    pub fn paint_forward(&self, artifact: &Tensor, lidar: &Tensor) -> Result<(Tensor, PaintCache)> {
        artifact.same_shape(lidar, "paint inputs")?;
        let (a, l) = self.masked_inputs(artifact, lidar);
        let enc_a = self.encode_forward(&a)?;
        let enc_l = self.encode_forward(&l)?;
        let (za, zl) = (&enc_a.0.latent, &enc_l.0.latent);
        let t = self.config.t_star;
        let (predicted, predict) = self.predict_noise_forward(za, zl, t)?;
        let (weights, attention) = match self.config.fusion_override {
            Some(w) => (Tensor::filled(1, za.height, za.width, w), None),
            None => {
                let (w, c) = self.attention_forward(za, zl)?;
                (w, Some(c))
            }
        };
        let fused = fuse_latents(za, zl, &weights)?;
        let denoised = denoise_step(&predicted, &fused, t, &self.schedule, None)?;
        let (out, decode) = self.decode_forward(&denoised, &enc_a.0.skips, &enc_l.0.skips)?;
        let coefficients = self.schedule.coefficients(t)?;
        Ok((
            out,
            PaintCache {
                enc_a,
                enc_l,
                predict,
                attention,
                weights,
                decode,
                coefficients,
            },
        ))
    }

    /// Backpropagates `d_out` through the whole pipeline into `grads`.
    pub fn paint_backward(&self, cache: &PaintCache, d_out: &Tensor, grads: &mut Grads) {
        let (d_zd, d_skips_a, d_skips_l) = self.decode_backward(&cache.decode, d_out, grads);
        let (kp, kf) = cache.coefficients;
        let d_pred = d_zd.scaled(kp);
        let d_fused = d_zd.scaled(kf);
        let (za, zl) = (&cache.enc_a.0.latent, &cache.enc_l.0.latent);
        let (mut d_za, mut d_zl) = self.predict_noise_backward(&cache.predict, self.config.t_star, &d_pred, grads);
        let p = za.plane();
        let mut d_w = Tensor::zeros(1, za.height, za.width);
        for c in 0..za.channels {
            for i in 0..p {
                let k = c * p + i;
                let w = cache.weights.data[i];
                d_za.data[k] += w * d_fused.data[k];
                d_zl.data[k] += (1.0 - w) * d_fused.data[k];
                d_w.data[i] += d_fused.data[k] * (za.data[k] - zl.data[k]);
            }
        }
        if let Some(att) = &cache.attention {
            let (ga, gl) = self.attention_backward(att, &d_w, grads);
            d_za.add_assign(&ga);
            d_zl.add_assign(&gl);
        }
        self.encode_backward(&cache.enc_a.0, &cache.enc_a.1, &d_za, Some(&d_skips_a), grads);
        self.encode_backward(&cache.enc_l.0, &cache.enc_l.1, &d_zl, Some(&d_skips_l), grads);
    }

    /// Deterministic one-step restoration of `artifact` guided by `lidar`.
    pub fn paint(&self, artifact: &Image, lidar: &Image) -> Result<Image> {
        artifact.check_same_shape(lidar)?;
        let (out, _) = self.paint_forward(&Tensor::from_image(artifact), &Tensor::from_image(lidar))?;
        Ok(out.to_image())
    }

    /// Like [`paint`](Self::paint) but returns every intermediate.
    pub fn paint_traced(&self, artifact: &Image, lidar: &Image) -> Result<PaintTrace> {
        artifact.check_same_shape(lidar)?;
        let (out, cache) = self.paint_forward(&Tensor::from_image(artifact), &Tensor::from_image(lidar))?;
        let za = cache.enc_a.0.latent.clone();
        let zl = cache.enc_l.0.latent.clone();
        let predicted = self.predict_noise(&za, &zl, self.config.t_star)?;
        let fused = fuse_latents(&za, &zl, &cache.weights)?;
        let denoised = denoise_step(&predicted, &fused, self.config.t_star, &self.schedule, None)?;
        Ok(PaintTrace {
            latent_artifact: za,
            latent_lidar: zl,
            predicted,
            weights: cache.weights,
            fused,
            denoised,
            output: out.to_image(),
        })
    }

    /// Noise-prediction objective on the artifact latent: with
    /// `z_t = √α_t E(target) + √β_t ε`, returns `mean (ε_θ((z_t, zL), t) - ε)²`
    /// and accumulates gradients into the predictor only.
    pub fn noise_prediction_loss(
        &self,
        target: &Tensor,
        lidar: &Tensor,
        t: usize,
        noise: &Tensor,
        grads: &mut Grads,
    ) -> Result<f64> {
        let z0 = self.encode_forward(target)?.0.latent;
        let zl = self.encode_forward(lidar)?.0.latent;
        noise.same_shape(&z0, "noise_prediction_loss")?;
        self.schedule.check_timestep(t)?;
        let (sa, sb) = (self.schedule.alpha[t].sqrt(), self.schedule.beta[t].sqrt());
        let mut zt = z0.zeros_like();
        for i in 0..zt.data.len() {
            zt.data[i] = sa * z0.data[i] + sb * noise.data[i];
        }
        let (pred, cache) = self.predict_noise_forward(&zt, &zl, t)?;
        let n = pred.data.len() as f64;
        let mut d = pred.zeros_like();
        let mut loss = 0.0;
        for i in 0..pred.data.len() {
            let r = pred.data[i] - noise.data[i];
            loss += r * r / n;
            d.data[i] = 2.0 * r / n;
        }
        self.predict_noise_backward(&cache, t, &d, grads);
        Ok(loss)
    }
}
