//! Image losses and the composite objectives used by the painter and the
//! scene trainer. Every loss has an analytic gradient with respect to its
//! first argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Scalar weights of a composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub regularizer: f64,
}

impl LossWeights {
    /// Painter objective: `0.2 perceptual + 0.6 L2 + 0.4 (1 - SSIM)`.
    pub const PAINTER: LossWeights = LossWeights {
        l1: 0.0,
        l2: 0.6,
        ssim: 0.4,
        perceptual: 0.2,
        regularizer: 0.0,
    };
    /// Original-trajectory objective: `L1 + 0.2 (1 - SSIM) + perceptual + reg`.
    pub const ORIGINAL: LossWeights = LossWeights {
        l1: 1.0,
        l2: 0.0,
        ssim: 0.2,
        perceptual: 1.0,
        regularizer: 1.0,
    };
    /// Inner weights of the novel-view objective, before `λ_novel`.
    pub const NOVEL: LossWeights = LossWeights {
        l1: 1.0,
        l2: 0.0,
        ssim: 0.1,
        perceptual: 1.0,
        regularizer: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.ssim, self.perceptual, self.regularizer];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Argument(format!("loss weights must be >= 0: {self:?}")))
        }
    }

    pub fn scaled(&self, s: f64) -> LossWeights {
        LossWeights {
            l1: self.l1 * s,
            l2: self.l2 * s,
            ssim: self.ssim * s,
            perceptual: self.perceptual * s,
            regularizer: self.regularizer * s,
        }
    }
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn l1_grad(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

pub fn l2(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn l2_grad(a: &Image, b: &Image) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * (x - y) / n).collect())
}

/// Peak signal-to-noise ratio for unit-range images. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = l2(a, b)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (j, kj) in k.iter().enumerate() {
            let src = &tmp[(y + j) * ow..(y + j + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kj * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-grid map back to `w x h`.
fn filter_valid_transpose(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for (j, kj) in k.iter().enumerate() {
            let src = &g[y * ow..(y + 1) * ow];
            let dst = &mut tmp[(y + j) * ow..(y + j + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kj * s;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                out[y * w + x + j] += kj * v;
            }
        }
    }
    out
}

fn check_ssim_shape(a: &Image, b: &Image) -> Result<()> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// SSIM of one channel plane, optionally with the gradient w.r.t. `a`.
fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_window();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let e_aa = filter_valid(&aa, w, h, &k);
    let e_bb = filter_valid(&bb, w, h, &k);
    let e_ab = filter_valid(&ab, w, h, &k);
    let npos = mu_a.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; npos], vec![0.0; npos], vec![0.0; npos])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..npos {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = e_aa[p] - ma * ma;
        let vb = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = va + vb + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let inv = 1.0 / npos as f64;
            g_mu[p] = inv * s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
            g_aa[p] = inv * s * (-1.0 / b2);
            g_ab[p] = inv * s * (2.0 / a2);
        }
    }
    let value = total / npos as f64;
    if !want_grad {
        return (value, None);
    }
    let t_mu = filter_valid_transpose(&g_mu, w, h, &k);
    let t_aa = filter_valid_transpose(&g_aa, w, h, &k);
    let t_ab = filter_valid_transpose(&g_ab, w, h, &k);
    let grad = (0..w * h)
        .map(|q| t_mu[q] + 2.0 * a[q] * t_aa[q] + b[q] * t_ab[q])
        .collect();
    (value, Some(grad))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    check_ssim_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.len()]);
    for c in 0..3 {
        let (v, g) = ssim_plane(&a.channel(c), &b.channel(c), w, h, want_grad);
        value += v / 3.0;
        if let (Some(grad), Some(g)) = (grad.as_mut(), g) {
            for (i, gi) in g.iter().enumerate() {
                grad[3 * i + c] = gi / 3.0;
            }
        }
    }
    Ok((value, grad))
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `ssim(a, b)` and its gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn upsample2_grad(g: &[f64], w: usize, h: usize, full_w: usize, full_h: usize) -> Vec<f64> {
    let mut out = vec![0.0; full_w * full_h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = 0.25 * g[(y * w + x) * 3 + c];
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    out[((2 * y + dy) * full_w + 2 * x + dx) * 3 + c] += v;
                }
            }
        }
    }
    out
}

/// Multi-scale SSIM loss: `1 - mean_s SSIM(a_s, b_s)` over 2x box-pyramid
/// levels that still fit the SSIM window.
pub fn ms_ssim_loss_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_ssim_shape(a, b)?;
    let mut levels = vec![(a.clone(), b.clone())];
    loop {
        let (la, lb) = levels.last().expect("non-empty");
        if la.width / 2 < SSIM_WINDOW || la.height / 2 < SSIM_WINDOW {
            break;
        }
        let next = (la.downsample2(), lb.downsample2());
        levels.push(next);
    }
    let n = levels.len() as f64;
    let mut total = 0.0;
    // Walk from coarsest to finest, pushing gradients up the pyramid.
    let mut carry: Option<Vec<f64>> = None;
    for s in (0..levels.len()).rev() {
        let (la, lb) = &levels[s];
        let (v, mut g) = ssim_with_grad(la, lb)?;
        total += v;
        if let Some(c) = carry.take() {
            let (cw, ch) = (levels[s + 1].0.width, levels[s + 1].0.height);
            let up = upsample2_grad(&c, cw, ch, la.width, la.height);
            g.iter_mut().zip(up).for_each(|(gi, u)| *gi += u);
        }
        carry = Some(g);
    }
    let grad = carry
        .expect("at least one level")
        .into_iter()
        .map(|g| -g / n)
        .collect();
    Ok((1.0 - total / n, grad))
}

/// Pluggable perceptual distance used in the composite objectives.
pub trait PerceptualLoss: Send + Sync {
    /// Loss value and gradient w.r.t. `render`.
    fn value_and_grad(&self, render: &Image, target: &Image) -> Result<(f64, Vec<f64>)>;

    fn value(&self, render: &Image, target: &Image) -> Result<f64> {
        Ok(self.value_and_grad(render, target)?.0)
    }
}

/// Default perceptual term: multi-scale SSIM loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct MsSsimPerceptual;

impl PerceptualLoss for MsSsimPerceptual {
    fn value_and_grad(&self, render: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
        ms_ssim_loss_with_grad(render, target)
    }
}

/// Auxiliary per-pixel buffers available to a regularizer.
#[derive(Debug, Clone, Default)]
pub struct AuxMasks<'a> {
    /// Accumulated opacity of the render, one value per pixel.
    pub alpha: Option<&'a [f64]>,
}

/// Scene regularization hook. The gradient, when present, is w.r.t. the
/// rendered image.
pub trait Regularizer: Send + Sync {
    fn value_and_grad(&self, render: &Image, aux: &AuxMasks<'_>) -> (f64, Option<Vec<f64>>);
}

/// Default regularizer: contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoRegularizer;

impl Regularizer for NoRegularizer {
    fn value_and_grad(&self, _render: &Image, _aux: &AuxMasks<'_>) -> (f64, Option<Vec<f64>>) {
        (0.0, None)
    }
}

/// Per-term breakdown of a weighted loss. Terms are unweighted; `total`
/// applies the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// The two pluggable pieces of a composite objective.
#[derive(Clone, Copy)]
pub struct LossHooks<'a> {
    pub perceptual: &'a dyn PerceptualLoss,
    pub regularizer: &'a dyn Regularizer,
}

impl Default for LossHooks<'static> {
    fn default() -> Self {
        LossHooks {
            perceptual: &MsSsimPerceptual,
            regularizer: &NoRegularizer,
        }
    }
}

/// Weighted sum of the loss terms. With `want_grad`, also returns the
/// gradient of `total` w.r.t. `render`. Zero-weighted terms are skipped.
pub fn weighted_loss(
    render: &Image,
    target: &Image,
    weights: &LossWeights,
    hooks: LossHooks<'_>,
    aux: &AuxMasks<'_>,
    want_grad: bool,
) -> Result<(LossTerms, Option<Vec<f64>>)> {
    weights.validate()?;
    render.check_same_shape(target)?;
    let mut terms = LossTerms::default();
    let mut grad = want_grad.then(|| vec![0.0; render.len()]);
    let add = |grad: &mut Option<Vec<f64>>, w: f64, g: &[f64]| {
        if let Some(grad) = grad.as_mut() {
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
        }
    };
    if weights.l1 > 0.0 {
        terms.l1 = l1(render, target)?;
        if want_grad {
            add(&mut grad, weights.l1, &l1_grad(render, target)?);
        }
    }
    if weights.l2 > 0.0 {
        terms.l2 = l2(render, target)?;
        if want_grad {
            add(&mut grad, weights.l2, &l2_grad(render, target)?);
        }
    }
    if weights.ssim > 0.0 {
        if want_grad {
            let (s, g) = ssim_with_grad(render, target)?;
            terms.ssim = 1.0 - s;
            add(&mut grad, -weights.ssim, &g);
        } else {
            terms.ssim = 1.0 - ssim(render, target)?;
        }
    }
    if weights.perceptual > 0.0 {
        let (p, g) = hooks.perceptual.value_and_grad(render, target)?;
        terms.perceptual = p;
        add(&mut grad, weights.perceptual, &g);
    }
    if weights.regularizer > 0.0 {
        let (r, g) = hooks.regularizer.value_and_grad(render, aux);
        terms.regularizer = r;
        if let Some(g) = g {
            add(&mut grad, weights.regularizer, &g);
        }
    }
    terms.total = weights.l1 * terms.l1
        + weights.l2 * terms.l2
        + weights.ssim * terms.ssim
        + weights.perceptual * terms.perceptual
        + weights.regularizer * terms.regularizer;
    Ok((terms, grad))
}

/// Loss on a captured training view.
pub fn original_loss(render: &Image, gt: &Image, hooks: LossHooks<'_>, aux: &AuxMasks<'_>) -> Result<LossTerms> {
    Ok(weighted_loss(render, gt, &LossWeights::ORIGINAL, hooks, aux, false)?.0)
}

/// Loss against painted novel-view guidance, scaled by `lambda_novel`.
pub fn novel_loss(
    render: &Image,
    guidance: &Image,
    hooks: LossHooks<'_>,
    aux: &AuxMasks<'_>,
    lambda_novel: f64,
) -> Result<LossTerms> {
    if lambda_novel < 0.0 {
        return Err(Error::Argument(format!("lambda_novel must be >= 0, got {lambda_novel}")));
    }
    let weights = LossWeights::NOVEL.scaled(lambda_novel);
    Ok(weighted_loss(render, guidance, &weights, hooks, aux, false)?.0)
}
