//! Loss suite for adversarial training: hinge GAN objectives, gradient
//! penalty on interpolates, L1 / perceptual pixel terms and their weighted
//! combination.
//!
//! Each loss exists twice: a `_t` builder returning a differentiable tensor
//! (used inside training graphs) and a plain wrapper evaluating it on
//! validated inputs. The wrappers go through the same tensor code, so there
//! is exactly one implementation of each formula.

use crate::error::{Error, Result};
use crate::imagedata::ImageTensor;
use crate::nn::upsample_bilinear_t;
use crate::percept::FeatureExtractor;
use crate::tensor::{grad, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The four scalar loss weights: `total = alpha·pixel + beta·gan`,
/// `pixel = gamma·l1 + delta·perceptual`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.05, gamma: 1.0, delta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidInput("loss weights must not all be zero".into()));
        }
        Ok(())
    }
}

fn scores_leaf(values: &[f64]) -> Tensor {
    Tensor::leaf(ArrayD::from_shape_vec(IxDyn(&[values.len()]), values.to_vec()).unwrap())
}

/// Hinge discriminator loss
/// `−( E[min(0, −1 + real)] + E[min(0, −1 − fake)] )`,
/// equal to `mean(relu(1 − real)) + mean(relu(1 + fake))`. Always ≥ 0.
pub fn gan_loss_d_t(real_scores: &Tensor, fake_scores: &Tensor) -> Tensor {
    let real_term = real_scores.neg().add_scalar(1.0).relu().mean_all();
    let fake_term = fake_scores.add_scalar(1.0).relu().mean_all();
    real_term.add(&fake_term)
}

pub fn gan_loss_d(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(Error::InvalidInput("gan_loss_d: empty score list".into()));
    }
    Ok(gan_loss_d_t(&scores_leaf(real_scores), &scores_leaf(fake_scores)).scalar_value())
}

/// Generator adversarial term `−mean(fake_scores)`; the non-saturating
/// companion to the hinge discriminator loss.
pub fn gan_loss_g_t(fake_scores: &Tensor) -> Tensor {
    fake_scores.mean_all().neg()
}

pub fn gan_loss_g(fake_scores: &[f64]) -> Result<f64> {
    if fake_scores.is_empty() {
        return Err(Error::InvalidInput("gan_loss_g: empty score list".into()));
    }
    Ok(gan_loss_g_t(&scores_leaf(fake_scores)).scalar_value())
}

/// Mean absolute difference.
pub fn l1_loss_t(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

pub fn l1_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::Shape(format!(
            "l1_loss: shape mismatch {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    Ok(a.l1_to(b))
}

/// `λ · E[(‖∇_x̃ score(x̃)‖₂ − 1)²]` over per-sample interpolates
/// `x̃ = ε·real + (1−ε)·fake`, `ε ~ U(0,1)`.
///
/// The returned tensor stays differentiable with respect to any parameters
/// the `score` closure touched — that second-order path is the whole point
/// of the penalty.
pub fn gradient_penalty_t<F>(
    score: F,
    real: &ArrayD<f64>,
    fake: &ArrayD<f64>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Tensor,
{
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "gradient_penalty: batch shapes differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    if n == 0 {
        return Err(Error::InvalidInput("gradient_penalty: empty batch".into()));
    }

    let mut interp = real.clone();
    for i in 0..n {
        let eps: f64 = rng.gen_range(0.0..1.0);
        let mut row = interp.index_axis_mut(ndarray::Axis(0), i);
        let fake_row = fake.index_axis(ndarray::Axis(0), i);
        row.zip_mut_with(&fake_row, |r, &f| *r = eps * *r + (1.0 - eps) * f);
    }

    let x_tilde = Tensor::var(interp);
    let s = score(&x_tilde);
    let total = s.sum_all();
    let g = grad(&total, &[&x_tilde], true).remove(0);
    let axes: Vec<usize> = (1..g.shape().len()).collect();
    let norm = if axes.is_empty() {
        g.abs()
    } else {
        g.square().sum_axes(&axes).sqrt()
    };
    Ok(norm.add_scalar(-1.0).square().mean_all().scale(lambda))
}

pub fn gradient_penalty<F>(
    score: F,
    real: &ArrayD<f64>,
    fake: &ArrayD<f64>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Tensor,
{
    Ok(gradient_penalty_t(score, real, fake, lambda, rng)?.scalar_value())
}

/// Bilinear upscaling `F` used by the pixel loss; only 4× is supported at
/// the image level (16×16 → 64×64).
pub fn upscale_f(lr: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor != 4 {
        return Err(Error::InvalidInput(format!(
            "upscale_f: unsupported factor {factor} (only 4)"
        )));
    }
    if lr.side() != 16 {
        return Err(Error::Shape(format!(
            "upscale_f: expected 16×16 input, got {side}×{side}",
            side = lr.side()
        )));
    }
    let up = upsample_bilinear_t(&Tensor::leaf(lr.to_batch().into_dyn()), factor);
    let arr = up
        .data()
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("upscale_f: rank");
    ImageTensor::from_batch(&arr, 0)
}

/// `gamma·l1(F(lr_fake), hr) + delta·perceptual(F(lr_fake), hr)`. Terms with
/// zero weight are skipped entirely.
pub fn pixel_loss_t(
    hr: &Tensor,
    lr_fake: &Tensor,
    weights: &LossWeights,
    fx: &FeatureExtractor,
    factor: usize,
) -> Tensor {
    if weights.gamma == 0.0 && weights.delta == 0.0 {
        return Tensor::scalar(0.0);
    }
    let up = upsample_bilinear_t(lr_fake, factor);
    let mut total = Tensor::scalar(0.0);
    if weights.gamma != 0.0 {
        total = total.add(&l1_loss_t(&up, hr).scale(weights.gamma));
    }
    if weights.delta != 0.0 {
        total = total.add(&fx.perceptual_distance_t(&up, hr).scale(weights.delta));
    }
    total
}

pub fn pixel_loss(
    hr: &ImageTensor,
    lr_fake: &ImageTensor,
    weights: &LossWeights,
    fx: &FeatureExtractor,
) -> Result<f64> {
    if hr.side() != 64 {
        return Err(Error::Shape(format!(
            "pixel_loss: hr must be 64×64, got {side}×{side}",
            side = hr.side()
        )));
    }
    if lr_fake.side() != 16 {
        return Err(Error::Shape(format!(
            "pixel_loss: lr must be 16×16, got {side}×{side}",
            side = lr_fake.side()
        )));
    }
    let hr_t = Tensor::leaf(hr.to_batch().into_dyn());
    let lr_t = Tensor::leaf(lr_fake.to_batch().into_dyn());
    Ok(pixel_loss_t(&hr_t, &lr_t, weights, fx, 4).scalar_value())
}

/// `alpha·pixel + beta·gan`.
pub fn total_loss(pixel: f64, gan: f64, weights: &LossWeights) -> f64 {
    weights.alpha * pixel + weights.beta * gan
}

pub fn total_loss_t(pixel: &Tensor, gan: &Tensor, weights: &LossWeights) -> Tensor {
    pixel.scale(weights.alpha).add(&gan.scale(weights.beta))
}
