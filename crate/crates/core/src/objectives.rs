//! Reconstruction, adversarial and R1 losses.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};
use thiserror::Error;

use crate::networks::perceptual::PerceptualExtractor;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<i64>, Vec<i64>),
    #[error("gradient with respect to the input is unavailable: {0}")]
    GradientUnavailable(String),
}

/// Weights of the loss terms (all 1 by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 1.0,
            adversarial: 1.0,
            r1_gamma: 10.0,
            r1_interval: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1_pixel: f64,
    pub perceptual: f64,
    pub g_adv: f64,
    pub d_adv: f64,
    /// Unscaled penalty on steps where it was applied, else 0.
    pub r1: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// Fill in the totals from the individual terms.
    pub fn new(l1_pixel: f64, perceptual: f64, g_adv: f64, d_adv: f64, r1: f64, r1_scale: f64, w: &LossWeights) -> Self {
        let (total_g, total_d) = total_losses(l1_pixel, perceptual, g_adv, d_adv, r1 * r1_scale, w);
        Self {
            l1_pixel,
            perceptual,
            g_adv,
            d_adv,
            r1,
            total_g,
            total_d,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l1_pixel, self.perceptual, self.g_adv, self.d_adv, self.r1, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `(total for encoder+decoder, total for discriminator)`.
pub fn total_losses(l1: f64, perceptual: f64, g_adv: f64, d_adv: f64, r1: f64, w: &LossWeights) -> (f64, f64) {
    (
        w.l1 * l1 + w.perceptual * perceptual + w.adversarial * g_adv,
        w.adversarial * d_adv + r1,
    )
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), ObjectiveError> {
    if a.size() != b.size() {
        return Err(ObjectiveError::Shape(a.size(), b.size()));
    }
    Ok(())
}

/// `(mean |x - x_hat|, perceptual distance or 0)`.
pub fn recon_loss(
    x: &Tensor,
    x_hat: &Tensor,
    extractor: Option<&PerceptualExtractor>,
) -> Result<(Tensor, Tensor), ObjectiveError> {
    same_shape(x, x_hat)?;
    let l1 = (x - x_hat).abs().mean(x.kind());
    let perceptual = match extractor {
        Some(e) => e.distance(x, x_hat),
        None => Tensor::zeros([], (x.kind(), x.device())),
    };
    Ok((l1, perceptual))
}

/// Non-saturating generator loss `mean softplus(-fake)`.
pub fn generator_adv(fake: &Tensor) -> Tensor {
    (-fake).softplus().mean(fake.kind())
}

/// Discriminator loss `mean softplus(-real) + mean softplus(fake)`.
pub fn discriminator_adv(real: &Tensor, fake: &Tensor) -> Tensor {
    (-real).softplus().mean(real.kind()) + fake.softplus().mean(fake.kind())
}

/// `(g_adv, d_adv)`.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> (Tensor, Tensor) {
    (generator_adv(fake), discriminator_adv(real, fake))
}

/// `gamma / 2 * mean_b |d score_b / d x_b|^2`. The graph is kept so the
/// penalty can itself be differentiated.
pub fn r1_penalty(
    score: impl Fn(&Tensor) -> Tensor,
    real: &Tensor,
    gamma: f64,
) -> Result<Tensor, ObjectiveError> {
    let x = real.detach().set_requires_grad(true);
    let s = score(&x);
    if !s.requires_grad() {
        return Err(ObjectiveError::GradientUnavailable(
            "critic output does not depend on its input".into(),
        ));
    }
    let grads = Tensor::f_run_backward(&[s.sum(s.kind())], &[&x], true, true)
        .map_err(|e| ObjectiveError::GradientUnavailable(e.to_string()))?;
    let g = &grads[0];
    let per_sample = g.square().sum_dim_intlist([1i64, 2, 3].as_slice(), false, g.kind());
    Ok(per_sample.mean(g.kind()) * (gamma / 2.0))
}

/// Multiplier of the R1 penalty at `step` under the lazy schedule: the
/// interval length on every `interval`-th step, else 0 (interval 0 disables).
pub fn r1_scale(step: u64, interval: usize) -> f64 {
    if interval > 0 && step.is_multiple_of(interval as u64) {
        interval as f64
    } else {
        0.0
    }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn full(v: f64, shape: &[i64]) -> Tensor {
        Tensor::full(shape, v, (Kind::Double, Device::Cpu))
    }

    #[test]
    fn identical_images_have_zero_recon_loss() {
        let x = Tensor::rand([2, 3, 8, 8], (Kind::Double, Device::Cpu));
        let e = PerceptualExtractor::random(0);
        let (l1, p) = recon_loss(&x, &x, Some(&e)).unwrap();
        assert_eq!((scalar(&l1), scalar(&p)), (0.0, 0.0));
    }

    #[test]
    fn black_vs_white_l1_is_one_and_perceptual_absent_is_zero() {
        let (l1, p) = recon_loss(&full(0.0, &[1, 3, 4, 4]), &full(1.0, &[1, 3, 4, 4]), None).unwrap();
        assert_eq!(scalar(&l1), 1.0);
        assert_eq!(scalar(&p), 0.0);
        assert!(recon_loss(&full(0.0, &[1, 3, 4, 4]), &full(0.0, &[1, 3, 4, 5]), None).is_err());
    }

    #[test]
    fn adversarial_at_zero_logits() {
        let (g, d) = adversarial_losses(&full(0.0, &[4]), &full(0.0, &[4]));
        assert!((scalar(&d) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&g) - 2f64.ln()).abs() < 1e-12);
        let (_, d) = adversarial_losses(&full(50.0, &[2]), &full(-50.0, &[2]));
        assert!(scalar(&d) < 1e-20);
    }

    #[test]
    fn generator_gradient_at_zero_is_minus_half() {
        let f = full(0.0, &[1]).set_requires_grad(true);
        let g = Tensor::run_backward(&[generator_adv(&f)], &[&f], false, false);
        assert!((scalar(&g[0].sum(Kind::Double)) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn d_total_decreases_as_real_scores_rise() {
        let fake = full(0.3, &[3]);
        let mut prev = f64::INFINITY;
        for r in [-2.0, -0.5, 0.0, 1.0, 4.0] {
            let d = scalar(&discriminator_adv(&full(r, &[3]), &fake));
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn r1_of_constant_and_linear_critics() {
        let x = Tensor::rand([2, 3, 4, 4], (Kind::Double, Device::Cpu));
        let constant = r1_penalty(|x| x.sum_dim_intlist([1i64, 2, 3].as_slice(), false, Kind::Double) * 0.0 + 3.0, &x, 10.0)
            .unwrap();
        assert_eq!(scalar(&constant), 0.0);
        let linear = r1_penalty(|x| x.sum_dim_intlist([1i64, 2, 3].as_slice(), false, Kind::Double), &x, 10.0).unwrap();
        assert!((scalar(&linear) - 5.0 * 48.0).abs() < 1e-9);
        assert!(r1_penalty(|_| full(1.0, &[2]), &x, 10.0).is_err());
    }

    #[test]
    fn totals_are_unit_weighted_sums() {
        let w = LossWeights::default();
        assert_eq!(total_losses(0.0, 0.0, 0.0, 0.0, 0.0, &w), (0.0, 0.0));
        let (g, _) = total_losses(0.5, 0.2, 0.3, 0.0, 0.0, &w);
        assert!((g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_the_batch_keeps_mean_losses() {
        let x = Tensor::rand([2, 3, 4, 4], (Kind::Double, Device::Cpu));
        let y = Tensor::rand([2, 3, 4, 4], (Kind::Double, Device::Cpu));
        let (a, _) = recon_loss(&x, &y, None).unwrap();
        let (b, _) = recon_loss(&Tensor::cat(&[&x, &x], 0), &Tensor::cat(&[&y, &y], 0), None).unwrap();
        assert!((scalar(&a) - scalar(&b)).abs() < 1e-12);
        let s = Tensor::rand([3], (Kind::Double, Device::Cpu));
        let (g1, d1) = adversarial_losses(&s, &s);
        let ss = Tensor::cat(&[&s, &s], 0);
        let (g2, d2) = adversarial_losses(&ss, &ss);
        assert!((scalar(&g1) - scalar(&g2)).abs() < 1e-12);
        assert!((scalar(&d1) - scalar(&d2)).abs() < 1e-12);
    }
}
