//! Reconstruction, editing and dataset-bias metrics.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoxSet, ComponentId};
use crate::imaging::Image;
use crate::networks::{FaceModel, NetworkError};
use crate::reasoning::{edit_attribute, AttributeDirection, ReasoningError};
use crate::sprites::{self, measure_sprite};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("region mask for `{0}` selects no pixels")]
    EmptyMask(String),
    #[error("contingency table has a zero marginal: {0:?}")]
    ZeroMarginal([[u64; 2]; 2]),
    #[error("the sprite oracle cannot measure attribute `{0}`")]
    UnsupportedAttribute(String),
    #[error("sample {index} already has `{attribute}` (measured {value:.3})")]
    Precondition {
        index: usize,
        attribute: String,
        value: f64,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

fn check_same(a: &Image, b: &Image) -> Result<(), MetricsError> {
    if a.height != b.height || a.width != b.width || a.data.len() != b.data.len() {
        return Err(MetricsError::Shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn recon_metrics(x: &Image, x_hat: &Image) -> Result<ReconMetrics, MetricsError> {
    check_same(x, x_hat)?;
    let mse = crate::imaging::mse(x, x_hat);
    Ok(ReconMetrics {
        mse,
        psnr: psnr(mse),
        ssim: ssim(x, x_hat)?,
    })
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filter of one channel.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over channels with an 11x11 Gaussian window
/// (sigma 1.5), shrunk to the image size for images smaller than the window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data[ch * h * w..(ch + 1) * h * w].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let (mu_a, _, _) = filter(&pa, h, w, &k);
        let (mu_b, _, _) = filter(&pb, h, w, &k);
        let (aa, _, _) = filter(&prod(&pa, &pa), h, w, &k);
        let (bb, _, _) = filter(&prod(&pb, &pb), h, w, &k);
        let (ab, _, _) = filter(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Components whose boxes an attribute may change.
pub fn attribute_components(attribute: &str) -> Option<&'static [ComponentId]> {
    use ComponentId::*;
    match attribute {
        sprites::MOUTH_OPEN => Some(&[Mouth]),
        sprites::LEFT_EYE_OPEN => Some(&[LeftEye]),
        sprites::RIGHT_EYE_OPEN => Some(&[RightEye]),
        sprites::BUSHY_EYEBROWS => Some(&[LeftEye, RightEye]),
        sprites::BIG_NOSE | sprites::MALE => Some(&[Nose]),
        _ => None,
    }
}

/// Pixels an edit of `attribute` must leave alone: the complement of the
/// union of its components' boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    pub attribute: String,
    pub height: usize,
    pub width: usize,
    /// `true` marks an irrelevant pixel.
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn from_components(attribute: &str, boxes: &BoxSet, components: &[ComponentId]) -> Self {
        let r = boxes.image_resolution();
        let mask = (0..r * r)
            .map(|i| !components.iter().any(|&c| boxes.get(c).contains(i / r, i % r)))
            .collect();
        Self {
            attribute: attribute.to_string(),
            height: r,
            width: r,
            mask,
        }
    }

    pub fn for_attribute(attribute: &str, boxes: &BoxSet) -> Result<Self, MetricsError> {
        let comps = attribute_components(attribute).ok_or_else(|| MetricsError::UnsupportedAttribute(attribute.into()))?;
        Ok(Self::from_components(attribute, boxes, comps))
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Mean squared difference between the reconstruction and the edited image
/// over the irrelevant pixels.
pub fn mse_irr(recon: &Image, edited: &Image, mask: &RegionMask) -> Result<f64, MetricsError> {
    check_same(recon, edited)?;
    if (mask.height, mask.width) != (recon.height, recon.width) {
        return Err(MetricsError::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height, mask.width, recon.height, recon.width
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(MetricsError::EmptyMask(mask.attribute.clone()));
    }
    let plane = recon.height * recon.width;
    let mut sum = 0.0;
    for c in 0..3 {
        for (i, _) in mask.mask.iter().enumerate().filter(|(_, m)| **m) {
            let d = (recon.data[c * plane + i] - edited.data[c * plane + i]) as f64;
            sum += d * d;
        }
    }
    Ok(sum / (3 * n) as f64)
}

/// Mean discriminator score change `D(edited) - D(recon)`.
pub fn ifg(model: &FaceModel, recon: &[Image], edited: &[Image]) -> Result<f64, MetricsError> {
    if recon.len() != edited.len() || recon.is_empty() {
        return Err(MetricsError::Shape(format!("{} reconstructions, {} edits", recon.len(), edited.len())));
    }
    let r = model.score(&recon.iter().collect::<Vec<_>>())?;
    let e = model.score(&edited.iter().collect::<Vec<_>>())?;
    Ok(e.iter().zip(&r).map(|(a, b)| a - b).sum::<f64>() / r.len() as f64)
}

/// Fraction of `sprites` whose measured `attribute` crosses the label
/// threshold after encoding, editing by `alpha` and decoding, per alpha.
pub fn edit_accuracy_sweep(
    model: &FaceModel,
    direction: &AttributeDirection,
    sprites: &[Image],
    attribute: &str,
    alphas: &[f64],
) -> Result<Vec<f64>, MetricsError> {
    let unsupported = || MetricsError::UnsupportedAttribute(attribute.into());
    sprites::MeasuredParams::default().attribute_value(attribute).ok_or_else(unsupported)?;
    if sprites.is_empty() {
        return Err(MetricsError::Shape("no sprites".into()));
    }
    for (index, s) in sprites.iter().enumerate() {
        let value = measure_sprite(s).attribute_value(attribute).ok_or_else(unsupported)?;
        if value >= 0.5 {
            return Err(MetricsError::Precondition {
                index,
                attribute: attribute.into(),
                value,
            });
        }
    }
    let codes = model.encode_batch(&sprites.iter().collect::<Vec<_>>())?;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let edited = codes
            .iter()
            .map(|c| edit_attribute(c, direction, alpha))
            .collect::<Result<Vec<_>, _>>()?;
        let images = model.decode_batch(&edited)?;
        let hits = images
            .iter()
            .filter(|img| measure_sprite(img).attribute_value(attribute).is_some_and(|v| v >= 0.5))
            .count();
        out.push(hits as f64 / sprites.len() as f64);
    }
    Ok(out)
}

pub fn edit_accuracy_sprites(
    model: &FaceModel,
    direction: &AttributeDirection,
    sprites: &[Image],
    attribute: &str,
    alpha: f64,
) -> Result<f64, MetricsError> {
    Ok(edit_accuracy_sweep(model, direction, sprites, attribute, &[alpha])?[0])
}

/// 2x2 counts with labels; rows are the first variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: [[u64; 2]; 2],
    pub row_labels: [String; 2],
    pub col_labels: [String; 2],
}

impl ContingencyTable {
    pub fn new(counts: [[u64; 2]; 2]) -> Self {
        Self {
            counts,
            row_labels: ["+".into(), "-".into()],
            col_labels: ["+".into(), "-".into()],
        }
    }

    pub fn with_labels(mut self, rows: [&str; 2], cols: [&str; 2]) -> Self {
        self.row_labels = rows.map(String::from);
        self.col_labels = cols.map(String::from);
        self
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

impl fmt::Display for ContingencyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .row_labels
            .iter()
            .chain(&self.col_labels)
            .map(|s| s.len())
            .chain(self.counts.iter().flatten().map(|c| c.to_string().len()))
            .max()
            .unwrap_or(1)
            .max(5);
        writeln!(f, "{:>w$}  {:>w$}  {:>w$}", "", self.col_labels[0], self.col_labels[1])?;
        for r in 0..2 {
            writeln!(f, "{:>w$}  {:>w$}  {:>w$}", self.row_labels[r], self.counts[r][0], self.counts[r][1])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub chi2: f64,
    /// Underflows to 0 below the smallest positive double; see `log10_p`.
    pub p_value: f64,
    pub log10_p: f64,
}

/// Pearson's chi-square test of independence with Yates' continuity
/// correction, `n (|ad - bc| - n/2)^2 / ((a+b)(c+d)(a+c)(b+d))`, one degree
/// of freedom.
pub fn chi_square_yates(t: &ContingencyTable) -> Result<ChiSquare, MetricsError> {
    let [[a, b], [c, d]] = t.counts;
    let marginals = [a + b, c + d, a + c, b + d];
    if marginals.contains(&0) {
        return Err(MetricsError::ZeroMarginal(t.counts));
    }
    let n = a + b + c + d;
    // exact integers keep the statistic invariant under row/column swaps
    let (ad, bc) = (a as u128 * d as u128, b as u128 * c as u128);
    let diff2 = 2 * ad.abs_diff(bc);
    let k = diff2.abs_diff(n as u128);
    let den = marginals.iter().try_fold(4u128, |acc, &m| acc.checked_mul(m as u128));
    let num = k.checked_mul(k).and_then(|kk| kk.checked_mul(n as u128));
    let chi2 = match (num, den) {
        (Some(num), Some(den)) => num as f64 / den as f64,
        _ => {
            let m: f64 = marginals.iter().map(|&m| m as f64).product();
            n as f64 * (k as f64 / 2.0).powi(2) / m
        }
    };
    let ln_p = chi2_sf_ln(chi2);
    Ok(ChiSquare {
        chi2,
        p_value: ln_p.exp(),
        log10_p: ln_p / std::f64::consts::LN_10,
    })
}

/// `ln P(X > x)` for `X ~ chi2(1)`, i.e. `ln erfc(sqrt(x / 2))`.
pub fn chi2_sf_ln(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ln_erfc((x / 2.0).sqrt())
}

/// `ln erfc(z)`, accurate where `erfc` itself underflows.
pub fn ln_erfc(z: f64) -> f64 {
    if z < 3.0 {
        return libm::erfc(z).ln();
    }
    // erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + (1/2)/(z + 1/(z + (3/2)/(z + ...))))
    // evaluated with the modified Lentz algorithm
    let tiny = 1e-300;
    let mut f = z;
    let mut c = z;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64 / 2.0;
        d = z + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = z + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    -z * z - 0.5 * std::f64::consts::PI.ln() - f.ln()
}
