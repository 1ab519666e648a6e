//! Equalized-learning-rate building blocks.
//!
//! Parameters are stored with unit-variance initialisation and scaled by
//! `1/sqrt(fan_in)` at run time. All random initial values come from a
//! seeded ChaCha stream so construction never touches the global torch RNG.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{nn, Kind, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;
pub const DEMOD_EPS: f64 = 1e-8;

pub fn lrelu(x: &Tensor) -> Tensor {
    x.maximum(&(x * LRELU_SLOPE))
}

pub(crate) fn randn_var(p: &nn::Path, name: &str, dims: &[i64], rng: &mut ChaCha8Rng) -> Tensor {
    let n: i64 = dims.iter().product();
    let vals: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    p.var_copy(name, &Tensor::from_slice(&vals).view(dims))
}

pub(crate) fn const_var(p: &nn::Path, name: &str, dims: &[i64], value: f64) -> Tensor {
    p.var(name, dims, nn::Init::Const(value))
}

pub(crate) fn avg_pool(x: &Tensor, factor: i64) -> Tensor {
    if factor == 1 {
        x.shallow_clone()
    } else {
        x.avg_pool2d([factor, factor], [factor, factor], [0, 0], false, true, None::<i64>)
    }
}

pub(crate) fn upsample2x(x: &Tensor) -> Tensor {
    let s = x.size();
    x.upsample_bilinear2d([s[2] * 2, s[3] * 2], false, None, None)
}

#[derive(Debug)]
pub struct EqLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    scale: f64,
}

impl EqLinear {
    /// `bias_init = None` builds a bias-free layer.
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        input: usize,
        output: usize,
        bias_init: Option<f64>,
    ) -> Self {
        let weight = randn_var(p, "weight", &[output as i64, input as i64], rng);
        Self::with_weight(p, weight, input, output, bias_init)
    }

    /// Zero weights: the output equals the bias regardless of input.
    pub fn zero_weight(p: &nn::Path, input: usize, output: usize, bias_init: f64) -> Self {
        let weight = const_var(p, "weight", &[output as i64, input as i64], 0.0);
        Self::with_weight(p, weight, input, output, Some(bias_init))
    }

    fn with_weight(
        p: &nn::Path,
        weight: Tensor,
        input: usize,
        output: usize,
        bias_init: Option<f64>,
    ) -> Self {
        let bias = bias_init.map(|b| const_var(p, "bias", &[output as i64], b));
        Self {
            weight,
            bias,
            scale: 1.0 / (input as f64).sqrt(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.linear(&(&self.weight * self.scale), self.bias.as_ref())
    }
}

#[derive(Debug)]
pub struct EqConv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    scale: f64,
    padding: i64,
}

impl EqConv2d {
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        input: usize,
        output: usize,
        kernel: usize,
        bias: bool,
    ) -> Self {
        let k = kernel as i64;
        let weight = randn_var(p, "weight", &[output as i64, input as i64, k, k], rng);
        let bias = bias.then(|| const_var(p, "bias", &[output as i64], 0.0));
        Self {
            weight,
            bias,
            scale: 1.0 / ((input * kernel * kernel) as f64).sqrt(),
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(
            &(&self.weight * self.scale),
            self.bias.as_ref(),
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }
}

/// Style-modulated convolution with optional weight demodulation.
#[derive(Debug)]
pub struct ModulatedConv2d {
    pub weight: Tensor,
    scale: f64,
    padding: i64,
    demodulate: bool,
}

impl ModulatedConv2d {
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        input: usize,
        output: usize,
        kernel: usize,
        demodulate: bool,
    ) -> Self {
        let k = kernel as i64;
        let weight = randn_var(p, "weight", &[output as i64, input as i64, k, k], rng);
        Self {
            weight,
            scale: 1.0 / ((input * kernel * kernel) as f64).sqrt(),
            padding: k / 2,
            demodulate,
        }
    }

    /// Wraps an explicit `[out, in, k, k]` weight, used unscaled.
    pub fn from_weight(weight: Tensor, demodulate: bool) -> Self {
        let padding = weight.size()[2] / 2;
        Self {
            weight,
            scale: 1.0,
            padding,
            demodulate,
        }
    }

    fn scaled_weight(&self) -> Tensor {
        &self.weight * self.scale
    }

    /// Per-sample effective weights `[B, out, in, k, k]` after modulation and
    /// (if enabled) demodulation.
    pub fn effective_weights(&self, style: &Tensor) -> Tensor {
        let b = style.size()[0];
        let w = self.scaled_weight().unsqueeze(0);
        let w = &w * style.view([b, 1, -1, 1, 1]);
        if self.demodulate {
            let norm = (w.square().sum_dim_intlist([2i64, 3, 4].as_slice(), true, w.kind()) + DEMOD_EPS).rsqrt();
            w * norm
        } else {
            w
        }
    }

    /// `x`: `[B, in, H, W]`, `style`: `[B, in]`.
    ///
    /// Scaling the input by the style and the output by the demodulation
    /// coefficients is algebraically the per-sample grouped convolution with
    /// the effective weights.
    pub fn forward(&self, x: &Tensor, style: &Tensor) -> Tensor {
        let s = style.size();
        let w = self.scaled_weight();
        let xs = x * style.view([s[0], s[1], 1, 1]);
        let y = xs.conv2d(
            &w,
            None::<&Tensor>,
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        );
        if self.demodulate {
            let wsq = w.square().sum_dim_intlist([2i64, 3].as_slice(), false, w.kind());
            let d = (style.square().matmul(&wsq.tr()) + DEMOD_EPS).rsqrt();
            let o = d.size()[1];
            y * d.view([s[0], o, 1, 1])
        } else {
            y
        }
    }
}

/// Learned scalar times a per-pixel unit Gaussian grid.
#[derive(Debug)]
pub struct NoiseInjection {
    pub strength: Tensor,
}

impl NoiseInjection {
    pub fn new(p: &nn::Path) -> Self {
        Self {
            strength: const_var(p, "strength", &[1], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor, noise: Option<&Tensor>) -> Tensor {
        match noise {
            Some(n) => x + &self.strength * n,
            None => x.shallow_clone(),
        }
    }
}

/// Two 3x3 convolutions then average pooling, with a pooled 1x1 skip path.
#[derive(Debug)]
pub struct ResDownBlock {
    conv1: EqConv2d,
    conv2: EqConv2d,
    skip: EqConv2d,
    factor: i64,
}

impl ResDownBlock {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, input: usize, output: usize, factor: usize) -> Self {
        Self {
            conv1: EqConv2d::new(&(p / "conv1"), rng, input, input, 3, true),
            conv2: EqConv2d::new(&(p / "conv2"), rng, input, output, 3, true),
            skip: EqConv2d::new(&(p / "skip"), rng, input, output, 1, false),
            factor: factor as i64,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = lrelu(&self.conv1.forward(x));
        let y = avg_pool(&lrelu(&self.conv2.forward(&y)), self.factor);
        let s = self.skip.forward(&avg_pool(x, self.factor));
        (y + s) * std::f64::consts::FRAC_1_SQRT_2
    }

    /// Input rows covered by output rows `[lo, hi]` (inclusive, unclamped).
    pub fn receptive_rows(&self, lo: i64, hi: i64) -> (i64, i64) {
        (self.factor * lo - 2, self.factor * hi + self.factor - 1 + 2)
    }
}

pub(crate) fn to_vec_f64(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().view([-1])).expect("tensor to Vec<f64>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use tch::Device;

    fn layer(demod: bool, k: usize) -> (nn::VarStore, ModulatedConv2d) {
        let vs = nn::VarStore::new(Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = ModulatedConv2d::new(&vs.root(), &mut rng, 5, 4, k, demod);
        (vs, conv)
    }

    #[test]
    fn forward_matches_grouped_convolution_with_effective_weights() {
        let (_vs, conv) = layer(true, 3);
        let x = Tensor::randn([2, 5, 6, 6], (Kind::Float, Device::Cpu));
        let s = Tensor::rand([2, 5], (Kind::Float, Device::Cpu)) + 0.5;
        let fast = conv.forward(&x, &s);
        let w = conv.effective_weights(&s).view([8, 5, 3, 3]);
        let grouped = x
            .view([1, 10, 6, 6])
            .conv2d(&w, None::<&Tensor>, [1, 1], [1, 1], [1, 1], 2)
            .view([2, 4, 6, 6]);
        let diff = f64::try_from((fast - grouped).abs().max()).unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn lrelu_slope() {
        let x = Tensor::from_slice(&[-2.0f64, 0.0, 3.0]);
        assert_eq!(to_vec_f64(&lrelu(&x)), vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn zero_weight_linear_outputs_bias() {
        let vs = nn::VarStore::new(Device::Cpu);
        let l = EqLinear::zero_weight(&vs.root(), 3, 2, 1.0);
        let y = l.forward(&Tensor::randn([4, 3], (Kind::Float, Device::Cpu)));
        assert_eq!(to_vec_f64(&y), vec![1.0; 8]);
    }
}
