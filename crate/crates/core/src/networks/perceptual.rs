//! Frozen feature extractor for the perceptual reconstruction term.
//!
//! A small randomly initialised convolution stack stands in for a pretrained
//! network. Its weights are a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use super::layers::{avg_pool, lrelu, to_vec_f64};

/// Channel widths: RGB input then one entry per feature layer.
pub const CHANNELS: [usize; 4] = [3, 8, 16, 32];

#[derive(Debug)]
pub struct PerceptualExtractor {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl PerceptualExtractor {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_5243);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in CHANNELS.windows(2) {
            let (cin, cout) = (w[0], w[1]);
            let std = 1.0 / ((cin * 9) as f64).sqrt();
            let wv: Vec<f64> = (0..cout * cin * 9)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
                .collect();
            let bv: Vec<f64> = (0..cout).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
            weights.push(Tensor::from_slice(&wv).view([cout as i64, cin as i64, 3, 3]));
            biases.push(Tensor::from_slice(&bv));
        }
        Self { weights, biases }
    }

    /// Activations of every feature layer for `x` in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Vec<Tensor> {
        let kind = x.kind();
        let mut h = x * 2.0 - 1.0;
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if i > 0 {
                h = avg_pool(&h, 2);
            }
            let y = h.conv2d(&w.to_kind(kind), Some(&b.to_kind(kind)), [1, 1], [1, 1], [1, 1], 1);
            h = lrelu(&y);
            out.push(h.shallow_clone());
        }
        out
    }

    /// Mean absolute feature difference, averaged over layers.
    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Tensor {
        let fx = self.features(x);
        let fy = self.features(y);
        let n = fx.len() as f64;
        let mut total = Tensor::zeros([], (x.kind(), x.device()));
        for (a, b) in fx.iter().zip(&fy) {
            total += (a - b).abs().mean(x.kind());
        }
        total / n
    }

    /// `(weights [out, in, 3, 3] flattened, biases)` per layer.
    pub fn parameters(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (to_vec_f64(w), to_vec_f64(b)))
            .collect()
    }

    pub fn kind(&self) -> Kind {
        self.weights[0].kind()
    }
}
