use rand_chacha::ChaCha8Rng;
use tch::{nn, Tensor};

use super::config::ChannelSchedule;
use super::layers::{lrelu, EqConv2d, EqLinear, ResDownBlock};
use super::NetworkError;

/// Residual downsampling discriminator ending in one logit per image.
#[derive(Debug)]
pub struct Discriminator {
    resolution: usize,
    from_rgb: EqConv2d,
    blocks: Vec<ResDownBlock>,
    conv: EqConv2d,
    fc: EqLinear,
    out: EqLinear,
}

impl Discriminator {
    pub fn new(p: &nn::Path, rng: &mut ChaCha8Rng, resolution: usize, ch: ChannelSchedule) -> Self {
        let from_rgb = EqConv2d::new(&(p / "from_rgb"), rng, 3, ch.at(resolution), 1, true);
        let mut blocks = Vec::new();
        let mut res = resolution;
        while res > 4 {
            blocks.push(ResDownBlock::new(&(p / "blocks" / blocks.len()), rng, ch.at(res), ch.at(res / 2), 2));
            res /= 2;
        }
        let c = ch.at(res);
        let conv = EqConv2d::new(&(p / "conv"), rng, c, c, 3, true);
        let fc = EqLinear::new(&(p / "fc"), rng, c * res * res, c, Some(0.0));
        let out = EqLinear::new(&(p / "out"), rng, c, 1, Some(0.0));
        Self {
            resolution,
            from_rgb,
            blocks,
            conv,
            fc,
            out,
        }
    }

    /// `x`: `[B, 3, H, H]` in `[0, 1]`; returns `[B]` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let s = x.size();
        let r = self.resolution as i64;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(NetworkError::Shape(format!("discriminator expects [B, 3, {r}, {r}], got {s:?}")));
        }
        let mut h = lrelu(&self.from_rgb.forward(&(x * 2.0 - 1.0)));
        for b in &self.blocks {
            h = b.forward(&h);
        }
        let h = lrelu(&self.conv.forward(&h)).flatten(1, -1);
        let h = lrelu(&self.fc.forward(&h));
        Ok(self.out.forward(&h).view([-1]))
    }
}
