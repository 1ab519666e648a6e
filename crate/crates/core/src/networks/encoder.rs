use rand_chacha::ChaCha8Rng;
use tch::{nn, Tensor};

use super::config::EncoderConfig;
use super::layers::{lrelu, EqConv2d, EqLinear, ResDownBlock};
use super::NetworkError;
use crate::geometry::{BoxSet, LatentBoxes, Rect};

/// Encoder outputs for a batch.
#[derive(Debug)]
pub struct Encoded {
    /// Intermediate feature map `[B, c, h, h]`.
    pub phi: Tensor,
    /// `[B, icon_c, s, s]`.
    pub icon: Tensor,
    /// Four `[B, d]` embeddings.
    pub components: [Tensor; 4],
}

#[derive(Debug)]
pub struct Encoder {
    config: EncoderConfig,
    from_rgb: EqConv2d,
    backbone: Vec<ResDownBlock>,
    icon_block: ResDownBlock,
    icon_out: EqConv2d,
    heads: Vec<EqLinear>,
    latent_boxes: LatentBoxes,
}

impl Encoder {
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        config: &EncoderConfig,
        boxes: &BoxSet,
    ) -> Result<Self, NetworkError> {
        let ch = config.channels;
        let mut res = config.image_resolution;
        let from_rgb = EqConv2d::new(&(p / "from_rgb"), rng, 3, ch.at(res), 1, true);
        let mut backbone = Vec::new();
        for i in 0..config.down_blocks {
            let block = ResDownBlock::new(&(p / "backbone" / i), rng, ch.at(res), ch.at(res / 2), 2);
            backbone.push(block);
            res /= 2;
        }
        let c = ch.at(res);
        let factor = res / config.icon_size;
        let icon_block = ResDownBlock::new(&(p / "icon" / "block"), rng, c, config.icon_channels, factor);
        let icon_out = EqConv2d::new(
            &(p / "icon" / "out"),
            rng,
            config.icon_channels,
            config.icon_channels,
            1,
            true,
        );
        let latent_boxes = boxes.rescaled(res)?;
        let heads = latent_boxes
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                EqLinear::new(&(p / "heads" / i), rng, c * b.area(), config.embedding_dim, Some(0.0))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            from_rgb,
            backbone,
            icon_block,
            icon_out,
            heads,
            latent_boxes,
        })
    }

    pub fn latent_boxes(&self) -> &LatentBoxes {
        &self.latent_boxes
    }

    pub fn backbone(&self, x: &Tensor) -> Tensor {
        let mut h = lrelu(&self.from_rgb.forward(&(x * 2.0 - 1.0)));
        for b in &self.backbone {
            h = b.forward(&h);
        }
        h
    }

    /// `x`: `[B, 3, H, H]` in `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Encoded, NetworkError> {
        let s = x.size();
        let r = self.config.image_resolution as i64;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(NetworkError::Shape(format!("encoder expects [B, 3, {r}, {r}], got {s:?}")));
        }
        let phi = self.backbone(x);
        let icon = self.icon_out.forward(&self.icon_block.forward(&phi));
        let components = std::array::from_fn(|i| {
            let b = self.latent_boxes.boxes[i];
            let crop = crop(&phi, b).flatten(1, -1);
            lrelu(&self.heads[i].forward(&crop))
        });
        Ok(Encoded { phi, icon, components })
    }

    /// Image-space rectangle that can influence the feature cells in `cells`.
    pub fn receptive_field(&self, cells: Rect) -> Rect {
        let (mut top, mut bottom) = (cells.top as i64, cells.bottom as i64 - 1);
        let (mut left, mut right) = (cells.left as i64, cells.right as i64 - 1);
        for b in self.backbone.iter().rev() {
            (top, bottom) = b.receptive_rows(top, bottom);
            (left, right) = b.receptive_rows(left, right);
        }
        let h = self.config.image_resolution as i64;
        let c = |v: i64| v.clamp(0, h) as usize;
        Rect::new(c(top), c(left), c(bottom + 1), c(right + 1))
    }
}

pub fn crop(x: &Tensor, b: Rect) -> Tensor {
    x.narrow(2, b.top as i64, b.height() as i64)
        .narrow(3, b.left as i64, b.width() as i64)
}
