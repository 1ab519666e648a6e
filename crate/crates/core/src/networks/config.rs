use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkError;

/// `channels(res) = clamp(base / res, 1, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSchedule {
    pub base: usize,
    pub max: usize,
}

impl ChannelSchedule {
    pub fn at(&self, resolution: usize) -> usize {
        (self.base / resolution).clamp(1, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_resolution: usize,
    /// Residual downsampling blocks in the backbone.
    pub down_blocks: usize,
    pub channels: ChannelSchedule,
    pub icon_channels: usize,
    pub icon_size: usize,
    pub embedding_dim: usize,
}

impl EncoderConfig {
    pub fn intermediate_resolution(&self) -> usize {
        self.image_resolution >> self.down_blocks
    }

    pub fn intermediate_channels(&self) -> usize {
        self.channels.at(self.intermediate_resolution())
    }

    pub fn icon_shape(&self) -> [usize; 3] {
        [self.icon_channels, self.icon_size, self.icon_size]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoderMode {
    GlobalModulation,
    #[serde(rename = "CAM")]
    Cam,
}

impl DecoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderMode::GlobalModulation => "GlobalModulation",
            DecoderMode::Cam => "CAM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub channels: ChannelSchedule,
    pub noise_injection: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: ChannelSchedule,
}

/// One styled decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
    /// Seed for parameter initialisation and the perceptual extractor.
    pub seed: u64,
}

impl ModelConfig {
    pub fn image_resolution(&self) -> usize {
        self.encoder.image_resolution
    }

    /// Full-size configuration: H=256, 16x16x512 features, 8x8x512 icon.
    pub fn paper(mode: DecoderMode) -> Self {
        let ch = ChannelSchedule { base: 32768, max: 512 };
        Self::build(256, 4, ch, 512, 8, 512, mode)
    }

    /// Desk-scale configuration at H=64 with three backbone blocks.
    pub fn desk(mode: DecoderMode) -> Self {
        let ch = ChannelSchedule { base: 2048, max: 128 };
        Self::build(64, 3, ch, 64, 4, 32, mode)
    }

    /// Small CPU configuration at H=32.
    pub fn toy(mode: DecoderMode) -> Self {
        let ch = ChannelSchedule { base: 512, max: 64 };
        Self::build(32, 2, ch, 16, 4, 16, mode)
    }

    /// Gradient-check configuration: H=16, c=8, d=8.
    pub fn tiny(mode: DecoderMode) -> Self {
        let ch = ChannelSchedule { base: 64, max: 8 };
        Self::build(16, 1, ch, 8, 4, 8, mode)
    }

    fn build(
        resolution: usize,
        down_blocks: usize,
        channels: ChannelSchedule,
        icon_channels: usize,
        icon_size: usize,
        embedding_dim: usize,
        mode: DecoderMode,
    ) -> Self {
        Self {
            encoder: EncoderConfig {
                image_resolution: resolution,
                down_blocks,
                channels,
                icon_channels,
                icon_size,
                embedding_dim,
            },
            decoder: DecoderConfig {
                mode,
                channels,
                noise_injection: true,
            },
            discriminator: DiscriminatorConfig { channels },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let e = &self.encoder;
        let bad = |m: String| Err(NetworkError::Config(m));
        if !e.image_resolution.is_power_of_two() || e.image_resolution < 4 {
            return bad(format!("image resolution {} must be a power of two >= 4", e.image_resolution));
        }
        let h = e.intermediate_resolution();
        if e.down_blocks == 0 || h == 0 || h << e.down_blocks != e.image_resolution {
            return bad(format!(
                "{} backbone blocks do not fit resolution {}",
                e.down_blocks, e.image_resolution
            ));
        }
        if e.icon_size == 0 || e.icon_size > h || !h.is_multiple_of(e.icon_size) || !(h / e.icon_size).is_power_of_two() {
            return bad(format!("icon size {} must divide the feature resolution {h}", e.icon_size));
        }
        if e.icon_size >= e.image_resolution {
            return bad("icon must be smaller than the image".into());
        }
        if e.embedding_dim == 0 || e.icon_channels == 0 {
            return bad("embedding and icon channel counts must be positive".into());
        }
        for ch in [e.channels, self.decoder.channels, self.discriminator.channels] {
            if ch.base == 0 || ch.max == 0 {
                return bad("channel schedule must be positive".into());
            }
        }
        Ok(())
    }

    /// Two styled layers per resolution doubling, from `2 * icon_size` to H.
    pub fn decoder_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut res = self.encoder.icon_size;
        let mut prev = self.encoder.icon_channels;
        while res < self.image_resolution() {
            res *= 2;
            let ch = self.decoder.channels.at(res);
            layers.push(LayerSpec { resolution: res, in_channels: prev, out_channels: ch, upsample: true });
            layers.push(LayerSpec { resolution: res, in_channels: ch, out_channels: ch, upsample: false });
            prev = ch;
        }
        layers
    }

    pub fn num_styled_layers(&self) -> usize {
        self.decoder_layers().len()
    }

    /// Layers at resolutions up to H/8 (at least the first resolution).
    pub fn coarse_layers(&self) -> Vec<usize> {
        let layers = self.decoder_layers();
        let cut = (self.image_resolution() / 8).max(layers[0].resolution);
        (0..layers.len()).filter(|&i| layers[i].resolution <= cut).collect()
    }

    pub fn fine_layers(&self) -> Vec<usize> {
        let coarse = self.coarse_layers();
        (0..self.num_styled_layers()).filter(|i| !coarse.contains(i)).collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
