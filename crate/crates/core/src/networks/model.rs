use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{nn, Device, Kind, Tensor};

use super::config::ModelConfig;
use super::decoder::Decoder;
use super::discriminator::Discriminator;
use super::encoder::{Encoded, Encoder};
use super::layers::to_vec_f64;
use super::NetworkError;
use crate::code::{FaceCode, Icon, LayeredCode};
use crate::geometry::BoxSet;
use crate::imaging::{batch_tensor, Image};

const INFERENCE_CHUNK: usize = 64;

/// A batch of codes as tensors.
#[derive(Debug)]
pub struct CodeTensors {
    pub icon: Tensor,
    pub components: [Tensor; 4],
}

impl CodeTensors {
    pub fn from_encoded(e: &Encoded) -> Self {
        Self {
            icon: e.icon.shallow_clone(),
            components: std::array::from_fn(|i| e.components[i].shallow_clone()),
        }
    }

    pub fn from_codes(codes: &[FaceCode], kind: Kind) -> Self {
        let c = &codes[0];
        let b = codes.len() as i64;
        let [ic, is, _] = c.icon.shape();
        let icon: Vec<f64> = codes.iter().flat_map(|c| c.icon.data.iter().copied()).collect();
        let icon = Tensor::from_slice(&icon)
            .view([b, ic as i64, is as i64, is as i64])
            .to_kind(kind);
        let components = std::array::from_fn(|i| {
            let v: Vec<f64> = codes.iter().flat_map(|c| c.components[i].iter().copied()).collect();
            Tensor::from_slice(&v).view([b, -1]).to_kind(kind)
        });
        Self { icon, components }
    }

    pub fn to_codes(&self) -> Vec<FaceCode> {
        let s = self.icon.size();
        let (b, ic, is) = (s[0] as usize, s[1] as usize, s[2] as usize);
        let icon = to_vec_f64(&self.icon.detach());
        let comps: Vec<Vec<f64>> = self.components.iter().map(|t| to_vec_f64(&t.detach())).collect();
        let d = comps[0].len() / b;
        let per = ic * is * is;
        (0..b)
            .map(|n| FaceCode {
                icon: Icon {
                    channels: ic,
                    size: is,
                    data: icon[n * per..(n + 1) * per].to_vec(),
                },
                components: std::array::from_fn(|i| comps[i][n * d..(n + 1) * d].to_vec()),
            })
            .collect()
    }
}

/// Per-layer unit Gaussian grids for noise injection.
#[derive(Debug)]
pub struct NoiseGrids(pub Vec<Tensor>);

impl NoiseGrids {
    pub fn sample(shapes: &[[i64; 4]], rng: &mut ChaCha8Rng, kind: Kind) -> Self {
        NoiseGrids(
            shapes
                .iter()
                .map(|s| {
                    let n: i64 = s.iter().product();
                    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
                    Tensor::from_slice(&v).view(*s).to_kind(kind)
                })
                .collect(),
        )
    }
}

/// Encoder, decoder and discriminator built from one configuration and box
/// set. Encoder and decoder parameters share one variable store so a single
/// optimizer can update them jointly.
#[derive(Debug)]
pub struct FaceModel {
    config: ModelConfig,
    boxes: BoxSet,
    generator_vars: nn::VarStore,
    discriminator_vars: nn::VarStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

impl FaceModel {
    pub fn new(config: ModelConfig, boxes: BoxSet) -> Result<Self, NetworkError> {
        config.validate()?;
        if boxes.image_resolution() != config.image_resolution() {
            return Err(NetworkError::Config(format!(
                "box set is defined at {} but the model runs at {}",
                boxes.image_resolution(),
                config.image_resolution()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator_vars = nn::VarStore::new(Device::Cpu);
        let discriminator_vars = nn::VarStore::new(Device::Cpu);
        let g = generator_vars.root();
        let encoder = Encoder::new(&(&g / "encoder"), &mut rng, &config.encoder, &boxes)?;
        let decoder = Decoder::new(&(&g / "decoder"), &mut rng, &config, &boxes)?;
        let discriminator = Discriminator::new(
            &(discriminator_vars.root() / "discriminator"),
            &mut rng,
            config.image_resolution(),
            config.discriminator.channels,
        );
        Ok(Self {
            config,
            boxes,
            generator_vars,
            discriminator_vars,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn boxes(&self) -> &BoxSet {
        &self.boxes
    }

    pub fn resolution(&self) -> usize {
        self.config.image_resolution()
    }

    /// Encoder and decoder variables.
    pub fn generator_vars(&self) -> &nn::VarStore {
        &self.generator_vars
    }

    pub fn discriminator_vars(&self) -> &nn::VarStore {
        &self.discriminator_vars
    }

    pub fn kind(&self) -> Kind {
        self.generator_vars.kind()
    }

    /// Cast every parameter to 64-bit floats.
    pub fn to_double(&mut self) {
        self.generator_vars.double();
        self.discriminator_vars.double();
    }

    /// All parameters sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<(String, Tensor)> = self
            .generator_vars
            .variables()
            .into_iter()
            .chain(self.discriminator_vars.variables())
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn images_tensor(&self, images: &[&Image]) -> Result<Tensor, NetworkError> {
        let r = self.resolution();
        for img in images {
            img.expect_square(r)
                .map_err(|e| NetworkError::Shape(e.to_string()))?;
        }
        Ok(batch_tensor(images, self.kind(), Device::Cpu))
    }

    pub fn check_code(&self, code: &FaceCode) -> Result<(), NetworkError> {
        let e = &self.config.encoder;
        if code.icon.shape() != e.icon_shape() || code.components.iter().any(|c| c.len() != e.embedding_dim) {
            return Err(NetworkError::Shape(format!(
                "code has icon {:?} and embedding length {}, model expects {:?} and {}",
                code.icon.shape(),
                code.embedding_dim(),
                e.icon_shape(),
                e.embedding_dim
            )));
        }
        code.check_finite()?;
        Ok(())
    }

    /// Encode then decode without noise.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let e = self.encoder.forward(x)?;
        self.decoder.forward(&e.icon, &e.components, None)
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<FaceCode>, NetworkError> {
        let _guard = tch::no_grad_guard();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            let e = self.encoder.forward(&self.images_tensor(chunk)?)?;
            out.extend(CodeTensors::from_encoded(&e).to_codes());
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Image) -> Result<FaceCode, NetworkError> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn decode_batch(&self, codes: &[FaceCode]) -> Result<Vec<Image>, NetworkError> {
        let _guard = tch::no_grad_guard();
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(INFERENCE_CHUNK) {
            for c in chunk {
                self.check_code(c)?;
            }
            let t = CodeTensors::from_codes(chunk, self.kind());
            let img = self.decoder.forward(&t.icon, &t.components, None)?;
            out.extend((0..chunk.len()).map(|i| Image::from_tensor(&img.get(i as i64))));
        }
        Ok(out)
    }

    pub fn decode(&self, code: &FaceCode) -> Result<Image, NetworkError> {
        Ok(self.decode_batch(std::slice::from_ref(code))?.remove(0))
    }

    pub fn decode_layered(&self, code: &LayeredCode) -> Result<Image, NetworkError> {
        let _guard = tch::no_grad_guard();
        if code.layers.len() != self.decoder.num_layers() {
            return Err(NetworkError::Shape(format!(
                "{} layer codes for {} styled layers",
                code.layers.len(),
                self.decoder.num_layers()
            )));
        }
        let per_layer: Vec<[Tensor; 4]> = code
            .layers
            .iter()
            .map(|comps| {
                let fc = FaceCode {
                    icon: code.icon.clone(),
                    components: comps.clone(),
                };
                self.check_code(&fc)?;
                Ok(CodeTensors::from_codes(&[fc], self.kind()).components)
            })
            .collect::<Result<_, NetworkError>>()?;
        let icon = CodeTensors::from_codes(
            &[FaceCode {
                icon: code.icon.clone(),
                components: code.layers[0].clone(),
            }],
            self.kind(),
        )
        .icon;
        let img = self.decoder.forward_layered(&icon, &per_layer, None)?;
        Ok(Image::from_tensor(&img))
    }

    /// Discriminator logits.
    pub fn score(&self, images: &[&Image]) -> Result<Vec<f64>, NetworkError> {
        let _guard = tch::no_grad_guard();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFERENCE_CHUNK) {
            out.extend(to_vec_f64(&self.discriminator.forward(&self.images_tensor(chunk)?)?));
        }
        Ok(out)
    }
}
