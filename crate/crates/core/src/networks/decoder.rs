use rand_chacha::ChaCha8Rng;
use tch::{nn, Kind, Tensor};

use super::config::{DecoderMode, LayerSpec, ModelConfig};
use super::layers::{const_var, lrelu, upsample2x, EqLinear, ModulatedConv2d, NoiseInjection};
use super::NetworkError;
use crate::geometry::{BoxSet, ComponentId, LatentBoxes, Rect};

/// Component scale application order: later components overwrite earlier
/// ones where boxes overlap.
pub const CAM_ORDER: [ComponentId; 4] = [
    ComponentId::Nose,
    ComponentId::LeftEye,
    ComponentId::RightEye,
    ComponentId::Mouth,
];

/// Boolean `[1, 1, R, R]` mask of a box.
pub fn box_mask(b: Rect, resolution: usize) -> Tensor {
    let r = resolution as i64;
    let rows = Tensor::arange(r, (Kind::Int64, tch::Device::Cpu));
    let in_rows = rows.ge(b.top as i64).logical_and(&rows.lt(b.bottom as i64));
    let in_cols = rows.ge(b.left as i64).logical_and(&rows.lt(b.right as i64));
    in_rows
        .view([r, 1])
        .logical_and(&in_cols.view([1, r]))
        .view([1, 1, r, r])
}

/// Multiply features inside each component box by that component's channel
/// scales. `sigmas[i]` is `[B, C]` for component index `i`; `masks[i]` the
/// box mask of component `i`. Cells outside every box are untouched.
pub fn cam_apply(features: &Tensor, sigmas: &[Tensor; 4], masks: &[Tensor; 4]) -> Tensor {
    let s = features.size();
    let mut scale = Tensor::ones([1, 1, 1, 1], (features.kind(), features.device()));
    for c in CAM_ORDER {
        let sigma = sigmas[c.index()].view([s[0], s[1], 1, 1]);
        scale = sigma.where_self(&masks[c.index()], &scale);
    }
    features * scale
}

#[derive(Debug)]
enum Style {
    /// Affine map of the concatenated embeddings.
    Global(EqLinear),
    /// Learned constant style only.
    Constant(Tensor),
    /// Learned constant style plus one affine per component.
    Cam {
        constant: Tensor,
        heads: Vec<EqLinear>,
        masks: [Tensor; 4],
    },
}

#[derive(Debug)]
struct StyledLayer {
    spec: LayerSpec,
    conv: ModulatedConv2d,
    noise: Option<NoiseInjection>,
    bias: Tensor,
    style: Style,
}

#[derive(Debug)]
struct ToRgb {
    conv: ModulatedConv2d,
    bias: Tensor,
    style: Style,
}

/// Per-layer intermediate values recorded by [`Decoder::trace`].
#[derive(Debug, Default)]
pub struct DecoderTrace {
    /// Layer inputs after upsampling, before component modulation.
    pub pre_cam: Vec<Tensor>,
    /// Activations right after component modulation (CAM mode) or right
    /// before the convolution (global mode), one per styled layer.
    pub modulated: Vec<Tensor>,
    pub image: Option<Tensor>,
}

#[derive(Debug)]
pub struct Decoder {
    mode: DecoderMode,
    noise_enabled: bool,
    layers: Vec<StyledLayer>,
    to_rgb: Vec<ToRgb>,
    latent_boxes: Vec<Option<LatentBoxes>>,
    embedding_dim: usize,
}

fn concat(components: &[Tensor; 4]) -> Tensor {
    Tensor::cat(components.as_slice(), 1)
}

impl Style {
    /// `masks = None` builds a style without component modulation (toRGB).
    fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        mode: DecoderMode,
        d: usize,
        channels: usize,
        masks: Option<[Tensor; 4]>,
    ) -> Self {
        match (mode, masks) {
            (DecoderMode::GlobalModulation, _) => {
                Style::Global(EqLinear::new(&(p / "affine"), rng, 4 * d, channels, Some(1.0)))
            }
            (DecoderMode::Cam, None) => Style::Constant(const_var(p, "const_style", &[channels as i64], 1.0)),
            (DecoderMode::Cam, Some(masks)) => Style::Cam {
                constant: const_var(p, "const_style", &[channels as i64], 1.0),
                heads: (0..4)
                    .map(|i| EqLinear::zero_weight(&(p / "cam" / i), d, channels, 1.0))
                    .collect(),
                masks,
            },
        }
    }

    fn conv_style(&self, components: &[Tensor; 4]) -> Tensor {
        match self {
            Style::Global(a) => a.forward(&concat(components)),
            Style::Constant(constant) | Style::Cam { constant, .. } => {
                let b = components[0].size()[0];
                constant.unsqueeze(0).expand([b, -1], false)
            }
        }
    }

    fn sigmas(&self, components: &[Tensor; 4]) -> Option<[Tensor; 4]> {
        match self {
            Style::Global(_) | Style::Constant(_) => None,
            Style::Cam { heads, .. } => Some(std::array::from_fn(|i| heads[i].forward(&components[i]))),
        }
    }
}

impl Decoder {
    pub fn new(
        p: &nn::Path,
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
        boxes: &BoxSet,
    ) -> Result<Self, NetworkError> {
        let mode = config.decoder.mode;
        let d = config.encoder.embedding_dim;
        let specs = config.decoder_layers();
        let mut layers = Vec::new();
        let mut to_rgb = Vec::new();
        let mut latent_boxes = Vec::new();
        for (k, spec) in specs.iter().enumerate() {
            let lp = p / "layers" / k;
            let lb = match (mode, boxes.rescaled(spec.resolution)) {
                (_, Ok(lb)) => Some(lb),
                (DecoderMode::Cam, Err(e)) => return Err(e.into()),
                (DecoderMode::GlobalModulation, Err(_)) => None,
            };
            let masks = lb.map(|lb| std::array::from_fn(|i| box_mask(lb.boxes[i], spec.resolution)));
            latent_boxes.push(lb);
            layers.push(StyledLayer {
                spec: *spec,
                conv: ModulatedConv2d::new(&(&lp / "conv"), rng, spec.in_channels, spec.out_channels, 3, true),
                noise: config
                    .decoder
                    .noise_injection
                    .then(|| NoiseInjection::new(&(&lp / "noise"))),
                bias: const_var(&lp, "bias", &[spec.out_channels as i64], 0.0),
                style: Style::new(&lp, rng, mode, d, spec.in_channels, masks),
            });
            if !spec.upsample {
                let rp = p / "to_rgb" / to_rgb.len();
                to_rgb.push(ToRgb {
                    conv: ModulatedConv2d::new(&(&rp / "conv"), rng, spec.out_channels, 3, 1, false),
                    bias: const_var(&rp, "bias", &[3], 0.0),
                    style: Style::new(&rp, rng, mode, d, spec.out_channels, None),
                });
            }
        }
        Ok(Self {
            mode,
            noise_enabled: config.decoder.noise_injection,
            layers,
            to_rgb,
            latent_boxes,
            embedding_dim: d,
        })
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_resolution(&self, k: usize) -> usize {
        self.layers[k].spec.resolution
    }

    /// Boxes on layer `k`'s grid; `None` when the grid is too coarse to hold
    /// them (global mode only).
    pub fn latent_boxes(&self, k: usize) -> Option<&LatentBoxes> {
        self.latent_boxes[k].as_ref()
    }

    /// Component modulation of layer `k` applied to `features`.
    pub fn apply_cam(&self, k: usize, features: &Tensor, components: &[Tensor; 4]) -> Result<Tensor, NetworkError> {
        let layer = self
            .layers
            .get(k)
            .ok_or_else(|| NetworkError::Shape(format!("no styled layer {k}")))?;
        match (&layer.style, layer.style.sigmas(components)) {
            (Style::Cam { masks, .. }, Some(sigmas)) => Ok(cam_apply(features, &sigmas, masks)),
            _ => Err(NetworkError::Config("component modulation needs a CAM decoder".into())),
        }
    }

    /// Whether noise grids should be supplied during training.
    pub fn uses_noise(&self) -> bool {
        self.noise_enabled
    }

    /// Shapes `[B, 1, R, R]` of the noise grids, one per styled layer.
    pub fn noise_shapes(&self, batch: usize) -> Vec<[i64; 4]> {
        self.layers
            .iter()
            .map(|l| {
                let r = l.spec.resolution as i64;
                [batch as i64, 1, r, r]
            })
            .collect()
    }

    pub fn forward(&self, icon: &Tensor, components: &[Tensor; 4], noise: Option<&[Tensor]>) -> Result<Tensor, NetworkError> {
        let per_layer: Vec<&[Tensor; 4]> = vec![components; self.layers.len()];
        self.run(icon, &per_layer, noise, None)
    }

    /// Each styled layer reads its own component embeddings.
    pub fn forward_layered(
        &self,
        icon: &Tensor,
        per_layer: &[[Tensor; 4]],
        noise: Option<&[Tensor]>,
    ) -> Result<Tensor, NetworkError> {
        if per_layer.len() != self.layers.len() {
            return Err(NetworkError::Shape(format!(
                "{} layer codes for {} styled layers",
                per_layer.len(),
                self.layers.len()
            )));
        }
        let refs: Vec<&[Tensor; 4]> = per_layer.iter().collect();
        self.run(icon, &refs, noise, None)
    }

    pub fn trace(&self, icon: &Tensor, components: &[Tensor; 4]) -> Result<DecoderTrace, NetworkError> {
        let per_layer: Vec<&[Tensor; 4]> = vec![components; self.layers.len()];
        let mut trace = DecoderTrace::default();
        let img = self.run(icon, &per_layer, None, Some(&mut trace))?;
        trace.image = Some(img);
        Ok(trace)
    }

    fn check(&self, icon: &Tensor, components: &[Tensor; 4]) -> Result<(), NetworkError> {
        let b = icon.size()[0];
        for c in components {
            let s = c.size();
            if s.len() != 2 || s[0] != b || s[1] != self.embedding_dim as i64 {
                return Err(NetworkError::Shape(format!(
                    "component embedding shape {s:?}, expected [{b}, {}]",
                    self.embedding_dim
                )));
            }
        }
        let first = &self.layers[0].spec;
        let s = icon.size();
        let want = [b, first.in_channels as i64, first.resolution as i64 / 2, first.resolution as i64 / 2];
        if s != want {
            return Err(NetworkError::Shape(format!("icon shape {s:?}, expected {want:?}")));
        }
        Ok(())
    }

    fn run(
        &self,
        icon: &Tensor,
        per_layer: &[&[Tensor; 4]],
        noise: Option<&[Tensor]>,
        mut trace: Option<&mut DecoderTrace>,
    ) -> Result<Tensor, NetworkError> {
        for comps in per_layer {
            self.check(icon, comps)?;
        }
        let mut x = icon.shallow_clone();
        let mut rgb: Option<Tensor> = None;
        let mut rgb_index = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            let comps = per_layer[k];
            if layer.spec.upsample {
                x = upsample2x(&x);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.pre_cam.push(x.shallow_clone());
            }
            if let (Some(sigmas), Style::Cam { masks, .. }) = (layer.style.sigmas(comps), &layer.style) {
                x = cam_apply(&x, &sigmas, masks);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.modulated.push(x.shallow_clone());
            }
            x = layer.conv.forward(&x, &layer.style.conv_style(comps));
            if let Some(inj) = &layer.noise {
                x = inj.forward(&x, noise.map(|n| &n[k]));
            }
            x = lrelu(&(x + layer.bias.view([1, -1, 1, 1])));
            if !layer.spec.upsample {
                let t = &self.to_rgb[rgb_index];
                rgb_index += 1;
                let y = t.conv.forward(&x, &t.style.conv_style(comps)) + t.bias.view([1, 3, 1, 1]);
                rgb = Some(match rgb {
                    Some(prev) => upsample2x(&prev) + y,
                    None => y,
                });
            }
        }
        Ok(rgb.expect("at least one resolution").sigmoid())
    }
}
