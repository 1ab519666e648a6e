//! Latent face codes and their on-disk JSON form.
//!
//! A [`FaceCode`] is a spatial face icon plus one embedding per component.
//! Codes are plain `f64` data so that latent arithmetic stays independent of
//! the network backend.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ComponentId;

#[derive(Debug, Error)]
pub enum CodeError {
    #[error("code shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("bad base64 payload: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported code format `{0}`")]
    Format(String),
}

/// `channels x size x size` face icon.
#[derive(Debug, Clone, PartialEq)]
pub struct Icon {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl Icon {
    pub fn zeros(channels: usize, size: usize) -> Self {
        Self {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.size, self.size]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCode {
    pub icon: Icon,
    /// Ordered left eye, right eye, nose, mouth.
    pub components: [Vec<f64>; 4],
}

impl FaceCode {
    pub fn new(icon: Icon, components: [Vec<f64>; 4]) -> Result<Self, CodeError> {
        let d = components[0].len();
        if components.iter().any(|c| c.len() != d) {
            return Err(CodeError::Shape(
                "component embeddings must share one length".into(),
            ));
        }
        if icon.data.len() != icon.channels * icon.size * icon.size {
            return Err(CodeError::Shape(format!(
                "icon data has {} values, shape {:?}",
                icon.data.len(),
                icon.shape()
            )));
        }
        let code = Self { icon, components };
        code.check_finite()?;
        Ok(code)
    }

    pub fn embedding_dim(&self) -> usize {
        self.components[0].len()
    }

    pub fn component(&self, c: ComponentId) -> &[f64] {
        &self.components[c.index()]
    }

    pub fn component_mut(&mut self, c: ComponentId) -> &mut Vec<f64> {
        &mut self.components[c.index()]
    }

    /// Concatenated `[z_0, z_1, z_2, z_3]`.
    pub fn concat(&self) -> Vec<f64> {
        self.components.iter().flatten().copied().collect()
    }

    pub fn check_finite(&self) -> Result<(), CodeError> {
        if !self.icon.data.iter().all(|v| v.is_finite()) {
            return Err(CodeError::NonFinite("icon"));
        }
        if !self.components.iter().flatten().all(|v| v.is_finite()) {
            return Err(CodeError::NonFinite("component embeddings"));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &FaceCode) -> bool {
        self.icon.shape() == other.icon.shape() && self.embedding_dim() == other.embedding_dim()
    }
}

/// Per-decoder-layer component embeddings sharing one icon; lets different
/// layers draw a component from different faces.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredCode {
    pub icon: Icon,
    pub layers: Vec<[Vec<f64>; 4]>,
}

impl LayeredCode {
    pub fn uniform(code: &FaceCode, num_layers: usize) -> Self {
        Self {
            icon: code.icon.clone(),
            layers: vec![code.components.clone(); num_layers],
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.layers.windows(2).all(|w| w[0] == w[1])
    }

    /// The code of layer `k` as a plain code.
    pub fn layer(&self, k: usize) -> FaceCode {
        FaceCode {
            icon: self.icon.clone(),
            components: self.layers[k].clone(),
        }
    }

    /// Code-file JSON: the plain code of layer 0 plus every layer's vectors.
    pub fn to_json(&self, name: &str) -> serde_json::Value {
        let mut v = self.layer(0).to_json(name);
        v["layers"] = serde_json::to_value(self.layers.iter().map(ComponentVectorsJson::encode).collect::<Vec<_>>())
            .expect("vectors serialise");
        v
    }

    /// Read a layered code file, or spread a plain one over `num_layers`.
    pub fn from_json(v: &serde_json::Value, num_layers: usize) -> Result<Self, CodeError> {
        let mut j: FaceCodeJson = serde_json::from_value(v.clone())?;
        if j.format != CODE_FORMAT {
            return Err(CodeError::Format(j.format));
        }
        let layers = j.layers.take();
        let base = FaceCode::from_parts(j)?;
        let Some(layers) = layers else {
            return Ok(Self::uniform(&base, num_layers));
        };
        if layers.len() != num_layers {
            return Err(CodeError::Shape(format!("{} layers in file, model has {num_layers}", layers.len())));
        }
        let mut out = Self {
            icon: base.icon,
            layers: Vec::with_capacity(num_layers),
        };
        for l in &layers {
            let components = l.decode()?;
            // reuse the shape checks of plain codes
            FaceCode::new(out.icon.clone(), components.clone())?;
            out.layers.push(components);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), CodeError> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_json(&name))?)?;
        Ok(())
    }

    pub fn load(path: &Path, num_layers: usize) -> Result<Self, CodeError> {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_json(&v, num_layers)
    }
}

pub(crate) fn encode_f64s(v: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub(crate) fn decode_f64s(s: &str) -> Result<Vec<f64>, CodeError> {
    let bytes = B64.decode(s)?;
    if bytes.len() % 8 != 0 {
        return Err(CodeError::Shape(format!(
            "payload of {} bytes is not a list of f64",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Per-component vectors keyed by component name.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentVectorsJson {
    pub left_eye: String,
    pub right_eye: String,
    pub nose: String,
    pub mouth: String,
}

impl ComponentVectorsJson {
    pub fn encode(v: &[Vec<f64>; 4]) -> Self {
        Self {
            left_eye: encode_f64s(&v[0]),
            right_eye: encode_f64s(&v[1]),
            nose: encode_f64s(&v[2]),
            mouth: encode_f64s(&v[3]),
        }
    }

    pub fn decode(&self) -> Result<[Vec<f64>; 4], CodeError> {
        Ok([
            decode_f64s(&self.left_eye)?,
            decode_f64s(&self.right_eye)?,
            decode_f64s(&self.nose)?,
            decode_f64s(&self.mouth)?,
        ])
    }
}

pub const CODE_FORMAT: &str = "facecomp.code.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FaceCodeJson {
    format: String,
    name: String,
    vectors: ComponentVectorsJson,
    icon_shape: [usize; 3],
    icon: String,
    /// Per-layer vectors of a [`LayeredCode`]; absent for plain codes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<ComponentVectorsJson>>,
}

impl FaceCode {
    pub fn to_json(&self, name: &str) -> serde_json::Value {
        serde_json::to_value(FaceCodeJson {
            format: CODE_FORMAT.to_string(),
            name: name.to_string(),
            vectors: ComponentVectorsJson::encode(&self.components),
            icon_shape: self.icon.shape(),
            icon: encode_f64s(&self.icon.data),
            layers: None,
        })
        .expect("code serialises")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, CodeError> {
        let j: FaceCodeJson = serde_json::from_value(v.clone())?;
        if j.format != CODE_FORMAT {
            return Err(CodeError::Format(j.format));
        }
        if j.layers.is_some() {
            return Err(CodeError::Format(format!("{CODE_FORMAT} with per-layer vectors")));
        }
        Self::from_parts(j)
    }

    fn from_parts(j: FaceCodeJson) -> Result<Self, CodeError> {
        let [c, s, s2] = j.icon_shape;
        if s != s2 {
            return Err(CodeError::Shape(format!("icon must be square, got {s}x{s2}")));
        }
        FaceCode::new(
            Icon {
                channels: c,
                size: s,
                data: decode_f64s(&j.icon)?,
            },
            j.vectors.decode()?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), CodeError> {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_json(&name))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodeError> {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_json(&v)
    }
}
