//! Encoder, styled decoder (global modulation or component adaptive
//! modulation) and discriminator.

pub(crate) mod config;
mod decoder;
mod discriminator;
mod encoder;
pub mod layers;
mod model;
pub mod perceptual;

use thiserror::Error;

pub use config::{
    ChannelSchedule, DecoderConfig, DecoderMode, DiscriminatorConfig, EncoderConfig, LayerSpec, ModelConfig,
};
pub use decoder::{box_mask, cam_apply, Decoder, DecoderTrace, CAM_ORDER};
pub use discriminator::Discriminator;
pub use encoder::{crop, Encoded, Encoder};
pub use layers::{EqConv2d, EqLinear, ModulatedConv2d};
pub use model::{CodeTensors, FaceModel, NoiseGrids};

use crate::code::CodeError;
use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error("torch: {0}")]
    Torch(#[from] tch::TchError),
}
