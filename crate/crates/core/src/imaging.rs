//! Planar RGB images in `[0, 1]` and their conversions.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, ImageFormat, RgbImage};
use tch::{Device, Kind, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("expected a 3x{expected}x{expected} image, got 3x{height}x{width}")]
    Shape {
        expected: usize,
        height: usize,
        width: usize,
    },
}

/// RGB image stored channel-major (`3 x height x width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for c in 0..3 {
            img.channel_mut(c).fill(rgb[c]);
        }
        img
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn expect_square(&self, resolution: usize) -> Result<(), ImageError> {
        if self.height != resolution || self.width != resolution {
            return Err(ImageError::Shape {
                expected: resolution,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut out = Self::new(h, w);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Decode any supported image and resize to `resolution x resolution`.
    pub fn load(path: &Path, resolution: usize) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&resize(img, resolution)))
    }

    pub fn from_png_bytes(bytes: &[u8], resolution: Option<usize>) -> Result<Self, ImageError> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let img = match resolution {
            Some(r) => resize(img, r),
            None => img,
        };
        Ok(Self::from_rgb8(&img))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8().save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// `1 x 3 x H x W` float tensor.
    pub fn to_tensor(&self, kind: Kind, device: Device) -> Tensor {
        Tensor::from_slice(&self.data)
            .view([1, 3, self.height as i64, self.width as i64])
            .to_kind(kind)
            .to_device(device)
    }

    /// Read one image out of a `N x 3 x H x W` (or `3 x H x W`) tensor.
    pub fn from_tensor(t: &Tensor) -> Self {
        let t = if t.dim() == 4 { t.get(0) } else { t.shallow_clone() };
        let size = t.size();
        let (h, w) = (size[1] as usize, size[2] as usize);
        let data: Vec<f32> = Vec::<f32>::try_from(
            t.to_kind(Kind::Float)
                .to_device(Device::Cpu)
                .contiguous()
                .view([-1]),
        )
        .expect("float tensor converts to Vec<f32>");
        Self {
            height: h,
            width: w,
            data,
        }
    }
}

fn resize(img: RgbImage, resolution: usize) -> RgbImage {
    if img.width() as usize == resolution && img.height() as usize == resolution {
        img
    } else {
        image::imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle)
    }
}

/// Stack images into a `N x 3 x H x W` tensor.
pub fn batch_tensor(images: &[&Image], kind: Kind, device: Device) -> Tensor {
    let (h, w) = (images[0].height as i64, images[0].width as i64);
    let mut flat = Vec::with_capacity(images.len() * images[0].data.len());
    for img in images {
        flat.extend_from_slice(&img.data);
    }
    Tensor::from_slice(&flat)
        .view([images.len() as i64, 3, h, w])
        .to_kind(kind)
        .to_device(device)
}

/// Mean squared difference between two equally shaped images.
pub fn mse(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64
}
