//! Fixed facial-component boxes and their rescaling onto feature grids.
//!
//! Boxes are defined once in image space (`BoxSet`) and mapped onto every
//! latent resolution with `ceil((e - r/2) / r)`, `r = H / h`, clamped into
//! `[0, h]`. A rescaled box contains exactly the cells whose centres fall
//! inside the image-space box.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("image resolution {image} is not divisible by grid resolution {grid}")]
    NotDivisible { image: usize, grid: usize },
    #[error("grid resolution {grid} must satisfy 1 <= grid <= {image}")]
    InvalidScale { image: usize, grid: usize },
    #[error("box {rect} is empty or outside the {resolution}x{resolution} grid")]
    OutOfRange { rect: Rect, resolution: usize },
    #[error("box for {component} is empty at resolution {resolution}")]
    Degenerate {
        component: ComponentId,
        resolution: usize,
    },
    #[error("left-eye box {left} is not the mirror of right-eye box {right}")]
    NotMirrored { left: Rect, right: Rect },
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("crop box {rect} does not fit a {height}x{width} grid")]
    CropOutOfRange {
        rect: Rect,
        height: usize,
        width: usize,
    },
}

/// Facial component index. The integer encoding is stable: 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentId {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl ComponentId {
    pub const ALL: [ComponentId; 4] = [
        ComponentId::LeftEye,
        ComponentId::RightEye,
        ComponentId::Nose,
        ComponentId::Mouth,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentId::LeftEye => "left_eye",
            ComponentId::RightEye => "right_eye",
            ComponentId::Nose => "nose",
            ComponentId::Mouth => "mouth",
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentId {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "left_eye" | "0" => Ok(ComponentId::LeftEye),
            "right_eye" | "1" => Ok(ComponentId::RightEye),
            "nose" | "2" => Ok(ComponentId::Nose),
            "mouth" | "3" => Ok(ComponentId::Mouth),
            _ => Err(GeometryError::UnknownComponent(s.to_string())),
        }
    }
}

/// Half-open integer box `[top, bottom) x [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub const fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            bottom,
            right,
        }
    }

    pub fn height(&self) -> usize {
        self.bottom.saturating_sub(self.top)
    }

    pub fn width(&self) -> usize {
        self.right.saturating_sub(self.left)
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.top >= self.bottom || self.left >= self.right
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom && col >= self.left && col < self.right
    }

    /// Non-empty and inside a `resolution x resolution` grid.
    pub fn fits(&self, resolution: usize) -> bool {
        !self.is_empty() && self.bottom <= resolution && self.right <= resolution
    }

    /// Horizontal mirror about the vertical midline of a `width`-wide grid.
    pub fn mirrored(&self, width: usize) -> Rect {
        Rect::new(self.top, width - self.right, self.bottom, width - self.left)
    }

    /// Grow by `by` cells on every side, clipped to the grid.
    pub fn dilated(&self, by: usize, resolution: usize) -> Rect {
        Rect::new(
            self.top.saturating_sub(by),
            self.left.saturating_sub(by),
            (self.bottom + by).min(resolution),
            (self.right + by).min(resolution),
        )
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.top, self.left, self.bottom, self.right]
    }
}

impl From<[usize; 4]> for Rect {
    fn from(a: [usize; 4]) -> Self {
        Rect::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Rect> for [usize; 4] {
    fn from(r: Rect) -> Self {
        r.as_array()
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.top, self.left, self.bottom, self.right
        )
    }
}

fn ceil_div(num: i64, den: i64) -> i64 {
    debug_assert!(den > 0);
    -((-num).div_euclid(den))
}

fn check_scale(image: usize, grid: usize) -> Result<usize, GeometryError> {
    if grid == 0 || grid > image {
        return Err(GeometryError::InvalidScale { image, grid });
    }
    if !image.is_multiple_of(grid) {
        return Err(GeometryError::NotDivisible { image, grid });
    }
    Ok(image / grid)
}

fn rescale_edge(edge: usize, ratio: usize, grid: usize) -> usize {
    // ceil((e - r/2) / r) == ceil((2e - r) / 2r), exact in integers
    let v = ceil_div(2 * edge as i64 - ratio as i64, 2 * ratio as i64);
    v.clamp(0, grid as i64) as usize
}

/// Map an image-space box onto an `grid x grid` feature map of an
/// `image x image` input.
pub fn rescale_box(rect: Rect, image: usize, grid: usize) -> Result<Rect, GeometryError> {
    let ratio = check_scale(image, grid)?;
    if !rect.fits(image) {
        return Err(GeometryError::OutOfRange {
            rect,
            resolution: image,
        });
    }
    let out = Rect::new(
        rescale_edge(rect.top, ratio, grid),
        rescale_edge(rect.left, ratio, grid),
        rescale_edge(rect.bottom, ratio, grid),
        rescale_edge(rect.right, ratio, grid),
    );
    if out.is_empty() {
        return Err(GeometryError::OutOfRange {
            rect: out,
            resolution: grid,
        });
    }
    Ok(out)
}

/// The four component boxes of an aligned face at one resolution,
/// ordered left eye, right eye, nose, mouth.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoxSet {
    resolution: usize,
    boxes: [Rect; 4],
}

impl BoxSet {
    /// Boxes at 256x256 matching the component layout of aligned faces.
    pub const DEFAULT_RESOLUTION: usize = 256;
    pub const DEFAULT_BOXES: [Rect; 4] = [
        Rect::new(84, 56, 132, 120),
        Rect::new(84, 136, 132, 200),
        Rect::new(100, 96, 164, 160),
        Rect::new(160, 76, 212, 180),
    ];

    pub fn new(resolution: usize, boxes: [Rect; 4]) -> Result<Self, GeometryError> {
        for (i, b) in boxes.iter().enumerate() {
            if !b.fits(resolution) {
                return Err(match ComponentId::from_index(i) {
                    Some(component) if b.is_empty() => GeometryError::Degenerate {
                        component,
                        resolution,
                    },
                    _ => GeometryError::OutOfRange {
                        rect: *b,
                        resolution,
                    },
                });
            }
        }
        let (left, right) = (boxes[0], boxes[1]);
        if left != right.mirrored(resolution) {
            return Err(GeometryError::NotMirrored { left, right });
        }
        Ok(Self { resolution, boxes })
    }

    /// Default boxes expressed at image resolution `resolution`
    /// (a divisor of 256). Where rounding breaks the eye symmetry the right
    /// eye is re-derived as the mirror of the left one.
    pub fn default_for(resolution: usize) -> Result<Self, GeometryError> {
        let base = Self::default();
        if resolution == base.resolution {
            return Ok(base);
        }
        let mut boxes = base.rescaled(resolution)?.boxes;
        boxes[1] = boxes[0].mirrored(resolution);
        Self::new(resolution, boxes)
    }

    pub fn image_resolution(&self) -> usize {
        self.resolution
    }

    pub fn boxes(&self) -> &[Rect; 4] {
        &self.boxes
    }

    pub fn get(&self, c: ComponentId) -> Rect {
        self.boxes[c.index()]
    }

    /// Rescale every box onto an `grid x grid` map (no mirror check: the
    /// rounding rule need not preserve symmetry).
    pub fn rescaled(&self, grid: usize) -> Result<LatentBoxes, GeometryError> {
        let ratio = check_scale(self.resolution, grid)?;
        let mut boxes = [Rect::new(0, 0, 0, 0); 4];
        for c in ComponentId::ALL {
            let b = self.get(c);
            let out = Rect::new(
                rescale_edge(b.top, ratio, grid),
                rescale_edge(b.left, ratio, grid),
                rescale_edge(b.bottom, ratio, grid),
                rescale_edge(b.right, ratio, grid),
            );
            if out.is_empty() {
                return Err(GeometryError::Degenerate {
                    component: c,
                    resolution: grid,
                });
            }
            boxes[c.index()] = out;
        }
        Ok(LatentBoxes {
            resolution: grid,
            boxes,
        })
    }
}

impl Default for BoxSet {
    fn default() -> Self {
        Self {
            resolution: Self::DEFAULT_RESOLUTION,
            boxes: Self::DEFAULT_BOXES,
        }
    }
}

/// Component boxes on one feature grid, produced by [`BoxSet::rescaled`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatentBoxes {
    pub resolution: usize,
    pub boxes: [Rect; 4],
}

impl LatentBoxes {
    pub fn get(&self, c: ComponentId) -> Rect {
        self.boxes[c.index()]
    }
}

/// Memoised per-resolution latent boxes for one `BoxSet`.
#[derive(Debug, Clone)]
pub struct BoxPyramid {
    boxes: BoxSet,
    levels: BTreeMap<usize, LatentBoxes>,
}

impl BoxPyramid {
    pub fn new(boxes: BoxSet) -> Self {
        Self {
            boxes,
            levels: BTreeMap::new(),
        }
    }

    pub fn box_set(&self) -> &BoxSet {
        &self.boxes
    }

    pub fn level(&mut self, grid: usize) -> Result<LatentBoxes, GeometryError> {
        if let Some(l) = self.levels.get(&grid) {
            return Ok(*l);
        }
        let l = self.boxes.rescaled(grid)?;
        self.levels.insert(grid, l);
        Ok(l)
    }
}

/// Rescale a whole set onto `grid` (memoisation lives in [`BoxPyramid`]).
pub fn latent_mask(boxes: &BoxSet, grid: usize) -> Result<LatentBoxes, GeometryError> {
    boxes.rescaled(grid)
}

#[derive(Serialize, Deserialize)]
struct BoxSetJson {
    image_resolution: usize,
    boxes: BoxesJson,
}

#[derive(Serialize, Deserialize)]
struct BoxesJson {
    left_eye: Rect,
    right_eye: Rect,
    nose: Rect,
    mouth: Rect,
}

impl Serialize for BoxSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        BoxSetJson {
            image_resolution: self.resolution,
            boxes: BoxesJson {
                left_eye: self.boxes[0],
                right_eye: self.boxes[1],
                nose: self.boxes[2],
                mouth: self.boxes[3],
            },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoxSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let j = BoxSetJson::deserialize(d)?;
        BoxSet::new(
            j.image_resolution,
            [j.boxes.left_eye, j.boxes.right_eye, j.boxes.nose, j.boxes.mouth],
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Dense `channels x height x width` grid of reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Copy of the values inside `rect`, all channels, original order.
    pub fn crop(&self, rect: Rect) -> Result<FeatureGrid, GeometryError> {
        if rect.is_empty() || rect.bottom > self.height || rect.right > self.width {
            return Err(GeometryError::CropOutOfRange {
                rect,
                height: self.height,
                width: self.width,
            });
        }
        Ok(FeatureGrid::from_fn(
            self.channels,
            rect.height(),
            rect.width(),
            |c, y, x| self.at(c, y + rect.top, x + rect.left),
        ))
    }

    /// Write `patch` into this grid at `rect` (inverse of [`crop`](Self::crop)).
    pub fn paste(&mut self, patch: &FeatureGrid, rect: Rect) -> Result<(), GeometryError> {
        if rect.bottom > self.height
            || rect.right > self.width
            || patch.height != rect.height()
            || patch.width != rect.width()
            || patch.channels != self.channels
        {
            return Err(GeometryError::CropOutOfRange {
                rect,
                height: self.height,
                width: self.width,
            });
        }
        for c in 0..self.channels {
            for y in 0..rect.height() {
                for x in 0..rect.width() {
                    self.set(c, y + rect.top, x + rect.left, patch.at(c, y, x));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        // edge 96 -> ceil(5.5) = 6 ; edge 0 -> ceil(-0.5) = 0
        let b = rescale_box(Rect::new(0, 96, 96, 200), 256, 16).unwrap();
        assert_eq!(b.top, 0);
        assert_eq!(b.left, 6);
        assert_eq!(b.bottom, 6);
        let full = rescale_box(Rect::new(0, 0, 256, 256), 256, 8).unwrap();
        assert_eq!(full, Rect::new(0, 0, 8, 8));
    }

    #[test]
    fn identity_resolution() {
        let bs = BoxSet::default();
        let l = latent_mask(&bs, 256).unwrap();
        assert_eq!(&l.boxes, bs.boxes());
    }

    #[test]
    fn golden_default_at_16() {
        // computed with exact rational arithmetic (python fractions)
        let l = latent_mask(&BoxSet::default(), 16).unwrap();
        assert_eq!(
            l.boxes,
            [
                Rect::new(5, 3, 8, 7),
                Rect::new(5, 8, 8, 12),
                Rect::new(6, 6, 10, 10),
                Rect::new(10, 5, 13, 11),
            ]
        );
    }

    #[test]
    fn default_for_desk_resolutions() {
        let b32 = BoxSet::default_for(32).unwrap();
        assert_eq!(b32.get(ComponentId::LeftEye), Rect::new(10, 7, 16, 15));
        assert_eq!(b32.get(ComponentId::Mouth), Rect::new(20, 9, 26, 22));
        let b64 = BoxSet::default_for(64).unwrap();
        assert_eq!(b64.get(ComponentId::RightEye), Rect::new(21, 34, 33, 50));
    }

    #[test]
    fn errors() {
        assert_eq!(
            rescale_box(Rect::new(0, 0, 10, 10), 100, 16),
            Err(GeometryError::NotDivisible {
                image: 100,
                grid: 16
            })
        );
        assert!(matches!(
            rescale_box(Rect::new(0, 0, 300, 10), 256, 16),
            Err(GeometryError::OutOfRange { .. })
        ));
        // a 1-pixel box whose centre misses every coarse cell centre
        let tiny = BoxSet::new(
            256,
            [
                Rect::new(0, 0, 1, 1),
                Rect::new(0, 255, 1, 256),
                Rect::new(10, 10, 20, 20),
                Rect::new(30, 30, 40, 40),
            ],
        )
        .unwrap();
        assert_eq!(
            tiny.rescaled(8),
            Err(GeometryError::Degenerate {
                component: ComponentId::LeftEye,
                resolution: 8
            })
        );
    }

    #[test]
    fn boxset_rejects_asymmetric_eyes() {
        let mut boxes = BoxSet::DEFAULT_BOXES;
        boxes[1].right += 1;
        assert!(matches!(
            BoxSet::new(256, boxes),
            Err(GeometryError::NotMirrored { .. })
        ));
    }

    #[test]
    fn json_round_trip_and_layout() {
        let bs = BoxSet::default();
        let v = serde_json::to_value(&bs).unwrap();
        assert_eq!(v["image_resolution"], 256);
        assert_eq!(v["boxes"]["left_eye"], serde_json::json!([84, 56, 132, 120]));
        let back: BoxSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, bs);
    }

    #[test]
    fn crop_identity_and_constant() {
        let g = FeatureGrid::from_fn(2, 4, 5, |c, y, x| (c * 100 + y * 10 + x) as f64);
        assert_eq!(g.crop(Rect::new(0, 0, 4, 5)).unwrap(), g);
        let k = FeatureGrid::from_fn(3, 6, 6, |_, _, _| 3.0);
        let c = k.crop(Rect::new(1, 2, 4, 5)).unwrap();
        assert_eq!((c.channels, c.height, c.width), (3, 3, 3));
        assert!(c.data.iter().all(|&v| v == 3.0));
        assert!(g.crop(Rect::new(0, 0, 5, 5)).is_err());
    }

    #[test]
    fn pyramid_memoises() {
        let mut p = BoxPyramid::new(BoxSet::default());
        let a = p.level(16).unwrap();
        let b = p.level(16).unwrap();
        assert_eq!(a, b);
        assert!(p.level(48).is_err());
    }

    #[test]
    fn component_names_parse() {
        for c in ComponentId::ALL {
            assert_eq!(c.name().parse::<ComponentId>().unwrap(), c);
            assert_eq!(ComponentId::from_index(c.index()), Some(c));
        }
        assert!("ear".parse::<ComponentId>().is_err());
    }
}
