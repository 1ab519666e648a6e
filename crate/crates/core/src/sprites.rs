//! Synthetic face sprites with ground-truth component parameters, the
//! matching measurement oracle, irregular input masks and dataset IO.
//!
//! All glyph geometry is expressed in 256-unit face coordinates and scaled to
//! the requested resolution, so every glyph sits inside its component box of
//! [`BoxSet::default`]. Pixels are area-sampled, which keeps the measurement
//! oracle linear in glyph area.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::geometry::{BoxSet, ComponentId};
use crate::imaging::{Image, ImageError};

#[derive(Debug, Error)]
pub enum SpriteError {
    #[error("sprite parameter `{field}` = {value} outside [{min}, {max}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("unsupported sprite resolution {0} (use 32, 64, 128 or 256)")]
    Resolution(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    Ratios([f64; 3]),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("params line {line}: {source}")]
    Params {
        line: usize,
        source: serde_json::Error,
    },
}

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];

pub const MOUTH_OPEN: &str = "mouth_open";
pub const LEFT_EYE_OPEN: &str = "left_eye_open";
pub const RIGHT_EYE_OPEN: &str = "right_eye_open";
pub const BUSHY_EYEBROWS: &str = "bushy_eyebrows";
pub const BIG_NOSE: &str = "big_nose";
pub const MALE: &str = "male";

/// Ground-truth generative parameters of one sprite.
///
/// `male` draws a moustache inside the nose box; it exists so that a gender
/// confound can be correlated with eyebrows in biased datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub eye_openness_left: f64,
    pub eye_openness_right: f64,
    pub mouth_openness: f64,
    pub nose_size: f64,
    pub eyebrow_thickness: f64,
    pub yaw: f64,
    pub skin_hue: f64,
    pub hair_hue: f64,
    #[serde(default)]
    pub male: bool,
    pub seed: u64,
}

impl Default for SpriteParams {
    fn default() -> Self {
        Self {
            eye_openness_left: 0.5,
            eye_openness_right: 0.5,
            mouth_openness: 0.5,
            nose_size: 1.0,
            eyebrow_thickness: 0.5,
            yaw: 0.0,
            skin_hue: 0.5,
            hair_hue: 0.5,
            male: false,
            seed: 0,
        }
    }
}

impl SpriteParams {
    pub fn validate(&self) -> Result<(), SpriteError> {
        let checks: [(&'static str, f64, f64, f64); 8] = [
            ("eye_openness_left", self.eye_openness_left, 0.0, 1.0),
            ("eye_openness_right", self.eye_openness_right, 0.0, 1.0),
            ("mouth_openness", self.mouth_openness, 0.0, 1.0),
            ("nose_size", self.nose_size, 0.5, 1.5),
            ("eyebrow_thickness", self.eyebrow_thickness, 0.0, 1.0),
            ("yaw", self.yaw, -0.3, 0.3),
            ("skin_hue", self.skin_hue, 0.0, 1.0),
            ("hair_hue", self.hair_hue, 0.0, 1.0),
        ];
        for (field, value, min, max) in checks {
            if !(value >= min && value <= max) {
                return Err(SpriteError::OutOfRange {
                    field,
                    value,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            eye_openness_left: rng.random(),
            eye_openness_right: rng.random(),
            mouth_openness: rng.random(),
            nose_size: rng.random_range(0.5..=1.5),
            eyebrow_thickness: rng.random(),
            yaw: rng.random_range(-0.3..=0.3),
            skin_hue: rng.random(),
            hair_hue: rng.random(),
            male: rng.random_bool(0.5),
            seed: rng.random(),
        }
    }

    /// Binary attribute labels at the parameter midpoints.
    pub fn labels(&self) -> BTreeMap<String, i8> {
        let sign = |b: bool| if b { 1 } else { -1 };
        BTreeMap::from([
            (MOUTH_OPEN.to_string(), sign(self.mouth_openness > 0.5)),
            (LEFT_EYE_OPEN.to_string(), sign(self.eye_openness_left > 0.5)),
            (RIGHT_EYE_OPEN.to_string(), sign(self.eye_openness_right > 0.5)),
            (BUSHY_EYEBROWS.to_string(), sign(self.eyebrow_thickness > 0.5)),
            (BIG_NOSE.to_string(), sign(self.nose_size > 1.0)),
            (MALE.to_string(), sign(self.male)),
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub pixels: Image,
    pub labels: BTreeMap<String, i8>,
    pub params: Option<SpriteParams>,
}

// ---------------------------------------------------------------------------
// rendering

const BACKGROUND: [f32; 3] = [0.88, 0.90, 0.93];
const EYEBROW: [f32; 3] = [0.22, 0.14, 0.08];
const EYE: [f32; 3] = [0.06, 0.05, 0.08];
const NOSE: [f32; 3] = [0.32, 0.16, 0.12];
const MOUSTACHE: [f32; 3] = [0.15, 0.09, 0.05];
const MOUTH: [f32; 3] = [0.40, 0.06, 0.10];

// glyph layout in 256-unit coordinates (row, col)
const EYE_ROW: f64 = 115.0;
const EYE_COL: f64 = 88.0;
const EYE_RX: f64 = 16.0;
const EYE_RY_MIN: f64 = 1.0;
const EYE_RY_SPAN: f64 = 8.0;
const BROW_TOP: f64 = 90.0;
const BROW_MIN: f64 = 3.0;
const BROW_SPAN: f64 = 9.0;
const BROW_COLS: (f64, f64) = (68.0, 108.0);
const NOSE_ROW: f64 = 132.0;
const NOSE_RX: f64 = 8.0;
const NOSE_RY: f64 = 12.0;
const MOUSTACHE_ROWS: (f64, f64) = (153.0, 159.0);
const MOUSTACHE_COLS: (f64, f64) = (104.0, 152.0);
const MOUTH_ROW: f64 = 188.0;
const MOUTH_RX: f64 = 36.0;
const MOUTH_RY_MIN: f64 = 1.5;
const MOUTH_RY_SPAN: f64 = 14.0;

// measurement windows (256 units, half-open, aligned to pixel edges at H >= 32)
const SKIN_WINDOW: (f64, f64, f64, f64) = (64.0, 120.0, 72.0, 136.0);
const BROW_WINDOW: (f64, f64, f64, f64) = (80.0, 64.0, 104.0, 112.0);
const EYE_WINDOW: (f64, f64, f64, f64) = (104.0, 64.0, 128.0, 112.0);
const NOSE_WINDOW: (f64, f64, f64, f64) = (104.0, 112.0, 152.0, 144.0);
const MOUSTACHE_WINDOW: (f64, f64, f64, f64) = (152.0, 104.0, 160.0, 152.0);
const MOUTH_WINDOW: (f64, f64, f64, f64) = (160.0, 80.0, 208.0, 176.0);

fn lerp3(a: [f32; 3], b: [f32; 3], t: f64) -> [f32; 3] {
    let t = t as f32;
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn skin_color(hue: f64) -> [f32; 3] {
    lerp3([0.96, 0.80, 0.69], [0.55, 0.36, 0.24], hue)
}

fn hair_color(hue: f64) -> [f32; 3] {
    // walk around a muted colour wheel
    let h = hue * 6.0;
    let i = h.floor() as usize % 6;
    let f = (h - h.floor()) as f32;
    let (lo, hi) = (0.12f32, 0.45f32);
    let up = lo + (hi - lo) * f;
    let down = hi - (hi - lo) * f;
    match i {
        0 => [hi, up, lo],
        1 => [down, hi, lo],
        2 => [lo, hi, up],
        3 => [lo, down, hi],
        4 => [up, lo, hi],
        _ => [hi, lo, down],
    }
}

fn in_ellipse(r: f64, c: f64, cr: f64, cc: f64, ry: f64, rx: f64) -> bool {
    let dy = (r - cr) / ry;
    let dx = (c - cc) / rx;
    dy * dy + dx * dx <= 1.0
}

fn sprite_color(p: &SpriteParams, r: f64, c: f64) -> [f32; 3] {
    let shift = p.yaw * 30.0;
    let mirror_c = 256.0 - c;
    // components, front to back
    let mouth_ry = MOUTH_RY_MIN + MOUTH_RY_SPAN * p.mouth_openness;
    if in_ellipse(r, c, MOUTH_ROW, 128.0, mouth_ry, MOUTH_RX) {
        return MOUTH;
    }
    if p.male
        && r >= MOUSTACHE_ROWS.0
        && r < MOUSTACHE_ROWS.1
        && c >= MOUSTACHE_COLS.0
        && c < MOUSTACHE_COLS.1
    {
        return MOUSTACHE;
    }
    if in_ellipse(
        r,
        c,
        NOSE_ROW,
        128.0,
        NOSE_RY * p.nose_size,
        NOSE_RX * p.nose_size,
    ) {
        return NOSE;
    }
    let left_ry = EYE_RY_MIN + EYE_RY_SPAN * p.eye_openness_left;
    let right_ry = EYE_RY_MIN + EYE_RY_SPAN * p.eye_openness_right;
    if in_ellipse(r, c, EYE_ROW, EYE_COL, left_ry, EYE_RX)
        || in_ellipse(r, mirror_c, EYE_ROW, EYE_COL, right_ry, EYE_RX)
    {
        return EYE;
    }
    let brow = BROW_MIN + BROW_SPAN * p.eyebrow_thickness;
    if r >= BROW_TOP && r < BROW_TOP + brow {
        let in_cols = |x: f64| x >= BROW_COLS.0 && x < BROW_COLS.1;
        if in_cols(c) || in_cols(mirror_c) {
            return EYEBROW;
        }
    }
    if in_ellipse(r, c, 140.0, 128.0 + shift, 108.0, 100.0) {
        return skin_color(p.skin_hue);
    }
    if in_ellipse(r, c, 118.0, 128.0 + shift, 112.0, 112.0) {
        return hair_color(p.hair_hue);
    }
    BACKGROUND
}

fn check_resolution(resolution: usize) -> Result<(), SpriteError> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(SpriteError::Resolution(resolution))
    }
}

/// Deterministic area-sampled rendering of `p` at `resolution x resolution`.
pub fn render_sprite(p: &SpriteParams, resolution: usize) -> Result<LabeledImage, SpriteError> {
    p.validate()?;
    check_resolution(resolution)?;
    let unit = 256.0 / resolution as f64;
    let ss = (512 / resolution).max(4);
    let inv = 1.0 / (ss * ss) as f32;
    let mut img = Image::new(resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0f32; 3];
            for sy in 0..ss {
                let r = (y as f64 + (sy as f64 + 0.5) / ss as f64) * unit;
                for sx in 0..ss {
                    let c = (x as f64 + (sx as f64 + 0.5) / ss as f64) * unit;
                    let col = sprite_color(p, r, c);
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            for k in 0..3 {
                img.set(k, y, x, (acc[k] * inv).clamp(0.0, 1.0));
            }
        }
    }
    Ok(LabeledImage {
        name: String::new(),
        pixels: img,
        labels: p.labels(),
        params: Some(p.clone()),
    })
}

// ---------------------------------------------------------------------------
// measurement

/// Parameters recovered from pixels by [`measure_sprite`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasuredParams {
    pub eye_openness_left: f64,
    pub eye_openness_right: f64,
    pub mouth_openness: f64,
    pub eyebrow_thickness: f64,
    pub nose_size: f64,
    pub moustache: f64,
}

impl MeasuredParams {
    /// Scalar that crosses 0.5 when the attribute label flips, if the oracle
    /// covers the attribute.
    pub fn attribute_value(&self, attribute: &str) -> Option<f64> {
        match attribute {
            MOUTH_OPEN => Some(self.mouth_openness),
            LEFT_EYE_OPEN => Some(self.eye_openness_left),
            RIGHT_EYE_OPEN => Some(self.eye_openness_right),
            BUSHY_EYEBROWS => Some(self.eyebrow_thickness),
            // size 1.0 is the label threshold; map onto the 0.5 convention
            BIG_NOSE => Some(self.nose_size - 0.5),
            MALE => Some(self.moustache),
            _ => None,
        }
    }
}

struct Window {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
}

fn window(w: (f64, f64, f64, f64), resolution: usize, mirror: bool) -> Window {
    let s = resolution as f64 / 256.0;
    let (y0, x0, y1, x1) = (
        (w.0 * s).round() as usize,
        (w.1 * s).round() as usize,
        (w.2 * s).round() as usize,
        (w.3 * s).round() as usize,
    );
    if mirror {
        Window {
            y0,
            x0: resolution - x1,
            y1,
            x1: resolution - x0,
        }
    } else {
        Window { y0, x0, y1, x1 }
    }
}

fn mean_color(img: &Image, w: &Window) -> [f64; 3] {
    let mut acc = [0f64; 3];
    let mut n = 0.0f64;
    for y in w.y0..w.y1 {
        for x in w.x0..w.x1 {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img.get(c, y, x) as f64;
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n.max(1.0))
}

/// Area (256-unit^2) of `ink` over `skin` inside `w`, from linear unmixing.
fn ink_area(img: &Image, w: &Window, skin: [f64; 3], ink: [f32; 3]) -> f64 {
    let d = [
        skin[0] - ink[0] as f64,
        skin[1] - ink[1] as f64,
        skin[2] - ink[2] as f64,
    ];
    let norm2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    if norm2 < 1e-3 {
        return 0.0;
    }
    let unit = 256.0 / img.height as f64;
    let mut total = 0.0;
    for y in w.y0..w.y1 {
        for x in w.x0..w.x1 {
            let p = img.pixel(y, x);
            let proj: f64 = (0..3).map(|c| (skin[c] - p[c] as f64) * d[c]).sum::<f64>() / norm2;
            total += proj.clamp(0.0, 1.0);
        }
    }
    total * unit * unit
}

/// Recover component parameters from a sprite-like image.
pub fn measure_sprite(img: &Image) -> MeasuredParams {
    let res = img.height;
    let skin = mean_color(img, &window(SKIN_WINDOW, res, false));
    let eye = |mirror| {
        let area = ink_area(img, &window(EYE_WINDOW, res, mirror), skin, EYE);
        let ry = area / (std::f64::consts::PI * EYE_RX);
        ((ry - EYE_RY_MIN) / EYE_RY_SPAN).clamp(0.0, 1.0)
    };
    let brow = {
        let a = ink_area(img, &window(BROW_WINDOW, res, false), skin, EYEBROW);
        let b = ink_area(img, &window(BROW_WINDOW, res, true), skin, EYEBROW);
        let t = 0.5 * (a + b) / (BROW_COLS.1 - BROW_COLS.0);
        ((t - BROW_MIN) / BROW_SPAN).clamp(0.0, 1.0)
    };
    let mouth = {
        let area = ink_area(img, &window(MOUTH_WINDOW, res, false), skin, MOUTH);
        let ry = area / (std::f64::consts::PI * MOUTH_RX);
        ((ry - MOUTH_RY_MIN) / MOUTH_RY_SPAN).clamp(0.0, 1.0)
    };
    let nose = {
        let area = ink_area(img, &window(NOSE_WINDOW, res, false), skin, NOSE);
        (area / (std::f64::consts::PI * NOSE_RX * NOSE_RY)).sqrt()
    };
    let moustache = {
        let area = ink_area(img, &window(MOUSTACHE_WINDOW, res, false), skin, MOUSTACHE);
        let full = (MOUSTACHE_ROWS.1 - MOUSTACHE_ROWS.0) * (MOUSTACHE_COLS.1 - MOUSTACHE_COLS.0);
        (area / full).clamp(0.0, 1.0)
    };
    MeasuredParams {
        eye_openness_left: eye(false),
        eye_openness_right: eye(true),
        mouth_openness: mouth,
        eyebrow_thickness: brow,
        nose_size: nose,
        moustache,
    }
}

// ---------------------------------------------------------------------------
// irregular masks

/// Binary mask, `1` keeps a pixel and `0` erases it.
#[derive(Debug, Clone, PartialEq)]
pub struct IrregularMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    pub coverage: f64,
}

impl IrregularMask {
    pub const MAX_COVERAGE: f64 = 0.5;

    /// Random strokes (1-8, width 2-12 px) and discs (1-6, radius 2-20 px),
    /// sizes given at 256 px and scaled to the target resolution.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        loop {
            let m = Self::draw(rng, height, width);
            if m.coverage > 0.0 && m.coverage <= Self::MAX_COVERAGE {
                return m;
            }
        }
    }

    fn draw<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let scale = height.max(width) as f64 / 256.0;
        let mut mask = vec![1u8; height * width];
        let mut erase = |f: &dyn Fn(f64, f64) -> bool| {
            for y in 0..height {
                for x in 0..width {
                    if f(y as f64 + 0.5, x as f64 + 0.5) {
                        mask[y * width + x] = 0;
                    }
                }
            }
        };
        let strokes = rng.random_range(1..=8);
        for _ in 0..strokes {
            let y0 = rng.random_range(0.0..height as f64);
            let x0 = rng.random_range(0.0..width as f64);
            let len = rng.random_range(10.0..120.0) * scale;
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let (y1, x1) = (y0 + len * ang.sin(), x0 + len * ang.cos());
            let half = (rng.random_range(2.0..=12.0) * scale).max(1.0) / 2.0;
            erase(&|y, x| segment_distance(y, x, y0, x0, y1, x1) <= half);
        }
        let discs = rng.random_range(1..=6);
        for _ in 0..discs {
            let cy = rng.random_range(0.0..height as f64);
            let cx = rng.random_range(0.0..width as f64);
            let r = (rng.random_range(2.0..=20.0) * scale).max(1.0);
            erase(&|y, x| (y - cy).powi(2) + (x - cx).powi(2) <= r * r);
        }
        let zeros = mask.iter().filter(|&&v| v == 0).count();
        Self {
            height,
            width,
            coverage: zeros as f64 / mask.len() as f64,
            mask,
        }
    }

    pub fn apply(&self, x: &Image) -> Image {
        let mut out = x.clone();
        for c in 0..3 {
            for y in 0..x.height {
                for xx in 0..x.width {
                    if self.mask[y * self.width + xx] == 0 {
                        out.set(c, y, xx, 0.0);
                    }
                }
            }
        }
        out
    }
}

fn segment_distance(py: f64, px: f64, y0: f64, x0: f64, y1: f64, x1: f64) -> f64 {
    let (dy, dx) = (y1 - y0, x1 - x0);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((py - y0) * dy + (px - x0) * dx) / len2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (y0 + t * dy, x0 + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

/// Encoder input perturbation: with probability 1/2 the image is returned
/// unchanged, otherwise it is multiplied by a fresh irregular mask.
pub fn perturb_input<R: Rng + ?Sized>(x: &Image, rng: &mut R) -> Image {
    let masked = rng.random_bool(0.5);
    perturb_with(x, masked, rng).0
}

/// [`perturb_input`] with the Bernoulli draw fixed by the caller.
pub fn perturb_with<R: Rng + ?Sized>(
    x: &Image,
    masked: bool,
    rng: &mut R,
) -> (Image, Option<IrregularMask>) {
    if !masked {
        return (x.clone(), None);
    }
    let m = IrregularMask::random(rng, x.height, x.width);
    (m.apply(x), Some(m))
}

// ---------------------------------------------------------------------------
// datasets

/// Eyebrow/gender correlation injected into generated datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    /// P(male | bushy eyebrows) = P(female | thin eyebrows) = rate.
    pub rate: f64,
}

pub fn generate_params(count: usize, seed: u64, bias: Option<BiasSpec>) -> Vec<SpriteParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut p = SpriteParams::random(&mut rng);
            if let Some(b) = bias {
                let bushy = p.eyebrow_thickness > 0.5;
                let agree = rng.random_bool(b.rate.clamp(0.0, 1.0));
                p.male = if agree { bushy } else { !bushy };
            }
            p
        })
        .collect()
}

pub fn generate_sprites(
    count: usize,
    resolution: usize,
    seed: u64,
    bias: Option<BiasSpec>,
) -> Result<Vec<LabeledImage>, SpriteError> {
    generate_params(count, seed, bias)
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut li = render_sprite(&p, resolution)?;
            li.name = format!("{i:06}.png");
            Ok(li)
        })
        .collect()
}

pub const PARAMS_FILE: &str = "params.jsonl";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";

/// Persist as PNGs plus `params.jsonl` and `attributes.csv`.
pub fn save_dataset(dir: &Path, items: &[LabeledImage]) -> Result<(), SpriteError> {
    fs::create_dir_all(dir)?;
    let mut params = fs::File::create(dir.join(PARAMS_FILE))?;
    let attrs: Vec<String> = items
        .first()
        .map(|i| i.labels.keys().cloned().collect())
        .unwrap_or_default();
    let mut csv = csv::Writer::from_path(dir.join(ATTRIBUTES_FILE))?;
    let mut header = vec!["filename".to_string()];
    header.extend(attrs.iter().cloned());
    csv.write_record(&header)?;
    for item in items {
        item.pixels.save_png(&dir.join(&item.name))?;
        if let Some(p) = &item.params {
            serde_json::to_writer(&mut params, p).map_err(std::io::Error::other)?;
            params.write_all(b"\n")?;
        }
        let mut row = vec![item.name.clone()];
        row.extend(
            attrs
                .iter()
                .map(|a| item.labels.get(a).copied().unwrap_or(0).to_string()),
        );
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Labels per file name from an `attributes.csv` (`name,attr1,attr2,...`).
pub fn read_attributes(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, i8>>, SpriteError> {
    let mut out = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    for rec in rdr.records() {
        let rec = rec?;
        let Some(name) = rec.get(0) else { continue };
        let mut labels = BTreeMap::new();
        for (attr, v) in header.iter().skip(1).zip(rec.iter().skip(1)) {
            match v.trim().parse::<i64>() {
                Ok(v) if v > 0 => {
                    labels.insert(attr.clone(), 1);
                }
                Ok(_) => {
                    labels.insert(attr.clone(), -1);
                }
                Err(_) => warn!("ignoring label `{v}` for {name}/{attr}"),
            }
        }
        out.insert(name.to_string(), labels);
    }
    Ok(out)
}

fn read_params(path: &Path) -> Result<Vec<SpriteParams>, SpriteError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| SpriteError::Params {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Load every PNG in `dir` (sorted by file name), resized to `resolution`.
/// Unreadable files are skipped with a warning; labels come from
/// `attributes.csv` when present and params from `params.jsonl` when it has
/// one line per image.
pub fn load_folder(dir: &Path, resolution: usize) -> Result<Vec<LabeledImage>, SpriteError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    let attrs = {
        let p = dir.join(ATTRIBUTES_FILE);
        if p.exists() {
            read_attributes(&p)?
        } else {
            BTreeMap::new()
        }
    };
    let params = {
        let p = dir.join(PARAMS_FILE);
        if p.exists() {
            let v = read_params(&p)?;
            (v.len() == files.len()).then_some(v)
        } else {
            None
        }
    };
    let mut out = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match Image::load(path, resolution) {
            Ok(pixels) => out.push(LabeledImage {
                labels: attrs.get(&name).cloned().unwrap_or_default(),
                params: params.as_ref().map(|p| p[i].clone()),
                name,
                pixels,
            }),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Index partition for train/val/test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split, SpriteError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SpriteError::Ratios(ratios));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * ratios[0] + 1e-9).floor() as usize;
    let n_val = (((n as f64) * ratios[1] + 1e-9).floor() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// Union of the boxes of `components` at the image's resolution.
pub fn component_mask(resolution: usize, components: &[ComponentId], dilate: usize) -> Vec<bool> {
    let boxes = BoxSet::default_for(resolution).expect("supported resolution");
    let mut m = vec![false; resolution * resolution];
    for &c in components {
        let b = boxes.get(c).dilated(dilate, resolution);
        for y in b.top..b.bottom {
            for x in b.left..b.right {
                m[y * resolution + x] = true;
            }
        }
    }
    m
}
