//! Text images: loading, bilinear resizing to the fixed model input,
//! `[-1, 1]` normalization, the orientation policy, and augmentation.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INPUT_WIDTH: usize = 128;
pub const INPUT_HEIGHT: usize = 32;

/// Row-major pixel grid, channels interleaved. Raw images hold values in
/// `[0, 255]`; preprocessed images hold values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextImage {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl TextImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("zero-sized image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_gray_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, 1, bytes.iter().map(|&b| b as f32).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// True when the image has the model input geometry and normalized range.
    pub fn is_model_ready(&self) -> bool {
        self.width == INPUT_WIDTH && self.height == INPUT_HEIGHT && self.pixels.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    fn map_coords(&self, width: usize, height: usize, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Vec::with_capacity(self.pixels.len());
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = f(x, y);
                for c in 0..self.channels {
                    out.push(self.get(sx, sy, c));
                }
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            pixels: out,
        }
    }

    pub fn rotate_cw(&self) -> Self {
        let h = self.height;
        self.map_coords(self.height, self.width, |x, y| (y, h - 1 - x))
    }

    pub fn rotate_ccw(&self) -> Self {
        let w = self.width;
        self.map_coords(self.height, self.width, |x, y| (w - 1 - y, x))
    }

    /// Clamped bilinear sample at continuous source coordinates.
    fn sample(&self, sx: f64, sy: f64, c: usize) -> f64 {
        let sx = sx.clamp(0.0, (self.width - 1) as f64);
        let sy = sy.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let p = |x, y| self.get(x, y, c) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("cannot resize to {width}x{height}")));
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let (sx, sy) = (self.width as f64 / width as f64, self.height as f64 / height as f64);
        let mut out = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..self.channels {
                    out.push(self.sample(fx, fy, c) as f32);
                }
            }
        }
        Self::new(width, height, self.channels, out)
    }

    /// `x -> x / 127.5 - 1`, clamped to `[-1, 1]`.
    pub fn normalized(&self) -> Self {
        Self {
            pixels: self
                .pixels
                .iter()
                .map(|&v| (v / 127.5 - 1.0).clamp(-1.0, 1.0))
                .collect(),
            ..*self
        }
    }

    fn clamped(mut self) -> Self {
        for v in &mut self.pixels {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Loads PNG or binary/ASCII PGM/PPM as raw `[0, 255]` values.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        match channels {
            1 => {
                let g = img.to_luma8();
                Self::from_gray_u8(g.width() as usize, g.height() as usize, g.as_raw())
            }
            3 => {
                let rgb = img.to_rgb8();
                Self::new(
                    rgb.width() as usize,
                    rgb.height() as usize,
                    3,
                    rgb.as_raw().iter().map(|&b| b as f32).collect(),
                )
            }
            c => Err(Error::Image(format!("unsupported channel count {c}"))),
        }
    }

    /// Writes a raw image as binary PGM (1 channel) or PPM (3 channels).
    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.pixels.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Resizes a raw image to the model input and normalizes it.
pub fn load_and_resize(raw: &TextImage) -> Result<TextImage> {
    Ok(raw.resize(INPUT_WIDTH, INPUT_HEIGHT)?.normalized())
}

pub fn preprocess_file(path: &Path, channels: usize) -> Result<TextImage> {
    load_and_resize(&TextImage::load(path, channels)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    Keep,
    Clockwise,
    CounterClockwise,
}

pub fn sample_rotation(rng: &mut impl Rng) -> Rotation {
    let u: f64 = rng.random();
    if u < 0.95 {
        Rotation::Keep
    } else if u < 0.975 {
        Rotation::Clockwise
    } else {
        Rotation::CounterClockwise
    }
}

/// Keeps the orientation with p=0.95, otherwise rotates by 90° either way
/// (p=0.025 each), then resizes back to the model input.
pub fn apply_rotation_policy(img: &TextImage, rng: &mut impl Rng) -> Result<TextImage> {
    let rotated = match sample_rotation(rng) {
        Rotation::Keep => return img.resize(INPUT_WIDTH, INPUT_HEIGHT),
        Rotation::Clockwise => img.rotate_cw(),
        Rotation::CounterClockwise => img.rotate_ccw(),
    };
    rotated.resize(INPUT_WIDTH, INPUT_HEIGHT)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentOp {
    Invert,
    GaussianBlur,
    PoissonNoise,
    Brightness,
    Contrast,
    SmallRotation,
    Translation,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 7] = [
        AugmentOp::Invert,
        AugmentOp::GaussianBlur,
        AugmentOp::PoissonNoise,
        AugmentOp::Brightness,
        AugmentOp::Contrast,
        AugmentOp::SmallRotation,
        AugmentOp::Translation,
    ];

    /// Applies the op to a normalized image. `strength` is magnitude/10.
    pub fn apply(self, img: &TextImage, strength: f64, rng: &mut impl Rng) -> TextImage {
        let sign = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { 1.0 } else { -1.0 };
        let out = match self {
            AugmentOp::Invert => invert(img),
            AugmentOp::GaussianBlur => gaussian_blur(img, 0.2 + 1.6 * strength),
            AugmentOp::PoissonNoise => poisson_noise(img, 0.25 / strength.max(1e-3), rng),
            AugmentOp::Brightness => {
                let delta = (sign(rng) * 0.5 * strength) as f32;
                map_pixels(img, |v| v + delta)
            }
            AugmentOp::Contrast => {
                let factor = (1.0 + sign(rng) * 0.8 * strength) as f32;
                let mean = img.pixels.iter().sum::<f32>() / img.pixels.len() as f32;
                map_pixels(img, |v| (v - mean) * factor + mean)
            }
            AugmentOp::SmallRotation => {
                let deg = rng.random_range(-1.0..=1.0) * 10.0 * strength.min(1.0);
                affine(img, deg.to_radians(), 0.0, 0.0)
            }
            AugmentOp::Translation => {
                let dx = rng.random_range(-1.0..=1.0) * 0.1 * strength * img.width as f64;
                let dy = rng.random_range(-1.0..=1.0) * 0.1 * strength * img.height as f64;
                affine(img, 0.0, dx, dy)
            }
        };
        out.clamped()
    }
}

/// Random subset-of-RandAugment policy: `layers` ops drawn uniformly (with
/// replacement) from `ops`, all at `magnitude` out of 10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub layers: usize,
    pub magnitude: u32,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            layers: 3,
            magnitude: 5,
            ops: AugmentOp::ALL.to_vec(),
        }
    }
}

pub fn augment(img: &TextImage, policy: &AugmentPolicy, rng: &mut impl Rng) -> TextImage {
    let strength = policy.magnitude as f64 / 10.0;
    let mut out = img.clone();
    for _ in 0..policy.layers {
        if let Some(&op) = policy.ops.choose(rng) {
            out = op.apply(&out, strength, rng);
        }
    }
    out.clamped()
}

fn map_pixels(img: &TextImage, f: impl Fn(f32) -> f32) -> TextImage {
    TextImage {
        pixels: img.pixels.iter().map(|&v| f(v)).collect(),
        ..*img
    }
}

pub fn invert(img: &TextImage) -> TextImage {
    map_pixels(img, |v| -v)
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &TextImage, sigma: f64) -> TextImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (w, h, ch) = (img.width as isize, img.height as isize, img.channels);
    let pass = |src: &TextImage, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for (k, wt) in weights.iter().enumerate() {
                        let o = k as isize - radius;
                        let (sx, sy) = if horizontal {
                            ((x + o).clamp(0, w - 1), y)
                        } else {
                            (x, (y + o).clamp(0, h - 1))
                        };
                        acc += wt * src.get(sx as usize, sy as usize, c) as f64;
                    }
                    out.set(x as usize, y as usize, c, acc as f32);
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Shot noise: pixel intensity in `[0, 255]` times `scale` is the Poisson
/// rate; the sampled count divided by `scale` is the noisy intensity.
pub fn poisson_noise(img: &TextImage, scale: f64, rng: &mut impl Rng) -> TextImage {
    let mut out = img.clone();
    for v in &mut out.pixels {
        let intensity = ((*v as f64 + 1.0) * 127.5).max(0.0);
        let lambda = intensity * scale;
        let noisy = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda) / scale
        } else {
            0.0
        };
        *v = (noisy / 127.5 - 1.0) as f32;
    }
    out
}

/// Rotation by `angle` radians about the center followed by a shift.
fn affine(img: &TextImage, angle: f64, dx: f64, dy: f64) -> TextImage {
    let (cx, cy) = ((img.width as f64 - 1.0) / 2.0, (img.height as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (px, py) = (x as f64 - cx - dx, y as f64 - cy - dy);
            let sx = c * px + s * py + cx;
            let sy = -s * px + c * py + cy;
            for ch in 0..img.channels {
                out.set(x, y, ch, img.sample(sx, sy, ch) as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> TextImage {
        TextImage::new(w, h, 1, (0..w * h).map(|i| (i % 251) as f32).collect()).unwrap()
    }

    #[test]
    fn black_and_white_normalize_to_bounds() {
        let black = TextImage::filled(128, 32, 1, 0.0).unwrap();
        assert!(load_and_resize(&black).unwrap().pixels().iter().all(|&v| v == -1.0));
        let white = TextImage::filled(300, 70, 1, 255.0).unwrap();
        let out = load_and_resize(&white).unwrap();
        assert_eq!((out.width(), out.height()), (128, 32));
        assert!(out.pixels().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_dimension_is_rejected() {
        assert!(TextImage::new(0, 32, 1, vec![]).is_err());
        assert!(ramp(4, 4).resize(0, 3).is_err());
    }

    #[test]
    fn rotations_are_inverse() {
        let img = ramp(9, 9);
        assert_eq!(img.rotate_cw().rotate_ccw(), img);
        let wide = ramp(6, 3);
        let cw = wide.rotate_cw();
        assert_eq!((cw.width(), cw.height()), (3, 6));
        // top-left moves to top-right under a clockwise turn
        assert_eq!(cw.get(2, 0, 0), wide.get(0, 0, 0));
        assert_eq!(wide.rotate_ccw().rotate_ccw(), wide.rotate_cw().rotate_cw());
    }

    #[test]
    fn keep_branch_returns_input() {
        let img = load_and_resize(&ramp(128, 32)).unwrap();
        // find a seed whose first draw keeps the orientation
        let seed = (0..100u64)
            .find(|&s| sample_rotation(&mut ChaCha8Rng::seed_from_u64(s)) == Rotation::Keep)
            .unwrap();
        let out = apply_rotation_policy(&img, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn invert_and_blur() {
        let img = load_and_resize(&ramp(128, 32)).unwrap();
        let inv = AugmentOp::Invert.apply(&img, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        for (a, b) in inv.pixels().iter().zip(img.pixels()) {
            assert_eq!(*a, -*b);
        }
        let flat = TextImage::filled(128, 32, 1, 0.3).unwrap();
        let blurred = gaussian_blur(&flat, 1.0);
        assert!(blurred.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn augment_is_deterministic_and_bounded() {
        let img = load_and_resize(&ramp(140, 40)).unwrap();
        let policy = AugmentPolicy::default();
        let a = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.is_model_ready());
        for op in AugmentOp::ALL {
            let o = op.apply(&img, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
            assert!(o.is_model_ready(), "{op:?}");
        }
    }

    #[test]
    fn pnm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = ramp(13, 5);
        img.save_pnm(&path).unwrap();
        assert_eq!(TextImage::load(&path, 1).unwrap(), img);
        assert!(TextImage::load(&dir.path().join("missing.pgm"), 1).is_err());
        std::fs::write(dir.path().join("junk.png"), b"not an image").unwrap();
        assert!(TextImage::load(&dir.path().join("junk.png"), 1).is_err());
    }
}
