//! Training-time augmentation: rotated crops, flips, gamma, and per-channel
//! illuminant rescaling.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::color::{gamma_encode, Illuminant, LinearImage, DEFAULT_GAMMA};
use crate::error::{Error, Result};

/// Attempts at placing a crop inside a rotated image before giving up on the rotation.
const PLACEMENT_ATTEMPTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the shorter image side, sampled uniformly.
    pub crop_scale: (f64, f64),
    /// Rotation angle in degrees, sampled uniformly.
    pub rotation_degrees: (f64, f64),
    /// Side of the square output patch.
    pub output_size: usize,
    pub hflip_prob: f64,
    /// Per-channel illuminant rescale factors, sampled uniformly.
    pub illum_rescale: (f64, f64),
    pub rescales_per_image: usize,
    /// Gamma applied after the geometric steps (1 keeps the patch linear).
    pub gamma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.1, 1.0),
            rotation_degrees: (-30.0, 30.0),
            output_size: 64,
            hflip_prob: 0.5,
            illum_rescale: (0.6, 1.4),
            rescales_per_image: 3,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change besides resizing to `output_size`.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            rotation_degrees: (0.0, 0.0),
            output_size,
            hflip_prob: 0.0,
            illum_rescale: (1.0, 1.0),
            rescales_per_image: 1,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c0, c1) = self.crop_scale;
        if !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(Error::Config(format!("crop scale range {:?} must lie in (0, 1]", self.crop_scale)));
        }
        let (r0, r1) = self.rotation_degrees;
        if !(-180.0..=180.0).contains(&r0) || !(-180.0..=180.0).contains(&r1) || r0 > r1 {
            return Err(Error::Config(format!("rotation range {:?} must lie in [-180, 180]", self.rotation_degrees)));
        }
        if self.output_size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("flip probability {} not in [0, 1]", self.hflip_prob)));
        }
        let (s0, s1) = self.illum_rescale;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return Err(Error::Config(format!("illuminant rescale range {:?} must be positive", self.illum_rescale)));
        }
        if self.rescales_per_image == 0 {
            return Err(Error::Config("rescales per image must be at least 1".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", self.gamma)));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Square crop in the rotated frame: center offset from the image center and side length.
#[derive(Debug, Clone, Copy)]
struct Placement {
    angle: f64,
    side: f64,
    offset: (f64, f64),
}

impl Placement {
    /// Maps crop-frame coordinates to source pixel coordinates.
    fn to_source(self, u: f64, v: f64, w: usize, h: usize) -> (f64, f64) {
        let (s, c) = libm::sincos(self.angle);
        let (u, v) = (u + self.offset.0, v + self.offset.1);
        ((w as f64 - 1.0) / 2.0 + u * c - v * s, (h as f64 - 1.0) / 2.0 + u * s + v * c)
    }

    /// All four corners inside the pixel-edge box of the source image.
    fn fits(&self, w: usize, h: usize) -> bool {
        let half = self.side / 2.0;
        let eps = 1e-9;
        [(-half, -half), (half, -half), (-half, half), (half, half)].iter().all(|&(u, v)| {
            let (x, y) = self.to_source(u, v, w, h);
            x >= -0.5 - eps && x <= w as f64 - 0.5 + eps && y >= -0.5 - eps && y <= h as f64 - 0.5 + eps
        })
    }
}

fn place<R: Rng + ?Sized>(w: usize, h: usize, angle: f64, scale: f64, rng: &mut R) -> Option<Placement> {
    let shorter = w.min(h) as f64;
    let (s, c) = libm::sincos(angle);
    let largest = shorter / (s.abs() + c.abs());
    let side = (scale * shorter).min(largest);
    let slack_x = (w as f64 - side).max(0.0) / 2.0;
    let slack_y = (h as f64 - side).max(0.0) / 2.0;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let offset = (uniform(rng, (-slack_x, slack_x)), uniform(rng, (-slack_y, slack_y)));
        let p = Placement { angle, side, offset };
        if p.fits(w, h) {
            return Some(p);
        }
    }
    None
}

fn bilinear(image: &LinearImage, x: f64, y: f64) -> ([f64; 3], bool) {
    let (w, h) = (image.width(), image.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (libm::floor(x) as usize, libm::floor(y) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let taps = [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x1, fx * (1.0 - fy)), (y1, x0, (1.0 - fx) * fy), (y1, x1, fx * fy)];
    let mut rgb = [0.0; 3];
    let mut masked = false;
    for (ty, tx, wt) in taps {
        if wt == 0.0 {
            continue;
        }
        let p = image.pixel(ty, tx);
        for j in 0..3 {
            rgb[j] += wt * p[j];
        }
        masked |= image.is_masked(ty, tx);
    }
    (rgb, masked)
}

/// Rotate, crop, resize, flip and gamma-encode one training image.
///
/// The crop lies entirely inside the rotated image, so no fill pixels are
/// ever sampled. The label is returned unchanged: the geometric steps do not
/// alter a global illuminant.
pub fn augment_sample<R: Rng + ?Sized>(
    image: &LinearImage,
    label: &Illuminant,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<(LinearImage, Illuminant)> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    if w.min(h) <= 2 {
        return Err(Error::Shape(format!("augmentation needs an image larger than 2x2, got {h}x{w}")));
    }
    let angle = uniform(rng, config.rotation_degrees).to_radians();
    let scale = uniform(rng, config.crop_scale);
    let placement = match place(w, h, angle, scale, rng) {
        Some(p) => p,
        None => place(w, h, 0.0, scale, rng).expect("an unrotated crop always fits"),
    };
    let flip = rng.random::<f64>() < config.hflip_prob;

    let size = config.output_size;
    let mut data = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let col = if flip { size - 1 - j } else { j };
            let u = ((col as f64 + 0.5) / size as f64 - 0.5) * placement.side;
            let v = ((i as f64 + 0.5) / size as f64 - 0.5) * placement.side;
            let (x, y) = placement.to_source(u, v, w, h);
            let (rgb, masked) = bilinear(image, x, y);
            data.extend_from_slice(&rgb);
            mask.push(masked);
        }
    }
    let mut patch = LinearImage::new(size, size, data)?;
    if image.mask().is_some() {
        patch = patch.with_mask(mask)?;
    }
    Ok((gamma_encode(&patch, config.gamma)?, *label))
}

/// Multiplies channel `j` of both the image and the label by `factors[j]`.
pub fn rescale_with_factors(image: &LinearImage, label: &Illuminant, factors: [f64; 3]) -> Result<(LinearImage, Illuminant)> {
    let rgb = label.rgb();
    let label = Illuminant::from_rgb([rgb[0] * factors[0], rgb[1] * factors[1], rgb[2] * factors[2]])?;
    Ok((image.scale_channels(factors)?, label))
}

/// Draws independent per-channel factors from `range` and applies them to
/// the image and its label alike.
pub fn rescale_illuminant_augment<R: Rng + ?Sized>(
    image: &LinearImage,
    label: &Illuminant,
    range: (f64, f64),
    rng: &mut R,
) -> Result<(LinearImage, Illuminant)> {
    let factors = [uniform(rng, range), uniform(rng, range), uniform(rng, range)];
    rescale_with_factors(image, label, factors)
}
