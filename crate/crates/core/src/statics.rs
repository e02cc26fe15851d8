//! Learning-free illuminant estimators from the Minkowski-norm family.
//!
//! Every member computes, per channel `j`,
//!
//! ```text
//! e_j ∝ ( Σ_x |∇ⁿ I_σ,j(x)|^p )^(1/p)
//! ```
//!
//! over unmasked pixels, where `I_σ` is the image blurred with a Gaussian of
//! standard deviation `σ` and `∇ⁿ` is the magnitude of the n-th order spatial
//! derivative (n = 0 means the pixel value itself). `p = ∞` takes the maximum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::color::{normalize_illuminant, Illuminant, LinearImage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinkowskiNorm {
    Finite(f64),
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinkowskiConfig {
    derivative_order: u8,
    norm: MinkowskiNorm,
    smoothing_sigma: f64,
}

impl MinkowskiConfig {
    pub fn new(derivative_order: u8, norm: MinkowskiNorm, smoothing_sigma: f64) -> Result<Self> {
        if derivative_order > 2 {
            return Err(Error::Domain(format!("derivative order {derivative_order} not in {{0, 1, 2}}")));
        }
        if let MinkowskiNorm::Finite(p) = norm {
            if !(p.is_finite() && p >= 1.0) {
                return Err(Error::Domain(format!("Minkowski p = {p} must be at least 1")));
            }
        }
        if !(smoothing_sigma.is_finite() && smoothing_sigma >= 0.0) {
            return Err(Error::Domain(format!("smoothing sigma {smoothing_sigma} must be non-negative")));
        }
        Ok(Self { derivative_order, norm, smoothing_sigma })
    }

    pub fn derivative_order(&self) -> u8 {
        self.derivative_order
    }

    pub fn norm(&self) -> MinkowskiNorm {
        self.norm
    }

    pub fn smoothing_sigma(&self) -> f64 {
        self.smoothing_sigma
    }
}

/// Named members of the family, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaticPreset {
    GrayWorld,
    WhitePatch,
    ShadesOfGray,
    GrayEdge1,
    GrayEdge2,
    GeneralGrayWorld,
}

impl StaticPreset {
    pub const ALL: [StaticPreset; 6] = [
        StaticPreset::GrayWorld,
        StaticPreset::WhitePatch,
        StaticPreset::ShadesOfGray,
        StaticPreset::GrayEdge1,
        StaticPreset::GrayEdge2,
        StaticPreset::GeneralGrayWorld,
    ];

    pub fn config(self) -> MinkowskiConfig {
        let (n, norm, sigma) = match self {
            StaticPreset::GrayWorld => (0, MinkowskiNorm::Finite(1.0), 0.0),
            StaticPreset::WhitePatch => (0, MinkowskiNorm::Max, 0.0),
            StaticPreset::ShadesOfGray => (0, MinkowskiNorm::Finite(6.0), 0.0),
            StaticPreset::GrayEdge1 => (1, MinkowskiNorm::Finite(5.0), 2.0),
            StaticPreset::GrayEdge2 => (2, MinkowskiNorm::Finite(5.0), 2.0),
            StaticPreset::GeneralGrayWorld => (0, MinkowskiNorm::Finite(9.0), 2.0),
        };
        MinkowskiConfig { derivative_order: n, norm, smoothing_sigma: sigma }
    }

    pub fn name(self) -> &'static str {
        match self {
            StaticPreset::GrayWorld => "gray-world",
            StaticPreset::WhitePatch => "white-patch",
            StaticPreset::ShadesOfGray => "shades-of-gray",
            StaticPreset::GrayEdge1 => "gray-edge-1",
            StaticPreset::GrayEdge2 => "gray-edge-2",
            StaticPreset::GeneralGrayWorld => "general-gray-world",
        }
    }
}

impl fmt::Display for StaticPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StaticPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown static preset '{s}'")))
    }
}

/// Estimates the illuminant of `image` with one member of the Minkowski family.
pub fn estimate_static(image: &LinearImage, config: &MinkowskiConfig) -> Result<Illuminant> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let masked = image.mask().map(<[bool]>::to_vec).unwrap_or_else(|| vec![false; n]);

    // masked pixels leak into their neighbours through blur and derivative
    // stencils, so grow the exclusion zone by the stencil reach
    let reach = if config.derivative_order == 0 && config.smoothing_sigma == 0.0 {
        0
    } else {
        gaussian_radius(config.smoothing_sigma) + config.derivative_order as usize
    };
    let excluded = dilate(&masked, h, w, reach);
    if excluded.iter().all(|&m| m) {
        return Err(Error::EmptyInput);
    }

    let planar = image.zero_masked().to_planar();
    let mut estimate = [0.0; 3];
    for (j, out) in estimate.iter_mut().enumerate() {
        let mut channel = planar[j * n..(j + 1) * n].to_vec();
        if config.smoothing_sigma > 0.0 {
            channel = gaussian_blur(&channel, h, w, config.smoothing_sigma);
        }
        let response = match config.derivative_order {
            0 => channel,
            1 => gradient_magnitude(&channel, h, w),
            _ => hessian_magnitude(&channel, h, w),
        };
        let values = response.iter().zip(&excluded).filter(|(_, &m)| !m).map(|(v, _)| v.abs());
        *out = minkowski_mean(values, config.norm);
    }
    normalize_illuminant(estimate)
}

/// Estimates with a named preset.
pub fn estimate_preset(image: &LinearImage, preset: StaticPreset) -> Result<Illuminant> {
    estimate_static(image, &preset.config())
}

fn minkowski_mean(values: impl Iterator<Item = f64> + Clone, norm: MinkowskiNorm) -> f64 {
    let max = values.clone().fold(0.0, f64::max);
    match norm {
        MinkowskiNorm::Max => max,
        MinkowskiNorm::Finite(_) if max == 0.0 => 0.0,
        MinkowskiNorm::Finite(1.0) => {
            let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            sum / count as f64
        }
        MinkowskiNorm::Finite(p) => {
            // factor out the maximum so large p cannot underflow
            let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + libm::pow(v / max, p), c + 1));
            max * libm::pow(sum / count as f64, 1.0 / p)
        }
    }
}

fn gaussian_radius(sigma: f64) -> usize {
    if sigma <= 0.0 {
        0
    } else {
        libm::ceil(3.0 * sigma) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = gaussian_radius(sigma) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_blur(channel: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * channel[y * w + reflect(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn central_dx(c: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = c[y * w + reflect(x as isize - 1, w)];
            let r = c[y * w + reflect(x as isize + 1, w)];
            out[y * w + x] = 0.5 * (r - l);
        }
    }
    out
}

fn central_dy(c: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = c[reflect(y as isize - 1, h) * w + x];
            let d = c[reflect(y as isize + 1, h) * w + x];
            out[y * w + x] = 0.5 * (d - u);
        }
    }
    out
}

fn gradient_magnitude(c: &[f64], h: usize, w: usize) -> Vec<f64> {
    let dx = central_dx(c, h, w);
    let dy = central_dy(c, h, w);
    dx.iter().zip(&dy).map(|(a, b)| libm::sqrt(a * a + b * b)).collect()
}

/// Frobenius norm of the Hessian, `sqrt(dxx² + 2·dxy² + dyy²)`.
fn hessian_magnitude(c: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut dxx = vec![0.0; h * w];
    let mut dyy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = c[y * w + x];
            dxx[y * w + x] = c[y * w + reflect(x as isize - 1, w)] - 2.0 * v + c[y * w + reflect(x as isize + 1, w)];
            dyy[y * w + x] = c[reflect(y as isize - 1, h) * w + x] - 2.0 * v + c[reflect(y as isize + 1, h) * w + x];
        }
    }
    let dxy = central_dy(&central_dx(c, h, w), h, w);
    (0..h * w)
        .map(|i| libm::sqrt(dxx[i] * dxx[i] + 2.0 * dxy[i] * dxy[i] + dyy[i] * dyy[i]))
        .collect()
}

fn dilate(mask: &[bool], h: usize, w: usize, reach: usize) -> Vec<bool> {
    if reach == 0 || !mask.iter().any(|&m| m) {
        return mask.to_vec();
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                for yy in y.saturating_sub(reach)..(y + reach + 1).min(h) {
                    for xx in x.saturating_sub(reach)..(x + reach + 1).min(w) {
                        out[yy * w + xx] = true;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::angular_error;
    use proptest::prelude::*;

    fn close3(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn gray_world_uniform() {
        let img = LinearImage::filled(5, 7, [0.4, 0.2, 0.2]).unwrap();
        let e = estimate_preset(&img, StaticPreset::GrayWorld).unwrap().rgb();
        let s6 = 6f64.sqrt();
        assert!(close3(e, [2.0 / s6, 1.0 / s6, 1.0 / s6], 1e-12));
    }

    #[test]
    fn white_patch_picks_channel_max() {
        let img = LinearImage::from_fn(4, 4, |y, x| if (y, x) == (2, 1) { [0.9, 0.3, 0.3] } else { [0.1, 0.2, 0.05] })
            .unwrap();
        let e = estimate_preset(&img, StaticPreset::WhitePatch).unwrap();
        let want = normalize_illuminant([0.9, 0.3, 0.3]).unwrap();
        assert!(close3(e.rgb(), want.rgb(), 1e-12));
    }

    #[test]
    fn gray_edge_on_constant_image_is_degenerate() {
        let img = LinearImage::filled(8, 8, [0.3, 0.5, 0.2]).unwrap();
        for preset in [StaticPreset::GrayEdge1, StaticPreset::GrayEdge2] {
            assert_eq!(estimate_preset(&img, preset), Err(Error::DegenerateIlluminant));
        }
    }

    #[test]
    fn black_and_fully_masked_inputs() {
        let black = LinearImage::filled(3, 3, [0.0; 3]).unwrap();
        assert_eq!(estimate_preset(&black, StaticPreset::GrayWorld), Err(Error::DegenerateIlluminant));
        let masked = LinearImage::filled(2, 2, [0.5; 3]).unwrap().with_mask(vec![true; 4]).unwrap();
        assert_eq!(estimate_preset(&masked, StaticPreset::GrayWorld), Err(Error::EmptyInput));
    }

    #[test]
    fn masked_pixels_are_ignored() {
        let img = LinearImage::from_fn(2, 2, |y, _| if y == 0 { [0.9, 0.1, 0.1] } else { [0.2, 0.4, 0.2] })
            .unwrap()
            .with_mask(vec![true, true, false, false])
            .unwrap();
        for preset in [StaticPreset::GrayWorld, StaticPreset::WhitePatch, StaticPreset::ShadesOfGray] {
            let e = estimate_preset(&img, preset).unwrap();
            assert!(close3(e.rgb(), normalize_illuminant([0.2, 0.4, 0.2]).unwrap().rgb(), 1e-12));
        }
    }

    #[test]
    fn presets_parse() {
        for p in StaticPreset::ALL {
            assert_eq!(p.name().parse::<StaticPreset>().unwrap(), p);
        }
        assert!("grey-world".parse::<StaticPreset>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MinkowskiConfig::new(3, MinkowskiNorm::Finite(1.0), 0.0).is_err());
        assert!(MinkowskiConfig::new(0, MinkowskiNorm::Finite(0.5), 0.0).is_err());
        assert!(MinkowskiConfig::new(0, MinkowskiNorm::Finite(2.0), -1.0).is_err());
        assert!(MinkowskiConfig::new(2, MinkowskiNorm::Max, 1.0).is_ok());
    }

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constant() {
        let c = vec![0.7; 6 * 5];
        let b = gaussian_blur(&c, 6, 5, 2.0);
        assert!(b.iter().all(|v| (v - 0.7).abs() < 1e-15));
    }

    fn random_image(seed: u64) -> LinearImage {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        LinearImage::from_fn(12, 12, |_, _| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).unwrap()
    }

    proptest! {
        #[test]
        fn estimates_are_scale_free(seed in 0u64..1000, s in 0.01f64..100.0, which in 0usize..6) {
            let img = random_image(seed);
            let preset = StaticPreset::ALL[which];
            let a = estimate_preset(&img, preset).unwrap();
            let b = estimate_preset(&img.scaled(s).unwrap(), preset).unwrap();
            prop_assert!(a.angle_to(&b).degrees() < 1e-9);
        }

        #[test]
        fn large_p_approaches_white_patch(seed in 0u64..1000) {
            let img = random_image(seed);
            let p50 = MinkowskiConfig::new(0, MinkowskiNorm::Finite(50.0), 0.0).unwrap();
            let a = estimate_static(&img, &p50).unwrap();
            let b = estimate_preset(&img, StaticPreset::WhitePatch).unwrap();
            prop_assert!(angular_error(a.rgb(), b.rgb()).unwrap().degrees() < 1.0);
        }
    }
}
