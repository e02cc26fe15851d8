//! Linear RGB rasters, illuminants, von Kries correction and the angular error.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Smallest channel value an illuminant may carry before it is used as a divisor.
pub const CHANNEL_FLOOR: f64 = 1e-4;

/// Channels below this after normalization make a correction meaningless.
const DEGENERATE_CHANNEL: f64 = 1e-12;

/// Default display gamma used when encoding linear radiance.
pub const DEFAULT_GAMMA: f64 = 2.2;

/// An `H × W × 3` raster of linear radiance, row-major, channels interleaved.
///
/// The optional mask marks pixels (true = excluded) that must not contribute
/// to any statistic or loss, e.g. a calibration chart.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl LinearImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dimensions {height}x{width} must be positive")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!("radiance value {} at index {pos} is negative or non-finite", data[pos])));
        }
        Ok(Self { height, width, data, mask: None })
    }

    /// Uniform image with every pixel equal to `rgb`.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    /// Attaches a mask (`true` = excluded), one entry per pixel.
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "mask has {} entries, image has {} pixels",
                mask.len(),
                self.height * self.width
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn into_parts(self) -> (usize, usize, Vec<f64>, Option<Vec<bool>>) {
        (self.height, self.width, self.data, self.mask)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m[y * self.width + x])
    }

    pub fn masked_count(&self) -> usize {
        self.mask.as_ref().map_or(0, |m| m.iter().filter(|&&v| v).count())
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Pixels that are not masked, in raster order.
    pub fn unmasked_pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.pixels()
            .enumerate()
            .filter(move |(i, _)| !self.mask.as_ref().is_some_and(|m| m[*i]))
            .map(|(_, p)| p)
    }

    /// Multiplies channel `j` of every pixel by `gains[j]`.
    pub fn scale_channels(&self, gains: [f64; 3]) -> Result<Self> {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| [p[0] * gains[0], p[1] * gains[1], p[2] * gains[2]])
            .collect();
        let mut out = Self::new(self.height, self.width, data)?;
        out.mask = self.mask.clone();
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        self.scale_channels([s; 3])
    }

    /// Copy with every masked pixel set to zero.
    pub fn zero_masked(&self) -> Self {
        let mut out = self.clone();
        if let Some(mask) = &self.mask {
            for (p, &m) in out.data.chunks_exact_mut(3).zip(mask) {
                if m {
                    p.fill(0.0);
                }
            }
        }
        out
    }

    /// Planar `3 × H × W` copy, the layout the convolution engine consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.pixel_count();
        let mut out = alloc::vec![0.0; 3 * n];
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            out[i] = p[0];
            out[n + i] = p[1];
            out[2 * n + i] = p[2];
        }
        out
    }

    fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let mut out = Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())?;
        out.mask = self.mask.clone();
        Ok(out)
    }
}

/// Relative RGB gains of a light source. Every component is finite and strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Illuminant {
    rgb: [f64; 3],
}

impl Illuminant {
    pub fn new(r: f64, g: f64, b: f64) -> Result<Self> {
        Self::from_rgb([r, g, b])
    }

    pub fn from_rgb(rgb: [f64; 3]) -> Result<Self> {
        check_positive(rgb)?;
        Ok(Self { rgb })
    }

    /// The achromatic illuminant of unit norm.
    pub fn neutral() -> Self {
        let c = 1.0 / libm::sqrt(3.0);
        Self { rgb: [c; 3] }
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.rgb
    }

    pub fn r(&self) -> f64 {
        self.rgb[0]
    }

    pub fn g(&self) -> f64 {
        self.rgb[1]
    }

    pub fn b(&self) -> f64 {
        self.rgb[2]
    }

    pub fn norm(&self) -> f64 {
        norm3(self.rgb)
    }

    /// Unit-norm copy.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self { rgb: self.rgb.map(|v| v / n) }
    }

    /// Elementwise product, normalized.
    pub fn compose(&self, other: &Illuminant) -> Self {
        let [a, b, c] = self.rgb;
        let [x, y, z] = other.rgb;
        Self { rgb: [a * x, b * y, c * z] }.normalized()
    }

    /// Elementwise reciprocal.
    pub fn reciprocal(&self) -> Self {
        Self { rgb: self.rgb.map(|v| 1.0 / v) }
    }

    pub fn angle_to(&self, other: &Illuminant) -> AngularError {
        AngularError(angle_degrees(self.rgb, other.rgb))
    }
}

impl From<Illuminant> for [f64; 3] {
    fn from(e: Illuminant) -> Self {
        e.rgb
    }
}

/// Angle between two RGB directions, in degrees within `[0, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct AngularError(f64);

impl AngularError {
    pub fn from_degrees(degrees: f64) -> Result<Self> {
        if !(0.0..=180.0).contains(&degrees) {
            return Err(Error::Domain(format!("angular error {degrees} outside [0, 180]")));
        }
        Ok(Self(degrees))
    }

    pub fn degrees(self) -> f64 {
        self.0
    }

    pub fn radians(self) -> f64 {
        self.0.to_radians()
    }
}

fn check_positive(rgb: [f64; 3]) -> Result<()> {
    if rgb.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Domain(format!("illuminant components {rgb:?} must be finite and positive")));
    }
    Ok(())
}

fn norm3(v: [f64; 3]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

// atan2(|a×b|, a·b) equals arccos of the normalized dot product but stays
// accurate near 0° and 180°.
fn angle_degrees(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    libm::atan2(norm3(cross), dot).to_degrees().clamp(0.0, 180.0)
}

/// Angular error between two strictly positive RGB triplets.
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> Result<AngularError> {
    check_positive(a)?;
    check_positive(b)?;
    Ok(AngularError(angle_degrees(a, b)))
}

/// Scales `rgb` to unit norm, raising channels below [`CHANNEL_FLOOR`] first.
///
/// The floor is applied before and after normalizing, so a channel that falls
/// under it only because of the rescale is lifted once more.
pub fn normalize_illuminant(rgb: [f64; 3]) -> Result<Illuminant> {
    if rgb.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("illuminant components {rgb:?} must be finite")));
    }
    if rgb.iter().all(|&v| v <= 0.0) {
        return Err(Error::DegenerateIlluminant);
    }
    let mut v = rgb;
    for _ in 0..2 {
        v = v.map(|c| c.max(CHANNEL_FLOOR));
        let n = norm3(v);
        v = v.map(|c| c / n);
    }
    Ok(Illuminant { rgb: v })
}

/// Divides every channel by the matching component of the unit-norm illuminant.
pub fn von_kries_correct(image: &LinearImage, illuminant: &Illuminant) -> Result<LinearImage> {
    let e = illuminant.normalized().rgb();
    if e.iter().any(|&c| c < DEGENERATE_CHANNEL) {
        return Err(Error::DegenerateIlluminant);
    }
    image.scale_channels(e.map(|c| 1.0 / c))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive and finite, got {gamma}")));
    }
    Ok(())
}

/// Clips to `[0, 1]` and applies the `1/gamma` power.
pub fn gamma_encode(image: &LinearImage, gamma: f64) -> Result<LinearImage> {
    check_gamma(gamma)?;
    let inv = 1.0 / gamma;
    image.map_values(|v| libm::pow(v.clamp(0.0, 1.0), inv))
}

/// Inverse of [`gamma_encode`] on `[0, 1]`.
pub fn gamma_decode(image: &LinearImage, gamma: f64) -> Result<LinearImage> {
    check_gamma(gamma)?;
    image.map_values(|v| libm::pow(v.clamp(0.0, 1.0), gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn angular_error_identity_and_scale() {
        let e = angular_error([0.3, 0.6, 0.4], [0.3, 0.6, 0.4]).unwrap();
        assert_eq!(e.degrees(), 0.0);
        let e = angular_error([1.0; 3], [2.0; 3]).unwrap();
        assert_eq!(e.degrees(), 0.0);
    }

    #[test]
    fn angular_error_near_axis() {
        // arbitrary-precision reference for these exact inputs; limit is acos(1/√3) = 54.7356°
        let e = angular_error([1.0; 3], [1.0, 1e-4, 1e-4]).unwrap().degrees();
        assert!((e - 54.727_507_470_453_95).abs() < 1e-9, "{e}");
        assert!((e - 54.735_610_317_245_35).abs() < 0.01);
    }

    #[test]
    fn angular_error_rejects_bad_components() {
        assert!(matches!(angular_error([0.0, 1.0, 1.0], [1.0; 3]), Err(Error::Domain(_))));
        assert!(matches!(angular_error([1.0; 3], [f64::NAN, 1.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(angular_error([1.0; 3], [-1.0, 1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_examples() {
        let s = 1.0 / 3f64.sqrt();
        for input in [[1.0; 3], [2.0; 3]] {
            let e = normalize_illuminant(input).unwrap().rgb();
            for c in e {
                assert!((c - s).abs() < 1e-15);
            }
        }
        // two-pass clamp: (3, 0, 4) -> (3, 1e-4, 4) -> (0.6, 2e-5, 0.8) -> lift to 1e-4 -> renormalize
        let e = normalize_illuminant([3.0, 0.0, 4.0]).unwrap().rgb();
        let first = [3.0 / 5.000000001, 1e-4, 4.0 / 5.000000001];
        let n = libm::sqrt(first[0] * first[0] + first[1] * first[1] + first[2] * first[2]);
        assert!(rel_close(e[0], first[0] / n, 1e-15));
        assert!(rel_close(e[1], 1e-4 / n, 1e-15));
        assert!(rel_close(e[2], first[2] / n, 1e-15));
        assert!((norm3(e) - 1.0).abs() < 1e-12);
        assert!(matches!(normalize_illuminant([0.0; 3]), Err(Error::DegenerateIlluminant)));
    }

    #[test]
    fn von_kries_neutral_scales_by_sqrt3() {
        let img = LinearImage::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = von_kries_correct(&img, &Illuminant::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!(rel_close(*a, b * 3f64.sqrt(), 1e-15));
        }
    }

    #[test]
    fn von_kries_removes_cast() {
        let img = LinearImage::filled(3, 3, [0.2, 0.1, 0.1]).unwrap();
        let out = von_kries_correct(&img, &Illuminant::new(2.0, 1.0, 1.0).unwrap()).unwrap();
        for p in out.pixels() {
            assert!(rel_close(p[0], p[1], 1e-14) && rel_close(p[1], p[2], 1e-14));
        }
    }

    #[test]
    fn von_kries_keeps_mask() {
        let img = LinearImage::filled(1, 2, [0.2, 0.1, 0.1]).unwrap().with_mask(vec![true, false]).unwrap();
        let out = von_kries_correct(&img, &Illuminant::neutral()).unwrap();
        assert_eq!(out.mask(), Some(&[true, false][..]));
    }

    #[test]
    fn gamma_examples() {
        let img = LinearImage::new(1, 2, vec![0.0, 1.0, 0.25, 2.0, 0.5, 0.0]).unwrap();
        let out = gamma_encode(&img, 2.2).unwrap();
        let d = out.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 0.532_520_544_719_981_3).abs() < 1e-12);
        assert_eq!(d[3], 1.0);
        assert!(matches!(gamma_encode(&img, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gamma_encode(&img, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn image_validation() {
        assert!(matches!(LinearImage::new(2, 2, vec![0.0; 11]), Err(Error::Shape(_))));
        assert!(matches!(LinearImage::new(1, 1, vec![0.0, -0.1, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(LinearImage::new(1, 1, vec![0.0, f64::INFINITY, 0.0]), Err(Error::Domain(_))));
        let img = LinearImage::filled(2, 2, [0.1; 3]).unwrap();
        assert!(matches!(img.clone().with_mask(vec![false; 3]), Err(Error::Shape(_))));
        let img = img.with_mask(vec![true, false, false, true]).unwrap();
        assert_eq!(img.masked_count(), 2);
        assert_eq!(img.unmasked_pixels().count(), 2);
    }

    fn pos() -> impl Strategy<Value = f64> {
        1e-3f64..10.0
    }

    fn triplet() -> impl Strategy<Value = [f64; 3]> {
        [pos(), pos(), pos()]
    }

    proptest! {
        #[test]
        fn angular_error_symmetric(a in triplet(), b in triplet()) {
            let ab = angular_error(a, b).unwrap().degrees();
            let ba = angular_error(b, a).unwrap().degrees();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=180.0).contains(&ab));
        }

        #[test]
        fn angular_error_scale_free(a in triplet(), b in triplet(), s in 1e-3f64..1e3, t in 1e-3f64..1e3) {
            let base = angular_error(a, b).unwrap().degrees();
            let scaled = angular_error(a.map(|v| v * s), b.map(|v| v * t)).unwrap().degrees();
            prop_assert!((base - scaled).abs() < 1e-9, "{} vs {}", base, scaled);
        }

        #[test]
        fn normalized_has_unit_norm(a in triplet()) {
            let e = normalize_illuminant(a).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-9);
            prop_assert!(e.rgb().iter().all(|&c| c >= CHANNEL_FLOOR * (1.0 - 1e-6)));
        }

        #[test]
        fn correction_composes_up_to_scale(
            px in proptest::collection::vec(0.0f64..1.0, 48),
            e1 in triplet(),
            e2 in triplet(),
        ) {
            let img = LinearImage::new(4, 4, px).unwrap();
            let e1 = Illuminant::from_rgb(e1).unwrap();
            let e2 = Illuminant::from_rgb(e2).unwrap();
            let twice = von_kries_correct(&von_kries_correct(&img, &e1).unwrap(), &e2).unwrap();
            let once = von_kries_correct(&img, &e1.compose(&e2)).unwrap();
            // the two differ by one global factor; recover it from the first nonzero value
            let k = twice.data().iter().zip(once.data()).find(|(_, o)| **o > 1e-6).map(|(t, o)| t / o);
            if let Some(k) = k {
                for (t, o) in twice.data().iter().zip(once.data()) {
                    prop_assert!((t - k * o).abs() <= 1e-6 * t.abs().max(1e-12));
                }
            }
        }

        #[test]
        fn reciprocal_correction_recovers_image(
            px in proptest::collection::vec(0.0f64..1.0, 27),
            e in triplet(),
        ) {
            let img = LinearImage::new(3, 3, px).unwrap();
            let e = Illuminant::from_rgb(e).unwrap();
            prop_assume!(e.normalized().rgb().iter().all(|&c| c > 1e-3));
            let corrected = von_kries_correct(&img, &e).unwrap();
            let back = von_kries_correct(&corrected, &e.normalized().reciprocal()).unwrap();
            let k = e.normalized().reciprocal().norm();
            for (b, o) in back.data().iter().zip(img.data()) {
                prop_assert!((b / k - o).abs() <= 1e-6 * o.abs().max(1e-12));
            }
        }

        #[test]
        fn corrected_chroma_ignores_exposure(
            px in proptest::collection::vec(0.01f64..1.0, 12),
            e in triplet(),
            s in 0.01f64..100.0,
        ) {
            let img = LinearImage::new(2, 2, px).unwrap();
            let e = Illuminant::from_rgb(e).unwrap();
            let a = von_kries_correct(&img, &e).unwrap();
            let b = von_kries_correct(&img.scaled(s).unwrap(), &e).unwrap();
            let truth = [1.0; 3];
            for (pa, pb) in a.pixels().zip(b.pixels()) {
                let ea = angular_error(pa, truth).unwrap().degrees();
                let eb = angular_error(pb, truth).unwrap().degrees();
                prop_assert!((ea - eb).abs() < 1e-9);
            }
        }

        #[test]
        fn gamma_round_trip(v in 0.0f64..=1.0, g in 0.2f64..5.0) {
            let img = LinearImage::filled(1, 1, [v; 3]).unwrap();
            let back = gamma_encode(&gamma_decode(&img, g).unwrap(), g).unwrap();
            prop_assert!((back.data()[0] - v).abs() < 1e-6);
        }
    }
}
