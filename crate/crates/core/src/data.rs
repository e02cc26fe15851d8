//! In-memory datasets, fold assignment and synthetic Mondrian scenes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::color::{normalize_illuminant, Illuminant, LinearImage};
use crate::error::{Error, Result};

/// Independent generator for stream `stream` of run `seed`.
///
/// Used wherever work is keyed by an index (sample, epoch) so results do not
/// depend on processing order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One labelled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: LinearImage,
    pub illuminant: Illuminant,
    pub fold: Option<usize>,
    pub camera: String,
}

/// Seeded random partition of `count` items into `k` folds whose sizes differ by at most one.
pub fn assign_folds(count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {k}")));
    }
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; count];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(folds)
}

/// Fills in folds for samples that have none.
///
/// Samples either all carry a fold already (kept as is) or none do (a seeded
/// partition is drawn); a mix is rejected.
pub fn ensure_folds(samples: &mut [Sample], k: usize, seed: u64) -> Result<()> {
    let assigned = samples.iter().filter(|s| s.fold.is_some()).count();
    if assigned == samples.len() {
        if let Some(s) = samples.iter().find(|s| s.fold.is_some_and(|f| f >= k)) {
            return Err(Error::Config(format!("sample {} has fold {:?} but only {k} folds exist", s.id, s.fold)));
        }
        return Ok(());
    }
    if assigned != 0 {
        return Err(Error::Config(format!("{assigned} of {} samples carry a fold; assign all or none", samples.len())));
    }
    let folds = assign_folds(samples.len(), k, seed)?;
    for (s, f) in samples.iter_mut().zip(folds) {
        s.fold = Some(f);
    }
    Ok(())
}

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct MondrianSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of rectangle counts.
    pub patches: (usize, usize),
    /// Per-channel reflectance range.
    pub reflectance: (f64, f64),
    /// Per-channel illuminant range before normalization.
    pub illuminant: (f64, f64),
    pub noise_std: f64,
    /// Rescale reflectance channels so their spatial means are equal.
    pub gray_balanced: bool,
    /// Paint one perfectly white rectangle last.
    pub white_patch: bool,
    /// Paint a saturated calibration rectangle and mask it out.
    pub chart: bool,
}

impl Default for MondrianSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patches: (4, 12),
            reflectance: (0.05, 0.95),
            illuminant: (0.6, 1.4),
            noise_std: 0.0,
            gray_balanced: false,
            white_patch: false,
            chart: false,
        }
    }
}

impl MondrianSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        if self.patches.0 == 0 || self.patches.0 > self.patches.1 {
            return Err(Error::Config(format!("patch count range {:?} must start at 1 or more", self.patches)));
        }
        let (r0, r1) = self.reflectance;
        if !(r0 >= 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(Error::Config(format!("invalid reflectance range {:?}", self.reflectance)));
        }
        let (i0, i1) = self.illuminant;
        if !(i0 > 0.0 && i0 <= i1 && i1.is_finite()) {
            return Err(Error::Config(format!("invalid illuminant range {:?}", self.illuminant)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Axis-aligned rectangle `[y0, y1) × [x0, x1)` of constant reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub reflectance: [f64; 3],
}

/// Reflectance layout of a Mondrian, independent of the light.
#[derive(Debug, Clone, PartialEq)]
pub struct MondrianScene {
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Painted in order; later patches cover earlier ones.
    pub patches: Vec<Patch>,
    /// Rectangle excluded from statistics, if any.
    pub masked: Option<Patch>,
}

impl MondrianScene {
    pub fn reflectance(&self) -> Result<LinearImage> {
        let mut data = self.background.iter().copied().cycle().take(self.height * self.width * 3).collect::<Vec<_>>();
        for p in self.patches.iter().chain(self.masked.iter()) {
            for y in p.y0..p.y1.min(self.height) {
                for x in p.x0..p.x1.min(self.width) {
                    let i = (y * self.width + x) * 3;
                    data[i..i + 3].copy_from_slice(&p.reflectance);
                }
            }
        }
        let image = LinearImage::new(self.height, self.width, data)?;
        match &self.masked {
            None => Ok(image),
            Some(p) => {
                let mask = (0..self.height * self.width)
                    .map(|i| (p.y0..p.y1).contains(&(i / self.width)) && (p.x0..p.x1).contains(&(i % self.width)))
                    .collect();
                image.with_mask(mask)
            }
        }
    }

    /// Reflectance times illuminant, plus Gaussian noise clipped at zero.
    pub fn render<R: Rng + ?Sized>(&self, illuminant: &Illuminant, noise_std: f64, rng: &mut R) -> Result<LinearImage> {
        let lit = self.reflectance()?.scale_channels(illuminant.rgb())?;
        if noise_std == 0.0 {
            return Ok(lit);
        }
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::Domain(format!("{e}")))?;
        let (h, w, data, mask) = lit.into_parts();
        let data = data.into_iter().map(|v| (v + normal.sample(rng)).max(0.0)).collect();
        let noisy = LinearImage::new(h, w, data)?;
        match mask {
            Some(m) => noisy.with_mask(m),
            None => Ok(noisy),
        }
    }
}

/// A generated image with its ground truth and the reflectance behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub image: LinearImage,
    pub illuminant: Illuminant,
    pub scene: MondrianScene,
}

fn random_rect<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, min_frac: f64, max_frac: f64) -> (usize, usize, usize, usize) {
    let ph = ((h as f64 * rng.random_range(min_frac..=max_frac)) as usize).clamp(1, h);
    let pw = ((w as f64 * rng.random_range(min_frac..=max_frac)) as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ph);
    let x0 = rng.random_range(0..=w - pw);
    (y0, x0, y0 + ph, x0 + pw)
}

/// Samples a scene layout.
pub fn sample_scene<R: Rng + ?Sized>(spec: &MondrianSpec, rng: &mut R) -> Result<MondrianScene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (r0, r1) = spec.reflectance;
    let refl = |rng: &mut R| -> [f64; 3] {
        if r0 == r1 {
            [r0; 3]
        } else {
            [rng.random_range(r0..=r1), rng.random_range(r0..=r1), rng.random_range(r0..=r1)]
        }
    };
    let background = refl(rng);
    let count = rng.random_range(spec.patches.0..=spec.patches.1);
    let mut patches = Vec::with_capacity(count + 1);
    for _ in 0..count {
        let (y0, x0, y1, x1) = random_rect(rng, h, w, 0.1, 0.6);
        patches.push(Patch { y0, x0, y1, x1, reflectance: refl(rng) });
    }
    let mut scene = MondrianScene { height: h, width: w, background, patches, masked: None };
    if spec.gray_balanced {
        balance_channels(&mut scene)?;
    }
    if spec.white_patch {
        let (y0, x0, y1, x1) = random_rect(rng, h, w, 0.1, 0.25);
        scene.patches.push(Patch { y0, x0, y1, x1, reflectance: [1.0; 3] });
    }
    if spec.chart {
        let (y0, x0, y1, x1) = random_rect(rng, h, w, 0.1, 0.2);
        let mut saturated = [0.05; 3];
        saturated[rng.random_range(0..3)] = 1.0;
        scene.masked = Some(Patch { y0, x0, y1, x1, reflectance: saturated });
    }
    Ok(scene)
}

/// Scales each reflectance channel so every channel has the same spatial mean.
fn balance_channels(scene: &mut MondrianScene) -> Result<()> {
    let refl = scene.reflectance()?;
    let mut means = [0.0; 3];
    for p in refl.pixels() {
        for j in 0..3 {
            means[j] += p[j];
        }
    }
    let target = (means[0] + means[1] + means[2]) / 3.0;
    let gains = means.map(|m| target / m);
    let apply = |r: &mut [f64; 3]| {
        for j in 0..3 {
            r[j] *= gains[j];
        }
    };
    apply(&mut scene.background);
    scene.patches.iter_mut().for_each(|p| apply(&mut p.reflectance));
    Ok(())
}

/// Draws an illuminant with independent per-channel gains, normalized.
pub fn sample_illuminant<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> Result<Illuminant> {
    let (lo, hi) = range;
    let draw = |rng: &mut R| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    normalize_illuminant([draw(rng), draw(rng), draw(rng)])
}

/// Random Mondrian under a random light, with its reflectance layout.
pub fn generate_scene<R: Rng + ?Sized>(spec: &MondrianSpec, rng: &mut R) -> Result<GeneratedScene> {
    let scene = sample_scene(spec, rng)?;
    let illuminant = sample_illuminant(spec.illuminant, rng)?;
    let image = scene.render(&illuminant, spec.noise_std, rng)?;
    Ok(GeneratedScene { image, illuminant, scene })
}

/// Random Mondrian image and its normalized ground-truth illuminant.
pub fn generate_mondrian<R: Rng + ?Sized>(spec: &MondrianSpec, rng: &mut R) -> Result<(LinearImage, Illuminant)> {
    let g = generate_scene(spec, rng)?;
    Ok((g.image, g.illuminant))
}

/// `count` scenes, scene `i` drawn from its own stream so the set is a prefix-stable function of `seed`.
pub fn synthesize_dataset(spec: &MondrianSpec, count: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let (image, illuminant) = generate_mondrian(spec, &mut stream_rng(seed, i as u64))?;
            Ok(Sample { id: format!("mondrian_{i:05}"), image, illuminant, fold: None, camera: String::from("synthetic") })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statics::{estimate_preset, StaticPreset};

    #[test]
    fn fold_sizes() {
        let f = assign_folds(9, 3, 1).unwrap();
        let counts: Vec<usize> = (0..3).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        assert_eq!(counts, vec![3, 3, 3]);
        let f = assign_folds(10, 3, 1).unwrap();
        let mut counts: Vec<usize> = (0..3).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        counts.sort();
        assert_eq!(counts, vec![3, 3, 4]);
        assert_eq!(assign_folds(10, 3, 7).unwrap(), assign_folds(10, 3, 7).unwrap());
        assert_ne!(assign_folds(30, 3, 7).unwrap(), assign_folds(30, 3, 8).unwrap());
        assert!(matches!(assign_folds(5, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ensure_folds_rules() {
        let spec = MondrianSpec { height: 8, width: 8, ..Default::default() };
        let mut samples = synthesize_dataset(&spec, 7, 3).unwrap();
        ensure_folds(&mut samples, 3, 0).unwrap();
        assert!(samples.iter().all(|s| s.fold.is_some_and(|f| f < 3)));
        ensure_folds(&mut samples, 3, 99).unwrap();
        samples[0].fold = None;
        assert!(matches!(ensure_folds(&mut samples, 3, 0), Err(Error::Config(_))));
        samples[0].fold = Some(5);
        assert!(matches!(ensure_folds(&mut samples, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_gray_patch_under_reddish_light() {
        let s6 = 6f64.sqrt();
        let e = Illuminant::new(2.0 / s6, 1.0 / s6, 1.0 / s6).unwrap();
        let scene = MondrianScene {
            height: 4,
            width: 5,
            background: [0.2, 0.7, 0.1],
            patches: vec![Patch { y0: 0, x0: 0, y1: 4, x1: 5, reflectance: [0.5; 3] }],
            masked: None,
        };
        let img = scene.render(&e, 0.0, &mut stream_rng(0, 0)).unwrap();
        for p in img.pixels() {
            assert_eq!(p, [0.5 * 2.0 / s6, 0.5 / s6, 0.5 / s6]);
        }
    }

    #[test]
    fn ground_truth_is_pixel_over_reflectance() {
        let spec = MondrianSpec::default();
        for seed in 0..5 {
            let g = generate_scene(&spec, &mut stream_rng(seed, 0)).unwrap();
            let refl = g.scene.reflectance().unwrap();
            let e = g.illuminant.rgb();
            assert!((g.illuminant.norm() - 1.0).abs() < 1e-12);
            for (p, r) in g.image.pixels().zip(refl.pixels()) {
                for j in 0..3 {
                    // one rounding in the product, one in the quotient
                    let ratio = p[j] / r[j];
                    assert!((ratio - e[j]).abs() <= 2.0 * f64::EPSILON * e[j], "{ratio} vs {}", e[j]);
                }
            }
        }
    }

    #[test]
    fn balanced_scene_divided_by_truth_is_gray() {
        let spec = MondrianSpec { gray_balanced: true, ..Default::default() };
        for seed in 0..10 {
            let g = generate_scene(&spec, &mut stream_rng(seed, 1)).unwrap();
            let corrected = g.image.scale_channels(g.illuminant.rgb().map(|c| 1.0 / c)).unwrap();
            let e = estimate_preset(&corrected, StaticPreset::GrayWorld).unwrap();
            assert!(e.angle_to(&Illuminant::neutral()).degrees() < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = MondrianSpec { noise_std: 0.01, chart: true, ..Default::default() };
        let a = generate_mondrian(&spec, &mut stream_rng(11, 2)).unwrap();
        let b = generate_mondrian(&spec, &mut stream_rng(11, 2)).unwrap();
        assert_eq!(a, b);
        let c = generate_mondrian(&spec, &mut stream_rng(11, 3)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn chart_is_masked() {
        let spec = MondrianSpec { chart: true, ..Default::default() };
        let g = generate_scene(&spec, &mut stream_rng(4, 0)).unwrap();
        let p = g.scene.masked.unwrap();
        assert_eq!(g.image.masked_count(), (p.y1 - p.y0) * (p.x1 - p.x0));
    }

    #[test]
    fn spec_validation() {
        let ok = MondrianSpec::default();
        assert!(MondrianSpec { patches: (0, 3), ..ok.clone() }.validate().is_err());
        assert!(MondrianSpec { noise_std: -1.0, ..ok.clone() }.validate().is_err());
        assert!(MondrianSpec { illuminant: (0.0, 1.0), ..ok.clone() }.validate().is_err());
        assert!(MondrianSpec { width: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn dataset_is_prefix_stable() {
        let spec = MondrianSpec { height: 8, width: 8, ..Default::default() };
        let a = synthesize_dataset(&spec, 3, 5).unwrap();
        let b = synthesize_dataset(&spec, 6, 5).unwrap();
        assert_eq!(a[..], b[..3]);
    }
}
