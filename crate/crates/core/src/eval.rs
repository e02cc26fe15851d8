//! Error statistics, cross-validation and the cascade-depth study.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::augment::AugmentConfig;
use crate::cascade::{CascadeModel, CascadeOutput, StageNetConfig};
use crate::color::{AngularError, Illuminant, LinearImage};
use crate::data::{stream_rng, Sample};
use crate::error::{Error, Result};
use crate::statics::{estimate_preset, estimate_static, MinkowskiConfig, StaticPreset};
use crate::train::{train, TrainConfig};

/// Summary statistics of a set of angular errors, in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub best25_mean: f64,
    pub worst25_mean: f64,
    pub per_sample: Vec<(String, f64)>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h as usize;
    match sorted.get(lo + 1) {
        Some(&next) => sorted[lo] + (h - lo as f64) * (next - sorted[lo]),
        None => sorted[lo],
    }
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl ErrorReport {
    /// Statistics of labelled errors.
    ///
    /// Every sum runs over the ascending-sorted errors, so the result does not
    /// depend on input order at all.
    pub fn from_labelled(per_sample: Vec<(String, AngularError)>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut sorted: Vec<f64> = per_sample.iter().map(|(_, e)| e.degrees()).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let k = (n / 4).max(1);
        let (q1, q2, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
        Ok(Self {
            n,
            mean: mean_of(&sorted),
            median: q2,
            trimean: (q1 + 2.0 * q2 + q3) / 4.0,
            best25_mean: mean_of(&sorted[..k]),
            worst25_mean: mean_of(&sorted[n - k..]),
            per_sample: per_sample.into_iter().map(|(id, e)| (id, e.degrees())).collect(),
        })
    }
}

/// Statistics of unlabelled errors; samples are named by position.
pub fn summarize(errors: &[AngularError]) -> Result<ErrorReport> {
    ErrorReport::from_labelled(errors.iter().enumerate().map(|(i, &e)| (i.to_string(), e)).collect())
}

/// Anything that maps an image to an illuminant estimate.
pub trait Estimator {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant>;
}

impl Estimator for CascadeModel {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant> {
        Ok(self.predict(image)?.final_estimate())
    }
}

impl Estimator for MinkowskiConfig {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant> {
        estimate_static(image, self)
    }
}

impl Estimator for StaticPreset {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant> {
        estimate_preset(image, *self)
    }
}

impl<E: Estimator + ?Sized> Estimator for &E {
    fn estimate(&self, image: &LinearImage) -> Result<Illuminant> {
        (**self).estimate(image)
    }
}

/// Errors of `estimator` on every sample.
pub fn evaluate<E: Estimator + ?Sized>(estimator: &E, samples: &[Sample]) -> Result<ErrorReport> {
    let labelled = samples
        .iter()
        .map(|s| Ok((s.id.clone(), estimator.estimate(&s.image)?.angle_to(&s.illuminant))))
        .collect::<Result<Vec<_>>>()?;
    ErrorReport::from_labelled(labelled)
}

/// Per-sample cascade outputs and the report on their final estimates.
pub fn evaluate_cascade(model: &CascadeModel, samples: &[Sample]) -> Result<(ErrorReport, Vec<CascadeOutput>)> {
    let outputs = samples.iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>>>()?;
    let labelled = samples
        .iter()
        .zip(&outputs)
        .map(|(s, o)| (s.id.clone(), o.final_estimate().angle_to(&s.illuminant)))
        .collect();
    Ok((ErrorReport::from_labelled(labelled)?, outputs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub folds: Vec<ErrorReport>,
    pub pooled: ErrorReport,
}

/// Samples of fold `fold` and of every other fold, as (train, test).
pub fn split_fold(samples: &[Sample], fold: usize) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(|s| s.fold != Some(fold))
}

/// K-fold cross-validation over pre-assigned folds.
///
/// `fit(k, train)` builds an estimator from every sample outside fold `k`;
/// it is then evaluated on fold `k`. Fails if a test id also occurs in the
/// training split.
pub fn cross_validate<E, F>(samples: &[Sample], folds: usize, mut fit: F) -> Result<CrossValidation>
where
    E: Estimator,
    F: FnMut(usize, &[Sample]) -> Result<E>,
{
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(s) = samples.iter().find(|s| s.fold.is_none_or(|f| f >= folds)) {
        return Err(Error::Config(format!("sample {} has no fold below {folds}", s.id)));
    }
    let mut reports = Vec::with_capacity(folds);
    let mut pooled = Vec::with_capacity(samples.len());
    for k in 0..folds {
        let (train_set, test_set) = split_fold(samples, k);
        let train_ids: BTreeSet<&str> = train_set.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = test_set.iter().find(|s| train_ids.contains(s.id.as_str())) {
            return Err(Error::Config(format!("sample id {} is in both the training and test split", s.id)).in_fold(k));
        }
        if test_set.is_empty() {
            return Err(Error::Config("fold has no samples".into()).in_fold(k));
        }
        let estimator = fit(k, &train_set).map_err(|e| e.in_fold(k))?;
        let report = evaluate(&estimator, &test_set).map_err(|e| e.in_fold(k))?;
        pooled.extend(report.per_sample.iter().cloned());
        reports.push(report);
    }
    let pooled = pooled.into_iter().map(|(id, d)| Ok((id, AngularError::from_degrees(d)?))).collect::<Result<_>>()?;
    Ok(CrossValidation { folds: reports, pooled: ErrorReport::from_labelled(pooled)? })
}

/// `P(l, l+1)`: for each consecutive stage pair, the fraction of samples whose
/// cumulative estimate is strictly more accurate at the later stage.
pub fn stage_improvement_ratio(outputs: &[CascadeOutput], truths: &[Illuminant]) -> Result<Vec<f64>> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if outputs.len() != truths.len() {
        return Err(Error::Shape(format!("{} outputs but {} ground truths", outputs.len(), truths.len())));
    }
    let stages = outputs[0].cumulative_estimates.len();
    if stages < 2 {
        return Err(Error::Config(format!("improvement ratios need at least 2 stages, got {stages}")));
    }
    if outputs.iter().any(|o| o.cumulative_estimates.len() != stages) {
        return Err(Error::Shape("outputs have different stage counts".into()));
    }
    let mut wins = alloc::vec![0usize; stages - 1];
    for (o, t) in outputs.iter().zip(truths) {
        let errs: Vec<f64> = o.cumulative_estimates.iter().map(|c| c.angle_to(t).degrees()).collect();
        for l in 0..stages - 1 {
            if errs[l + 1] < errs[l] {
                wins[l] += 1;
            }
        }
    }
    Ok(wins.into_iter().map(|w| w as f64 / outputs.len() as f64).collect())
}

/// Everything the depth study holds fixed across cascade sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub net: StageNetConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub stages: usize,
    pub report: ErrorReport,
    /// `P(l, l+1)` on the test set; empty for a single stage.
    pub improvement: Vec<f64>,
    pub model: CascadeModel,
}

/// Trains one cascade per requested depth under identical settings and
/// evaluates each on `test`.
///
/// All depths start from the same first-stage weights and see the same
/// batches, so the single-stage row is the plain network baseline.
pub fn cascade_size_study(sizes: &[usize], train_set: &[Sample], test: &[Sample], config: &StudyConfig) -> Result<Vec<StudyRow>> {
    if sizes.is_empty() {
        return Err(Error::Config("no cascade sizes requested".into()));
    }
    sizes
        .iter()
        .map(|&stages| {
            let init = CascadeModel::new(config.net.clone(), stages, &mut stream_rng(config.init_seed, 0))?;
            let trained = train(&init, train_set, &config.train, &config.augment)?;
            let (report, outputs) = evaluate_cascade(&trained.model, test)?;
            let improvement = if stages >= 2 {
                let truths: Vec<Illuminant> = test.iter().map(|s| s.illuminant).collect();
                stage_improvement_ratio(&outputs, &truths)?
            } else {
                Vec::new()
            };
            Ok(StudyRow { stages, report, improvement, model: trained.model })
        })
        .collect()
}
