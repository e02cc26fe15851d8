//! Two-phase training: a single stage first, then the whole cascade jointly.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::augment::{augment_sample, rescale_illuminant_augment, AugmentConfig};
use crate::autodiff::Tape;
use crate::cascade::{angular_loss, multiply_accumulate_loss, stack_planar, CascadeModel, LossConfig, Mode};
use crate::color::{Illuminant, LinearImage};
use crate::data::{stream_rng, Sample};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};

// Stream-space tags so shuffling, augmentation and dropout never share a generator.
const SHUFFLE_TAG: u64 = 1 << 62;
const DROPOUT_TAG: u64 = 1 << 61;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    /// Per-stage weights of the joint loss; `None` weights every stage 1.
    pub loss_weights: Option<LossConfig>,
    pub stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-4,
            pretrain_epochs: 200,
            finetune_epochs: 200,
            seed: 0,
            loss_weights: None,
            stop_gradient: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.pretrain_epochs + self.finetune_epochs == 0 {
            return Err(Error::Config("at least one training epoch is required".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    fn loss_for(&self, stages: usize) -> Result<LossConfig> {
        match &self.loss_weights {
            Some(w) if w.len() != stages => {
                Err(Error::Config(format!("{} loss weights for a {stages}-stage cascade", w.len())))
            }
            Some(w) => Ok(w.clone()),
            None => LossConfig::uniform(stages),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// Zero-based across both phases.
    pub epoch: usize,
    pub phase: Phase,
    /// Sample-weighted mean of the training objective, in degrees.
    pub mean_loss_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: CascadeModel,
    pub trace: Vec<EpochLoss>,
}

/// The augmented training item `item` of epoch `epoch`.
///
/// Item `k` is rescale draw `k % rescales` of source image `k / rescales`.
/// Its generator depends only on `(seed, epoch, k)`, so items may be built in
/// any order or in parallel.
pub fn training_item(
    samples: &[Sample],
    augment: &AugmentConfig,
    seed: u64,
    epoch: usize,
    item: usize,
) -> Result<(LinearImage, Illuminant)> {
    let per = augment.rescales_per_image.max(1);
    let sample = &samples[item / per];
    let mut rng = stream_rng(seed, ((epoch as u64) << 32) | item as u64);
    let (image, label) = rescale_illuminant_augment(&sample.image, &sample.illuminant, augment.illum_rescale, &mut rng)?;
    let (patch, label) = augment_sample(&image, &label, augment, &mut rng)?;
    Ok((patch.zero_masked(), label.normalized()))
}

/// Item order of one epoch.
pub fn epoch_order(items: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items).collect();
    order.shuffle(&mut stream_rng(seed, SHUFFLE_TAG | epoch as u64));
    order
}

struct Runner<'a> {
    samples: &'a [Sample],
    train: &'a TrainConfig,
    augment: &'a AugmentConfig,
    trace: Vec<EpochLoss>,
    epoch: usize,
}

impl Runner<'_> {
    fn run(&mut self, model: &mut CascadeModel, epochs: usize, phase: Phase, loss: &LossConfig) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let mut adam = Adam::new(AdamConfig::new(self.train.learning_rate))?;
        let items = self.samples.len() * self.augment.rescales_per_image.max(1);
        for _ in 0..epochs {
            let epoch = self.epoch;
            let order = epoch_order(items, self.train.seed, epoch);
            let mut total = 0.0;
            for (b, chunk) in order.chunks(self.train.batch_size).enumerate() {
                let batch = chunk
                    .iter()
                    .map(|&k| training_item(self.samples, self.augment, self.train.seed, epoch, k))
                    .collect::<Result<Vec<_>>>()?;
                let value = self.step(model, &mut adam, &batch, loss, epoch, b).map_err(|e| {
                    if e.is_numeric() {
                        Error::Diverged { epoch, batch: b }
                    } else {
                        e
                    }
                })?;
                total += value * chunk.len() as f64;
            }
            self.trace.push(EpochLoss { epoch, phase, mean_loss_deg: (total / items as f64).to_degrees() });
            self.epoch += 1;
        }
        Ok(())
    }

    fn step(
        &self,
        model: &mut CascadeModel,
        adam: &mut Adam,
        batch: &[(LinearImage, Illuminant)],
        loss: &LossConfig,
        epoch: usize,
        index: usize,
    ) -> Result<f64> {
        let images: Vec<&LinearImage> = batch.iter().map(|(i, _)| i).collect();
        let (shape, data) = stack_planar(&images)?;
        let truth: Vec<f64> = batch.iter().flat_map(|(_, l)| l.rgb()).collect();
        let mut tape = Tape::new();
        let x = tape.constant(&shape, data)?;
        let y = tape.constant(&[batch.len(), 3], truth)?;
        let mut rng = stream_rng(self.train.seed, DROPOUT_TAG | ((epoch as u64) << 24) | index as u64);
        let trace = model.forward(&mut tape, x, &mut Mode::Train(&mut rng), self.train.stop_gradient)?;
        let objective = if model.stage_count() == 1 && loss.weights() == [1.0] {
            angular_loss(&mut tape, trace.cumulative[0], y)?
        } else {
            multiply_accumulate_loss(&mut tape, &trace.cumulative, y, loss)?
        };
        let value = tape.scalar(objective);
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        tape.backward(objective)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &trace);
        adam.step(&mut model.params_mut())?;
        Ok(value)
    }
}

/// Trains `model` on `samples`.
///
/// Phase one trains the model's first stage alone with the angular loss.
/// Phase two copies the result into every stage and fine-tunes the cascade
/// with the weighted multiply-accumulate loss. A single-stage model simply
/// keeps training in phase two, so models of different depth get the same
/// epoch budget. Images enter the net with the augmentation gamma, which is
/// recorded on the returned model.
pub fn train(model: &CascadeModel, samples: &[Sample], train: &TrainConfig, augment: &AugmentConfig) -> Result<TrainedModel> {
    train.validate()?;
    augment.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let stages = model.stage_count();
    let joint_loss = train.loss_for(stages)?;
    let mut runner = Runner { samples, train, augment, trace: Vec::new(), epoch: 0 };

    let mut single = CascadeModel::from_stages(model.stages()[..1].to_vec())?;
    runner.run(&mut single, train.pretrain_epochs, Phase::Pretrain, &LossConfig::uniform(1)?)?;

    let mut cascade = CascadeModel::replicate(&single.stages()[0], stages)?;
    runner.run(&mut cascade, train.finetune_epochs, Phase::Finetune, &joint_loss)?;

    Ok(TrainedModel { model: cascade.with_input_gamma(augment.gamma)?, trace: runner.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::StageNetConfig;
    use crate::data::{synthesize_dataset, MondrianSpec};

    fn tiny() -> (CascadeModel, Vec<Sample>, TrainConfig, AugmentConfig) {
        let spec = MondrianSpec { height: 12, width: 12, ..Default::default() };
        let samples = synthesize_dataset(&spec, 6, 2).unwrap();
        let net = StageNetConfig::from_channels(&[4, 3], 3, &[2, 1], 0.0);
        let model = CascadeModel::new(net, 2, &mut stream_rng(0, 0)).unwrap();
        let cfg = TrainConfig { batch_size: 4, learning_rate: 1e-3, pretrain_epochs: 2, finetune_epochs: 2, ..Default::default() };
        let aug = AugmentConfig { output_size: 8, rescales_per_image: 1, gamma: 1.0, ..Default::default() };
        (model, samples, cfg, aug)
    }

    #[test]
    fn same_seed_same_trace_and_weights() {
        let (model, samples, cfg, aug) = tiny();
        let a = train(&model, &samples, &cfg, &aug).unwrap();
        let b = train(&model, &samples, &cfg, &aug).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.len(), 4);
        assert_eq!(a.trace.iter().filter(|e| e.phase == Phase::Finetune).count(), 2);
        let c = train(&model, &samples, &TrainConfig { seed: 1, ..cfg }, &aug).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn finetune_starts_from_replicated_stage() {
        let (model, samples, cfg, aug) = tiny();
        let cfg = TrainConfig { finetune_epochs: 0, ..cfg };
        let out = train(&model, &samples, &cfg, &aug).unwrap();
        assert_eq!(out.model.stage_count(), 2);
        assert_eq!(out.model.stages()[0], out.model.stages()[1]);
        assert_ne!(out.model.stages()[0], model.stages()[0]);
    }

    #[test]
    fn rejects_bad_input() {
        let (model, samples, cfg, aug) = tiny();
        assert!(matches!(train(&model, &[], &cfg, &aug), Err(Error::Config(_))));
        let zero = TrainConfig { pretrain_epochs: 0, finetune_epochs: 0, ..cfg.clone() };
        assert!(matches!(train(&model, &samples, &zero, &aug), Err(Error::Config(_))));
        let batch = TrainConfig { batch_size: 0, ..cfg.clone() };
        assert!(matches!(train(&model, &samples, &batch, &aug), Err(Error::Config(_))));
        let weights = TrainConfig { loss_weights: Some(LossConfig::uniform(3).unwrap()), ..cfg };
        assert!(matches!(train(&model, &samples, &weights, &aug), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_position() {
        let (model, samples, cfg, aug) = tiny();
        let cfg = TrainConfig { learning_rate: 1e300, ..cfg };
        match train(&model, &samples, &cfg, &aug) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch < 4),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn items_do_not_depend_on_order() {
        let (_, samples, _, aug) = tiny();
        let aug = AugmentConfig { rescales_per_image: 3, ..aug };
        let a = training_item(&samples, &aug, 5, 1, 7).unwrap();
        let _ = training_item(&samples, &aug, 5, 1, 2).unwrap();
        assert_eq!(a, training_item(&samples, &aug, 5, 1, 7).unwrap());
        assert_ne!(a, training_item(&samples, &aug, 5, 2, 7).unwrap());
        let mut order = epoch_order(18, 5, 0);
        order.sort();
        assert_eq!(order, (0..18).collect::<Vec<_>>());
    }
}
