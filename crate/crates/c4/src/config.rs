//! Training configuration files: one `key = value` per line, `#` starts a comment.
//!
//! Ranges and lists are comma separated (`crop_scale = 0.1, 1.0`). Keys left
//! out keep their defaults.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use c4_core::augment::AugmentConfig;
use c4_core::cascade::{LossConfig, StageNetConfig};
use c4_core::train::TrainConfig;

use crate::error::{C4Error, Result};

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub net: StageNetConfig,
}

pub const KEYS: &[&str] = &[
    "batch_size",
    "learning_rate",
    "pretrain_epochs",
    "finetune_epochs",
    "seed",
    "loss_weights",
    "stop_gradient",
    "crop_scale",
    "rotation_degrees",
    "output_size",
    "hflip_prob",
    "illum_rescale",
    "rescales_per_image",
    "gamma",
    "channels",
    "strides",
    "kernel",
    "dropout",
];

fn one<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| format!("`{value}`: {e}"))
}

fn list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(one).collect()
}

fn pair(value: &str) -> std::result::Result<(f64, f64), String> {
    match list::<f64>(value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(format!("`{value}`: expected two comma-separated numbers")),
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut channels, mut strides, mut kernel, mut dropout) = (None, None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| C4Error::Line {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let (t, a) = (&mut cfg.train, &mut cfg.augment);
            let set: std::result::Result<(), String> = match key {
                "batch_size" => one(value).map(|v| t.batch_size = v),
                "learning_rate" => one(value).map(|v| t.learning_rate = v),
                "pretrain_epochs" => one(value).map(|v| t.pretrain_epochs = v),
                "finetune_epochs" => one(value).map(|v| t.finetune_epochs = v),
                "seed" => one(value).map(|v| t.seed = v),
                "loss_weights" => list(value)
                    .and_then(|w| LossConfig::new(w).map_err(|e| e.to_string()))
                    .map(|w| t.loss_weights = Some(w)),
                "stop_gradient" => one(value).map(|v| t.stop_gradient = v),
                "crop_scale" => pair(value).map(|v| a.crop_scale = v),
                "rotation_degrees" => pair(value).map(|v| a.rotation_degrees = v),
                "output_size" => one(value).map(|v| a.output_size = v),
                "hflip_prob" => one(value).map(|v| a.hflip_prob = v),
                "illum_rescale" => pair(value).map(|v| a.illum_rescale = v),
                "rescales_per_image" => one(value).map(|v| a.rescales_per_image = v),
                "gamma" => one(value).map(|v| a.gamma = v),
                "channels" => list(value).map(|v| channels = Some(v)),
                "strides" => list(value).map(|v| strides = Some(v)),
                "kernel" => one(value).map(|v| kernel = Some(v)),
                "dropout" => one(value).map(|v| dropout = Some(v)),
                _ => Err(format!("unknown key `{key}`")),
            };
            set.map_err(err)?;
        }
        if channels.is_some() || strides.is_some() || kernel.is_some() || dropout.is_some() {
            let base = StageNetConfig::default();
            let channels: Vec<usize> =
                channels.unwrap_or_else(|| base.layers.iter().map(|l| l.out_channels).collect());
            let strides: Vec<usize> =
                strides.unwrap_or_else(|| base.layers.iter().map(|l| l.stride).collect());
            if channels.len() != strides.len() {
                return Err(C4Error::format(
                    path,
                    "`channels` and `strides` must have the same length",
                ));
            }
            cfg.net = StageNetConfig::from_channels(
                &channels,
                kernel.unwrap_or(3),
                &strides,
                dropout.unwrap_or(base.dropout_p),
            );
        }
        cfg.validate()
            .map_err(|e| C4Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| C4Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> c4_core::Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.net.validate()
    }

    /// The configuration as a file `parse` accepts.
    pub fn render(&self) -> String {
        let (t, a, n) = (&self.train, &self.augment, &self.net);
        let join = |v: &[String]| v.join(", ");
        let mut lines = vec![
            format!("batch_size = {}", t.batch_size),
            format!("learning_rate = {}", t.learning_rate),
            format!("pretrain_epochs = {}", t.pretrain_epochs),
            format!("finetune_epochs = {}", t.finetune_epochs),
            format!("seed = {}", t.seed),
        ];
        if let Some(w) = &t.loss_weights {
            lines.push(format!(
                "loss_weights = {}",
                join(&w.weights().iter().map(f64::to_string).collect::<Vec<_>>())
            ));
        }
        lines.extend([
            format!("stop_gradient = {}", t.stop_gradient),
            format!("crop_scale = {}, {}", a.crop_scale.0, a.crop_scale.1),
            format!(
                "rotation_degrees = {}, {}",
                a.rotation_degrees.0, a.rotation_degrees.1
            ),
            format!("output_size = {}", a.output_size),
            format!("hflip_prob = {}", a.hflip_prob),
            format!(
                "illum_rescale = {}, {}",
                a.illum_rescale.0, a.illum_rescale.1
            ),
            format!("rescales_per_image = {}", a.rescales_per_image),
            format!("gamma = {}", a.gamma),
            format!(
                "channels = {}",
                join(
                    &n.layers
                        .iter()
                        .map(|l| l.out_channels.to_string())
                        .collect::<Vec<_>>()
                )
            ),
            format!(
                "strides = {}",
                join(
                    &n.layers
                        .iter()
                        .map(|l| l.stride.to_string())
                        .collect::<Vec<_>>()
                )
            ),
            format!("kernel = {}", n.layers[0].kernel),
            format!("dropout = {}", n.dropout_p),
        ]);
        lines.join("\n") + "\n"
    }
}
