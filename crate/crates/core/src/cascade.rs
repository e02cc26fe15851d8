//! The cascade model: stage networks, stage composition and the cascade losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::color::{gamma_encode, Illuminant, LinearImage, CHANNEL_FLOOR};
use crate::error::{Error, Result};

/// Cosine guard used by the differentiable angular loss.
pub const COSINE_GUARD: f64 = 1e-7;

/// Bias of the final convolution at initialization; a positive value keeps the
/// last ReLU alive so the first estimate is close to neutral.
const FINAL_BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Architecture shared by every stage of a cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct StageNetConfig {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// Dropout probability applied to the input of the last convolution.
    pub dropout_p: f64,
}

impl Default for StageNetConfig {
    /// Four 3×3 convolutions, 8 → 16 → 16 → 3 channels, strides 2, 2, 1, 1.
    fn default() -> Self {
        Self::from_channels(&[8, 16, 16, 3], 3, &[2, 2, 1, 1], 0.5)
    }
}

impl StageNetConfig {
    /// Same-padded square kernels with the given channel and stride lists.
    pub fn from_channels(channels: &[usize], kernel: usize, strides: &[usize], dropout_p: f64) -> Self {
        let layers = channels
            .iter()
            .zip(strides)
            .map(|(&out_channels, &stride)| ConvLayerSpec { out_channels, kernel, stride, padding: kernel / 2 })
            .collect();
        Self { in_channels: 3, layers, dropout_p }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::Config("stage network needs at least one convolution".into()));
        };
        if self.in_channels != 3 {
            return Err(Error::Config(format!("stage input must have 3 channels, got {}", self.in_channels)));
        }
        if last.out_channels != 3 {
            return Err(Error::Config(format!("final convolution must emit 3 channels, got {}", last.out_channels)));
        }
        if let Some(l) = self.layers.iter().find(|l| l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(Error::Config(format!("invalid convolution {l:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout probability {} not in [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// `(weight shape, bias shape)` per layer.
    pub fn param_shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut c = self.in_channels;
        self.layers
            .iter()
            .map(|l| {
                let shape = [l.out_channels, c, l.kernel, l.kernel];
                c = l.out_channels;
                (shape, l.out_channels)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(w, b)| w.iter().product::<usize>() + b).sum()
    }

    /// Spatial size of the last feature map, or an error if the stack does not fit.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.layers.iter().try_fold((height, width), |(h, w), l| {
            if l.kernel > h + 2 * l.padding || l.kernel > w + 2 * l.padding {
                return Err(Error::Shape(format!("input {height}x{width} too small for the convolution stack")));
            }
            Ok(((h + 2 * l.padding - l.kernel) / l.stride + 1, (w + 2 * l.padding - l.kernel) / l.stride + 1))
        })
    }
}

/// Whether a forward pass samples dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// One stage: a convolution stack reduced to a unit-norm RGB estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StageNet {
    config: StageNetConfig,
    /// `[weight_0, bias_0, weight_1, bias_1, ...]`
    params: Vec<Tensor>,
}

impl StageNet {
    /// He-normal weights, zero hidden biases, a small positive final bias.
    pub fn new<R: Rng + ?Sized>(config: StageNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (i, (w, b)) in shapes.iter().enumerate() {
            let fan_in = (w[1] * w[2] * w[3]) as f64;
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
            let data = (0..w.iter().product()).map(|_| normal.sample(rng)).collect();
            params.push(Tensor::parameter(w, data)?);
            let bias = if i + 1 == shapes.len() { FINAL_BIAS_INIT } else { 0.0 };
            params.push(Tensor::parameter(&[*b], vec![bias; *b])?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: StageNetConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", 2 * shapes.len(), params.len())));
        }
        for ((w, b), pair) in shapes.iter().zip(params.chunks_exact(2)) {
            if pair[0].shape() != w || pair[1].shape() != [*b] {
                return Err(Error::Shape(format!(
                    "parameter shapes {:?}/{:?} do not match architecture {w:?}/[{b}]",
                    pair[0].shape(),
                    pair[1].shape()
                )));
            }
        }
        let params = params.into_iter().map(|p| if p.requires_grad() { p } else { p.with_grad() }).collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &StageNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Records every parameter on `tape`.
    pub fn watch(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Runs the stack on an `[N, 3, H, W]` input with the given parameter nodes,
    /// producing `[N, 3]` unit-norm estimates.
    pub fn forward_with(&self, tape: &mut Tape, input: Var, params: &[Var], mode: &mut Mode<'_>) -> Result<Var> {
        let last = self.config.layers.len() - 1;
        let mut x = input;
        for (i, layer) in self.config.layers.iter().enumerate() {
            if i == last {
                if let Mode::Train(rng) = mode {
                    x = tape.dropout(x, self.config.dropout_p, true, &mut **rng)?;
                }
            }
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], layer.stride, layer.padding)?;
            x = tape.relu(x)?;
        }
        let pooled = tape.spatial_sum(x)?;
        let positive = tape.clamp_min(pooled, CHANNEL_FLOOR)?;
        tape.normalize_rows(positive)
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, mode: &mut Mode<'_>) -> Result<(Var, Vec<Var>)> {
        let params = self.watch(tape);
        let out = self.forward_with(tape, input, &params, mode)?;
        Ok((out, params))
    }
}

/// An ordered list of independently parameterized stages sharing one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    stages: Vec<StageNet>,
    input_gamma: f64,
}

/// Tape nodes of one cascade forward pass.
#[derive(Debug, Clone)]
pub struct CascadeTrace {
    /// Parameter nodes per stage.
    pub params: Vec<Vec<Var>>,
    /// `[N, 3]` estimate of each stage on its own corrected input.
    pub stage: Vec<Var>,
    /// `[N, 3]` normalized running product of stage estimates.
    pub cumulative: Vec<Var>,
}

/// Per-image result of a cascade forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeOutput {
    pub stage_estimates: Vec<Illuminant>,
    pub cumulative_estimates: Vec<Illuminant>,
}

impl CascadeOutput {
    /// Builds the cumulative estimates from stage estimates.
    pub fn from_stage_estimates(stage_estimates: Vec<Illuminant>) -> Result<Self> {
        let first = *stage_estimates.first().ok_or(Error::EmptyInput)?;
        let mut cumulative_estimates = vec![first.normalized()];
        for e in &stage_estimates[1..] {
            let prev = cumulative_estimates[cumulative_estimates.len() - 1];
            cumulative_estimates.push(prev.compose(e));
        }
        Ok(Self { stage_estimates, cumulative_estimates })
    }

    pub fn final_estimate(&self) -> Illuminant {
        *self.cumulative_estimates.last().expect("cascade has at least one stage")
    }
}

impl CascadeModel {
    pub fn new<R: Rng + ?Sized>(config: StageNetConfig, stages: usize, rng: &mut R) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        let stages = (0..stages).map(|_| StageNet::new(config.clone(), rng)).collect::<Result<_>>()?;
        Ok(Self { stages, input_gamma: 1.0 })
    }

    pub fn from_stages(stages: Vec<StageNet>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        };
        if stages.iter().any(|s| s.config != first.config) {
            return Err(Error::Config("all stages must share one architecture".into()));
        }
        Ok(Self { stages, input_gamma: 1.0 })
    }

    /// `count` copies of one stage, each with its own parameters.
    pub fn replicate(stage: &StageNet, count: usize) -> Result<Self> {
        Self::from_stages(vec![stage.clone(); count])
    }

    /// Gamma applied to images before they enter the first stage (1 = linear).
    pub fn input_gamma(&self) -> f64 {
        self.input_gamma
    }

    pub fn with_input_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Domain(format!("input gamma must be positive, got {gamma}")));
        }
        self.input_gamma = gamma;
        Ok(self)
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[StageNet] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [StageNet] {
        &mut self.stages
    }

    pub fn config(&self) -> &StageNetConfig {
        &self.stages[0].config
    }

    pub fn param_count(&self) -> usize {
        self.config().param_count() * self.stages.len()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.stages.iter_mut().flat_map(|s| s.params.iter_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.stages.iter_mut().flat_map(|s| s.params.iter_mut()).for_each(Tensor::zero_grad);
    }

    /// All parameters concatenated in stage, layer, weight-then-bias order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|s| s.params.iter().flat_map(|p| p.data().iter().copied())).collect()
    }

    /// Splits a flat parameter node (laid out as [`Self::flat_params`]) into per-stage views.
    pub fn param_views(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Vec<Var>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut views = Vec::with_capacity(stage.params.len());
            for p in &stage.params {
                views.push(tape.view(flat, offset, p.shape())?);
                offset += p.numel();
            }
            out.push(views);
        }
        Ok(out)
    }

    pub fn watch(&self, tape: &mut Tape) -> Vec<Vec<Var>> {
        self.stages.iter().map(|s| s.watch(tape)).collect()
    }

    /// Runs the cascade on an `[N, 3, H, W]` node: `X_1 = X`, `X_{l+1} = X_l / f_l(X_l)`.
    ///
    /// With `stop_gradient`, the division uses a detached copy of the stage
    /// estimate, so later stages do not push gradient into earlier ones through
    /// the corrected image.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        input: Var,
        params: &[Vec<Var>],
        mode: &mut Mode<'_>,
        stop_gradient: bool,
    ) -> Result<CascadeTrace> {
        let mut x = input;
        let mut stage = Vec::with_capacity(self.stages.len());
        let mut cumulative: Vec<Var> = Vec::with_capacity(self.stages.len());
        for (l, net) in self.stages.iter().enumerate() {
            let run = |tape: &mut Tape, mode: &mut Mode<'_>| -> Result<(Var, Var)> {
                let e = net.forward_with(tape, x, &params[l], mode)?;
                let c = match cumulative.last() {
                    None => e,
                    Some(&prev) => {
                        let p = tape.mul(prev, e)?;
                        tape.normalize_rows(p)?
                    }
                };
                Ok((e, c))
            };
            let (e, c) = run(tape, mode).map_err(|err| err.in_stage(l))?;
            stage.push(e);
            cumulative.push(c);
            if l + 1 < self.stages.len() {
                let divisor = if stop_gradient { tape.detach(e) } else { e };
                x = tape.channel_div(x, divisor).map_err(|err| err.in_stage(l))?;
            }
        }
        Ok(CascadeTrace { params: params.to_vec(), stage, cumulative })
    }

    pub fn forward(&self, tape: &mut Tape, input: Var, mode: &mut Mode<'_>, stop_gradient: bool) -> Result<CascadeTrace> {
        let params = self.watch(tape);
        self.forward_with(tape, input, &params, mode, stop_gradient)
    }

    /// Adds the tape gradients of the traced parameters into the model.
    pub fn accumulate_grads(&mut self, tape: &Tape, trace: &CascadeTrace) {
        for (stage, vars) in self.stages.iter_mut().zip(&trace.params) {
            for (p, &v) in stage.params.iter_mut().zip(vars) {
                if let Some(g) = tape.grad(v) {
                    p.accumulate_grad(g);
                }
            }
        }
    }

    /// Inference on a single image: masked pixels are zeroed and the model's
    /// input gamma applied before the first stage.
    pub fn predict(&self, image: &LinearImage) -> Result<CascadeOutput> {
        let prepared = prepare_input(image, self.input_gamma)?;
        let mut outputs = self.predict_prepared(&[&prepared])?;
        Ok(outputs.remove(0))
    }

    /// Inference on already prepared images of identical size.
    pub fn predict_prepared(&self, images: &[&LinearImage]) -> Result<Vec<CascadeOutput>> {
        let (shape, data) = stack_planar(images)?;
        let mut tape = Tape::new();
        let input = tape.constant(&shape, data)?;
        let trace = self.forward(&mut tape, input, &mut Mode::Eval, false)?;
        let rows = |v: Var| -> Result<Vec<Illuminant>> {
            tape.value(v).chunks_exact(3).map(|r| Illuminant::from_rgb([r[0], r[1], r[2]])).collect()
        };
        let stage = trace.stage.iter().map(|&v| rows(v)).collect::<Result<Vec<_>>>()?;
        let cumulative = trace.cumulative.iter().map(|&v| rows(v)).collect::<Result<Vec<_>>>()?;
        Ok((0..images.len())
            .map(|n| CascadeOutput {
                stage_estimates: stage.iter().map(|s| s[n]).collect(),
                cumulative_estimates: cumulative.iter().map(|c| c[n]).collect(),
            })
            .collect())
    }
}

/// Zeroes masked pixels and gamma-encodes, the preprocessing every stage input gets.
pub fn prepare_input(image: &LinearImage, gamma: f64) -> Result<LinearImage> {
    let zeroed = image.zero_masked();
    if gamma == 1.0 {
        Ok(zeroed)
    } else {
        gamma_encode(&zeroed, gamma)
    }
}

/// Stacks equally sized images into a planar `[N, 3, H, W]` buffer.
pub fn stack_planar(images: &[&LinearImage]) -> Result<([usize; 4], Vec<f64>)> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        data.extend(img.to_planar());
    }
    Ok(([images.len(), 3, h, w], data))
}

/// Per-stage loss weights `w_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    weights: Vec<f64>,
}

impl LossConfig {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("loss weights must not be empty".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights {weights:?} must be finite and non-negative")));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(Self { weights })
    }

    /// Every stage weighted 1.
    pub fn uniform(stages: usize) -> Result<Self> {
        Self::new(vec![1.0; stages])
    }

    /// Only the final hypothesis is penalized.
    pub fn final_only(stages: usize) -> Result<Self> {
        let mut w = vec![0.0; stages];
        if let Some(last) = w.last_mut() {
            *last = 1.0;
        }
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Batch-mean angle in radians between `[N, 3]` predictions and truths.
pub fn angular_loss(tape: &mut Tape, prediction: Var, truth: Var) -> Result<Var> {
    let p = tape.normalize_rows(prediction)?;
    let t = tape.normalize_rows(truth)?;
    let cos = tape.row_dot(p, t)?;
    let angle = tape.acos(cos, COSINE_GUARD)?;
    tape.mean(angle)
}

/// `Σ_l w_l · angle(c_l, y)`, with `c_l` the cumulative estimates.
pub fn multiply_accumulate_loss(tape: &mut Tape, cumulative: &[Var], truth: Var, config: &LossConfig) -> Result<Var> {
    if config.len() != cumulative.len() {
        return Err(Error::Config(format!(
            "{} loss weights for a {}-stage cascade",
            config.len(),
            cumulative.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&c, &w) in cumulative.iter().zip(config.weights()) {
        let stage_loss = angular_loss(tape, c, truth)?;
        let term = tape.scale(stage_loss, w)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    total.ok_or(Error::EmptyInput)
}

/// The unweighted sum `Σ_l angle(c_l, y)`.
pub fn accumulate_loss(tape: &mut Tape, cumulative: &[Var], truth: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &c in cumulative {
        let stage_loss = angular_loss(tape, c, truth)?;
        total = Some(match total {
            None => stage_loss,
            Some(t) => tape.add(t, stage_loss)?,
        });
    }
    total.ok_or(Error::EmptyInput)
}

/// Evaluates the weighted loss of one cascade output against its truth, in radians.
pub fn output_loss(output: &CascadeOutput, truth: &Illuminant, config: &LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(&[1, 3], truth.rgb().to_vec())?;
    let cumulative = output
        .cumulative_estimates
        .iter()
        .map(|c| tape.constant(&[1, 3], c.rgb().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let loss = multiply_accumulate_loss(&mut tape, &cumulative, y, config)?;
    Ok(tape.scalar(loss))
}
