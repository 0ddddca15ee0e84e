//! Small-model numerics: forward passes, cross-entropy loss with exact
//! backprop gradients, the plain and heavy-ball SGD updates, and the
//! learning-rate schedules.
//!
//! Three architectures are supported: binary or multinomial logistic
//! regression, ReLU multilayer perceptrons, and a small CNN built from
//! 3x3 same-padded convolutions, ReLU, and 2x2 max pooling followed by a
//! dense classifier. Parameters live in one flat `f64` vector whose layout
//! is fixed per architecture (weights row-major, then biases, layer by
//! layer).

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageShape, MiniBatchSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    /// Logistic regression. With two classes the model is a single weight
    /// vector plus bias and outputs `(1 - sigmoid(z), sigmoid(z))`.
    LogReg { dim: usize, classes: usize },
    /// `widths[0]` is the input dimension, the last entry the class count.
    Mlp { widths: Vec<usize> },
    SmallCnn { input: ImageShape, channels: Vec<usize>, classes: usize },
}

/// An architecture together with its exact flattened parameter count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRepr")]
pub struct ModelSpec {
    arch: Arch,
    param_count: usize,
}

#[derive(Deserialize)]
struct ModelSpecRepr {
    arch: Arch,
    param_count: Option<usize>,
}

impl TryFrom<ModelSpecRepr> for ModelSpec {
    type Error = Error;

    fn try_from(repr: ModelSpecRepr) -> Result<Self> {
        let spec = ModelSpec::new(repr.arch)?;
        match repr.param_count {
            Some(count) if count != spec.param_count => Err(Error::InvalidSpec(format!(
                "declared param_count {count} but architecture implies {}",
                spec.param_count
            ))),
            _ => Ok(spec),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Dense {
    fn weights<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.inputs * self.outputs]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        let start = self.offset + self.inputs * self.outputs;
        &params[start..start + self.outputs]
    }

    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvStage {
    cin: usize,
    cout: usize,
    height: usize,
    width: usize,
    offset: usize,
}

impl ConvStage {
    fn len(&self) -> usize {
        self.cout * self.cin * 9 + self.cout
    }

    fn pooled(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }
}

impl ModelSpec {
    pub fn new(arch: Arch) -> Result<Self> {
        let param_count = match &arch {
            Arch::LogReg { dim, classes } => {
                if *dim == 0 || *classes < 2 {
                    return Err(Error::InvalidSpec("logistic regression needs dim >= 1 and classes >= 2".into()));
                }
                if *classes == 2 {
                    dim + 1
                } else {
                    dim * classes + classes
                }
            }
            Arch::Mlp { widths } => {
                if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
                    return Err(Error::InvalidSpec("MLP needs at least input and output widths, all >= 1".into()));
                }
                if *widths.last().unwrap() < 2 {
                    return Err(Error::InvalidSpec("MLP needs at least two output classes".into()));
                }
                widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
            }
            Arch::SmallCnn { input, channels, classes } => {
                if input.is_empty() || channels.is_empty() || channels.iter().any(|&c| c == 0) || *classes < 2 {
                    return Err(Error::InvalidSpec("CNN needs a nonempty input, channel plan, and classes >= 2".into()));
                }
                let (mut h, mut w, mut cin, mut count) = (input.height, input.width, input.channels, 0);
                for &cout in channels {
                    if h < 2 || w < 2 {
                        return Err(Error::InvalidSpec("CNN pooling shrinks the feature map below 1x1".into()));
                    }
                    count += cout * cin * 9 + cout;
                    h /= 2;
                    w /= 2;
                    cin = cout;
                }
                count + classes * (h * w * cin) + classes
            }
        };
        Ok(Self { arch, param_count })
    }

    pub fn logreg(dim: usize, classes: usize) -> Result<Self> {
        Self::new(Arch::LogReg { dim, classes })
    }

    pub fn mlp(widths: Vec<usize>) -> Result<Self> {
        Self::new(Arch::Mlp { widths })
    }

    pub fn small_cnn(input: ImageShape, channels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::new(Arch::SmallCnn { input, channels, classes })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Arch::LogReg { dim, .. } => *dim,
            Arch::Mlp { widths } => widths[0],
            Arch::SmallCnn { input, .. } => input.len(),
        }
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            Arch::LogReg { classes, .. } | Arch::SmallCnn { classes, .. } => *classes,
            Arch::Mlp { widths } => *widths.last().unwrap(),
        }
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() == self.param_count {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected: self.param_count, actual: params.len() })
        }
    }

    /// Checks that a dataset can be fed to this model.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.dim() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), actual: dataset.dim() });
        }
        if dataset.classes() > self.classes() {
            return Err(Error::InvalidSpec(format!(
                "dataset has {} classes but the model outputs {}",
                dataset.classes(),
                self.classes()
            )));
        }
        Ok(())
    }

    fn dense_layers(&self) -> Vec<Dense> {
        let widths: Vec<usize> = match &self.arch {
            Arch::LogReg { dim, classes } => vec![*dim, *classes],
            Arch::Mlp { widths } => widths.clone(),
            Arch::SmallCnn { .. } => unreachable!("CNN layers are built by conv_layers"),
        };
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layer = Dense { inputs: w[0], outputs: w[1], offset };
                offset += layer.len();
                layer
            })
            .collect()
    }

    fn conv_layers(&self) -> (Vec<ConvStage>, Dense) {
        let Arch::SmallCnn { input, channels, classes } = &self.arch else {
            unreachable!("conv_layers called on a non-CNN spec");
        };
        let (mut h, mut w, mut cin, mut offset) = (input.height, input.width, input.channels, 0);
        let mut stages = Vec::with_capacity(channels.len());
        for &cout in channels {
            let stage = ConvStage { cin, cout, height: h, width: w, offset };
            offset += stage.len();
            stages.push(stage);
            h /= 2;
            w /= 2;
            cin = cout;
        }
        let head = Dense { inputs: h * w * cin, outputs: *classes, offset };
        (stages, head)
    }

    /// `(offset, len, fan_in)` of every parameter block, in layout order.
    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        match &self.arch {
            Arch::LogReg { dim, classes: 2 } => vec![(0, dim + 1, *dim)],
            Arch::LogReg { .. } | Arch::Mlp { .. } => {
                self.dense_layers().iter().map(|l| (l.offset, l.len(), l.inputs)).collect()
            }
            Arch::SmallCnn { .. } => {
                let (stages, head) = self.conv_layers();
                let mut out: Vec<_> = stages.iter().map(|s| (s.offset, s.len(), s.cin * 9)).collect();
                out.push((head.offset, head.len(), head.inputs));
                out
            }
        }
    }
}

/// Flat parameter vector of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.distance_sq(other).sqrt()
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn quantized_f32(&self) -> Self {
        Self(self.0.iter().map(|&v| f64::from(v as f32)).collect())
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    CosineAnneal { lr_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Total number of SGD steps; `epochs * floor(n / batch_size)` for a dataset of `n` samples.
    pub total_steps: u64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl Hyperparams {
    /// Plain SGD with a constant step size, sized for a dataset of `n` samples.
    pub fn plain(step_size: f64, batch_size: usize, epochs: usize, n: usize) -> Self {
        Self {
            step_size,
            batch_size,
            epochs,
            total_steps: steps_for(n, batch_size, epochs),
            momentum: 0.0,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.total_steps == 0 {
            return bad("batch_size, epochs, and total_steps must be >= 1");
        }
        if !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return bad("momentum and weight_decay must be >= 0");
        }
        if let LrSchedule::CosineAnneal { lr_min } = self.schedule {
            if !(lr_min >= 0.0 && lr_min <= self.step_size) {
                return bad("cosine lr_min must lie in [0, step_size]");
            }
        }
        Ok(())
    }

    /// True when the update rule is exactly plain constant-step SGD.
    pub fn is_plain(&self) -> bool {
        self.momentum == 0.0 && self.weight_decay == 0.0 && self.schedule == LrSchedule::Constant
    }
}

pub fn steps_for(n: usize, batch_size: usize, epochs: usize) -> u64 {
    (epochs * (n / batch_size.max(1))) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { velocity: vec![0.0; len], step: 0 }
    }
}

/// Learning rate for the update that follows `t` completed steps.
pub fn lr_at(t: u64, hp: &Hyperparams) -> Result<f64> {
    if t > hp.total_steps {
        return Err(Error::StepOutOfRange { t, total: hp.total_steps });
    }
    Ok(match hp.schedule {
        LrSchedule::Constant => hp.step_size,
        LrSchedule::CosineAnneal { lr_min } => {
            let phase = std::f64::consts::PI * t as f64 / hp.total_steps as f64;
            lr_min + 0.5 * (hp.step_size - lr_min) * (1.0 + phase.cos())
        }
    })
}

fn uniform_f32_bounded(rng: &mut impl Rng, bound: f64) -> f64 {
    let v = rng.random_range(-bound..bound);
    let mut r = v as f32;
    // Nearest-f32 rounding can step just past the bound; pull it back toward zero.
    while f64::from(r).abs() > bound {
        r = f32::from_bits(r.to_bits() - 1);
    }
    f64::from(r)
}

/// Deterministic uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// per layer. Values are exactly representable in `f32` so the initial
/// checkpoint survives serialization unchanged.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut values = vec![0.0; spec.param_count()];
    for (block, (offset, len, fan_in)) in spec.blocks().into_iter().enumerate() {
        let mut rng = rng::stream(seed, Domain::Init, block as u64);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[offset..offset + len] {
            *v = uniform_f32_bounded(&mut rng, bound);
        }
    }
    ParamVector(values)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
    max + sum.ln()
}

fn dense_forward(layer: &Dense, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let w = layer.weights(params);
    let b = layer.bias(params);
    let nonzero: Vec<usize> = (0..layer.inputs).filter(|&k| input[k] != 0.0).collect();
    out.clear();
    out.extend((0..layer.outputs).map(|o| {
        let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
        let mut z = b[o];
        for &k in &nonzero {
            z += row[k] * input[k];
        }
        z
    }));
}

/// Accumulates the dense-layer parameter gradient for upstream `delta` and
/// optionally writes the input gradient to `delta_in`.
fn dense_backward(
    layer: &Dense,
    params: &[f64],
    input: &[f64],
    delta: &[f64],
    grad: &mut [f64],
    delta_in: Option<&mut Vec<f64>>,
) {
    let nonzero: Vec<usize> = (0..layer.inputs).filter(|&k| input[k] != 0.0).collect();
    let (gw, gb) = grad[layer.offset..layer.offset + layer.len()].split_at_mut(layer.inputs * layer.outputs);
    for (o, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
        for &k in &nonzero {
            row[k] += d * input[k];
        }
        gb[o] += d;
    }
    if let Some(delta_in) = delta_in {
        let w = layer.weights(params);
        delta_in.clear();
        delta_in.resize(layer.inputs, 0.0);
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
            for (di, &wk) in delta_in.iter_mut().zip(row) {
                *di += wk * d;
            }
        }
    }
}

/// Intermediate values of one CNN stage, kept for backprop.
struct ConvTrace {
    input: Vec<f64>,
    activated: Vec<f64>,
    argmax: Vec<usize>,
}

fn conv_forward(stage: &ConvStage, params: &[f64], input: &[f64]) -> ConvTrace {
    let (h, w) = (stage.height, stage.width);
    let weights = &params[stage.offset..stage.offset + stage.cout * stage.cin * 9];
    let bias = &params[stage.offset + stage.cout * stage.cin * 9..stage.offset + stage.len()];
    let mut activated = vec![0.0; stage.cout * h * w];
    for co in 0..stage.cout {
        for y in 0..h {
            for x in 0..w {
                let mut z = bias[co];
                for ci in 0..stage.cin {
                    let kernel = &weights[(co * stage.cin + ci) * 9..(co * stage.cin + ci + 1) * 9];
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            z += kernel[ky * 3 + kx] * input[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                activated[(co * h + y) * w + x] = z.max(0.0);
            }
        }
    }
    let (ph, pw) = stage.pooled();
    let mut argmax = Vec::with_capacity(stage.cout * ph * pw);
    for co in 0..stage.cout {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = (co * h + 2 * py) * w + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (co * h + 2 * py + dy) * w + 2 * px + dx;
                    if activated[idx] > activated[best] {
                        best = idx;
                    }
                }
                argmax.push(best);
            }
        }
    }
    ConvTrace { input: input.to_vec(), activated, argmax }
}

fn conv_backward(stage: &ConvStage, params: &[f64], trace: &ConvTrace, pooled_delta: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let (h, w) = (stage.height, stage.width);
    let mut delta = vec![0.0; stage.cout * h * w];
    for (&idx, &d) in trace.argmax.iter().zip(pooled_delta) {
        if trace.activated[idx] > 0.0 {
            delta[idx] += d;
        }
    }
    let nw = stage.cout * stage.cin * 9;
    let weights = &params[stage.offset..stage.offset + nw];
    let mut delta_in = vec![0.0; stage.cin * h * w];
    let (gw, gb) = grad[stage.offset..stage.offset + stage.len()].split_at_mut(nw);
    for co in 0..stage.cout {
        for y in 0..h {
            for x in 0..w {
                let d = delta[(co * h + y) * w + x];
                if d == 0.0 {
                    continue;
                }
                gb[co] += d;
                for ci in 0..stage.cin {
                    let base = (co * stage.cin + ci) * 9;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = (ci * h + iy as usize) * w + ix as usize;
                            gw[base + ky * 3 + kx] += d * trace.input[src];
                            delta_in[src] += weights[base + ky * 3 + kx] * d;
                        }
                    }
                }
            }
        }
    }
    delta_in
}

fn hwc_to_chw(input: &[f64], shape: ImageShape) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut out = vec![0.0; input.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = input[(y * w + x) * c + ch];
            }
        }
    }
    out
}

/// Cross-entropy of one sample, accumulating its gradient into `grad` when given.
fn sample_loss(spec: &ModelSpec, params: &[f64], x: &[f64], y: usize, grad: Option<&mut [f64]>) -> f64 {
    match spec.arch() {
        Arch::LogReg { dim, classes: 2 } => {
            let (w, b) = params.split_at(*dim);
            let z = b[0] + w.iter().zip(x).filter(|(_, &xk)| xk != 0.0).map(|(wk, xk)| wk * xk).sum::<f64>();
            let target = y as f64;
            if let Some(grad) = grad {
                let d = sigmoid(z) - target;
                for (g, &xk) in grad[..*dim].iter_mut().zip(x) {
                    if xk != 0.0 {
                        *g += d * xk;
                    }
                }
                grad[*dim] += d;
            }
            softplus(z) - target * z
        }
        Arch::LogReg { .. } | Arch::Mlp { .. } => {
            let layers = spec.dense_layers();
            let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
            acts.push(x.to_vec());
            for (li, layer) in layers.iter().enumerate() {
                let mut out = Vec::new();
                dense_forward(layer, params, &acts[li], &mut out);
                if li + 1 < layers.len() {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                acts.push(out);
            }
            let mut probs = acts.pop().unwrap();
            let logit_y = probs[y];
            let loss = softmax_in_place(&mut probs) - logit_y;
            if let Some(grad) = grad {
                let mut delta = probs;
                delta[y] -= 1.0;
                let mut next = Vec::new();
                for li in (0..layers.len()).rev() {
                    let want_input = li > 0;
                    dense_backward(&layers[li], params, &acts[li], &delta, grad, want_input.then_some(&mut next));
                    if want_input {
                        delta = next
                            .iter()
                            .zip(&acts[li])
                            .map(|(&d, &a)| if a > 0.0 { d } else { 0.0 })
                            .collect();
                    }
                }
            }
            loss
        }
        Arch::SmallCnn { input, .. } => {
            let (stages, head) = spec.conv_layers();
            let mut current = hwc_to_chw(x, *input);
            let mut traces = Vec::with_capacity(stages.len());
            for stage in &stages {
                let trace = conv_forward(stage, params, &current);
                current = trace.argmax.iter().map(|&i| trace.activated[i]).collect();
                traces.push(trace);
            }
            let mut probs = Vec::new();
            dense_forward(&head, params, &current, &mut probs);
            let logit_y = probs[y];
            let loss = softmax_in_place(&mut probs) - logit_y;
            if let Some(grad) = grad {
                let mut delta = probs;
                delta[y] -= 1.0;
                let mut next = Vec::new();
                dense_backward(&head, params, &current, &delta, grad, Some(&mut next));
                for (stage, trace) in stages.iter().zip(&traces).rev() {
                    next = conv_backward(stage, params, trace, &next, grad);
                }
            }
            loss
        }
    }
}

/// Class probabilities for one input.
pub fn predict(params: &ParamVector, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch { expected: spec.input_dim(), actual: x.len() });
    }
    let p = params.as_slice();
    Ok(match spec.arch() {
        Arch::LogReg { dim, classes: 2 } => {
            let z = p[*dim] + p[..*dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            // 1 - sigmoid(z) == sigmoid(-z), computed directly to keep precision.
            vec![sigmoid(-z), sigmoid(z)]
        }
        Arch::LogReg { .. } | Arch::Mlp { .. } => {
            let layers = spec.dense_layers();
            let mut current = x.to_vec();
            for (li, layer) in layers.iter().enumerate() {
                let mut out = Vec::new();
                dense_forward(layer, p, &current, &mut out);
                if li + 1 < layers.len() {
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                current = out;
            }
            softmax_in_place(&mut current);
            current
        }
        Arch::SmallCnn { input, .. } => {
            let (stages, head) = spec.conv_layers();
            let mut current = hwc_to_chw(x, *input);
            for stage in &stages {
                let trace = conv_forward(stage, p, &current);
                current = trace.argmax.iter().map(|&i| trace.activated[i]).collect();
            }
            let mut out = Vec::new();
            dense_forward(&head, p, &current, &mut out);
            softmax_in_place(&mut out);
            out
        }
    })
}

/// Class-probability rows for a batch of inputs.
pub fn forward(params: &ParamVector, spec: &ModelSpec, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    inputs.iter().map(|x| predict(params, spec, x)).collect()
}

/// Cross-entropy of one labelled input under the model.
pub fn sample_cross_entropy(params: &ParamVector, spec: &ModelSpec, x: &[f64], y: usize) -> Result<f64> {
    spec.check_params(params)?;
    if x.len() != spec.input_dim() {
        return Err(Error::DimensionMismatch { expected: spec.input_dim(), actual: x.len() });
    }
    Ok(sample_loss(spec, params.as_slice(), x, y, None))
}

/// Mean cross-entropy over the batch plus `weight_decay * ||theta||^2`, and its gradient.
///
/// Flip flags are applied before the forward pass. Per-sample gradients are
/// accumulated in ascending sample-index order regardless of the order in
/// which the batch lists them, so equal batches always give bit-identical
/// results.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &MiniBatchSpec,
    dataset: &Dataset,
    weight_decay: f64,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_dataset(dataset)?;
    batch.validate(dataset.len())?;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_unstable_by_key(|&pos| batch.indices[pos]);
    let p = params.as_slice();
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for pos in order {
        let index = batch.indices[pos];
        let x: Cow<'_, [f64]> = dataset.sample_features(index, batch.flips[pos])?;
        loss += sample_loss(spec, p, &x, dataset.label(index), Some(&mut grad));
    }
    let b = batch.len() as f64;
    loss /= b;
    grad.iter_mut().for_each(|g| *g /= b);
    if weight_decay != 0.0 {
        loss += weight_decay * params.norm_sq();
        for (g, &w) in grad.iter_mut().zip(p) {
            *g += 2.0 * weight_decay * w;
        }
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((loss, ParamVector(grad)))
}

/// `theta - step_size * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, step_size: f64) -> ParamVector {
    ParamVector(params.0.iter().zip(&grad.0).map(|(&w, &g)| w - step_size * g).collect())
}

/// Heavy-ball update: `v' = momentum * v + grad`, `theta' = theta - lr_at(t) * v'`.
pub fn modified_sgd_step(
    params: &ParamVector,
    grad: &ParamVector,
    state: &OptimizerState,
    hp: &Hyperparams,
) -> Result<(ParamVector, OptimizerState)> {
    if state.velocity.len() != params.len() || grad.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), actual: state.velocity.len().min(grad.len()) });
    }
    let lr = lr_at(state.step, hp)?;
    Ok(heavy_ball_update(params, grad, state, hp.momentum, lr))
}

/// One heavy-ball step with an explicit learning rate. With `momentum == 0`
/// the velocity is the gradient itself and the step is exactly [`sgd_step`].
pub fn heavy_ball_update(
    params: &ParamVector,
    grad: &ParamVector,
    state: &OptimizerState,
    momentum: f64,
    lr: f64,
) -> (ParamVector, OptimizerState) {
    let velocity: Vec<f64> = if momentum == 0.0 {
        grad.0.clone()
    } else {
        state.velocity.iter().zip(&grad.0).map(|(&v, &g)| momentum * v + g).collect()
    };
    let next = ParamVector(params.0.iter().zip(&velocity).map(|(&w, &v)| w - lr * v).collect());
    (next, OptimizerState { velocity, step: state.step + 1 })
}

/// Result of one training update.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub params: ParamVector,
    pub state: OptimizerState,
    pub loss: f64,
    pub lr: f64,
}

/// Gradient at the current parameters followed by the configured update rule.
pub fn training_step(
    params: &ParamVector,
    state: &OptimizerState,
    batch: &MiniBatchSpec,
    dataset: &Dataset,
    spec: &ModelSpec,
    hp: &Hyperparams,
) -> Result<StepOutcome> {
    let lr = lr_at(state.step, hp)?;
    replay_step(params, state, batch, dataset, spec, hp, lr)
}

/// Like [`training_step`] but with the learning rate supplied by the caller,
/// as recorded in a log.
pub fn replay_step(
    params: &ParamVector,
    state: &OptimizerState,
    batch: &MiniBatchSpec,
    dataset: &Dataset,
    spec: &ModelSpec,
    hp: &Hyperparams,
    lr: f64,
) -> Result<StepOutcome> {
    if state.velocity.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), actual: state.velocity.len() });
    }
    let (loss, grad) = loss_and_grad(params, spec, batch, dataset, hp.weight_decay)?;
    let (params, state) = heavy_ball_update(params, &grad, state, hp.momentum, lr);
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
    }
    Ok(StepOutcome { params, state, loss, lr })
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(params: &ParamVector, spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..dataset.len() {
        let p = predict(params, spec, dataset.features(i))?;
        let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).unwrap();
        correct += usize::from(best == dataset.label(i));
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean cross-entropy over a whole dataset (no weight decay).
pub fn mean_loss(params: &ParamVector, spec: &ModelSpec, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..dataset.len() {
        total += sample_cross_entropy(params, spec, dataset.features(i), dataset.label(i))?;
    }
    Ok(total / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(momentum: f64, schedule: LrSchedule) -> Hyperparams {
        Hyperparams {
            step_size: 0.1,
            batch_size: 1,
            epochs: 1,
            total_steps: 10,
            momentum,
            weight_decay: 0.0,
            schedule,
        }
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::mlp(vec![4, 3, 2]).unwrap().param_count(), 23);
        assert_eq!(ModelSpec::logreg(3, 2).unwrap().param_count(), 4);
        assert_eq!(ModelSpec::logreg(3, 4).unwrap().param_count(), 16);
        let shape = ImageShape { height: 6, width: 6, channels: 1 };
        // conv 1->2: 2*1*9+2 = 20; conv 2->3: 3*2*9+3 = 57; 6x6 -> 3x3 -> 1x1; head 3*3+3 = 12
        assert_eq!(ModelSpec::small_cnn(shape, vec![2, 3], 3).unwrap().param_count(), 89);
        assert!(ModelSpec::mlp(vec![4, 0, 2]).is_err());
        assert!(ModelSpec::logreg(3, 1).is_err());
        assert!(ModelSpec::small_cnn(ImageShape { height: 3, width: 3, channels: 1 }, vec![1, 1], 2).is_err());
    }

    #[test]
    fn spec_deserialization_checks_count() {
        let ok: ModelSpec = serde_json::from_str(r#"{"arch":{"kind":"mlp","widths":[4,3,2]},"param_count":23}"#).unwrap();
        assert_eq!(ok.param_count(), 23);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"arch":{"kind":"mlp","widths":[4,3,2]},"param_count":22}"#).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = ModelSpec::logreg(2, 2).unwrap();
        assert_eq!(init_params(&spec, 7), init_params(&spec, 7));
        assert_ne!(init_params(&spec, 7), init_params(&spec, 8));
        let spec = ModelSpec::logreg(3, 2).unwrap();
        let bound = 1.0 / 3f64.sqrt();
        for seed in 0..50 {
            let p = init_params(&spec, seed);
            assert!(p.as_slice().iter().all(|v| v.abs() <= bound));
            assert!(p.as_slice().iter().all(|&v| f64::from(v as f32) == v));
        }
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let spec = ModelSpec::logreg(3, 2).unwrap();
        let p = ParamVector::zeros(4);
        assert_eq!(predict(&p, &spec, &[1.0, -2.0, 5.0]).unwrap(), vec![0.5, 0.5]);
        let spec = ModelSpec::logreg(1, 2).unwrap();
        let p = ParamVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(predict(&p, &spec, &[0.0]).unwrap()[1], 0.5);
        assert!(predict(&p, &spec, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn outputs_are_distributions() {
        let spec = ModelSpec::mlp(vec![3, 5, 4]).unwrap();
        let p = init_params(&spec, 3);
        for row in forward(&p, &spec, &[&[0.3, -1.0, 2.0], &[10.0, 0.0, -3.0]]).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn logreg_gradient_matches_closed_form_at_zero() {
        let spec = ModelSpec::logreg(2, 2).unwrap();
        let ds = Dataset::new(vec![1.0, 0.0], vec![1], 2, 2, None).unwrap();
        let batch = MiniBatchSpec::unflipped(vec![0]);
        let (loss, grad) = loss_and_grad(&ParamVector::zeros(3), &spec, &batch, &ds, 0.0).unwrap();
        assert_eq!(&grad.as_slice()[..2], &[-0.5, 0.0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_adds_exactly_two_lambda_theta() {
        let spec = ModelSpec::mlp(vec![2, 3, 2]).unwrap();
        let ds = crate::data::synth_gaussian(8, 2, 2, 1, 2.0).unwrap();
        let p = init_params(&spec, 5);
        let batch = MiniBatchSpec::unflipped(vec![0, 3, 5]);
        let (_, g0) = loss_and_grad(&p, &spec, &batch, &ds, 0.0).unwrap();
        let (_, g1) = loss_and_grad(&p, &spec, &batch, &ds, 0.25).unwrap();
        for ((a, b), w) in g1.as_slice().iter().zip(g0.as_slice()).zip(p.as_slice()) {
            assert!(((a - b) - 0.5 * w).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_order_does_not_matter() {
        let spec = ModelSpec::mlp(vec![2, 3, 2]).unwrap();
        let ds = crate::data::synth_gaussian(8, 2, 2, 1, 2.0).unwrap();
        let p = init_params(&spec, 5);
        let a = loss_and_grad(&p, &spec, &MiniBatchSpec::unflipped(vec![4, 1, 6]), &ds, 0.0).unwrap();
        let b = loss_and_grad(&p, &spec, &MiniBatchSpec::unflipped(vec![1, 6, 4]), &ds, 0.0).unwrap();
        assert_eq!(a.1, b.1);
        assert!(loss_and_grad(&p, &spec, &MiniBatchSpec::unflipped(vec![8]), &ds, 0.0).is_err());
    }

    #[test]
    fn sgd_step_examples() {
        let theta = ParamVector::new(vec![1.0, 1.0]).unwrap();
        let g = ParamVector::new(vec![2.0, -2.0]).unwrap();
        assert_eq!(sgd_step(&theta, &g, 0.5).as_slice(), &[0.0, 2.0]);
        assert_eq!(sgd_step(&theta, &ParamVector::zeros(2), 0.5), theta);
        assert_eq!(sgd_step(&ParamVector::zeros(2), &g, 0.5).as_slice(), &[-1.0, 1.0]);
    }

    #[test]
    fn momentum_free_update_is_plain_sgd() {
        let theta = ParamVector::new(vec![0.3, -1.2, 4.0]).unwrap();
        let g = ParamVector::new(vec![0.7, 0.1, -2.5]).unwrap();
        let h = hp(0.0, LrSchedule::Constant);
        let (next, state) = modified_sgd_step(&theta, &g, &OptimizerState::new(3), &h).unwrap();
        assert_eq!(next, sgd_step(&theta, &g, 0.1));
        assert_eq!(state.step, 1);
        assert_eq!(state.velocity, g.as_slice());
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let theta = ParamVector::new(vec![1.0, -1.0]).unwrap();
        let g = ParamVector::new(vec![0.5, 2.0]).unwrap();
        let h = hp(0.9, LrSchedule::Constant);
        let (t1, s1) = modified_sgd_step(&theta, &g, &OptimizerState::new(2), &h).unwrap();
        let (t2, _) = modified_sgd_step(&t1, &g, &s1, &h).unwrap();
        for i in 0..2 {
            let expected = theta.as_slice()[i] - 0.1 * g.as_slice()[i] - 0.1 * 1.9 * g.as_slice()[i];
            assert!((t2.as_slice()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let h = hp(0.0, LrSchedule::CosineAnneal { lr_min: 0.02 });
        assert_eq!(lr_at(0, &h).unwrap(), 0.1);
        assert!((lr_at(10, &h).unwrap() - 0.02).abs() < 1e-15);
        assert!((lr_at(5, &h).unwrap() - 0.06).abs() < 1e-15);
        assert!(matches!(lr_at(11, &h), Err(Error::StepOutOfRange { .. })));
        assert_eq!(lr_at(7, &hp(0.0, LrSchedule::Constant)).unwrap(), 0.1);
    }
}
