//! MobileNet-V3-style classifier: inverted-residual blocks with optional
//! squeeze-excitation, a 1×1 head convolution and a two-layer classifier.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::functional::{BatchStats, Mode, RunningStats};
use super::kernels::Activation;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
/// Squeeze-excitation bottleneck divisor.
pub const SE_REDUCE_RATIO: usize = 4;
/// Name of the tap holding the final pre-pool convolution activation.
pub const LAST_CONV_TAG: &str = "head";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub expand_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub use_se: bool,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    fn has_expand(&self) -> bool {
        self.expand_channels != self.in_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    /// Width of the 1×1 convolution ahead of pooling.
    pub head_channels: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    /// The 32×32 "MV3-mini" layout.
    fn default() -> Self {
        use Activation::{HardSwish, Relu};
        let block = |i, e, o, k, s, se, act| BlockSpec {
            in_channels: i,
            expand_channels: e,
            out_channels: o,
            kernel: k,
            stride: s,
            use_se: se,
            activation: act,
        };
        Self {
            in_channels: 1,
            stem_channels: 16,
            blocks: vec![
                block(16, 16, 16, 3, 1, true, Relu),
                block(16, 72, 24, 3, 2, false, Relu),
                block(24, 88, 24, 3, 1, false, Relu),
                block(24, 96, 48, 5, 2, true, HardSwish),
            ],
            head_channels: 96,
            head_hidden: 64,
            num_classes: 3,
            dropout_p: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.in_channels == 0 || self.stem_channels == 0 || self.head_channels == 0 || self.head_hidden == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        let mut prev = self.stem_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.in_channels != prev {
                return bad(format!(
                    "block {i} takes {} channels but receives {prev}",
                    b.in_channels
                ));
            }
            if b.out_channels == 0 || b.expand_channels < b.in_channels {
                return bad(format!(
                    "block {i}: expand_channels must be >= in_channels and widths positive"
                ));
            }
            if b.kernel % 2 == 0 {
                return bad(format!("block {i}: kernel must be odd, got {}", b.kernel));
            }
            if b.stride != 1 && b.stride != 2 {
                return bad(format!("block {i}: stride must be 1 or 2, got {}", b.stride));
            }
            prev = b.out_channels;
        }
        Ok(())
    }

    fn last_block_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormBuffer<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ConvKind {
    Dense,
    Depthwise,
}

/// Convolution (no bias) followed by batch normalization.
#[derive(Debug, Clone, PartialEq)]
struct ConvBn {
    kind: ConvKind,
    weight: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct SqueezeExcite {
    reduce_w: usize,
    reduce_b: usize,
    expand_w: usize,
    expand_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se: Option<SqueezeExcite>,
    project: ConvBn,
    activation: Activation,
    residual: bool,
}

/// Output of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Named intermediate activations: `stem`, `blocks.{i}`, `head`.
    pub taps: Vec<(String, Var)>,
    /// Graph variables of the parameters, in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Batch statistics from a train-mode pass, keyed by norm buffer index.
type NormUpdates<T> = Vec<(usize, BatchStats<T>)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    norms: Vec<NormBuffer<T>>,
    mode: Mode,
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
    fc1: (usize, usize),
    fc2: (usize, usize),
}

struct Builder<'r, T, R: ?Sized> {
    params: Vec<Param<T>>,
    norms: Vec<NormBuffer<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, name: String, shape: &[usize], values: Vec<T>) -> usize {
        let tensor = Tensor::new(shape, values, true).expect("shape computed from a validated config");
        self.params.push(Param { name, tensor });
        self.params.len() - 1
    }

    fn he_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        self.push(name, shape, values)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![T::lit(value); n])
    }

    fn conv_bn(&mut self, prefix: &str, kind: ConvKind, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBn {
        let weight = match kind {
            ConvKind::Dense => self.he_uniform(format!("{prefix}.conv.weight"), &[c_out, c_in, k, k], c_in * k * k),
            ConvKind::Depthwise => self.he_uniform(format!("{prefix}.conv.weight"), &[c_out, 1, k, k], k * k),
        };
        let gamma = self.constant(format!("{prefix}.bn.gamma"), &[c_out], 1.0);
        let beta = self.constant(format!("{prefix}.bn.beta"), &[c_out], 0.0);
        self.norms.push(NormBuffer {
            name: format!("{prefix}.bn"),
            stats: RunningStats::new(c_out),
        });
        ConvBn {
            kind,
            weight,
            gamma,
            beta,
            norm: self.norms.len() - 1,
            stride,
            pad: (k - 1) / 2,
        }
    }

    fn linear(&mut self, prefix: &str, f_in: usize, f_out: usize) -> (usize, usize) {
        let w = self.he_uniform(format!("{prefix}.weight"), &[f_out, f_in], f_in);
        let b = self.constant(format!("{prefix}.bias"), &[f_out], 0.0);
        (w, b)
    }
}

pub fn se_width(channels: usize) -> usize {
    (channels / SE_REDUCE_RATIO).max(1)
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights, zero biases and betas, unit gammas.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            norms: Vec::new(),
            rng,
        };
        let stem = b.conv_bn("stem", ConvKind::Dense, config.in_channels, config.stem_channels, 3, 1);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for (i, spec) in config.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            let expand = spec.has_expand().then(|| {
                b.conv_bn(
                    &format!("{p}.expand"),
                    ConvKind::Dense,
                    spec.in_channels,
                    spec.expand_channels,
                    1,
                    1,
                )
            });
            let depthwise = b.conv_bn(
                &format!("{p}.dw"),
                ConvKind::Depthwise,
                spec.expand_channels,
                spec.expand_channels,
                spec.kernel,
                spec.stride,
            );
            let se = spec.use_se.then(|| {
                let r = se_width(spec.expand_channels);
                let (reduce_w, reduce_b) = b.linear(&format!("{p}.se.reduce"), spec.expand_channels, r);
                let (expand_w, expand_b) = b.linear(&format!("{p}.se.expand"), r, spec.expand_channels);
                SqueezeExcite {
                    reduce_w,
                    reduce_b,
                    expand_w,
                    expand_b,
                }
            });
            let project = b.conv_bn(
                &format!("{p}.project"),
                ConvKind::Dense,
                spec.expand_channels,
                spec.out_channels,
                1,
                1,
            );
            blocks.push(Block {
                expand,
                depthwise,
                se,
                project,
                activation: spec.activation,
                residual: spec.has_residual(),
            });
        }
        let head = b.conv_bn(
            "head",
            ConvKind::Dense,
            config.last_block_channels(),
            config.head_channels,
            1,
            1,
        );
        let fc1 = b.linear("classifier.0", config.head_channels, config.head_hidden);
        let fc2 = b.linear("classifier.1", config.head_hidden, config.num_classes);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            norms: b.norms,
            mode: Mode::Train,
            stem,
            blocks,
            head,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn norms(&self) -> &[NormBuffer<T>] {
        &self.norms
    }

    pub fn last_conv_tag(&self) -> &'static str {
        LAST_CONV_TAG
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the graph gradients of a forward pass into the parameter buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, forward: &Forward) {
        for (p, &v) in self.params.iter_mut().zip(&forward.params) {
            if let Some(g) = graph.grad(v) {
                p.tensor.accumulate_grad(g);
            }
        }
    }

    /// Forward pass in the model's current mode; in train mode the
    /// running statistics absorb this batch.
    pub fn forward(&mut self, graph: &mut Graph<T>, input: Var, rng: &mut dyn RngCore) -> Result<Forward, ModelError> {
        let mode = self.mode;
        let (fwd, stats) = self.run(graph, input, mode, Some(rng))?;
        let momentum = T::lit(BN_MOMENTUM);
        for (idx, s) in stats {
            self.norms[idx].stats.update(&s, momentum);
        }
        Ok(fwd)
    }

    /// Replaces every running statistic with the plain mean of the train-mode
    /// batch statistics of `batches` under the current weights.
    pub fn recalibrate_norms<'a>(&mut self, batches: impl IntoIterator<Item = &'a Tensor<T>>) -> Result<(), ModelError>
    where
        T: 'a,
    {
        for (k, batch) in batches.into_iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(batch.detached());
            let stats = self.run_with(&mut g, x, Mode::Train, None, false)?.1;
            let momentum = T::lit(1.0 / (k + 1) as f64);
            for (idx, s) in stats {
                self.norms[idx].stats.update(&s, momentum);
            }
        }
        Ok(())
    }

    /// Eval-mode forward pass that leaves the model untouched.
    pub fn forward_eval(&self, graph: &mut Graph<T>, input: Var) -> Result<Forward, ModelError> {
        Ok(self.run(graph, input, Mode::Eval, None)?.0)
    }

    /// Eval-mode logits for an `N×C×H×W` batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let x = g.constant(batch.detached());
        let fwd = self.run_with(&mut g, x, Mode::Eval, None, false)?.0;
        Ok(g.value(fwd.logits).detached())
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Forward, NormUpdates<T>), ModelError> {
        self.run_with(g, input, mode, rng, true)
    }

    fn run_with(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mode: Mode,
        rng: Option<&mut dyn RngCore>,
        trainable: bool,
    ) -> Result<(Forward, NormUpdates<T>), ModelError> {
        let xs = g.shape(input).to_vec();
        if xs.len() != 4 || xs[1] != self.config.in_channels {
            return Err(TensorError::ChannelMismatch(format!(
                "model expects N×{}×H×W input, got {xs:?}",
                self.config.in_channels
            ))
            .into());
        }
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.tensor)
                } else {
                    g.constant(p.tensor.detached())
                }
            })
            .collect();
        let mut stats = Vec::new();
        let mut taps = Vec::new();
        let mut conv_bn = |g: &mut Graph<T>, l: &ConvBn, x: Var| -> Result<Var, TensorError> {
            let y = match l.kind {
                ConvKind::Dense => g.conv2d(x, pv[l.weight], None, l.stride, l.pad)?,
                ConvKind::Depthwise => g.depthwise_conv2d(x, pv[l.weight], l.stride, l.pad)?,
            };
            let eps = T::lit(BN_EPSILON);
            let (y, s) = g.batch_norm(y, pv[l.gamma], pv[l.beta], &self.norms[l.norm].stats, mode, eps)?;
            if let Some(s) = s {
                stats.push((l.norm, s));
            }
            Ok(y)
        };

        let x = conv_bn(g, &self.stem, input)?;
        let mut x = g.activation(Activation::HardSwish, x)?;
        taps.push(("stem".to_string(), x));
        for (i, block) in self.blocks.iter().enumerate() {
            let shortcut = x;
            let mut h = x;
            if let Some(e) = &block.expand {
                h = conv_bn(g, e, h)?;
                h = g.activation(block.activation, h)?;
            }
            h = conv_bn(g, &block.depthwise, h)?;
            h = g.activation(block.activation, h)?;
            if let Some(se) = &block.se {
                h = g
                    .squeeze_excite(
                        h,
                        (pv[se.reduce_w], pv[se.reduce_b]),
                        (pv[se.expand_w], pv[se.expand_b]),
                    )?
                    .0;
            }
            h = conv_bn(g, &block.project, h)?;
            if block.residual {
                h = g.add(h, shortcut)?;
            }
            x = h;
            taps.push((format!("blocks.{i}"), x));
        }
        let h = conv_bn(g, &self.head, x)?;
        let h = g.activation(Activation::HardSwish, h)?;
        taps.push((LAST_CONV_TAG.to_string(), h));
        let pooled = g.global_avg_pool(h)?;
        let z = g.linear(pooled, pv[self.fc1.0], Some(pv[self.fc1.1]))?;
        let z = g.activation(Activation::HardSwish, z)?;
        let z = match rng {
            Some(rng) => g.dropout(z, self.config.dropout_p, mode, rng)?,
            None => z,
        };
        let logits = g.linear(z, pv[self.fc2.0], Some(pv[self.fc2.1]))?;
        Ok((
            Forward {
                logits,
                taps,
                params: pv,
            },
            stats,
        ))
    }

    /// Parameters followed by running statistics, as named tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.detached()))
            .collect();
        for n in &self.norms {
            let c = n.stats.mean.len();
            out.push((
                format!("{}.running_mean", n.name),
                Tensor::new(&[c], n.stats.mean.clone(), false).expect("non-empty channels"),
            ));
            out.push((
                format!("{}.running_var", n.name),
                Tensor::new(&[c], n.stats.var.clone(), false).expect("non-empty channels"),
            ));
        }
        out
    }

    /// Overwrites every parameter and running statistic from `tensors`.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<(), ModelError> {
        let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let expected: Vec<(String, Tensor<T>)> = self.named_tensors();
        for (name, _) in tensors {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(ModelError::UnknownTensor(name.clone()));
            }
        }
        for (name, like) in &expected {
            let t = find(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != like.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "`{name}`: stored {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                ))
                .into());
            }
        }
        for p in &mut self.params {
            let t = find(&p.name).expect("checked above");
            p.tensor.data_mut().copy_from_slice(t.data());
            p.tensor.zero_grad();
        }
        for n in &mut self.norms {
            let m = find(&format!("{}.running_mean", n.name)).expect("checked above");
            let v = find(&format!("{}.running_var", n.name)).expect("checked above");
            n.stats.mean.copy_from_slice(m.data());
            n.stats.var.copy_from_slice(v.data());
        }
        Ok(())
    }
}
