//! Layer operations recorded on a [`Graph`].

use rand::Rng;

use super::kernels::{self, Activation, ConvGeom};
use crate::tensor::Op;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * *b;
        }
    }
}

/// Batch mean and unbiased variance observed in a train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(weight)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d expects NCHW input and OIKK weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch(format!(
                "input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [ws[0]] {
                return Err(TensorError::ShapeMismatch(format!(
                    "bias shape {:?} for {} filters",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let k = ws[2];
        let geom = ConvGeom::new(&xs, ws[0], k, stride, padding).ok_or(TensorError::KernelLargerThanInput {
            kernel: k,
            input: xs[2].min(xs[3]) + 2 * padding,
        })?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            vec![geom.n, geom.c_out, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Per-channel spatial convolution; weight is `C×1×K×K`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(weight)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch(format!(
                "depthwise expects NCHW input and C1KK weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(TensorError::ChannelMismatch(format!(
                "input has {} channels, {} depthwise kernels",
                xs[1], ws[0]
            )));
        }
        let k = ws[2];
        let geom = ConvGeom::new(&xs, xs[1], k, stride, padding).ok_or(TensorError::KernelLargerThanInput {
            kernel: k,
            input: xs[2].min(xs[3]) + 2 * padding,
        })?;
        let out = kernels::depthwise_forward(self.value(input).data(), self.value(weight).data(), &geom);
        Ok(self.push(
            vec![geom.n, geom.c_in, geom.oh, geom.ow],
            out,
            Op::Depthwise { input, weight, geom },
            &[input, weight],
        ))
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// Train mode normalizes with the batch statistics and returns them so the
    /// caller can fold them into its running estimate; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        mode: Mode,
        epsilon: T,
    ) -> Result<(Var, Option<BatchStats<T>>), TensorError> {
        self.check(input)?;
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm expects NCHW, got {xs:?}"
            )));
        }
        let dims = kernels::nchw(&xs);
        let c = dims.1;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.mean.len() != c {
            return Err(TensorError::ChannelMismatch(format!("batch_norm over {c} channels")));
        }
        let eps = epsilon.to_f64().unwrap_or(0.0);
        let (mean, inv_std, stats) = match mode {
            Mode::Train => {
                let count = dims.0 * dims.2 * dims.3;
                if count <= 1 {
                    return Err(TensorError::DegenerateBatch);
                }
                let (m, v) = kernels::channel_stats(self.value(input).data(), dims);
                let mean: Vec<T> = m.iter().map(|&x| T::lit(x)).collect();
                let inv: Vec<T> = v.iter().map(|&x| T::lit(1.0 / (x + eps).sqrt())).collect();
                let unbiased = count as f64 / (count - 1) as f64;
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: v.iter().map(|&x| T::lit(x * unbiased)).collect(),
                };
                (mean, inv, Some(stats))
            }
            Mode::Eval => {
                let inv = running
                    .var
                    .iter()
                    .map(|&v| T::lit(1.0 / (v.to_f64().unwrap_or(f64::NAN) + eps).sqrt()))
                    .collect();
                (running.mean.clone(), inv, None)
            }
        };
        let out = kernels::batch_norm_apply(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &inv_std,
        );
        let var = self.push(
            xs,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train: mode == Mode::Train,
            },
            &[input, gamma, beta],
        );
        Ok((var, stats))
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(shape, out, Op::Activation { kind, input }, &[input]))
    }

    /// NCHW → NC mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        self.check(input)?;
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "global_avg_pool expects NCHW, got {xs:?}"
            )));
        }
        let hw = xs[2] * xs[3];
        let denom = T::from_usize_lossy(hw);
        let out = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { input }, &[input]))
    }

    /// `input · weightᵀ + bias` for `input: N×F`, `weight: G×F`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(weight)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: input {xs:?} vs weight {ws:?}"
            )));
        }
        let (n, f, g) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [g] {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear bias {:?} for {g} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); n * g];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(g) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            f,
            g,
            T::one(),
            self.value(input).data(),
            (f as isize, 1),
            self.value(weight).data(),
            (1, f as isize),
            beta,
            &mut out,
            (g as isize, 1),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(vec![n, g], out, Op::Linear { input, weight, bias }, &inputs))
    }

    /// Inverted dropout: survivors are scaled by `1/(1−p)` in train mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(input);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(shape, out, Op::Dropout { input, mask }, &[input]))
    }

    /// Channel gate `hard_sigmoid(W2·relu(W1·GAP(x) + b1) + b2)` applied to `x`.
    ///
    /// Returns the gated output and the per-(n, c) gate values.
    pub fn squeeze_excite(
        &mut self,
        input: Var,
        reduce: (Var, Var),
        expand: (Var, Var),
    ) -> Result<(Var, Var), TensorError> {
        let xs = self.shape(input).to_vec();
        let pooled = self.global_avg_pool(input)?;
        let hidden = self.linear(pooled, reduce.0, Some(reduce.1))?;
        let hidden = self.activation(Activation::Relu, hidden)?;
        let gate = self.linear(hidden, expand.0, Some(expand.1))?;
        let gate = self.activation(Activation::HardSigmoid, gate)?;
        let gate4 = self.reshape(gate, &[xs[0], xs[1], 1, 1])?;
        let out = self.mul(input, gate4)?;
        Ok((out, gate))
    }
}

/// Row-wise softmax of an `N×G` tensor with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let g = *logits.shape().last().expect("non-empty shape");
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(g) {
        out.extend(softmax_row(row));
    }
    Tensor::from_parts(logits.shape().to_vec(), out)
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
