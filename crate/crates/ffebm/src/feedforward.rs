//! Tie transformations between energy blocks and the softmax readout.
//!
//! A feedforward block is either a dense map or conv -> optional 2x2 max
//! pool -> optional batch normalization. Alongside the forward pass, this
//! module provides the exact vector-Jacobian products with respect to the
//! block input and the block parameters, composed from the hand-written
//! kernel adjoints.

use crate::energy::LayerShape;
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_adjoint, batchnorm_forward, conv2d, conv2d_input_adjoint, conv2d_weight_adjoint,
    matmul, matmul_at, matmul_bt, maxpool2d, maxpool2d_adjoint, BnCache, BnMode, PoolIndices,
    RunningStats, Tensor,
};

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running: RunningStats,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::full(&[channels], 1.0),
            shift: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// The linear part of a tie transformation.
#[derive(Debug, Clone)]
pub enum FfOp {
    /// Dense map on the flattened input: weight [out, in].
    Linear { weight: Tensor },
    /// Convolution [O, C, kh, kw] with optional 2x2 max pooling after.
    Conv { weight: Tensor, stride: usize, pad: usize, pool: bool },
}

#[derive(Debug, Clone)]
pub struct FeedforwardBlockParams {
    pub op: FfOp,
    pub batchnorm: Option<BatchNormParams>,
}

/// Everything both VJPs need without re-running the forward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    pub pool_idx: Option<PoolIndices>,
    pub pre_pool_shape: Vec<usize>,
    pub bn_cache: Option<BnCache>,
    pub mode: BnMode,
    pub output_shape: Vec<usize>,
}

/// Parameter-shaped gradients of one feedforward block.
#[derive(Debug, Clone)]
pub struct FfParamGrads {
    pub weight: Tensor,
    pub bn_scale: Option<Tensor>,
    pub bn_shift: Option<Tensor>,
}

impl FeedforwardBlockParams {
    pub fn linear(weight: Tensor) -> Self {
        FeedforwardBlockParams {
            op: FfOp::Linear { weight },
            batchnorm: None,
        }
    }

    /// Output shape (batch excluded) for a given input layer shape.
    pub fn output_shape(&self, input: &LayerShape) -> Result<LayerShape> {
        match &self.op {
            FfOp::Linear { weight } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if input.size() != inp {
                    return Err(Error::Config(format!(
                        "linear block expects input size {inp}, got {input:?}"
                    )));
                }
                Ok(LayerShape::Fc { units: out })
            }
            FfOp::Conv { weight, stride, pad, pool } => {
                let LayerShape::Conv { channels, height, width } = input else {
                    return Err(Error::Config(
                        "conv feedforward block needs a conv-shaped input".into(),
                    ));
                };
                if weight.shape()[1] != *channels {
                    return Err(Error::Config(format!(
                        "conv block expects {} input channels, got {channels}",
                        weight.shape()[1]
                    )));
                }
                let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                let mut h = (height + 2 * pad - kh) / stride + 1;
                let mut w = (width + 2 * pad - kw) / stride + 1;
                if *pool {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Config(format!(
                            "pooling needs even conv output, got {h}x{w}"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                Ok(LayerShape::Conv { channels: weight.shape()[0], height: h, width: w })
            }
        }
    }
}

/// Forward pass of one tie transformation: linear/conv -> optional pool ->
/// optional batchnorm, with the cache both VJPs need.
pub fn ff_forward(
    p: &FeedforwardBlockParams,
    input: &Tensor,
    mode: BnMode,
) -> Result<(Tensor, ForwardCache)> {
    let batch = input.shape()[0];
    let (mut out, pool_idx, pre_pool_shape) = match &p.op {
        FfOp::Linear { weight } => {
            let flat = input.reshape(&[batch, input.len() / batch])?;
            if flat.shape()[1] != weight.shape()[1] {
                return Err(Error::Shape(format!(
                    "linear block: input size {}, weight {:?}",
                    flat.shape()[1],
                    weight.shape()
                )));
            }
            let y = matmul_bt(&flat, weight)?;
            let shape = y.shape().to_vec();
            (y, None, shape)
        }
        FfOp::Conv { weight, stride, pad, pool } => {
            let y = conv2d(input, weight, *stride, *pad)?;
            let pre_pool_shape = y.shape().to_vec();
            if *pool {
                let (pooled, idx) = maxpool2d(&y)?;
                (pooled, Some(idx), pre_pool_shape)
            } else {
                (y, None, pre_pool_shape)
            }
        }
    };
    let bn_cache = match &p.batchnorm {
        Some(bn) => {
            let (y, cache) =
                batchnorm_forward(&out, &bn.scale, &bn.shift, mode, &bn.running, bn.eps)?;
            out = y;
            Some(cache)
        }
        None => None,
    };
    let cache = ForwardCache {
        input: input.clone(),
        pool_idx,
        pre_pool_shape,
        bn_cache,
        mode,
        output_shape: out.shape().to_vec(),
    };
    Ok((out, cache))
}

fn backprop_through_bn(
    p: &FeedforwardBlockParams,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
    match (&p.batchnorm, &cache.bn_cache) {
        (Some(bn), Some(bnc)) => match cache.mode {
            BnMode::Train => {
                let (gx, gs, gb) = batchnorm_adjoint(upstream, bnc, &bn.scale)?;
                Ok((gx, Some(gs), Some(gb)))
            }
            BnMode::Eval => {
                // eval-mode statistics are constants
                let mut gx = upstream.clone();
                let c = bn.scale.len();
                let batch = gx.shape()[0];
                let sp = gx.len() / (batch * c);
                let mut gs = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for bi in 0..batch {
                    for ci in 0..c {
                        let base = (bi * c + ci) * sp;
                        let coef = bn.scale.data()[ci] * bnc.inv_std[ci] as f32;
                        for s in 0..sp {
                            let g = upstream.data()[base + s];
                            gs.data_mut()[ci] += g * bnc.x_hat.data()[base + s];
                            gb.data_mut()[ci] += g;
                            gx.data_mut()[base + s] = g * coef;
                        }
                    }
                }
                Ok((gx, Some(gs), Some(gb)))
            }
        },
        (None, None) => Ok((upstream.clone(), None, None)),
        _ => Err(Error::Usage("cache does not match block batchnorm setting".into())),
    }
}

/// Adjoint of [`ff_forward`] with respect to the block input.
pub fn ff_input_vjp(
    p: &FeedforwardBlockParams,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<Tensor> {
    if upstream.shape() != cache.output_shape.as_slice() {
        return Err(Error::Usage(format!(
            "ff_input_vjp: upstream {:?} does not match cached output {:?}",
            upstream.shape(),
            cache.output_shape
        )));
    }
    let (g, _, _) = backprop_through_bn(p, cache, upstream)?;
    match &p.op {
        FfOp::Linear { weight } => {
            let batch = g.shape()[0];
            let flat = g.reshape(&[batch, g.len() / batch])?;
            let gx = matmul(&flat, weight)?;
            gx.reshape(cache.input.shape())
        }
        FfOp::Conv { weight, stride, pad, pool } => {
            let g = if *pool {
                let idx = cache
                    .pool_idx
                    .as_ref()
                    .ok_or_else(|| Error::Usage("stale cache: missing pool indices".into()))?;
                maxpool2d_adjoint(&g, idx, &cache.pre_pool_shape)?
            } else {
                g
            };
            conv2d_input_adjoint(&g, weight, *stride, *pad, cache.input.shape())
        }
    }
}

/// Adjoint of [`ff_forward`] with respect to the block parameters.
pub fn ff_param_vjp(
    p: &FeedforwardBlockParams,
    cache: &ForwardCache,
    upstream: &Tensor,
) -> Result<FfParamGrads> {
    if upstream.shape() != cache.output_shape.as_slice() {
        return Err(Error::Usage(format!(
            "ff_param_vjp: upstream {:?} does not match cached output {:?}",
            upstream.shape(),
            cache.output_shape
        )));
    }
    let (g, bn_scale, bn_shift) = backprop_through_bn(p, cache, upstream)?;
    let weight = match &p.op {
        FfOp::Linear { .. } => {
            let batch = g.shape()[0];
            let gflat = g.reshape(&[batch, g.len() / batch])?;
            let inflat = cache.input.reshape(&[batch, cache.input.len() / batch])?;
            matmul_at(&gflat, &inflat)?
        }
        FfOp::Conv { weight, stride, pad, pool } => {
            let g = if *pool {
                let idx = cache
                    .pool_idx
                    .as_ref()
                    .ok_or_else(|| Error::Usage("stale cache: missing pool indices".into()))?;
                maxpool2d_adjoint(&g, idx, &cache.pre_pool_shape)?
            } else {
                g
            };
            conv2d_weight_adjoint(
                &g,
                &cache.input,
                *stride,
                *pad,
                (weight.shape()[2], weight.shape()[3]),
            )?
        }
    };
    Ok(FfParamGrads { weight, bn_scale, bn_shift })
}

/// Softmax readout: weight [classes, dim(flattened state)].
#[derive(Debug, Clone)]
pub struct ReadoutParams {
    pub weight: Tensor,
}

impl ReadoutParams {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn readout_logits(r: &ReadoutParams, s: &Tensor) -> Result<Tensor> {
    let batch = s.shape()[0];
    let flat = s.reshape(&[batch, s.len() / batch])?;
    if flat.shape()[1] != r.weight.shape()[1] {
        return Err(Error::Shape(format!(
            "readout expects state size {}, got {}",
            r.weight.shape()[1],
            flat.shape()[1]
        )));
    }
    matmul_bt(&flat, &r.weight)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for bi in 0..batch {
        let row = &logits.data()[bi * classes..(bi + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.data_mut()[bi * classes..(bi + 1) * classes]
            .iter_mut()
            .zip(&exps)
        {
            *o = (e / z) as f32;
        }
    }
    out
}

/// Mean cross-entropy of the softmax readout over the batch, with exact
/// gradients in the read state and the readout weight.
///
/// grad_s = W^T (softmax - y) / B, grad_w = (softmax - y)^T s / B.
pub fn readout_loss(
    r: &ReadoutParams,
    s: &Tensor,
    y: &[usize],
) -> Result<(f32, Tensor, Tensor)> {
    let batch = s.shape()[0];
    if y.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            y.len()
        )));
    }
    let classes = r.classes();
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let logits = readout_logits(r, s)?;
    let probs = softmax_rows(&logits);
    let mut loss = 0.0f64;
    let mut delta = probs.clone(); // becomes (softmax - y) / B
    for (bi, &cls) in y.iter().enumerate() {
        let pt = probs.data()[bi * classes + cls] as f64;
        loss -= pt.max(1e-30).ln();
        delta.data_mut()[bi * classes + cls] -= 1.0;
    }
    let delta = delta.scale(1.0 / batch as f32);
    let flat = s.reshape(&[batch, s.len() / batch])?;
    let grad_s = matmul(&delta, &r.weight)?.reshape(s.shape())?;
    let grad_w = matmul_at(&delta, &flat)?;
    Ok(((loss / batch as f64) as f32, grad_s, grad_w))
}
