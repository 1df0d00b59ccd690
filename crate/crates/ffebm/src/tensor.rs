//! Dense row-major f32 tensors and the hand-enumerated kernels the energy
//! and feedforward modules are built on: matrix products, 3x3 (and general)
//! 2-D cross-correlation with its input/weight adjoints, 2x2 max-pooling
//! with recorded argmax indices, and batch normalization with its exact
//! train-mode adjoint.
//!
//! All reductions accumulate in f64 and run in a fixed order, so every
//! kernel is bit-deterministic for a given input regardless of the worker
//! thread cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threads::for_each_row;

/// Contiguous row-major f32 tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Same data, new shape (element counts must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// self += s * other
    pub fn axpy(&mut self, s: f32, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "dot on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn linf(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn l2(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| v as f64 * v as f64)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Argmax bookkeeping for one max-pooling call: for each pooled output
/// element, the flat index of the selected source element in the pre-pool
/// tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// C = A[m,k] . B[k,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul lhs")?;
    let (kb, n) = dims2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims: {:?} . {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(m, n, out.data_mut(), |i, row| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..ka {
            let av = ad[i * ka + kk] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..kk * n + n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in row.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    });
    Ok(out)
}

/// C = A[k,m]^T . B[k,n]
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = dims2(a, "matmul_at lhs")?;
    let (kb, n) = dims2(b, "matmul_at rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_at inner dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(m, n, out.data_mut(), |i, row| {
        let mut acc = vec![0.0f64; n];
        for kk in 0..ka {
            let av = ad[kk * m + i] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..kk * n + n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in row.iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    });
    Ok(out)
}

/// C = A[m,k] . B[n,k]^T
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul_bt lhs")?;
    let (n, kb) = dims2(b, "matmul_bt rhs")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul_bt inner dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    for_each_row(m, n, out.data_mut(), |i, row| {
        let arow = &ad[i * ka..i * ka + ka];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * kb..j * kb + kb];
            let acc: f64 = arow
                .iter()
                .zip(brow)
                .map(|(&x, &y)| x as f64 * y as f64)
                .sum();
            *o = acc as f32;
        }
    });
    Ok(out)
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (b, c, h, wd) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(Error::Shape(format!("conv2d input must be 4-D, got {s:?}"))),
    };
    let (o, cw, kh, kw) = match w.shape() {
        [o, c, kh, kw] => (*o, *c, *kh, *kw),
        s => return Err(Error::Shape(format!("conv2d kernel must be 4-D, got {s:?}"))),
    };
    if c != cw {
        return Err(Error::Shape(format!(
            "conv2d channels: input {c} vs kernel {cw}"
        )));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d geometry: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    Ok((b, c, h, wd, o, kh, kw, oh, ow))
}

/// Cross-correlation with zero padding: x[B,C,H,W] * w[O,C,kh,kw].
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, wd, o, kh, kw, oh, ow) = conv_dims(x, w, stride, pad)?;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    let (xd, wdat) = (x.data(), w.data());
    for_each_row(b * o, oh * ow, out.data_mut(), |row, plane| {
        let (bi, oi) = (row / o, row % o);
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    let xbase = ((bi * c + ci) * h) * wd;
                    let wbase = ((oi * c + ci) * kh) * kw;
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * wd;
                        let wrow = wbase + khi * kw;
                        for kwi in 0..kw {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            acc += xd[xrow + iw as usize] as f64 * wdat[wrow + kwi] as f64;
                        }
                    }
                }
                plane[ohi * ow + owi] = acc as f32;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to its input:
/// `<conv2d(x,w), g> = <x, conv2d_input_adjoint(g,w)>`.
pub fn conv2d_input_adjoint(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    input_shape: &[usize],
) -> Result<Tensor> {
    let probe = Tensor::zeros(input_shape);
    let (b, c, h, wd, o, kh, kw, oh, ow) = conv_dims(&probe, w, stride, pad)?;
    if g.shape() != [b, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv2d_input_adjoint: upstream {:?}, expected {:?}",
            g.shape(),
            [b, o, oh, ow]
        )));
    }
    let mut out = Tensor::zeros(input_shape);
    let (gd, wdat) = (g.data(), w.data());
    for_each_row(b * c, h * wd, out.data_mut(), |row, plane| {
        let (bi, ci) = (row / c, row % c);
        for oi in 0..o {
            let gbase = ((bi * o + oi) * oh) * ow;
            let wbase = ((oi * c + ci) * kh) * kw;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let gv = gd[gbase + ohi * ow + owi];
                    if gv == 0.0 {
                        continue;
                    }
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            plane[ih as usize * wd + iw as usize] +=
                                gv * wdat[wbase + khi * kw + kwi];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`conv2d`] with respect to the kernel:
/// `<conv2d(x,w), g> = <w, conv2d_weight_adjoint(g,x)>`.
pub fn conv2d_weight_adjoint(
    g: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor> {
    let (kh, kw) = kernel_hw;
    let (b, c, h, wd) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(Error::Shape(format!("conv2d input must be 4-D, got {s:?}"))),
    };
    let (gb, o, oh, ow) = match g.shape() {
        [gb, o, oh, ow] => (*gb, *o, *oh, *ow),
        s => {
            return Err(Error::Shape(format!(
                "conv2d_weight_adjoint upstream must be 4-D, got {s:?}"
            )))
        }
    };
    if gb != b || oh != (h + 2 * pad - kh) / stride + 1 || ow != (wd + 2 * pad - kw) / stride + 1 {
        return Err(Error::Shape(format!(
            "conv2d_weight_adjoint: upstream {:?} does not match input {:?} with kernel {kh}x{kw}",
            g.shape(),
            x.shape()
        )));
    }
    let mut out = Tensor::zeros(&[o, c, kh, kw]);
    let (gd, xd) = (g.data(), x.data());
    for_each_row(o * c, kh * kw, out.data_mut(), |row, ker| {
        let (oi, ci) = (row / c, row % c);
        for khi in 0..kh {
            for kwi in 0..kw {
                let mut acc = 0.0f64;
                for bi in 0..b {
                    let gbase = ((bi * o + oi) * oh) * ow;
                    let xbase = ((bi * c + ci) * h) * wd;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * wd;
                        let grow = gbase + ohi * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            acc += gd[grow + owi] as f64 * xd[xrow + iw as usize] as f64;
                        }
                    }
                }
                ker[khi * kw + kwi] = acc as f32;
            }
        }
    });
    Ok(out)
}

/// 2x2/stride-2 max pooling. Ties break to the lowest flat index.
pub fn maxpool2d(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (b, c, h, w) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(Error::Shape(format!("maxpool2d input must be 4-D, got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2d needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut vals = Tensor::zeros(&[b, c, oh, ow]);
    let mut idx = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let at = base + (ohi * 2 + dh) * w + owi * 2 + dw;
                        if xd[at] > best {
                            best = xd[at];
                            best_at = at;
                        }
                    }
                }
                let o = bc * oh * ow + ohi * ow + owi;
                vals.data_mut()[o] = best;
                idx[o] = best_at;
            }
        }
    }
    Ok((
        vals,
        PoolIndices {
            shape: vec![b, c, oh, ow],
            indices: idx,
        },
    ))
}

/// Scatter of `g` into the recorded argmax positions, zeros elsewhere.
pub fn maxpool2d_adjoint(g: &Tensor, idx: &PoolIndices, input_shape: &[usize]) -> Result<Tensor> {
    if g.shape() != idx.shape.as_slice() {
        return Err(Error::Shape(format!(
            "maxpool2d_adjoint: upstream {:?} vs indices {:?}",
            g.shape(),
            idx.shape
        )));
    }
    let mut out = Tensor::zeros(input_shape);
    let n = out.len();
    for (&i, &gv) in idx.indices.iter().zip(g.data()) {
        if i >= n {
            return Err(Error::Corruption(format!(
                "pool index {i} out of range for input of {n} elements"
            )));
        }
        out.data_mut()[i] += gv;
    }
    Ok(out)
}

/// Gather at recorded argmax positions: the transpose of
/// [`maxpool2d_adjoint`] for fixed indices.
pub fn maxpool2d_gather(x: &Tensor, idx: &PoolIndices) -> Result<Tensor> {
    let mut out = Tensor::zeros(&idx.shape);
    let n = x.len();
    for (o, &i) in out.data_mut().iter_mut().zip(&idx.indices) {
        if i >= n {
            return Err(Error::Corruption(format!(
                "pool index {i} out of range for input of {n} elements"
            )));
        }
        *o = x.data()[i];
    }
    Ok(out)
}

/// Per-channel running statistics for batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics (batch size must be >= 2).
    Train,
    /// Normalize with the provided running statistics.
    Eval,
}

/// Everything the train-mode adjoint needs without re-running the forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
    pub count: usize,
}

fn bn_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, h, w] => Ok((*b, *c, h * w)),
        s => Err(Error::Shape(format!(
            "batchnorm expects [B,C] or [B,C,H,W], got {s:?}"
        ))),
    }
}

/// Batch normalization. Train mode normalizes by per-channel batch
/// mean/variance (biased) and records them in the cache; eval mode uses the
/// running statistics. Affine transform y = scale * x_hat + shift.
pub fn batchnorm_forward(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mode: BnMode,
    running: &RunningStats,
    eps: f32,
) -> Result<(Tensor, BnCache)> {
    let (b, c, sp) = bn_layout(x)?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm affine params must be [{c}], got {:?}/{:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    let count = b * sp;
    let (mean, var) = match mode {
        BnMode::Train => {
            if b < 2 {
                return Err(Error::Stats(format!(
                    "train-mode batchnorm needs batch >= 2, got {b}"
                )));
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * sp;
                    for s in 0..sp {
                        sum += x.data()[base + s] as f64;
                    }
                }
                mean[ci] = sum / count as f64;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * sp;
                    for s in 0..sp {
                        let d = x.data()[base + s] as f64 - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / count as f64;
            }
            (mean, var)
        }
        BnMode::Eval => (
            running.mean.data().iter().map(|&v| v as f64).collect(),
            running.var.data().iter().map(|&v| v as f64).collect(),
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps as f64).sqrt()).collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * sp;
            let (m, is) = (mean[ci], inv_std[ci]);
            let (sc, sh) = (scale.data()[ci], shift.data()[ci]);
            for s in 0..sp {
                let xh = ((x.data()[base + s] as f64 - m) * is) as f32;
                x_hat.data_mut()[base + s] = xh;
                y.data_mut()[base + s] = sc * xh + sh;
            }
        }
    }
    let cache = BnCache {
        x_hat,
        inv_std,
        batch_mean: Tensor::from_vec(&[c], mean.iter().map(|&v| v as f32).collect())?,
        batch_var: Tensor::from_vec(&[c], var.iter().map(|&v| v as f32).collect())?,
        count,
    };
    Ok((y, cache))
}

/// Momentum update of running statistics from one train-mode forward.
/// The running variance uses the unbiased estimate.
pub fn batchnorm_update_running(running: &mut RunningStats, cache: &BnCache, momentum: f32) {
    let n = cache.count as f32;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    for (r, &b) in running
        .mean
        .data_mut()
        .iter_mut()
        .zip(cache.batch_mean.data())
    {
        *r = (1.0 - momentum) * *r + momentum * b;
    }
    for (r, &b) in running.var.data_mut().iter_mut().zip(cache.batch_var.data()) {
        *r = (1.0 - momentum) * *r + momentum * b * unbias;
    }
}

/// Exact adjoint of train-mode [`batchnorm_forward`], including the
/// dependence of the batch statistics on the input.
pub fn batchnorm_adjoint(
    g: &Tensor,
    cache: &BnCache,
    scale: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, sp) = bn_layout(g)?;
    if g.shape() != cache.x_hat.shape() {
        return Err(Error::Usage(format!(
            "batchnorm_adjoint: upstream {:?} does not match cache {:?}",
            g.shape(),
            cache.x_hat.shape()
        )));
    }
    let m = cache.count as f64;
    let mut g_scale = Tensor::zeros(&[c]);
    let mut g_shift = Tensor::zeros(&[c]);
    let mut g_x = Tensor::zeros(g.shape());
    for ci in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for bi in 0..b {
            let base = (bi * c + ci) * sp;
            for s in 0..sp {
                let gv = g.data()[base + s] as f64;
                sum_g += gv;
                sum_gx += gv * cache.x_hat.data()[base + s] as f64;
            }
        }
        g_shift.data_mut()[ci] = sum_g as f32;
        g_scale.data_mut()[ci] = sum_gx as f32;
        let coef = scale.data()[ci] as f64 * cache.inv_std[ci] / m;
        for bi in 0..b {
            let base = (bi * c + ci) * sp;
            for s in 0..sp {
                let gv = g.data()[base + s] as f64;
                let xh = cache.x_hat.data()[base + s] as f64;
                g_x.data_mut()[base + s] = (coef * (m * gv - sum_g - xh * sum_gx)) as f32;
            }
        }
    }
    Ok((g_x, g_scale, g_shift))
}
