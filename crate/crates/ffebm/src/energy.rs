//! Deep Hopfield block energies and their analytic gradients.
//!
//! An energy block holds L layers coupled in a chain: layer l talks only to
//! its neighbors l-1 and l+1, so the implied full weight matrix is symmetric
//! block-tridiagonal with zero diagonal blocks. The block energy is
//!
//! ```text
//! E(s, theta, x) = G(s) - <s_1, x> + U(s, theta)
//! U(s, theta)    = - sum_l  s_{l+1} . (theta_l * s_l)  -  sum_l  b_l . s_l
//! ```
//!
//! where `*` is a dense product, or a 3x3/stride-1/pad-1 convolution
//! optionally followed by 2x2 max pooling, and `x` (the output of the
//! preceding feedforward transformation) drives the first layer only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_input_adjoint, conv2d_weight_adjoint, matmul, matmul_at, matmul_bt,
    maxpool2d, maxpool2d_adjoint, maxpool2d_gather, PoolIndices, Tensor,
};

/// Hard-clipped activations used inside energy blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// sigma(x) = max(min(x, 1), 0)
    Ernoult,
    /// sigma(x) = max(min(0.5 x, 1), 0)
    Laborieux,
}

impl Activation {
    pub fn apply_scalar(self, x: f32) -> f32 {
        match self {
            Activation::Ernoult => x.clamp(0.0, 1.0),
            Activation::Laborieux => (0.5 * x).clamp(0.0, 1.0),
        }
    }

    /// Slope of the linear region, with boundary points counted as inside.
    pub fn derivative_scalar(self, x: f32) -> f32 {
        match self {
            Activation::Ernoult => {
                if (0.0..=1.0).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Laborieux => {
                if (0.0..=2.0).contains(&x) {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply_scalar(v))
    }

    pub fn derivative(self, x: &Tensor) -> Tensor {
        x.map(|v| self.derivative_scalar(v))
    }

    /// Antiderivative of the (continuously extended) inverse activation on
    /// [0, 1]; diagnostic only, never used inside dynamics.
    fn g_scalar(self, s: f32) -> f32 {
        match self {
            Activation::Ernoult => 0.5 * s * s,
            Activation::Laborieux => s * s,
        }
    }
}

/// Shape of one layer of an energy block, batch dimension excluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerShape {
    Fc { units: usize },
    Conv { channels: usize, height: usize, width: usize },
}

impl LayerShape {
    pub fn size(&self) -> usize {
        match self {
            LayerShape::Fc { units } => *units,
            LayerShape::Conv { channels, height, width } => channels * height * width,
        }
    }

    pub fn batched(&self, batch: usize) -> Vec<usize> {
        match self {
            LayerShape::Fc { units } => vec![batch, *units],
            LayerShape::Conv { channels, height, width } => {
                vec![batch, *channels, *height, *width]
            }
        }
    }

    /// Per-layer bias shape: one value per unit (FC) or per channel (conv).
    pub fn bias_shape(&self) -> Vec<usize> {
        match self {
            LayerShape::Fc { units } => vec![*units],
            LayerShape::Conv { channels, .. } => vec![*channels],
        }
    }
}

/// Inter-layer connection l -> l+1.
#[derive(Debug, Clone)]
pub enum Coupling {
    /// Dense matrix [size(l+1), size(l)] acting on flattened states.
    Dense(Tensor),
    /// 3x3 stride-1 pad-1 convolution [C_{l+1}, C_l, 3, 3], optionally
    /// followed by 2x2 max pooling.
    Conv { weight: Tensor, pool: bool },
}

impl Coupling {
    pub fn weight(&self) -> &Tensor {
        match self {
            Coupling::Dense(w) => w,
            Coupling::Conv { weight, .. } => weight,
        }
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        match self {
            Coupling::Dense(w) => w,
            Coupling::Conv { weight, .. } => weight,
        }
    }
}

/// One deep-Hopfield energy block: layer shapes, chain couplings, biases.
#[derive(Debug, Clone)]
pub struct HopfieldBlockParams {
    pub layers: Vec<LayerShape>,
    pub couplings: Vec<Coupling>,
    pub biases: Vec<Option<Tensor>>,
}

/// Batched state of one energy block, one tensor per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub layers: Vec<Tensor>,
}

impl BlockState {
    pub fn zeros(p: &HopfieldBlockParams, batch: usize) -> Self {
        BlockState {
            layers: p.layers.iter().map(|l| Tensor::zeros(&l.batched(batch))).collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.layers.first().map_or(0, |t| t.shape()[0])
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("block has at least one layer")
    }
}

impl HopfieldBlockParams {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("energy block needs at least one layer".into()));
        }
        if self.couplings.len() + 1 != self.layers.len()
            || self.biases.len() != self.layers.len()
        {
            return Err(Error::Config(format!(
                "energy block with {} layers needs {} couplings and {} bias slots",
                self.layers.len(),
                self.layers.len() - 1,
                self.layers.len()
            )));
        }
        for (l, c) in self.couplings.iter().enumerate() {
            let lo = &self.layers[l];
            let hi = &self.layers[l + 1];
            match c {
                Coupling::Dense(w) => {
                    if w.shape() != [hi.size(), lo.size()] {
                        return Err(Error::Config(format!(
                            "dense coupling {l}: weight {:?}, expected [{}, {}]",
                            w.shape(),
                            hi.size(),
                            lo.size()
                        )));
                    }
                }
                Coupling::Conv { weight, pool } => {
                    let (LayerShape::Conv { channels: cl, height: hl, width: wl },
                         LayerShape::Conv { channels: ch, height: hh, width: wh }) = (lo, hi)
                    else {
                        return Err(Error::Config(format!(
                            "conv coupling {l} requires conv layers on both sides"
                        )));
                    };
                    if weight.shape() != [*ch, *cl, 3, 3] {
                        return Err(Error::Config(format!(
                            "conv coupling {l}: weight {:?}, expected [{ch}, {cl}, 3, 3]",
                            weight.shape()
                        )));
                    }
                    let (eh, ew) = if *pool { (hl / 2, wl / 2) } else { (*hl, *wl) };
                    if *pool && (hl % 2 != 0 || wl % 2 != 0) {
                        return Err(Error::Config(format!(
                            "conv coupling {l}: pooling needs even spatial dims, got {hl}x{wl}"
                        )));
                    }
                    if (eh, ew) != (*hh, *wh) {
                        return Err(Error::Config(format!(
                            "conv coupling {l}: maps to {eh}x{ew} but next layer is {hh}x{wh}"
                        )));
                    }
                }
            }
        }
        for (l, b) in self.biases.iter().enumerate() {
            if let Some(b) = b {
                if b.shape() != self.layers[l].bias_shape().as_slice() {
                    return Err(Error::Config(format!(
                        "bias {l}: shape {:?}, expected {:?}",
                        b.shape(),
                        self.layers[l].bias_shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn check_state(&self, s: &BlockState) -> Result<usize> {
        if s.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "state has {} layers, block has {}",
                s.layers.len(),
                self.layers.len()
            )));
        }
        let batch = s.batch();
        for (l, (t, shape)) in s.layers.iter().zip(&self.layers).enumerate() {
            if t.shape() != shape.batched(batch).as_slice() {
                return Err(Error::Shape(format!(
                    "state layer {l}: {:?}, expected {:?}",
                    t.shape(),
                    shape.batched(batch)
                )));
            }
        }
        Ok(batch)
    }
}

/// Drive from layer l up to layer l+1: theta_l applied to s_l, with pool
/// indices recorded when the coupling pools.
pub fn coupling_up(
    c: &Coupling,
    s_lo: &Tensor,
    hi_shape: &LayerShape,
) -> Result<(Tensor, Option<PoolIndices>)> {
    let batch = s_lo.shape()[0];
    match c {
        Coupling::Dense(w) => {
            let flat = s_lo.reshape(&[batch, s_lo.len() / batch])?;
            let out = matmul_bt(&flat, w)?;
            Ok((out.reshape(&hi_shape.batched(batch))?, None))
        }
        Coupling::Conv { weight, pool } => {
            let y = conv2d(s_lo, weight, 1, 1)?;
            if *pool {
                let (p, idx) = maxpool2d(&y)?;
                Ok((p, Some(idx)))
            } else {
                Ok((y, None))
            }
        }
    }
}

/// Drive from layer l+1 down to layer l: the transpose of [`coupling_up`],
/// using the recorded pool indices when the coupling pools.
pub fn coupling_down(
    c: &Coupling,
    s_hi: &Tensor,
    lo_shape: &LayerShape,
    idx: Option<&PoolIndices>,
) -> Result<Tensor> {
    let batch = s_hi.shape()[0];
    match c {
        Coupling::Dense(w) => {
            let flat = s_hi.reshape(&[batch, s_hi.len() / batch])?;
            let out = matmul(&flat, w)?;
            out.reshape(&lo_shape.batched(batch))
        }
        Coupling::Conv { weight, pool } => {
            let lo = lo_shape.batched(batch);
            let g = if *pool {
                let idx = idx.ok_or_else(|| {
                    Error::Usage("pooled coupling_down needs pool indices".into())
                })?;
                let conv_out = [lo[0], weight.shape()[0], lo[2], lo[3]];
                maxpool2d_adjoint(s_hi, idx, &conv_out)?
            } else {
                s_hi.clone()
            };
            conv2d_input_adjoint(&g, weight, 1, 1, &lo)
        }
    }
}

/// Transpose of [`coupling_down`] at fixed pool indices: theta applied
/// upward with the recorded argmax selection instead of a fresh pooling.
pub fn coupling_up_at_indices(
    c: &Coupling,
    v_lo: &Tensor,
    hi_shape: &LayerShape,
    idx: Option<&PoolIndices>,
) -> Result<Tensor> {
    match c {
        Coupling::Dense(_) => Ok(coupling_up(c, v_lo, hi_shape)?.0),
        Coupling::Conv { weight, pool } => {
            let y = conv2d(v_lo, weight, 1, 1)?;
            if *pool {
                let idx = idx.ok_or_else(|| {
                    Error::Usage("pooled coupling_up_at_indices needs pool indices".into())
                })?;
                maxpool2d_gather(&y, idx)
            } else {
                Ok(y)
            }
        }
    }
}

/// Gradient of the up-drive with respect to the coupling weight, batch
/// summed: the weight adjoint of [`coupling_up`] at upstream `g_hi`.
pub fn coupling_weight_grad(
    c: &Coupling,
    s_lo: &Tensor,
    g_hi: &Tensor,
    idx: Option<&PoolIndices>,
) -> Result<Tensor> {
    let batch = s_lo.shape()[0];
    match c {
        Coupling::Dense(_) => {
            let ghf = g_hi.reshape(&[batch, g_hi.len() / batch])?;
            let slf = s_lo.reshape(&[batch, s_lo.len() / batch])?;
            matmul_at(&ghf, &slf)
        }
        Coupling::Conv { weight, pool } => {
            let g = if *pool {
                let idx = idx.ok_or_else(|| {
                    Error::Usage("pooled coupling_weight_grad needs pool indices".into())
                })?;
                let conv_out = [batch, weight.shape()[0], s_lo.shape()[2], s_lo.shape()[3]];
                maxpool2d_adjoint(g_hi, idx, &conv_out)?
            } else {
                g_hi.clone()
            };
            conv2d_weight_adjoint(&g, s_lo, 1, 1, (3, 3))
        }
    }
}

fn add_bias(t: &mut Tensor, bias: &Tensor, shape: &LayerShape) {
    match shape {
        LayerShape::Fc { units } => {
            let batch = t.shape()[0];
            for bi in 0..batch {
                for u in 0..*units {
                    t.data_mut()[bi * units + u] += bias.data()[u];
                }
            }
        }
        LayerShape::Conv { channels, height, width } => {
            let batch = t.shape()[0];
            let sp = height * width;
            for bi in 0..batch {
                for ci in 0..*channels {
                    let base = (bi * channels + ci) * sp;
                    let bv = bias.data()[ci];
                    for s in 0..sp {
                        t.data_mut()[base + s] += bv;
                    }
                }
            }
        }
    }
}

/// Per-batch-element row dot of two equally shaped batched tensors.
fn rowwise_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "rowwise dot on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch = a.shape()[0];
    let per = a.len() / batch.max(1);
    let mut out = Tensor::zeros(&[batch]);
    for bi in 0..batch {
        let acc: f64 = a.data()[bi * per..(bi + 1) * per]
            .iter()
            .zip(&b.data()[bi * per..(bi + 1) * per])
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        out.data_mut()[bi] = acc as f32;
    }
    Ok(out)
}

fn bias_dot(bias: &Tensor, s: &Tensor, shape: &LayerShape) -> Tensor {
    let batch = s.shape()[0];
    let mut out = Tensor::zeros(&[batch]);
    match shape {
        LayerShape::Fc { units } => {
            for bi in 0..batch {
                let acc: f64 = (0..*units)
                    .map(|u| bias.data()[u] as f64 * s.data()[bi * units + u] as f64)
                    .sum();
                out.data_mut()[bi] = acc as f32;
            }
        }
        LayerShape::Conv { channels, height, width } => {
            let sp = height * width;
            for bi in 0..batch {
                let mut acc = 0.0f64;
                for ci in 0..*channels {
                    let base = (bi * channels + ci) * sp;
                    let bv = bias.data()[ci] as f64;
                    for sidx in 0..sp {
                        acc += bv * s.data()[base + sidx] as f64;
                    }
                }
                out.data_mut()[bi] = acc as f32;
            }
        }
    }
    out
}

/// Interaction energy U per batch element.
pub fn hopfield_interaction_energy(p: &HopfieldBlockParams, s: &BlockState) -> Result<Tensor> {
    let batch = p.check_state(s)?;
    let mut u = Tensor::zeros(&[batch]);
    for (l, c) in p.couplings.iter().enumerate() {
        let (up, _) = coupling_up(c, &s.layers[l], &p.layers[l + 1])?;
        let term = rowwise_dot(&s.layers[l + 1], &up)?;
        u.axpy(-1.0, &term)?;
    }
    for (l, b) in p.biases.iter().enumerate() {
        if let Some(b) = b {
            let term = bias_dot(b, &s.layers[l], &p.layers[l]);
            u.axpy(-1.0, &term)?;
        }
    }
    Ok(u)
}

/// Per-layer gradient of U with respect to the block state.
pub fn interaction_grad_state(p: &HopfieldBlockParams, s: &BlockState) -> Result<Vec<Tensor>> {
    p.check_state(s)?;
    let n = p.layers.len();
    // Up-drives (and pool indices) for every pair, from the current state.
    let mut ups = Vec::with_capacity(p.couplings.len());
    for (l, c) in p.couplings.iter().enumerate() {
        ups.push(coupling_up(c, &s.layers[l], &p.layers[l + 1])?);
    }
    let mut grads = Vec::with_capacity(n);
    for m in 0..n {
        let mut g = Tensor::zeros(s.layers[m].shape());
        if m > 0 {
            g.axpy(-1.0, &ups[m - 1].0)?;
        }
        if m + 1 < n {
            let down = coupling_down(
                &p.couplings[m],
                &s.layers[m + 1],
                &p.layers[m],
                ups[m].1.as_ref(),
            )?;
            g.axpy(-1.0, &down)?;
        }
        if let Some(b) = &p.biases[m] {
            let mut bt = Tensor::zeros(s.layers[m].shape());
            add_bias(&mut bt, b, &p.layers[m]);
            g.axpy(-1.0, &bt)?;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Batch-summed gradients of the block energy with respect to coupling
/// weights and biases. Independent of the feedforward drive.
pub fn energy_grad_params(
    p: &HopfieldBlockParams,
    s: &BlockState,
) -> Result<(Vec<Tensor>, Vec<Option<Tensor>>)> {
    p.check_state(s)?;
    let mut theta = Vec::with_capacity(p.couplings.len());
    for (l, c) in p.couplings.iter().enumerate() {
        let idx = coupling_up(c, &s.layers[l], &p.layers[l + 1])?.1;
        let g = coupling_weight_grad(c, &s.layers[l], &s.layers[l + 1], idx.as_ref())?;
        theta.push(g.scale(-1.0));
    }
    let mut biases = Vec::with_capacity(p.layers.len());
    for (l, b) in p.biases.iter().enumerate() {
        biases.push(match b {
            None => None,
            Some(_) => {
                let st = &s.layers[l];
                let batch = st.shape()[0];
                match &p.layers[l] {
                    LayerShape::Fc { units } => {
                        let mut g = Tensor::zeros(&[*units]);
                        for bi in 0..batch {
                            for u in 0..*units {
                                g.data_mut()[u] -= st.data()[bi * units + u];
                            }
                        }
                        Some(g)
                    }
                    LayerShape::Conv { channels, height, width } => {
                        let sp = height * width;
                        let mut g = Tensor::zeros(&[*channels]);
                        for bi in 0..batch {
                            for ci in 0..*channels {
                                let base = (bi * channels + ci) * sp;
                                let acc: f32 = st.data()[base..base + sp].iter().sum();
                                g.data_mut()[ci] -= acc;
                            }
                        }
                        Some(g)
                    }
                }
            }
        });
    }
    Ok((theta, biases))
}

/// Gradient of the block energy with respect to its feedforward input:
/// minus the state of the input-receiving (first) layer.
pub fn energy_grad_input(s: &BlockState) -> Tensor {
    s.layers[0].scale(-1.0)
}

/// Primitive function per batch element: Phi = <s_1, x> - U.
pub fn primitive_phi(p: &HopfieldBlockParams, s: &BlockState, x: &Tensor) -> Result<Tensor> {
    let drive = rowwise_dot(&s.layers[0], x)?;
    let u = hopfield_interaction_energy(p, s)?;
    drive.sub(&u)
}

/// Diagnostic block energy per batch element: E = G(s) - <s_1, x> + U.
pub fn block_energy(
    p: &HopfieldBlockParams,
    s: &BlockState,
    x: &Tensor,
    act: Activation,
) -> Result<Tensor> {
    let batch = p.check_state(s)?;
    let mut g = Tensor::zeros(&[batch]);
    for t in &s.layers {
        let per = t.len() / batch;
        for bi in 0..batch {
            let acc: f64 = t.data()[bi * per..(bi + 1) * per]
                .iter()
                .map(|&v| act.g_scalar(v) as f64)
                .sum();
            g.data_mut()[bi] += acc as f32;
        }
    }
    let drive = rowwise_dot(&s.layers[0], x)?;
    let u = hopfield_interaction_energy(p, s)?;
    g.sub(&drive)?.add(&u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut StdRng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
    }

    fn fc_block(r: &mut StdRng, widths: &[usize], bias: bool) -> HopfieldBlockParams {
        let layers: Vec<LayerShape> = widths.iter().map(|&u| LayerShape::Fc { units: u }).collect();
        let couplings = widths
            .windows(2)
            .map(|w| Coupling::Dense(rand_tensor(r, &[w[1], w[0]], -0.4, 0.4)))
            .collect();
        let biases = widths
            .iter()
            .map(|&u| bias.then(|| rand_tensor(r, &[u], -0.1, 0.1)))
            .collect();
        HopfieldBlockParams { layers, couplings, biases }
    }

    fn rand_state(r: &mut StdRng, p: &HopfieldBlockParams, batch: usize) -> BlockState {
        BlockState {
            layers: p
                .layers
                .iter()
                .map(|l| rand_tensor(r, &l.batched(batch), 0.1, 0.9))
                .collect(),
        }
    }

    // Test-only oracle: materialize the full symmetric coupling matrix of an
    // FC block and evaluate -1/2 s^T theta s directly.
    fn materialize_dense_theta(p: &HopfieldBlockParams) -> Tensor {
        let sizes: Vec<usize> = p.layers.iter().map(|l| l.size()).collect();
        let total: usize = sizes.iter().sum();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let mut theta = Tensor::zeros(&[total, total]);
        for (l, c) in p.couplings.iter().enumerate() {
            let w = match c {
                Coupling::Dense(w) => w,
                _ => panic!("FC only"),
            };
            let (m, n) = (sizes[l + 1], sizes[l]);
            for i in 0..m {
                for j in 0..n {
                    let v = w.data()[i * n + j];
                    theta.data_mut()[(offsets[l + 1] + i) * total + offsets[l] + j] = v;
                    theta.data_mut()[(offsets[l] + j) * total + offsets[l + 1] + i] = v;
                }
            }
        }
        theta
    }

    #[test]
    fn activation_values() {
        let a = Activation::Laborieux;
        assert_eq!(a.apply_scalar(1.0), 0.5);
        assert_eq!(a.apply_scalar(3.0), 1.0);
        assert_eq!(a.apply_scalar(-1.0), 0.0);
        assert_eq!(Activation::Ernoult.apply_scalar(0.7), 0.7);
    }

    #[test]
    fn activation_derivative_values_and_fd() {
        let a = Activation::Laborieux;
        assert_eq!(a.derivative_scalar(1.0), 0.5);
        assert_eq!(a.derivative_scalar(5.0), 0.0);
        assert_eq!(a.derivative_scalar(0.0), 0.5); // boundary counts inside
        assert_eq!(Activation::Ernoult.derivative_scalar(0.5), 1.0);

        // central differences at interior points
        for act in [Activation::Ernoult, Activation::Laborieux] {
            for &x in &[0.25f32, 0.5, 0.75, 1.5] {
                let eps = 1e-3;
                let fd = (act.apply_scalar(x + eps) - act.apply_scalar(x - eps)) / (2.0 * eps);
                let an = act.derivative_scalar(x);
                if (act == Activation::Ernoult && x < 1.0) || act == Activation::Laborieux {
                    assert!((fd - an).abs() <= 1e-4, "{act:?} at {x}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn interaction_energy_hand_example() {
        // two scalar layers, theta = [2], s1 = 1, s2 = 3, no bias -> U = -6
        let p = HopfieldBlockParams {
            layers: vec![LayerShape::Fc { units: 1 }, LayerShape::Fc { units: 1 }],
            couplings: vec![Coupling::Dense(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap())],
            biases: vec![None, None],
        };
        let s = BlockState {
            layers: vec![
                Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
                Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(),
            ],
        };
        let u = hopfield_interaction_energy(&p, &s).unwrap();
        assert_eq!(u.data(), &[-6.0]);

        let g = interaction_grad_state(&p, &s).unwrap();
        assert_eq!(g[0].data(), &[-6.0]);
        assert_eq!(g[1].data(), &[-2.0]);

        let (theta, _) = energy_grad_params(&p, &s).unwrap();
        assert_eq!(theta[0].data(), &[-3.0]);
    }

    #[test]
    fn zero_state_zero_energy_and_grads() {
        let mut r = rng(1);
        let p = fc_block(&mut r, &[3, 4, 2], false);
        let s = BlockState::zeros(&p, 2);
        assert_eq!(hopfield_interaction_energy(&p, &s).unwrap().linf(), 0.0);
        let (theta, _) = energy_grad_params(&p, &s).unwrap();
        assert!(theta.iter().all(|g| g.linf() == 0.0));
    }

    #[test]
    fn energy_matches_dense_symmetric_quadratic_form() {
        let mut r = rng(2);
        let p = fc_block(&mut r, &[3, 5, 4], false);
        let theta = materialize_dense_theta(&p);
        // exact symmetry
        let total = theta.shape()[0];
        for i in 0..total {
            for j in 0..total {
                assert_eq!(theta.data()[i * total + j], theta.data()[j * total + i]);
            }
        }
        let s = rand_state(&mut r, &p, 3);
        let u = hopfield_interaction_energy(&p, &s).unwrap();
        for bi in 0..3 {
            let mut flat = Vec::new();
            for t in &s.layers {
                let per = t.len() / 3;
                flat.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
            }
            let mut quad = 0.0f64;
            for i in 0..total {
                for j in 0..total {
                    quad += flat[i] as f64 * theta.data()[i * total + j] as f64 * flat[j] as f64;
                }
            }
            let expect = -0.5 * quad;
            assert!(
                (u.data()[bi] as f64 - expect).abs() <= 1e-5,
                "batch {bi}: {} vs {expect}",
                u.data()[bi]
            );
        }
    }

    #[test]
    fn grad_u_state_matches_fd() {
        let mut r = rng(3);
        let p = fc_block(&mut r, &[3, 4, 2], true);
        let mut s = rand_state(&mut r, &p, 2);
        let grads = interaction_grad_state(&p, &s).unwrap();
        let eps = 1e-3f32;
        for l in 0..p.layers.len() {
            for e in [0usize, s.layers[l].len() - 1] {
                let orig = s.layers[l].data()[e];
                s.layers[l].data_mut()[e] = orig + eps;
                let up: f64 = hopfield_interaction_energy(&p, &s)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                s.layers[l].data_mut()[e] = orig - eps;
                let dn: f64 = hopfield_interaction_energy(&p, &s)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                s.layers[l].data_mut()[e] = orig;
                let fd = ((up - dn) / (2.0 * eps as f64)) as f32;
                let got = grads[l].data()[e];
                assert!(
                    (fd - got).abs() <= 1e-3 * fd.abs().max(1.0),
                    "layer {l} entry {e}: fd {fd} vs {got}"
                );
            }
        }
    }

    #[test]
    fn single_layer_block_has_zero_state_grad() {
        let p = HopfieldBlockParams {
            layers: vec![LayerShape::Fc { units: 4 }],
            couplings: vec![],
            biases: vec![None],
        };
        let s = BlockState {
            layers: vec![Tensor::full(&[2, 4], 0.3)],
        };
        let g = interaction_grad_state(&p, &s).unwrap();
        assert_eq!(g[0].linf(), 0.0);
    }

    #[test]
    fn grad_e_params_matches_fd() {
        let mut r = rng(4);
        let mut p = fc_block(&mut r, &[2, 3], true);
        let s = rand_state(&mut r, &p, 2);
        let (theta, biases) = energy_grad_params(&p, &s).unwrap();
        let eps = 1e-3f32;
        for e in 0..theta[0].len() {
            let orig = p.couplings[0].weight().data()[e];
            p.couplings[0].weight_mut().data_mut()[e] = orig + eps;
            let up: f64 = hopfield_interaction_energy(&p, &s)
                .unwrap()
                .data()
                .iter()
                .map(|&v| v as f64)
                .sum();
            p.couplings[0].weight_mut().data_mut()[e] = orig - eps;
            let dn: f64 = hopfield_interaction_energy(&p, &s)
                .unwrap()
                .data()
                .iter()
                .map(|&v| v as f64)
                .sum();
            p.couplings[0].weight_mut().data_mut()[e] = orig;
            let fd = ((up - dn) / (2.0 * eps as f64)) as f32;
            assert!((fd - theta[0].data()[e]).abs() <= 1e-3 * fd.abs().max(1.0));
        }
        // bias gradient is minus the batch-summed state
        let b0 = biases[0].as_ref().unwrap();
        for u in 0..2 {
            let want: f32 = -(0..2).map(|bi| s.layers[0].data()[bi * 2 + u]).sum::<f32>();
            assert!((b0.data()[u] - want).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv_block_grads_match_fd() {
        let mut r = rng(5);
        let p = HopfieldBlockParams {
            layers: vec![
                LayerShape::Conv { channels: 2, height: 4, width: 4 },
                LayerShape::Conv { channels: 3, height: 2, width: 2 },
            ],
            couplings: vec![Coupling::Conv {
                weight: rand_tensor(&mut r, &[3, 2, 3, 3], -0.3, 0.3),
                pool: true,
            }],
            biases: vec![None, Some(rand_tensor(&mut r, &[3], -0.1, 0.1))],
        };
        p.validate().unwrap();
        let mut s = rand_state(&mut r, &p, 2);
        let grads = interaction_grad_state(&p, &s).unwrap();
        let eps = 1e-3f32;
        // probe a few state entries in each layer (argmax ties avoided by
        // random continuous values)
        for l in 0..2 {
            for e in [0usize, 5, s.layers[l].len() - 1] {
                let orig = s.layers[l].data()[e];
                s.layers[l].data_mut()[e] = orig + eps;
                let up: f64 = hopfield_interaction_energy(&p, &s)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                s.layers[l].data_mut()[e] = orig - eps;
                let dn: f64 = hopfield_interaction_energy(&p, &s)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|&v| v as f64)
                    .sum();
                s.layers[l].data_mut()[e] = orig;
                let fd = ((up - dn) / (2.0 * eps as f64)) as f32;
                let got = grads[l].data()[e];
                assert!(
                    (fd - got).abs() <= 2e-3 * fd.abs().max(1.0),
                    "conv layer {l} entry {e}: fd {fd} vs {got}"
                );
            }
        }
        let (theta, _) = energy_grad_params(&p, &s).unwrap();
        assert_eq!(theta[0].shape(), &[3, 2, 3, 3]);
    }

    #[test]
    fn grad_e_input_and_centered_input_error() {
        let s = BlockState {
            layers: vec![Tensor::from_vec(&[1, 1], vec![0.5]).unwrap()],
        };
        assert_eq!(energy_grad_input(&s).data(), &[-0.5]);

        // s_beta == s_-beta -> centered input error is zero
        let sb = energy_grad_input(&s);
        let sm = energy_grad_input(&s);
        let dx = sb.sub(&sm).unwrap().scale(1.0 / (2.0 * 0.05));
        assert_eq!(dx.linf(), 0.0);

        // random pair evaluated against the direct formula -(s_b - s_m)/(2 beta)
        let mut r = rng(6);
        let a = rand_tensor(&mut r, &[2, 3], 0.0, 1.0);
        let b = rand_tensor(&mut r, &[2, 3], 0.0, 1.0);
        let beta = 0.05f32;
        let direct = a.sub(&b).unwrap().scale(-1.0 / (2.0 * beta));
        let via = energy_grad_input(&BlockState { layers: vec![a.clone()] })
            .sub(&energy_grad_input(&BlockState { layers: vec![b.clone()] }))
            .unwrap()
            .scale(1.0 / (2.0 * beta));
        assert!(direct.sub(&via).unwrap().linf() <= 1e-6);
    }

    #[test]
    fn primitive_phi_consistency() {
        // U = 0 scalar case: Phi = s*x
        let p = HopfieldBlockParams {
            layers: vec![LayerShape::Fc { units: 1 }],
            couplings: vec![],
            biases: vec![None],
        };
        let s = BlockState {
            layers: vec![Tensor::from_vec(&[1, 1], vec![0.4]).unwrap()],
        };
        let x = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        assert!((primitive_phi(&p, &s, &x).unwrap().data()[0] - 0.8).abs() <= 1e-6);

        // FD of Phi in s matches x - grad_U
        let mut r = rng(7);
        let p = fc_block(&mut r, &[3, 2], false);
        let mut s = rand_state(&mut r, &p, 1);
        let x = rand_tensor(&mut r, &[1, 3], -0.5, 0.5);
        let gu = interaction_grad_state(&p, &s).unwrap();
        let eps = 1e-3f32;
        for e in 0..3 {
            let orig = s.layers[0].data()[e];
            s.layers[0].data_mut()[e] = orig + eps;
            let up = primitive_phi(&p, &s, &x).unwrap().data()[0] as f64;
            s.layers[0].data_mut()[e] = orig - eps;
            let dn = primitive_phi(&p, &s, &x).unwrap().data()[0] as f64;
            s.layers[0].data_mut()[e] = orig;
            let fd = ((up - dn) / (2.0 * eps as f64)) as f32;
            let want = x.data()[e] - gu[0].data()[e];
            assert!((fd - want).abs() <= 1e-3 * want.abs().max(1.0));
        }

        // zero x, zero s -> Phi = 0
        let z = BlockState::zeros(&p, 1);
        let xz = Tensor::zeros(&[1, 3]);
        assert_eq!(primitive_phi(&p, &z, &xz).unwrap().data(), &[0.0]);
    }

    #[test]
    fn block_energy_diagnostic() {
        // laborieux, scalar s = 0.5, x = 0, U = 0 -> E = G(s) = s^2 = 0.25
        let p = HopfieldBlockParams {
            layers: vec![LayerShape::Fc { units: 1 }],
            couplings: vec![],
            biases: vec![None],
        };
        let s = BlockState {
            layers: vec![Tensor::from_vec(&[1, 1], vec![0.5]).unwrap()],
        };
        let x = Tensor::zeros(&[1, 1]);
        let e = block_energy(&p, &s, &x, Activation::Laborieux).unwrap();
        assert!((e.data()[0] - 0.25).abs() <= 1e-6);

        // s = sigma(x) with U = 0 is a stationary point of E in s
        let x = Tensor::from_vec(&[1, 1], vec![0.8]).unwrap();
        let sstar = Activation::Laborieux.apply(&x);
        let mut s = BlockState { layers: vec![sstar] };
        let eps = 1e-3f32;
        let orig = s.layers[0].data()[0];
        s.layers[0].data_mut()[0] = orig + eps;
        let up = block_energy(&p, &s, &x, Activation::Laborieux).unwrap().data()[0];
        s.layers[0].data_mut()[0] = orig - eps;
        let dn = block_energy(&p, &s, &x, Activation::Laborieux).unwrap().data()[0];
        let fd = (up - dn) / (2.0 * eps);
        assert!(fd.abs() <= 1e-4, "stationarity violated: dE/ds = {fd}");

        // interior FD check of grad E = sigma^{-1}(s) - x + grad_U
        let mut r = rng(8);
        let p = fc_block(&mut r, &[2, 2], false);
        let mut s = rand_state(&mut r, &p, 1);
        let x = rand_tensor(&mut r, &[1, 2], -0.3, 0.3);
        let gu = interaction_grad_state(&p, &s).unwrap();
        for e in 0..2 {
            let orig = s.layers[0].data()[e];
            s.layers[0].data_mut()[e] = orig + eps;
            let up = block_energy(&p, &s, &x, Activation::Laborieux).unwrap().data()[0] as f64;
            s.layers[0].data_mut()[e] = orig - eps;
            let dn = block_energy(&p, &s, &x, Activation::Laborieux).unwrap().data()[0] as f64;
            s.layers[0].data_mut()[e] = orig;
            let fd = ((up - dn) / (2.0 * eps as f64)) as f32;
            // sigma^{-1}(s) = 2 s for laborieux
            let want = 2.0 * orig - x.data()[e] + gu[0].data()[e];
            assert!(
                (fd - want).abs() <= 1e-3 * want.abs().max(1.0),
                "entry {e}: fd {fd} vs {want}"
            );
        }
    }

    #[test]
    fn validate_rejects_bad_chains() {
        let p = HopfieldBlockParams {
            layers: vec![LayerShape::Fc { units: 2 }, LayerShape::Fc { units: 3 }],
            couplings: vec![Coupling::Dense(Tensor::zeros(&[2, 2]))],
            biases: vec![None, None],
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}
