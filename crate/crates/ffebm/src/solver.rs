//! Fixed-point relaxation of energy blocks.
//!
//! Free and nudged phases iterate s_l <- sigma(x 1_{l=0} - grad_s_l U -+ beta ds_l)
//! for a fixed number of steps, either synchronously (all layers from the
//! previous state) or asynchronously (odd layers first, then even layers
//! from the half-updated state). The last block is nudged elastically: the
//! readout loss gradient is re-evaluated at the current state each step.

use serde::{Deserialize, Serialize};

use crate::energy::{
    coupling_down, coupling_up, Activation, BlockState, Coupling, HopfieldBlockParams, LayerShape,
};
use crate::error::{Error, Result};
use crate::feedforward::{readout_loss, ReadoutParams};
use crate::tensor::{PoolIndices, Tensor};

/// Pre-activations larger than this abort the relaxation.
pub const DIVERGENCE_LIMIT: f32 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateInit {
    Zeros,
    WarmStart,
}

#[derive(Debug, Clone, Copy)]
pub struct RelaxationSettings {
    /// Fixed iteration count T (no convergence threshold).
    pub steps: usize,
    pub schedule: Schedule,
    pub init: StateInit,
    /// Nudging factor; 0 for the free phase. Sign selects the +/- phase.
    pub beta: f32,
}

impl RelaxationSettings {
    pub fn free(steps: usize, schedule: Schedule) -> Self {
        RelaxationSettings {
            steps,
            schedule,
            init: StateInit::Zeros,
            beta: 0.0,
        }
    }

    pub fn nudged(steps: usize, schedule: Schedule, beta: f32) -> Self {
        RelaxationSettings {
            steps,
            schedule,
            init: StateInit::WarmStart,
            beta,
        }
    }
}

/// Stationary error signal for an intermediate block: one tensor per layer
/// of the target block (typically zero everywhere except the last layer).
#[derive(Debug, Clone)]
pub struct NudgeSignal {
    pub per_layer: Vec<Tensor>,
}

impl NudgeSignal {
    pub fn zeros(p: &HopfieldBlockParams, batch: usize) -> Self {
        NudgeSignal {
            per_layer: p
                .layers
                .iter()
                .map(|l| Tensor::zeros(&l.batched(batch)))
                .collect(),
        }
    }

    /// Signal concentrated on the block's last layer.
    pub fn on_last_layer(p: &HopfieldBlockParams, batch: usize, signal: Tensor) -> Result<Self> {
        let mut n = NudgeSignal::zeros(p, batch);
        let want = p.layers.last().expect("non-empty block").batched(batch);
        if signal.shape() != want.as_slice() {
            return Err(Error::Shape(format!(
                "nudge signal {:?}, block last layer {:?}",
                signal.shape(),
                want
            )));
        }
        *n.per_layer.last_mut().expect("non-empty block") = signal;
        Ok(n)
    }

    fn check(&self, p: &HopfieldBlockParams, batch: usize) -> Result<()> {
        if self.per_layer.len() != p.layers.len() {
            return Err(Error::Shape(format!(
                "nudge signal has {} layers, block has {}",
                self.per_layer.len(),
                p.layers.len()
            )));
        }
        for (l, (t, shape)) in self.per_layer.iter().zip(&p.layers).enumerate() {
            if t.shape() != shape.batched(batch).as_slice() {
                return Err(Error::Shape(format!(
                    "nudge layer {l}: {:?}, expected {:?}",
                    t.shape(),
                    shape.batched(batch)
                )));
            }
        }
        Ok(())
    }
}

fn check_divergence(z: &Tensor, context: &str, step: usize) -> Result<()> {
    if !z.all_finite() || z.linf() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence {
            context: context.to_string(),
            step,
        });
    }
    Ok(())
}

/// Pre-activations (before nudging) of the given layers from the current
/// state: neighbor drives, bias, and x for the first layer. Also returns
/// the pool indices of every coupling whose up-drive was evaluated, which
/// the implicit-differentiation unroll records for its backward pass.
pub(crate) fn phase_preactivations(
    p: &HopfieldBlockParams,
    s: &BlockState,
    x: &Tensor,
    layers: &[usize],
) -> Result<(Vec<Tensor>, Vec<Option<PoolIndices>>)> {
    let n = p.layers.len();
    let updated = |l: usize| layers.contains(&l);
    // Each coupling computes its up-drive only when needed: the layer above
    // is updated, or the layer below is updated through a pooled coupling
    // (whose down-pass reuses the argmax indices).
    let mut ups: Vec<Option<(Tensor, Option<PoolIndices>)>> = vec![None; p.couplings.len()];
    for (l, c) in p.couplings.iter().enumerate() {
        let pooled = matches!(c, Coupling::Conv { pool: true, .. });
        if updated(l + 1) || (pooled && updated(l)) {
            ups[l] = Some(coupling_up(c, &s.layers[l], &p.layers[l + 1])?);
        }
    }
    let mut zs = Vec::with_capacity(layers.len());
    for &l in layers {
        let mut z = Tensor::zeros(s.layers[l].shape());
        if l > 0 {
            let (up, _) = ups[l - 1].as_ref().expect("up-drive computed for updated layer");
            z.axpy(1.0, up)?;
        }
        if l + 1 < n {
            let idx = ups[l].as_ref().and_then(|(_, i)| i.as_ref());
            let down = coupling_down(&p.couplings[l], &s.layers[l + 1], &p.layers[l], idx)?;
            z.axpy(1.0, &down)?;
        }
        if let Some(b) = &p.biases[l] {
            add_broadcast_bias(&mut z, b, &p.layers[l]);
        }
        if l == 0 {
            z.axpy(1.0, x)?;
        }
        zs.push(z);
    }
    let idx = ups.into_iter().map(|u| u.and_then(|(_, i)| i)).collect();
    Ok((zs, idx))
}

fn add_broadcast_bias(t: &mut Tensor, bias: &Tensor, shape: &LayerShape) {
    let batch = t.shape()[0];
    match shape {
        LayerShape::Fc { units } => {
            for bi in 0..batch {
                for u in 0..*units {
                    t.data_mut()[bi * units + u] += bias.data()[u];
                }
            }
        }
        LayerShape::Conv { channels, height, width } => {
            let sp = height * width;
            for bi in 0..batch {
                for ci in 0..*channels {
                    let base = (bi * channels + ci) * sp;
                    let bv = bias.data()[ci];
                    for sidx in 0..sp {
                        t.data_mut()[base + sidx] += bv;
                    }
                }
            }
        }
    }
}

/// Layer index sets of the schedule's update phases. 1-based odd layers
/// (which receive the drive x at index 0) go first in the asynchronous
/// schedule.
pub(crate) fn schedule_phases(schedule: Schedule, n_layers: usize) -> Vec<Vec<usize>> {
    match schedule {
        Schedule::Synchronous => vec![(0..n_layers).collect()],
        Schedule::Asynchronous => {
            let evens: Vec<usize> = (0..n_layers).step_by(2).collect();
            let odds: Vec<usize> = (1..n_layers).step_by(2).collect();
            if odds.is_empty() {
                vec![evens]
            } else {
                vec![evens, odds]
            }
        }
    }
}

/// One full update (all phases of the schedule) from the previous state.
fn relaxation_step(
    p: &HopfieldBlockParams,
    s: &BlockState,
    x: &Tensor,
    act: Activation,
    schedule: Schedule,
    nudge: Option<&NudgeSignal>,
    beta: f32,
    step: usize,
) -> Result<BlockState> {
    let mut cur = s.clone();
    for phase in schedule_phases(schedule, p.layers.len()) {
        let (zs, _) = phase_preactivations(p, &cur, x, &phase)?;
        for (&l, mut z) in phase.iter().zip(zs) {
            if let Some(n) = nudge {
                z.axpy(-beta, &n.per_layer[l])?;
            }
            check_divergence(&z, "relaxation", step)?;
            cur.layers[l] = act.apply(&z);
        }
    }
    Ok(cur)
}

fn initial_state(
    p: &HopfieldBlockParams,
    batch: usize,
    settings: &RelaxationSettings,
    warm: Option<&BlockState>,
) -> Result<BlockState> {
    match settings.init {
        StateInit::Zeros => Ok(BlockState::zeros(p, batch)),
        StateInit::WarmStart => {
            let w = warm.ok_or_else(|| {
                Error::Usage("warm-start relaxation needs an initial state".into())
            })?;
            p.check_state(w)?;
            Ok(w.clone())
        }
    }
}

/// Relax one block for `settings.steps` iterations against a fixed drive
/// `x`, with an optional stationary nudge of strength `settings.beta`.
pub fn relax(
    p: &HopfieldBlockParams,
    x: &Tensor,
    act: Activation,
    settings: &RelaxationSettings,
    nudge: Option<&NudgeSignal>,
    warm: Option<&BlockState>,
) -> Result<BlockState> {
    if settings.steps == 0 {
        return Err(Error::Usage("relaxation needs at least one step".into()));
    }
    let batch = x.shape()[0];
    if x.shape() != p.layers[0].batched(batch).as_slice() {
        return Err(Error::Shape(format!(
            "drive {:?} does not match first layer {:?}",
            x.shape(),
            p.layers[0].batched(batch)
        )));
    }
    if let Some(n) = nudge {
        n.check(p, batch)?;
    }
    let mut s = initial_state(p, batch, settings, warm)?;
    for t in 0..settings.steps {
        s = relaxation_step(p, &s, x, act, settings.schedule, nudge, settings.beta, t)?;
    }
    Ok(s)
}

/// Relax the last block with elastic nudging: the readout loss gradient is
/// re-evaluated at the current state at the start of every step.
pub fn relax_last_block(
    p: &HopfieldBlockParams,
    x: &Tensor,
    act: Activation,
    settings: &RelaxationSettings,
    readout: &ReadoutParams,
    y: &[usize],
    beta: f32,
    warm: Option<&BlockState>,
) -> Result<BlockState> {
    let batch = x.shape()[0];
    let mut s = initial_state(p, batch, settings, warm)?;
    for t in 0..settings.steps {
        let nudge = if beta != 0.0 {
            let (_, grad_s, _) = readout_loss(readout, s.last(), y)?;
            Some(NudgeSignal::on_last_layer(p, batch, grad_s)?)
        } else {
            None
        };
        s = relaxation_step(p, &s, x, act, settings.schedule, nudge.as_ref(), beta, t)?;
    }
    Ok(s)
}

/// Convergence diagnostic: Linf norm of s - sigma(one synchronous update).
pub fn residual(
    p: &HopfieldBlockParams,
    s: &BlockState,
    x: &Tensor,
    act: Activation,
    nudge: Option<&NudgeSignal>,
    beta: f32,
) -> Result<f32> {
    let next = relaxation_step(p, s, x, act, Schedule::Synchronous, nudge, beta, 0)?;
    let mut worst = 0.0f32;
    for (a, b) in s.layers.iter().zip(&next.layers) {
        worst = worst.max(a.sub(b)?.linf());
    }
    Ok(worst)
}
