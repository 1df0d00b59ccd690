//! The gradient computations: implicit and explicit BP-EP chaining, the
//! implicit-differentiation (recurrent backprop) baseline, a central
//! finite-difference oracle over the full pipeline loss, and exact backprop
//! for the feedforward reduction (single-layer blocks, no biases).
//!
//! All engines estimate gradients of the mean batch cross-entropy. Error
//! signals carry the 1/B factor from the loss, so centered estimates are
//! divided by 2 beta only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::energy::{
    coupling_down, coupling_up_at_indices, coupling_weight_grad, energy_grad_input,
    energy_grad_params, BlockState, HopfieldBlockParams, LayerShape,
};
use crate::error::{Error, Result};
use crate::feedforward::{ff_forward, ff_input_vjp, ff_param_vjp, readout_loss, FfParamGrads};
use crate::model::{forward_inference, InferenceRecord, Mode, Model};
use crate::solver::{
    phase_preactivations, relax, relax_last_block, residual, schedule_phases, NudgeSignal,
    RelaxationSettings,
};
use crate::tensor::{PoolIndices, Tensor};
use crate::threads;

/// Named gradient tensors aligned with the trainable parameter paths.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    map: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn add(&mut self, name: &str, t: &Tensor) -> Result<()> {
        match self.map.get_mut(name) {
            Some(have) => have.axpy(1.0, t),
            None => {
                self.map.insert(name.to_string(), t.clone());
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }

    /// Largest per-tensor relative L2 distance to `other` (matching keys).
    pub fn max_rel_l2(&self, other: &GradientSet) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, a) in self.iter() {
            let b = other
                .get(name)
                .ok_or_else(|| Error::Usage(format!("gradient sets disagree on key {name}")))?;
            let denom = a.l2().max(b.l2()).max(1e-12);
            worst = worst.max(a.sub(b)?.l2() / denom);
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Ep,
    EpExplicit,
    Id,
}

#[derive(Debug, Clone, Copy)]
pub struct EngineSettings {
    pub beta: f32,
    pub t_free: usize,
    pub t_nudge: usize,
    pub engine: EngineKind,
}

impl EngineSettings {
    pub fn from_model(model: &Model, engine: EngineKind) -> Self {
        EngineSettings {
            beta: model.config.beta,
            t_free: model.config.t_free,
            t_nudge: model.config.t_nudge,
            engine,
        }
    }
}

fn tag_divergence(e: Error, block: usize, sign: f32) -> Error {
    match e {
        Error::Divergence { step, .. } => Error::Divergence {
            context: format!(
                "block {block} nudged relaxation (beta {})",
                if sign >= 0.0 { "+" } else { "-" }
            ),
            step,
        },
        other => other,
    }
}

fn check_record(model: &Model, record: &InferenceRecord, y: &[usize]) -> Result<usize> {
    if record.states.len() != model.blocks.len() {
        return Err(Error::Usage(format!(
            "record has {} blocks, model has {}",
            record.states.len(),
            model.blocks.len()
        )));
    }
    let batch = record.input.shape()[0];
    if y.len() != batch {
        return Err(Error::Data(format!(
            "{} labels for a batch of {batch}",
            y.len()
        )));
    }
    Ok(batch)
}

enum ChainMode {
    Implicit,
    Explicit,
}

fn insert_ff_grads(grads: &mut GradientSet, k: usize, g: FfParamGrads) {
    grads.insert(format!("block{k}.ff.weight"), g.weight);
    if let Some(s) = g.bn_scale {
        grads.insert(format!("block{k}.ff.bn_scale"), s);
    }
    if let Some(s) = g.bn_shift {
        grads.insert(format!("block{k}.ff.bn_shift"), s);
    }
}

/// Centered parameter gradients of block k and the error signal for block
/// k-1, from the two nudged states.
fn block_tail(
    model: &Model,
    record: &InferenceRecord,
    grads: &mut GradientSet,
    k: usize,
    s_plus: &BlockState,
    s_minus: &BlockState,
    beta: f32,
    mode: &ChainMode,
) -> Result<Option<NudgeSignal>> {
    let (ff, eb) = &model.blocks[k];
    let inv2b = 1.0 / (2.0 * beta);
    let (tp, bp) = energy_grad_params(eb, s_plus)?;
    let (tm, bm) = energy_grad_params(eb, s_minus)?;
    for (l, (p, m)) in tp.iter().zip(&tm).enumerate() {
        grads.insert(format!("block{k}.eb.theta{l}"), p.sub(m)?.scale(inv2b));
    }
    for (l, (p, m)) in bp.iter().zip(&bm).enumerate() {
        if let (Some(p), Some(m)) = (p, m) {
            grads.insert(format!("block{k}.eb.bias{l}"), p.sub(m)?.scale(inv2b));
        }
    }
    let cache = &record.caches[k];
    let carry = match mode {
        ChainMode::Implicit => {
            // Centered differences of grad_4 / grad_3 of the augmented
            // energy. The F^k Jacobians are evaluated at the free
            // equilibrium in both phases, so the VJPs are linear in the
            // upstream and the phase difference is taken first; the f32
            // subtraction of the two nearby energy gradients is exact.
            let dup = energy_grad_input(s_plus)
                .sub(&energy_grad_input(s_minus))?
                .scale(inv2b);
            insert_ff_grads(grads, k, ff_param_vjp(ff, cache, &dup)?);
            if k > 0 {
                Some(ff_input_vjp(ff, cache, &dup)?)
            } else {
                None
            }
        }
        ChainMode::Explicit => {
            // Delta x = -(s_+ - s_-)_1 / (2 beta), then explicit VJPs
            // through F^k.
            let dx = s_minus.layers[0].sub(&s_plus.layers[0])?.scale(inv2b);
            insert_ff_grads(grads, k, ff_param_vjp(ff, cache, &dx)?);
            if k > 0 {
                Some(ff_input_vjp(ff, cache, &dx)?)
            } else {
                None
            }
        }
    };
    match carry {
        Some(c) => {
            let prev_eb = &model.blocks[k - 1].1;
            Ok(Some(NudgeSignal::on_last_layer(
                prev_eb,
                c.shape()[0],
                c,
            )?))
        }
        None => Ok(None),
    }
}

fn ep_chain(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
    mode: ChainMode,
) -> Result<(GradientSet, Vec<NudgeSignal>)> {
    if !(settings.beta > 0.0) {
        return Err(Error::Usage("EP engines need beta > 0".into()));
    }
    if settings.t_nudge == 0 {
        return Err(Error::Usage("EP engines need t_nudge >= 1".into()));
    }
    let batch = check_record(model, record, y)?;
    let beta = settings.beta;
    let act = model.config.activation;
    let sched = model.config.schedule;
    let n = model.blocks.len();
    let relax_settings = RelaxationSettings::nudged(settings.t_nudge, sched, beta);
    let mut grads = GradientSet::new();
    let mut signals: Vec<NudgeSignal> = Vec::with_capacity(n);

    // Last block: elastic nudging, readout gradient averaged over phases.
    let k = n - 1;
    let eb_last = &model.blocks[k].1;
    let warm = &record.states[k];
    let x_star = &record.x_stars[k];
    let (rp, rm) = threads::join(
        || relax_last_block(eb_last, x_star, act, &relax_settings, &model.readout, y, beta, Some(warm)),
        || {
            relax_last_block(
                eb_last,
                x_star,
                act,
                &relax_settings,
                &model.readout,
                y,
                -beta,
                Some(warm),
            )
        },
    );
    let s_plus = rp.map_err(|e| tag_divergence(e, k, beta))?;
    let s_minus = rm.map_err(|e| tag_divergence(e, k, -beta))?;
    let (_, _, gw_p) = readout_loss(&model.readout, s_plus.last(), y)?;
    let (_, _, gw_m) = readout_loss(&model.readout, s_minus.last(), y)?;
    grads.insert("readout.weight", gw_p.add(&gw_m)?.scale(0.5));
    // the seed entering the last block: the equilibrium loss gradient
    let (_, seed, _) = readout_loss(&model.readout, record.states[k].last(), y)?;
    signals.push(NudgeSignal::on_last_layer(eb_last, batch, seed)?);
    let mut carry = block_tail(model, record, &mut grads, k, &s_plus, &s_minus, beta, &mode)?;

    // Earlier blocks: stationary nudging with the carried error signal.
    for k in (0..n - 1).rev() {
        let signal = carry.take().expect("carry exists for every earlier block");
        let eb = &model.blocks[k].1;
        let warm = &record.states[k];
        let x_star = &record.x_stars[k];
        let (rp, rm) = threads::join(
            || relax(eb, x_star, act, &relax_settings, Some(&signal), Some(warm)),
            || {
                let mut down = relax_settings;
                down.beta = -beta;
                relax(eb, x_star, act, &down, Some(&signal), Some(warm))
            },
        );
        let s_plus = rp.map_err(|e| tag_divergence(e, k, beta))?;
        let s_minus = rm.map_err(|e| tag_divergence(e, k, -beta))?;
        carry = block_tail(model, record, &mut grads, k, &s_plus, &s_minus, beta, &mode)?;
        signals.push(signal);
    }
    signals.reverse();
    if !grads.all_finite() {
        return Err(Error::Divergence {
            context: "EP gradient assembly".into(),
            step: 0,
        });
    }
    Ok((grads, signals))
}

/// Implicit BP-EP chaining: per block, two nudged relaxations at +/- beta;
/// parameter gradients and the next error signal are centered differences
/// of the augmented-energy gradients.
pub fn ep_gradients_implicit(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
) -> Result<(GradientSet, Vec<NudgeSignal>)> {
    ep_chain(model, record, y, settings, ChainMode::Implicit)
}

/// Explicit BP-EP chaining: centered input-error Delta x per block, pushed
/// through the feedforward VJPs.
pub fn ep_gradients_explicit(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
) -> Result<GradientSet> {
    ep_chain(model, record, y, settings, ChainMode::Explicit).map(|(g, _)| g)
}

/// One recorded update phase of the unrolled free dynamics.
struct PhaseShot {
    layers: Vec<usize>,
    state_before: BlockState,
    sigma_prime: Vec<Tensor>,
    pool_idx: Vec<Option<PoolIndices>>,
}

struct BlockUnroll {
    steps: Vec<Vec<PhaseShot>>,
    final_state: BlockState,
}

fn unroll_block(
    eb: &HopfieldBlockParams,
    x: &Tensor,
    model: &Model,
    steps: usize,
    warm: &BlockState,
) -> Result<BlockUnroll> {
    let act = model.config.activation;
    let phases = schedule_phases(model.config.schedule, eb.layers.len());
    let mut cur = warm.clone();
    let mut rec = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut shots = Vec::with_capacity(phases.len());
        for phase in &phases {
            let (zs, pool_idx) = phase_preactivations(eb, &cur, x, phase)?;
            let state_before = cur.clone();
            let mut sigma_prime = Vec::with_capacity(phase.len());
            for (&l, z) in phase.iter().zip(&zs) {
                sigma_prime.push(act.derivative(z));
                cur.layers[l] = act.apply(z);
            }
            shots.push(PhaseShot {
                layers: phase.clone(),
                state_before,
                sigma_prime,
                pool_idx,
            });
        }
        rec.push(shots);
    }
    Ok(BlockUnroll {
        steps: rec,
        final_state: cur,
    })
}

fn unit_sum(t: &Tensor, shape: &LayerShape) -> Tensor {
    let batch = t.shape()[0];
    match shape {
        LayerShape::Fc { units } => {
            let mut out = Tensor::zeros(&[*units]);
            for bi in 0..batch {
                for u in 0..*units {
                    out.data_mut()[u] += t.data()[bi * units + u];
                }
            }
            out
        }
        LayerShape::Conv { channels, height, width } => {
            let sp = height * width;
            let mut out = Tensor::zeros(&[*channels]);
            for bi in 0..batch {
                for ci in 0..*channels {
                    let base = (bi * channels + ci) * sp;
                    out.data_mut()[ci] += t.data()[base..base + sp].iter().sum::<f32>();
                }
            }
            out
        }
    }
}

struct BlockAdjoint {
    drive_grad: Tensor,
    theta_grads: Vec<Tensor>,
    bias_grads: Vec<Option<Tensor>>,
    /// Per-backward-step snapshots of the accumulating gradients, recorded
    /// only when tracing (oldest truncation first).
    trace: Option<Vec<(Tensor, Vec<Tensor>)>>,
}

/// Reverse pass through one block's recorded unroll. The cotangent on the
/// t=0 state is discarded: the unroll starts from a detached equilibrium.
fn backward_block(
    eb: &HopfieldBlockParams,
    unroll: &BlockUnroll,
    x_shape: &[usize],
    mut v: BlockState,
    trace: bool,
) -> Result<BlockAdjoint> {
    let n = eb.layers.len();
    let mut drive_grad = Tensor::zeros(x_shape);
    let mut theta_grads: Vec<Tensor> = eb
        .couplings
        .iter()
        .map(|c| Tensor::zeros(c.weight().shape()))
        .collect();
    let mut bias_grads: Vec<Option<Tensor>> = eb
        .biases
        .iter()
        .map(|b| b.as_ref().map(|t| Tensor::zeros(t.shape())))
        .collect();
    let mut snapshots = trace.then(Vec::new);

    for step in unroll.steps.iter().rev() {
        for shot in step.iter().rev() {
            // u_l = sigma'(z_l) . v_l for every layer updated in this phase
            let us: Vec<Tensor> = shot
                .layers
                .iter()
                .zip(&shot.sigma_prime)
                .map(|(&l, sp)| sp.zip_map(&v.layers[l], |a, b| a * b))
                .collect::<Result<_>>()?;
            for &l in &shot.layers {
                v.layers[l] = Tensor::zeros(v.layers[l].shape());
            }
            for (ul, &l) in us.iter().zip(&shot.layers) {
                if l == 0 {
                    drive_grad.axpy(1.0, ul)?;
                }
                if l > 0 {
                    let c = &eb.couplings[l - 1];
                    let idx = shot.pool_idx[l - 1].as_ref();
                    let w = coupling_weight_grad(c, &shot.state_before.layers[l - 1], ul, idx)?;
                    theta_grads[l - 1].axpy(1.0, &w)?;
                    let down = coupling_down(c, ul, &eb.layers[l - 1], idx)?;
                    v.layers[l - 1].axpy(1.0, &down)?;
                }
                if l + 1 < n {
                    let c = &eb.couplings[l];
                    let idx = shot.pool_idx[l].as_ref();
                    let w =
                        coupling_weight_grad(c, ul, &shot.state_before.layers[l + 1], idx)?;
                    theta_grads[l].axpy(1.0, &w)?;
                    let up = coupling_up_at_indices(c, ul, &eb.layers[l + 1], idx)?;
                    v.layers[l + 1].axpy(1.0, &up)?;
                }
                if let Some(g) = &mut bias_grads[l] {
                    g.axpy(1.0, &unit_sum(ul, &eb.layers[l]))?;
                }
            }
        }
        if let Some(snaps) = &mut snapshots {
            snaps.push((drive_grad.clone(), theta_grads.clone()));
        }
    }
    if !drive_grad.all_finite() || theta_grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::Divergence {
            context: "implicit-differentiation adjoint".into(),
            step: 0,
        });
    }
    Ok(BlockAdjoint {
        drive_grad,
        theta_grads,
        bias_grads,
        trace: snapshots,
    })
}

/// Per-block forward re-execution of the free dynamics from the stored
/// equilibria, tracking every step, plus caches for the tie transformations.
struct IdForward {
    unrolls: Vec<BlockUnroll>,
    caches: Vec<crate::feedforward::ForwardCache>,
    final_last_layer: Tensor,
}

fn id_forward(
    model: &Model,
    record: &InferenceRecord,
    t_nudge: usize,
) -> Result<IdForward> {
    let mut unrolls = Vec::with_capacity(model.blocks.len());
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut prev = record.input.clone();
    for (k, (ff, eb)) in model.blocks.iter().enumerate() {
        let (x, cache) = ff_forward(ff, &prev, record.mode.bn())?;
        let unroll = unroll_block(eb, &x, model, t_nudge, &record.states[k])?;
        prev = unroll.final_state.last().clone();
        unrolls.push(unroll);
        caches.push(cache);
    }
    Ok(IdForward {
        unrolls,
        caches,
        final_last_layer: prev,
    })
}

const ID_RESIDUAL_LIMIT: f32 = 1e-3;

pub(crate) fn check_converged(model: &Model, record: &InferenceRecord) -> Result<()> {
    for (k, (_, eb)) in model.blocks.iter().enumerate() {
        let r = residual(
            eb,
            &record.states[k],
            &record.x_stars[k],
            model.config.activation,
            None,
            0.0,
        )?;
        if r > ID_RESIDUAL_LIMIT {
            return Err(Error::Precondition(format!(
                "block {k} equilibrium residual {r} exceeds {ID_RESIDUAL_LIMIT}"
            )));
        }
    }
    Ok(())
}

/// Per-block truncation series of one implicit-differentiation pass:
/// snapshots of the accumulating drive and coupling gradients after each
/// backward step, plus the tie cache for pushing drive snapshots through
/// the feedforward VJP.
pub(crate) struct IdBlockTrace {
    pub snapshots: Vec<(Tensor, Vec<Tensor>)>,
    pub cache: crate::feedforward::ForwardCache,
}

pub(crate) fn id_pass(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
    trace: bool,
) -> Result<(GradientSet, Vec<IdBlockTrace>)> {
    check_record(model, record, y)?;
    check_converged(model, record)?;
    let fwd = id_forward(model, record, settings.t_nudge)?;
    let mut grads = GradientSet::new();
    let (_, grad_s, grad_w) = readout_loss(&model.readout, &fwd.final_last_layer, y)?;
    grads.insert("readout.weight", grad_w);
    let mut traces: Vec<IdBlockTrace> = Vec::new();
    let mut carry = grad_s;
    for (k, cache) in fwd.caches.iter().enumerate().rev() {
        let (ff, eb) = &model.blocks[k];
        let batch = carry.shape()[0];
        let mut v = BlockState::zeros(eb, batch);
        *v.layers.last_mut().expect("non-empty block") = carry;
        let adj = backward_block(eb, &fwd.unrolls[k], record.x_stars[k].shape(), v, trace)?;
        for (l, t) in adj.theta_grads.iter().enumerate() {
            grads.insert(format!("block{k}.eb.theta{l}"), t.clone());
        }
        for (l, b) in adj.bias_grads.iter().enumerate() {
            if let Some(b) = b {
                grads.insert(format!("block{k}.eb.bias{l}"), b.clone());
            }
        }
        insert_ff_grads(&mut grads, k, ff_param_vjp(ff, cache, &adj.drive_grad)?);
        if trace {
            traces.push(IdBlockTrace {
                snapshots: adj.trace.expect("tracing was requested"),
                cache: cache.clone(),
            });
        }
        carry = if k > 0 {
            ff_input_vjp(ff, cache, &adj.drive_grad)?
        } else {
            break;
        };
    }
    traces.reverse();
    Ok((grads, traces))
}

/// Implicit differentiation (recurrent backprop): re-execute the block-wise
/// free dynamics for t_nudge steps per block starting from the stored
/// equilibria, then backpropagate through the recorded steps and the tie
/// transformations.
pub fn id_gradients(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
) -> Result<GradientSet> {
    id_pass(model, record, y, settings, false).map(|(g, _)| g)
}

/// Central finite differences of the full pipeline loss over the selected
/// trainable parameters (all of them when `subset` is empty).
pub fn finite_difference_gradients(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    eps: f32,
    subset: Option<&[String]>,
) -> Result<GradientSet> {
    let store = model.parameter_store();
    let keys: Vec<String> = match subset {
        Some(list) => {
            for k in list {
                if store.get(k).is_none() {
                    return Err(Error::Usage(format!("unknown parameter path {k}")));
                }
            }
            list.to_vec()
        }
        None => store.trainable_keys().cloned().collect(),
    };
    let mut work = model.clone();
    let mut grads = GradientSet::new();
    for key in keys {
        let len = store.get(&key).expect("validated above").len();
        let mut g = Tensor::zeros(store.get(&key).unwrap().shape());
        for e in 0..len {
            let orig = work.tensor_mut(&key).expect("trainable path").data()[e];
            work.tensor_mut(&key).unwrap().data_mut()[e] = orig + eps;
            let up = pipeline_loss(&work, x, y)?;
            work.tensor_mut(&key).unwrap().data_mut()[e] = orig - eps;
            let down = pipeline_loss(&work, x, y)?;
            work.tensor_mut(&key).unwrap().data_mut()[e] = orig;
            g.data_mut()[e] = ((up as f64 - down as f64) / (2.0 * eps as f64)) as f32;
        }
        grads.insert(key, g);
    }
    Ok(grads)
}

/// Mean batch cross-entropy of the full pipeline in train mode.
pub fn pipeline_loss(model: &Model, x: &Tensor, y: &[usize]) -> Result<f32> {
    let record = forward_inference(model, x, Mode::Train)?;
    let final_state = record.states.last().expect("at least one block").last();
    let (loss, _, _) = readout_loss(&model.readout, final_state, y)?;
    Ok(loss)
}

/// Exact backprop through the feedforward reduction: every energy block must
/// have exactly one layer and no bias, so equilibria are sigma(x) and the
/// chain rule is an ordinary backward pass.
pub fn analytic_backprop(model: &Model, x: &Tensor, y: &[usize]) -> Result<GradientSet> {
    for (k, (_, eb)) in model.blocks.iter().enumerate() {
        if eb.layers.len() != 1 || eb.biases[0].is_some() {
            return Err(Error::Precondition(format!(
                "analytic backprop needs single-layer bias-free blocks; block {k} is not"
            )));
        }
    }
    let act = model.config.activation;
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut derivs = Vec::with_capacity(model.blocks.len());
    let mut cur = x.clone();
    for (ff, _) in &model.blocks {
        let (z, cache) = ff_forward(ff, &cur, Mode::Train.bn())?;
        derivs.push(act.derivative(&z));
        cur = act.apply(&z);
        caches.push(cache);
    }
    let (_, grad_s, grad_w) = readout_loss(&model.readout, &cur, y)?;
    let mut grads = GradientSet::new();
    grads.insert("readout.weight", grad_w);
    let mut delta = grad_s;
    for k in (0..model.blocks.len()).rev() {
        let (ff, _) = &model.blocks[k];
        let dx = derivs[k].zip_map(&delta, |a, b| a * b)?;
        insert_ff_grads(&mut grads, k, ff_param_vjp(ff, &caches[k], &dx)?);
        if k > 0 {
            delta = ff_input_vjp(ff, &caches[k], &dx)?;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::presets::{oracle_toy_config, push_states_interior, seeded_batch, toy_fc_config};

    fn toy(idx: usize, batch: usize) -> (Model, Tensor, Vec<usize>) {
        let cfg = oracle_toy_config(idx);
        let (_, mut model) = build_model(&cfg).unwrap();
        push_states_interior(&mut model, cfg.seed ^ 0x5eed);
        let (x, y) = seeded_batch(
            &cfg.input,
            batch,
            cfg.readout_classes,
            cfg.seed.wrapping_mul(31) + 7,
        );
        (model, x, y)
    }

    fn assert_mostly_interior(record: &InferenceRecord) {
        let mut total = 0usize;
        let mut inside = 0usize;
        for st in &record.states {
            for t in &st.layers {
                for &v in t.data() {
                    total += 1;
                    if (0.05..=0.95).contains(&v) {
                        inside += 1;
                    }
                }
            }
        }
        assert!(
            inside * 5 >= total * 4,
            "only {inside}/{total} states interior"
        );
    }

    #[test]
    fn implicit_and_explicit_chaining_agree() {
        let (model, x, y) = toy(0, 2);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        assert_mostly_interior(&record);
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let (gi, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
        let ge = ep_gradients_explicit(&model, &record, &y, &settings).unwrap();
        let worst = gi.max_rel_l2(&ge).unwrap();
        assert!(worst <= 1e-6, "implicit vs explicit rel L2 {worst}");
        assert_eq!(gi.len(), ge.len());
    }

    #[test]
    fn ep_and_id_match_the_fd_oracle() {
        for idx in 0..3 {
            let (model, x, y) = toy(idx, 2);
            let record = forward_inference(&model, &x, Mode::Train).unwrap();
            let settings = EngineSettings::from_model(&model, EngineKind::Ep);
            let (ep, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
            let id = id_gradients(&model, &record, &y, &settings).unwrap();
            let fd = finite_difference_gradients(&model, &x, &y, 1e-2, None).unwrap();
            let ep_err = ep.max_rel_l2(&fd).unwrap();
            let id_err = id.max_rel_l2(&fd).unwrap();
            assert!(ep_err <= 1e-2, "toy {idx}: EP vs FD rel L2 {ep_err}");
            assert!(id_err <= 1e-2, "toy {idx}: ID vs FD rel L2 {id_err}");
            // key sets all line up with the trainable parameters
            let store = model.parameter_store();
            let want: Vec<&String> = store.trainable_keys().collect();
            assert_eq!(ep.keys().collect::<Vec<_>>(), want);
            assert_eq!(id.keys().collect::<Vec<_>>(), want);
            assert_eq!(fd.keys().collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn fd_self_consistency_across_steps() {
        let (model, x, y) = toy(1, 2);
        let subset = vec!["readout.weight".to_string()];
        let coarse = finite_difference_gradients(&model, &x, &y, 1e-2, Some(&subset)).unwrap();
        let fine = finite_difference_gradients(&model, &x, &y, 1e-3, Some(&subset)).unwrap();
        let diff = coarse.max_rel_l2(&fine).unwrap();
        assert!(diff <= 1e-2, "FD estimates disagree: {diff}");
        assert_eq!(coarse.len(), 1);
    }

    #[test]
    fn fd_readout_matches_closed_form() {
        let (model, x, y) = toy(2, 2);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let (_, _, grad_w) =
            readout_loss(&model.readout, record.states.last().unwrap().last(), &y).unwrap();
        let subset = vec!["readout.weight".to_string()];
        let fd = finite_difference_gradients(&model, &x, &y, 1e-3, Some(&subset)).unwrap();
        let diff = fd.get("readout.weight").unwrap().sub(&grad_w).unwrap().linf();
        assert!(diff <= 1e-4, "readout FD vs closed form {diff}");
    }

    #[test]
    fn feedforward_reduction_recovers_backprop() {
        // single-layer blocks, no biases
        let mut cfg = toy_fc_config(&[&[4], &[3]], 5, 3, 41);
        for b in &mut cfg.blocks {
            b.energy.biases = false;
        }
        cfg.beta = 1e-3;
        let (_, model) = build_model(&cfg).unwrap();
        let (x, y) = seeded_batch(&cfg.input, 2, 3, 99);

        let bp = analytic_backprop(&model, &x, &y).unwrap();
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let (ep, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
        let err = ep.max_rel_l2(&bp).unwrap();
        assert!(err <= 1e-3, "EP vs analytic backprop rel L2 {err}");

        // the estimate degrades as beta grows
        let mut bigger = settings;
        bigger.beta = 0.05;
        let (ep2, _) = ep_gradients_implicit(&model, &record, &y, &bigger).unwrap();
        assert!(ep2.max_rel_l2(&bp).unwrap() > err);

        // ID through constant trajectories is backprop exactly
        let id = id_gradients(&model, &record, &y, &settings).unwrap();
        assert!(id.max_rel_l2(&bp).unwrap() <= 1e-7, "ID vs backprop not exact");

        // FD agrees with the analytic result too
        let fd = finite_difference_gradients(&model, &x, &y, 1e-3, None).unwrap();
        assert!(bp.max_rel_l2(&fd).unwrap() <= 1e-2);
    }

    #[test]
    fn analytic_backprop_rejects_multilayer_blocks() {
        let (model, x, y) = toy(0, 2);
        assert!(matches!(
            analytic_backprop(&model, &x, &y),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn centered_estimate_is_second_order() {
        // single block with a sharpened readout: the beta^2 term dominates
        // the finite-difference noise floor
        let mut cfg = toy_fc_config(&[&[5, 4]], 4, 3, 77);
        cfg.goe_variance = 0.9;
        let (_, mut model) = build_model(&cfg).unwrap();
        push_states_interior(&mut model, 123);
        model.readout.weight = model.readout.weight.scale(4.0);
        let (x, _) = seeded_batch(&cfg.input, 2, 3, 5);
        let y = vec![1usize, 2];
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let fd = finite_difference_gradients(&model, &x, &y, 1e-2, None).unwrap();
        let mut settings = EngineSettings::from_model(&model, EngineKind::Ep);
        settings.t_nudge = 300;
        let err_at = |beta: f32| {
            let mut s = settings;
            s.beta = beta;
            let (g, _) = ep_gradients_implicit(&model, &record, &y, &s).unwrap();
            g.max_rel_l2(&fd).unwrap()
        };
        let coarse = err_at(0.02);
        let fine = err_at(0.01);
        assert!(
            coarse >= 3.0 * fine,
            "halving beta should cut the error ~4x: {coarse} -> {fine}"
        );
    }

    #[test]
    fn seed_equals_readout_gradient_exactly() {
        let (model, x, y) = toy(1, 2);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let (_, signals) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
        let (_, grad_s, _) =
            readout_loss(&model.readout, record.states.last().unwrap().last(), &y).unwrap();
        let last = signals.last().unwrap();
        assert_eq!(last.per_layer.last().unwrap(), &grad_s);
        // earlier layers of the last block carry no direct seed
        for t in &last.per_layer[..last.per_layer.len() - 1] {
            assert_eq!(t.linf(), 0.0);
        }
    }

    #[test]
    fn saturated_prediction_gives_near_zero_gradients() {
        let (mut model, x, _) = toy(0, 2);
        // blow up the readout so the softmax saturates on the argmax class
        model.readout.weight = model.readout.weight.scale(400.0);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let c = model.config.readout_classes;
        let y: Vec<usize> = (0..2)
            .map(|bi| {
                let row = &record.logits.data()[bi * c..(bi + 1) * c];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let ge = ep_gradients_explicit(&model, &record, &y, &settings).unwrap();
        for (name, g) in ge.iter() {
            assert!(g.linf() <= 1e-6, "{name} gradient {} not near zero", g.linf());
        }
    }

    #[test]
    fn id_requires_converged_record() {
        let (mut model, x, y) = toy(0, 2);
        model.config.t_free = 1;
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let settings = EngineSettings::from_model(&model, EngineKind::Id);
        assert!(matches!(
            id_gradients(&model, &record, &y, &settings),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ep_engines_reject_nonpositive_beta() {
        let (model, x, y) = toy(1, 2);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let mut settings = EngineSettings::from_model(&model, EngineKind::Ep);
        settings.beta = 0.0;
        assert!(matches!(
            ep_gradients_implicit(&model, &record, &y, &settings),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn engines_are_schedule_consistent() {
        // synchronous and asynchronous schedules give the same converged
        // gradients (both reach the same equilibria)
        let (mut model, x, y) = toy(2, 2);
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);

        model.config.schedule = crate::solver::Schedule::Synchronous;
        let rec_s = forward_inference(&model, &x, Mode::Train).unwrap();
        let (ep_s, _) = ep_gradients_implicit(&model, &rec_s, &y, &settings).unwrap();

        model.config.schedule = crate::solver::Schedule::Asynchronous;
        let rec_a = forward_inference(&model, &x, Mode::Train).unwrap();
        let (ep_a, _) = ep_gradients_implicit(&model, &rec_a, &y, &settings).unwrap();

        let diff = ep_s.max_rel_l2(&ep_a).unwrap();
        assert!(diff <= 1e-3, "schedule changed converged gradients by {diff}");
    }
}
