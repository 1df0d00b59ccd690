//! Model assembly: configuration, GOE initialization, block-wise inference,
//! the flat named parameter store, and checkpoint persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::energy::{Activation, BlockState, Coupling, HopfieldBlockParams, LayerShape};
use crate::error::{Error, Result};
use crate::feedforward::{
    ff_forward, readout_logits, BatchNormParams, FeedforwardBlockParams, FfOp, ForwardCache,
    ReadoutParams,
};
use crate::solver::{relax, RelaxationSettings, Schedule};
use crate::tensor::{BnMode, Tensor};

/// Spec of one tie transformation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedforwardBlockSpec {
    Linear {
        out: usize,
        #[serde(default)]
        batchnorm: bool,
    },
    Conv {
        out_channels: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default = "default_pad")]
        pad: usize,
        #[serde(default)]
        pool: bool,
        #[serde(default)]
        batchnorm: bool,
    },
}

fn default_stride() -> usize {
    1
}
fn default_pad() -> usize {
    1
}

/// Spec of one energy-block layer. The first layer must match the output of
/// the preceding feedforward block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnergyLayerSpec {
    /// Reached through a dense coupling (any previous layer shape).
    Fc { units: usize },
    /// Reached through a 3x3 conv coupling; `pool` halves the spatial size.
    Conv {
        channels: usize,
        #[serde(default)]
        pool: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyBlockSpec {
    pub layers: Vec<EnergyLayerSpec>,
    #[serde(default)]
    pub biases: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockPairSpec {
    pub feedforward: FeedforwardBlockSpec,
    pub energy: EnergyBlockSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: LayerShape,
    pub blocks: Vec<BlockPairSpec>,
    pub readout_classes: usize,
    pub activation: Activation,
    pub schedule: Schedule,
    pub t_free: usize,
    pub t_nudge: usize,
    pub beta: f32,
    /// GOE variance scale V; per-tensor variance is V / fan-in.
    pub goe_variance: f32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.readout_classes < 2 {
            return Err(Error::Config("readout needs at least two classes".into()));
        }
        if self.t_free == 0 || self.t_nudge == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.goe_variance > 0.0) {
            return Err(Error::Config("beta must be finite and GOE variance positive".into()));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            if b.energy.layers.is_empty() {
                return Err(Error::Config(format!("block {k}: energy block has no layers")));
            }
        }
        Ok(())
    }
}

/// GOE-style init: entries from N(0, V/fan_in); square matrices get their
/// diagonal redrawn from N(0, 2 V/fan_in).
pub fn init_goe(shape: &[usize], variance: f32, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let var = variance as f64 / fan_in.max(1) as f64;
    let normal = Normal::new(0.0, var.sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let mut t = Tensor::from_vec(shape, (0..n).map(|_| normal.sample(rng) as f32).collect())
        .expect("shape/data agree");
    if let [a, b] = shape {
        if a == b {
            let diag = Normal::new(0.0, (2.0 * var).sqrt()).expect("valid std");
            for i in 0..*a {
                t.data_mut()[i * b + i] = diag.sample(rng) as f32;
            }
        }
    }
    t
}

/// Flat named view of every model tensor. Trainable parameters and
/// non-trainable buffers (batchnorm running statistics) share the map;
/// buffers are excluded from the trainable key set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    trainable: BTreeSet<String>,
}

fn is_buffer(name: &str) -> bool {
    name.contains(".bn_running_")
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            tensors: BTreeMap::new(),
            trainable: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if !is_buffer(&name) {
            self.trainable.insert(name.clone());
        }
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn trainable_keys(&self) -> impl Iterator<Item = &String> {
        self.trainable.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

/// A ff-EBM: alternating tie transformations and energy blocks, plus the
/// softmax readout, with solver defaults from the config.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<(FeedforwardBlockParams, HopfieldBlockParams)>,
    pub readout: ReadoutParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

/// Everything the forward pass computed: per-block feedforward outputs and
/// caches, block equilibria, and the logits.
#[derive(Debug, Clone)]
pub struct InferenceRecord {
    pub input: Tensor,
    pub x_stars: Vec<Tensor>,
    pub caches: Vec<ForwardCache>,
    pub states: Vec<BlockState>,
    pub logits: Tensor,
    pub mode: Mode,
}

/// Builds all parameters for a config: GOE weights, zero biases, unit
/// batchnorm. Fails with a config error naming the offending block when the
/// shape chain does not close.
pub fn build_model(config: &ModelConfig) -> Result<(ParameterStore, Model)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let v = config.goe_variance;
    let mut blocks = Vec::with_capacity(config.blocks.len());
    let mut cur = config.input;

    for (k, spec) in config.blocks.iter().enumerate() {
        // tie transformation
        let ff = match &spec.feedforward {
            FeedforwardBlockSpec::Linear { out, batchnorm } => {
                let fan_in = cur.size();
                let weight = init_goe(&[*out, fan_in], v, fan_in, &mut rng);
                FeedforwardBlockParams {
                    op: FfOp::Linear { weight },
                    batchnorm: batchnorm.then(|| BatchNormParams::new(*out)),
                }
            }
            FeedforwardBlockSpec::Conv { out_channels, stride, pad, pool, batchnorm } => {
                let LayerShape::Conv { channels, .. } = cur else {
                    return Err(Error::Config(format!(
                        "block {k}: conv feedforward block on non-conv input {cur:?}"
                    )));
                };
                let fan_in = channels * 9;
                let weight = init_goe(&[*out_channels, channels, 3, 3], v, fan_in, &mut rng);
                FeedforwardBlockParams {
                    op: FfOp::Conv { weight, stride: *stride, pad: *pad, pool: *pool },
                    batchnorm: batchnorm.then(|| BatchNormParams::new(*out_channels)),
                }
            }
        };
        let ff_out = ff
            .output_shape(&cur)
            .map_err(|e| Error::Config(format!("block {k}: {e}")))?;

        // energy block layer shapes
        let mut layers = Vec::with_capacity(spec.energy.layers.len());
        for (l, ls) in spec.energy.layers.iter().enumerate() {
            let shape = if l == 0 {
                let want = match ls {
                    EnergyLayerSpec::Fc { units } => LayerShape::Fc { units: *units },
                    EnergyLayerSpec::Conv { channels, .. } => {
                        let LayerShape::Conv { height, width, .. } = ff_out else {
                            return Err(Error::Config(format!(
                                "block {k}: conv energy layer after non-conv feedforward output"
                            )));
                        };
                        LayerShape::Conv { channels: *channels, height, width }
                    }
                };
                if want != ff_out {
                    return Err(Error::Config(format!(
                        "block {k}: feedforward output {ff_out:?} does not match first energy layer {want:?}"
                    )));
                }
                want
            } else {
                match ls {
                    EnergyLayerSpec::Fc { units } => LayerShape::Fc { units: *units },
                    EnergyLayerSpec::Conv { channels, pool } => {
                        let LayerShape::Conv { height, width, .. } = layers[l - 1] else {
                            return Err(Error::Config(format!(
                                "block {k} layer {l}: conv energy layer after FC layer"
                            )));
                        };
                        let (h, w) = if *pool {
                            if height % 2 != 0 || width % 2 != 0 {
                                return Err(Error::Config(format!(
                                    "block {k} layer {l}: pooling needs even dims, got {height}x{width}"
                                )));
                            }
                            (height / 2, width / 2)
                        } else {
                            (height, width)
                        };
                        LayerShape::Conv { channels: *channels, height: h, width: w }
                    }
                }
            };
            layers.push(shape);
        }

        // couplings between consecutive energy layers
        let mut couplings = Vec::with_capacity(layers.len().saturating_sub(1));
        for l in 0..layers.len().saturating_sub(1) {
            let c = match (&layers[l], &spec.energy.layers[l + 1]) {
                (_, EnergyLayerSpec::Fc { units }) => {
                    let fan_in = layers[l].size();
                    Coupling::Dense(init_goe(&[*units, fan_in], v, fan_in, &mut rng))
                }
                (LayerShape::Conv { channels, .. }, EnergyLayerSpec::Conv { channels: out, pool }) => {
                    let fan_in = channels * 9;
                    Coupling::Conv {
                        weight: init_goe(&[*out, *channels, 3, 3], v, fan_in, &mut rng),
                        pool: *pool,
                    }
                }
                (LayerShape::Fc { .. }, EnergyLayerSpec::Conv { .. }) => {
                    return Err(Error::Config(format!(
                        "block {k} layer {}: conv energy layer after FC layer",
                        l + 1
                    )))
                }
            };
            couplings.push(c);
        }

        let biases = layers
            .iter()
            .map(|ls| spec.energy.biases.then(|| Tensor::zeros(&ls.bias_shape())))
            .collect();

        let eb = HopfieldBlockParams { layers, couplings, biases };
        eb.validate()
            .map_err(|e| Error::Config(format!("block {k}: {e}")))?;
        cur = *eb.layers.last().expect("non-empty block");
        blocks.push((ff, eb));
    }

    let dim = cur.size();
    let readout = ReadoutParams {
        weight: init_goe(&[config.readout_classes, dim], v, dim, &mut rng),
    };
    let model = Model {
        config: config.clone(),
        blocks,
        readout,
    };
    Ok((model.parameter_store(), model))
}

impl Model {
    pub fn batch_input_shape(&self, batch: usize) -> Vec<usize> {
        self.config.input.batched(batch)
    }

    /// Clones every tensor into a flat named store.
    pub fn parameter_store(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (k, (ff, eb)) in self.blocks.iter().enumerate() {
            match &ff.op {
                FfOp::Linear { weight } | FfOp::Conv { weight, .. } => {
                    store.insert(format!("block{k}.ff.weight"), weight.clone());
                }
            }
            if let Some(bn) = &ff.batchnorm {
                store.insert(format!("block{k}.ff.bn_scale"), bn.scale.clone());
                store.insert(format!("block{k}.ff.bn_shift"), bn.shift.clone());
                store.insert(format!("block{k}.ff.bn_running_mean"), bn.running.mean.clone());
                store.insert(format!("block{k}.ff.bn_running_var"), bn.running.var.clone());
            }
            for (l, c) in eb.couplings.iter().enumerate() {
                store.insert(format!("block{k}.eb.theta{l}"), c.weight().clone());
            }
            for (l, b) in eb.biases.iter().enumerate() {
                if let Some(b) = b {
                    store.insert(format!("block{k}.eb.bias{l}"), b.clone());
                }
            }
        }
        store.insert("readout.weight", self.readout.weight.clone());
        store
    }

    /// Folds one train-mode forward's batch statistics into the batchnorm
    /// running buffers. The training loop is the single writer; inference
    /// itself never mutates the model.
    pub fn absorb_bn_stats(&mut self, record: &InferenceRecord) {
        for ((ff, _), cache) in self.blocks.iter_mut().zip(&record.caches) {
            if let (Some(bn), Some(bnc)) = (&mut ff.batchnorm, cache.bn_cache.as_ref()) {
                crate::tensor::batchnorm_update_running(&mut bn.running, bnc, bn.momentum);
            }
        }
    }

    /// Mutable access to one tensor by its parameter path.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == "readout.weight" {
            return Some(&mut self.readout.weight);
        }
        let rest = name.strip_prefix("block")?;
        let dot = rest.find('.')?;
        let k: usize = rest[..dot].parse().ok()?;
        let (ff, eb) = self.blocks.get_mut(k)?;
        match &rest[dot + 1..] {
            "ff.weight" => match &mut ff.op {
                FfOp::Linear { weight } | FfOp::Conv { weight, .. } => Some(weight),
            },
            "ff.bn_scale" => ff.batchnorm.as_mut().map(|bn| &mut bn.scale),
            "ff.bn_shift" => ff.batchnorm.as_mut().map(|bn| &mut bn.shift),
            "ff.bn_running_mean" => ff.batchnorm.as_mut().map(|bn| &mut bn.running.mean),
            "ff.bn_running_var" => ff.batchnorm.as_mut().map(|bn| &mut bn.running.var),
            sub => {
                if let Some(l) = sub.strip_prefix("eb.theta") {
                    let l: usize = l.parse().ok()?;
                    eb.couplings.get_mut(l).map(|c| c.weight_mut())
                } else if let Some(l) = sub.strip_prefix("eb.bias") {
                    let l: usize = l.parse().ok()?;
                    eb.biases.get_mut(l)?.as_mut()
                } else {
                    None
                }
            }
        }
    }

    /// Writes a store produced by [`Model::parameter_store`] (or a loaded
    /// checkpoint) back into the model. Key sets and shapes must match.
    pub fn load_parameter_store(&mut self, store: &ParameterStore) -> Result<()> {
        let own = self.parameter_store();
        if own.len() != store.len() {
            return Err(Error::Usage(format!(
                "store has {} tensors, model expects {}",
                store.len(),
                own.len()
            )));
        }
        for (name, t) in own.tensors() {
            let new = store
                .get(name)
                .ok_or_else(|| Error::Usage(format!("store is missing tensor {name}")))?;
            if new.shape() != t.shape() {
                return Err(Error::Usage(format!(
                    "tensor {name}: store shape {:?}, model shape {:?}",
                    new.shape(),
                    t.shape()
                )));
            }
        }
        for (k, (ff, eb)) in self.blocks.iter_mut().enumerate() {
            match &mut ff.op {
                FfOp::Linear { weight } | FfOp::Conv { weight, .. } => {
                    *weight = store.get(&format!("block{k}.ff.weight")).unwrap().clone();
                }
            }
            if let Some(bn) = &mut ff.batchnorm {
                bn.scale = store.get(&format!("block{k}.ff.bn_scale")).unwrap().clone();
                bn.shift = store.get(&format!("block{k}.ff.bn_shift")).unwrap().clone();
                bn.running.mean = store
                    .get(&format!("block{k}.ff.bn_running_mean"))
                    .unwrap()
                    .clone();
                bn.running.var = store
                    .get(&format!("block{k}.ff.bn_running_var"))
                    .unwrap()
                    .clone();
            }
            for (l, c) in eb.couplings.iter_mut().enumerate() {
                *c.weight_mut() = store.get(&format!("block{k}.eb.theta{l}")).unwrap().clone();
            }
            for (l, b) in eb.biases.iter_mut().enumerate() {
                if let Some(b) = b {
                    *b = store.get(&format!("block{k}.eb.bias{l}")).unwrap().clone();
                }
            }
        }
        self.readout.weight = store.get("readout.weight").unwrap().clone();
        Ok(())
    }
}

/// Full ff-EBM inference: alternate tie transformations and free-phase
/// relaxations, then read out the logits. Pure; batchnorm running buffers
/// are not touched (train mode normalizes with batch statistics).
pub fn forward_inference(model: &Model, x_batch: &Tensor, mode: Mode) -> Result<InferenceRecord> {
    let batch = x_batch.shape()[0];
    if x_batch.shape() != model.config.input.batched(batch).as_slice() {
        return Err(Error::Shape(format!(
            "input {:?}, model expects {:?}",
            x_batch.shape(),
            model.config.input.batched(batch)
        )));
    }
    let settings = RelaxationSettings::free(model.config.t_free, model.config.schedule);
    let mut x_stars = Vec::with_capacity(model.blocks.len());
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut states: Vec<BlockState> = Vec::with_capacity(model.blocks.len());
    let mut prev = x_batch.clone();
    for (k, (ff, eb)) in model.blocks.iter().enumerate() {
        let (x_star, cache) = ff_forward(ff, &prev, mode.bn())?;
        let state = relax(eb, &x_star, model.config.activation, &settings, None, None).map_err(
            |e| match e {
                Error::Divergence { step, .. } => Error::Divergence {
                    context: format!("block {k} free relaxation"),
                    step,
                },
                other => other,
            },
        )?;
        prev = state.last().clone();
        x_stars.push(x_star);
        caches.push(cache);
        states.push(state);
    }
    let logits = readout_logits(&model.readout, &prev)?;
    Ok(InferenceRecord {
        input: x_batch.clone(),
        x_stars,
        caches,
        states,
        logits,
        mode,
    })
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"FFEBM\0";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// Writes the store as: magic "FFEBM\0", u16 LE version, u32 LE header
/// length, UTF-8 JSON header (name/shape/dtype/offset per tensor), then raw
/// little-endian f32 payloads in header order. Offsets are relative to the
/// start of the payload section.
pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.tensors() {
        entries.push(HeaderEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    let header = serde_json::to_vec(&entries)?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint: bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported version {version}"
        )));
    }
    let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Format("checkpoint: truncated header".into()));
    }
    let entries: Vec<HeaderEntry> = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    let mut store = ParameterStore::new();
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Format(format!(
                "checkpoint tensor {}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "checkpoint tensor {}: truncated payload",
                e.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name, Tensor::from_vec(&e.shape, data)?);
    }
    Ok(store)
}
