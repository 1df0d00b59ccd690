//! Training harness: Adam with decoupled weight decay, cosine learning-rate
//! annealing, the epoch loop over the EP/ID engines, top-1/top-5
//! evaluation, and the block-splitting benchmark.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::engines::{
    ep_gradients_explicit, ep_gradients_implicit, id_gradients, EngineKind, EngineSettings,
    GradientSet,
};
use crate::error::{Error, Result};
use crate::feedforward::readout_loss;
use crate::model::{
    build_model, forward_inference, save_checkpoint, Mode, Model, ModelConfig, ParameterStore,
};
use crate::presets::mnist_split_config;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-4,
        }
    }
}

/// Per-parameter first/second moments and the step counter. Moments are
/// kept in f64: tiny squared gradients lose too much to f32 rounding over
/// long runs.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Decoupled weight decay multiplies
/// the parameter by (1 - lr * wd) before the moment update.
pub fn adam_step(
    store: &mut ParameterStore,
    grads: &GradientSet,
    state: &mut OptimizerState,
    lr: f32,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let bc1 = 1.0 - (h.beta1 as f64).powf(t);
    let bc2 = 1.0 - (h.beta2 as f64).powf(t);
    for (name, g) in grads.iter() {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no parameter named {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Usage(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let (b1, b2) = (h.beta1 as f64, h.beta2 as f64);
        for i in 0..p.len() {
            let gi = g.data()[i] as f64;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut pi = p.data()[i] as f64;
            pi *= 1.0 - lr as f64 * h.weight_decay as f64;
            pi -= lr as f64 * m_hat / (v_hat.sqrt() + h.eps as f64);
            p.data_mut()[i] = pi as f32;
        }
    }
    Ok(())
}

/// Cosine annealing without restarts; steps past the horizon stay at the
/// floor.
pub fn cosine_lr(step: usize, total: usize, lr0: f32, lr_min: f32) -> f32 {
    if step >= total || total == 0 {
        return lr_min;
    }
    let frac = step as f64 / total as f64;
    (lr_min as f64 + 0.5 * (lr0 as f64 - lr_min as f64) * (1.0 + (std::f64::consts::PI * frac).cos()))
        as f32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub engine: EngineKind,
    pub lr_initial: f32,
    pub lr_final: f32,
    #[serde(default)]
    pub adam: AdamHyper,
    pub seed: u64,
    /// Save a checkpoint every n epochs into `out_dir`.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be >= 2 (batch statistics)".into(),
            ));
        }
        Ok(())
    }
}

/// One metrics-log record, serialized as one JSON line per epoch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_top1: f64,
    pub val_top5: f64,
    pub seconds: f64,
}

pub fn metrics_to_jsonl(metrics: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

fn engine_gradients(
    model: &Model,
    record: &crate::model::InferenceRecord,
    y: &[usize],
    settings: &EngineSettings,
) -> Result<GradientSet> {
    match settings.engine {
        EngineKind::Ep => ep_gradients_implicit(model, record, y, settings).map(|(g, _)| g),
        EngineKind::EpExplicit => ep_gradients_explicit(model, record, y, settings),
        EngineKind::Id => id_gradients(model, record, y, settings),
    }
}

/// Top-1 / top-5 accuracy under eval-mode inference. Ties rank by the
/// lowest class index.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let n = data.len();
    let mut at = 0usize;
    while at < n {
        let take = batch_size.min(n - at);
        let indices: Vec<usize> = (at..at + take).collect();
        let (batch, labels) = data.batch(&indices)?;
        let batch = batch.reshape(&model.batch_input_shape(take))?;
        let record = forward_inference(model, &batch, Mode::Eval)?;
        let classes = model.config.readout_classes;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &record.logits.data()[bi * classes..(bi + 1) * classes];
            let mine = row[label];
            // classes strictly better, plus earlier-indexed ties
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > mine || (v == mine && j < label))
                .count();
            if rank == 0 {
                top1 += 1;
            }
            if rank < 5 {
                top5 += 1;
            }
        }
        at += take;
    }
    Ok((top1 as f64 / n as f64, top5 as f64 / n as f64))
}

/// Per-epoch training loop: shuffle, augment, forward, engine gradients,
/// Adam; evaluates after every epoch and checkpoints at the configured
/// cadence. On divergence the last completed epoch's checkpoint is kept and
/// the error is returned.
pub fn train(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    run: &TrainRunConfig,
    augment_spec: &crate::data::AugmentSpec,
) -> Result<Vec<EpochMetrics>> {
    let start = Instant::now();
    train_with_clock(model, train_data, val_data, run, augment_spec, &mut || {
        start.elapsed().as_secs_f64()
    })
}

/// [`train`] with an injectable clock, so reproducibility tests can pin the
/// seconds field.
pub fn train_with_clock(
    model: &mut Model,
    train_data: &Dataset,
    val_data: &Dataset,
    run: &TrainRunConfig,
    augment_spec: &crate::data::AugmentSpec,
    clock: &mut dyn FnMut() -> f64,
) -> Result<Vec<EpochMetrics>> {
    run.validate()?;
    if train_data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let settings = EngineSettings::from_model(model, run.engine);
    let mut opt = OptimizerState::new(run.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut metrics = Vec::with_capacity(run.epochs);
    let mut last_good: Option<ParameterStore> = None;

    for epoch in 0..run.epochs {
        let lr = cosine_lr(epoch, run.epochs, run.lr_initial, run.lr_final);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in order.chunks(run.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (raw, y) = train_data.batch(chunk)?;
            let raw = augment(&raw, augment_spec, &mut rng)?;
            let batch = raw.reshape(&model.batch_input_shape(chunk.len()))?;
            let outcome = (|| -> Result<f32> {
                let record = forward_inference(model, &batch, Mode::Train)?;
                let (loss, _, _) =
                    readout_loss(&model.readout, record.states.last().unwrap().last(), &y)?;
                let grads = engine_gradients(model, &record, &y, &settings)?;
                let mut store = model.parameter_store();
                adam_step(&mut store, &grads, &mut opt, lr)?;
                model.load_parameter_store(&store)?;
                model.absorb_bn_stats(&record);
                Ok(loss)
            })();
            match outcome {
                Ok(loss) => {
                    loss_sum += loss as f64 * chunk.len() as f64;
                    loss_count += chunk.len();
                }
                Err(e @ Error::Divergence { .. }) => {
                    if let (Some(dir), Some(store)) = (&run.out_dir, &last_good) {
                        save_checkpoint(store, &dir.join("last_good.ffebm"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        let (val_top1, val_top5) = evaluate(model, val_data, run.batch_size.max(64))?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: (loss_sum / loss_count.max(1) as f64) as f32,
            val_top1,
            val_top5,
            seconds: clock(),
        });
        last_good = Some(model.parameter_store());
        if let (Some(dir), Some(every)) = (&run.out_dir, run.checkpoint_every) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(
                    &model.parameter_store(),
                    &dir.join(format!("epoch{:04}.ffebm", epoch + 1)),
                )?;
            }
        }
    }
    if let Some(dir) = &run.out_dir {
        save_checkpoint(&model.parameter_store(), &dir.join("final.ffebm"))?;
        let mut f = std::fs::File::create(dir.join("metrics.jsonl"))?;
        f.write_all(metrics_to_jsonl(&metrics).as_bytes())?;
    }
    Ok(metrics)
}

/// Benchmark spec: the same total layer count partitioned into blocks in
/// several ways, trained per engine and per seed under identical budgets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitBenchConfig {
    pub splits: Vec<Vec<usize>>,
    pub width: usize,
    pub seeds: Vec<u64>,
    pub engines: Vec<EngineKind>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitBenchRow {
    pub split: String,
    pub engine: EngineKind,
    pub seed: u64,
    pub val_top1: f64,
    pub val_top5: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitBenchTable {
    pub rows: Vec<SplitBenchRow>,
}

pub const SPLIT_CSV_HEADER: &str = "split,engine,seed,val_top1,val_top5,wall_seconds";

impl SplitBenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SPLIT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let engine = serde_json::to_value(r.engine)
                .expect("engine name")
                .as_str()
                .expect("engine string")
                .to_string();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.split, engine, r.seed, r.val_top1, r.val_top5, r.wall_seconds
            ));
        }
        out
    }

    /// Mean top-1 per (split, engine), averaged over seeds.
    pub fn mean_top1(&self, split: &str, engine: EngineKind) -> f64 {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.split == split && r.engine == engine)
            .map(|r| r.val_top1)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

pub fn split_label(split: &[usize]) -> String {
    split
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Trains one model per (split, engine, seed) with identical budgets. The
/// template config fixes everything except the block partition; each
/// partition must sum to the template's total layer count.
pub fn split_bench(
    template: &ModelConfig,
    bench: &SplitBenchConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    run: &TrainRunConfig,
    augment_spec: &crate::data::AugmentSpec,
) -> Result<SplitBenchTable> {
    let total: usize = template
        .blocks
        .iter()
        .map(|b| b.energy.layers.len())
        .sum();
    for split in &bench.splits {
        let sum: usize = split.iter().sum();
        if sum != total || split.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!(
                "partition {split:?} does not sum to {total} layers"
            )));
        }
    }
    let mut rows = Vec::new();
    for split in &bench.splits {
        for &engine in &bench.engines {
            for &seed in &bench.seeds {
                let mut cfg = mnist_split_config(split, bench.width, seed);
                cfg.input = template.input;
                cfg.readout_classes = template.readout_classes;
                cfg.activation = template.activation;
                cfg.schedule = template.schedule;
                cfg.t_free = template.t_free;
                cfg.t_nudge = template.t_nudge;
                cfg.beta = template.beta;
                cfg.goe_variance = template.goe_variance;
                let (_, mut model) = build_model(&cfg)?;
                let mut this_run = run.clone();
                this_run.engine = engine;
                this_run.seed = seed;
                this_run.out_dir = None;
                let started = Instant::now();
                let metrics =
                    train(&mut model, train_data, val_data, &this_run, augment_spec)?;
                let last = metrics.last().expect("at least one epoch");
                rows.push(SplitBenchRow {
                    split: split_label(split),
                    engine,
                    seed,
                    val_top1: last.val_top1,
                    val_top5: last.val_top5,
                    wall_seconds: started.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(SplitBenchTable { rows })
}
