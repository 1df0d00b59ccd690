//! Static gradient analysis: truncated transient gradient traces for EP
//! (forward through the nudged phase) and implicit differentiation
//! (backward through equilibrium), per-tensor cosine reports, and CSV/JSON
//! report emission.
//!
//! Traces share one global backward-time axis: blocks are laid out from the
//! last block to the first, t_block steps each, so an entry of block k is
//! flat outside its own segment. Both series start at zero (empty
//! truncation) and their endpoints reproduce the full engine outputs
//! bit-for-bit, because they are computed by the same code paths.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{energy_grad_input, energy_grad_params};
use crate::engines::{check_converged, id_pass, EngineKind, EngineSettings, GradientSet};
use crate::error::{Error, Result};
use crate::feedforward::ff_param_vjp;
use crate::model::{forward_inference, InferenceRecord, Mode, Model};
use crate::solver::{relax, relax_last_block, NudgeSignal, RelaxationSettings, StateInit};
use crate::tensor::Tensor;

/// One scalar parameter entry followed through time. `layer` is the layer
/// the parameter feeds: 0 for the tie weight, l+1 for coupling theta_l.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackedEntry {
    pub block: usize,
    pub layer: usize,
    pub param_path: String,
    pub entry: usize,
}

/// Time-indexed truncated-gradient series for EP and ID.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GduTrace {
    pub entries: Vec<TrackedEntry>,
    /// Per tracked entry: g_ep(t) for t = 0..=n_blocks*t_block.
    pub ep: Vec<Vec<f32>>,
    /// Per tracked entry: g_id(t), same axis.
    pub id: Vec<Vec<f32>>,
    pub t_block: usize,
}

impl GduTrace {
    pub fn series_len(&self) -> usize {
        self.ep.first().map_or(0, |s| s.len())
    }
}

/// Default tracked set: up to five seeded weight entries per tie weight and
/// per coupling tensor.
pub fn default_tracked_entries(model: &Model, seed: u64) -> Vec<TrackedEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut pick = |path: String, block: usize, layer: usize, len: usize| {
        let count = len.min(5);
        let mut chosen: Vec<usize> = Vec::with_capacity(count);
        while chosen.len() < count {
            let e = rng.gen_range(0..len);
            if !chosen.contains(&e) {
                chosen.push(e);
            }
        }
        for entry in chosen {
            out.push(TrackedEntry {
                block,
                layer,
                param_path: path.clone(),
                entry,
            });
        }
    };
    for (k, (ff, eb)) in model.blocks.iter().enumerate() {
        let wlen = match &ff.op {
            crate::feedforward::FfOp::Linear { weight }
            | crate::feedforward::FfOp::Conv { weight, .. } => weight.len(),
        };
        pick(format!("block{k}.ff.weight"), k, 0, wlen);
        for (l, c) in eb.couplings.iter().enumerate() {
            pick(format!("block{k}.eb.theta{l}"), k, l + 1, c.weight().len());
        }
    }
    out
}

fn tensor_index(path: &str) -> Result<(usize, Option<usize>)> {
    let rest = path
        .strip_prefix("block")
        .ok_or_else(|| Error::Usage(format!("cannot trace {path}")))?;
    let dot = rest
        .find('.')
        .ok_or_else(|| Error::Usage(format!("cannot trace {path}")))?;
    let block: usize = rest[..dot]
        .parse()
        .map_err(|_| Error::Usage(format!("cannot trace {path}")))?;
    match &rest[dot + 1..] {
        "ff.weight" => Ok((block, None)),
        sub => {
            let l = sub
                .strip_prefix("eb.theta")
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| Error::Usage(format!("cannot trace {path}")))?;
            Ok((block, Some(l)))
        }
    }
}

/// Truncated transient gradient traces for EP and ID.
///
/// The EP series of block k accumulates centered parameter-gradient
/// estimates at every step of its nudged phase; the ID series accumulates
/// per-step adjoint contributions backward from the last block's final
/// step. Both use t_block fixed-point iterations per block.
pub fn gdu_traces(
    model: &Model,
    x: &Tensor,
    y: &[usize],
    beta: f32,
    t_block: usize,
    tracked: Option<Vec<TrackedEntry>>,
) -> Result<GduTrace> {
    if !(beta > 0.0) {
        return Err(Error::Usage("gdu_traces needs beta > 0".into()));
    }
    let record = forward_inference(model, x, Mode::Train)?;
    check_converged(model, &record)?;
    let entries =
        tracked.unwrap_or_else(|| default_tracked_entries(model, model.config.seed ^ 0x6d0));
    for e in &entries {
        tensor_index(&e.param_path)?;
        if e.block >= model.blocks.len() {
            return Err(Error::Usage(format!(
                "tracked entry block {} out of range",
                e.block
            )));
        }
    }
    let n = model.blocks.len();
    let total = n * t_block;
    let mut ep = vec![vec![0.0f32; total + 1]; entries.len()];
    let mut id = vec![vec![0.0f32; total + 1]; entries.len()];

    ep_transients(model, &record, y, beta, t_block, &entries, &mut ep)?;
    id_transients(model, &record, y, t_block, &entries, &mut id)?;

    Ok(GduTrace {
        entries,
        ep,
        id,
        t_block,
    })
}

/// Writes the value of the tracked entries of block k into every series at
/// global step `t_global`, holding the value through the rest of the axis
/// (later steps are overwritten as the trace advances).
fn fill_from(
    series: &mut [Vec<f32>],
    entries: &[TrackedEntry],
    block: usize,
    t_global: usize,
    theta: &[Tensor],
    ff_weight: &Tensor,
) {
    for (row, e) in series.iter_mut().zip(entries) {
        if e.block != block {
            continue;
        }
        let v = match tensor_index(&e.param_path).expect("validated") {
            (_, None) => ff_weight.data()[e.entry],
            (_, Some(l)) => theta[l].data()[e.entry],
        };
        for slot in row.iter_mut().skip(t_global) {
            *slot = v;
        }
    }
}

fn ep_transients(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    beta: f32,
    t_block: usize,
    entries: &[TrackedEntry],
    series: &mut [Vec<f32>],
) -> Result<()> {
    let act = model.config.activation;
    let sched = model.config.schedule;
    let inv2b = 1.0 / (2.0 * beta);
    let n = model.blocks.len();
    let mut carry: Option<NudgeSignal> = None;
    for (seg, k) in (0..n).rev().enumerate() {
        let (ff, eb) = &model.blocks[k];
        let x_star = &record.x_stars[k];
        let cache = &record.caches[k];
        let offset = seg * t_block;
        let mut one = RelaxationSettings::nudged(1, sched, beta);
        one.init = StateInit::WarmStart;
        let mut s_plus = record.states[k].clone();
        let mut s_minus = record.states[k].clone();
        for t in 1..=t_block {
            if k == n - 1 {
                s_plus = relax_last_block(
                    eb, x_star, act, &one, &model.readout, y, beta, Some(&s_plus),
                )?;
                s_minus = relax_last_block(
                    eb, x_star, act, &one, &model.readout, y, -beta, Some(&s_minus),
                )?;
            } else {
                let signal = carry.as_ref().expect("carry from later block");
                s_plus = relax(eb, x_star, act, &one, Some(signal), Some(&s_plus))?;
                let mut down = one;
                down.beta = -beta;
                s_minus = relax(eb, x_star, act, &down, Some(signal), Some(&s_minus))?;
            }
            let (tp, _) = energy_grad_params(eb, &s_plus)?;
            let (tm, _) = energy_grad_params(eb, &s_minus)?;
            let theta: Vec<Tensor> = tp
                .iter()
                .zip(&tm)
                .map(|(p, m)| Ok(p.sub(m)?.scale(inv2b)))
                .collect::<Result<_>>()?;
            let dup = energy_grad_input(&s_plus)
                .sub(&energy_grad_input(&s_minus))?
                .scale(inv2b);
            let fw = ff_param_vjp(ff, cache, &dup)?.weight;
            fill_from(series, entries, k, offset + t, &theta, &fw);
        }
        // the error signal for the previous block, as the engine computes it
        if k > 0 {
            let dup = energy_grad_input(&s_plus)
                .sub(&energy_grad_input(&s_minus))?
                .scale(inv2b);
            let c = crate::feedforward::ff_input_vjp(ff, cache, &dup)?;
            let prev_eb = &model.blocks[k - 1].1;
            carry = Some(NudgeSignal::on_last_layer(prev_eb, c.shape()[0], c)?);
        }
    }
    Ok(())
}

fn id_transients(
    model: &Model,
    record: &InferenceRecord,
    y: &[usize],
    t_block: usize,
    entries: &[TrackedEntry],
    series: &mut [Vec<f32>],
) -> Result<()> {
    let settings = EngineSettings {
        beta: model.config.beta,
        t_free: model.config.t_free,
        t_nudge: t_block,
        engine: EngineKind::Id,
    };
    let (_, traces) = id_pass(model, record, y, &settings, true)?;
    let n = model.blocks.len();
    for (seg, k) in (0..n).rev().enumerate() {
        let trace = &traces[k];
        let (ff, _) = &model.blocks[k];
        let offset = seg * t_block;
        for (j, (drive, theta)) in trace.snapshots.iter().enumerate() {
            let fw = ff_param_vjp(ff, &trace.cache, drive)?.weight;
            fill_from(series, entries, k, offset + j + 1, theta, &fw);
        }
    }
    Ok(())
}

/// Per-tensor cosine similarity and relative L2 distance of two gradient
/// sets with identical key sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineReport {
    pub rows: Vec<CosineRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineRow {
    pub param_path: String,
    pub cosine: f64,
    pub rel_l2: f64,
}

impl CosineReport {
    pub fn min_cosine(&self) -> f64 {
        self.rows.iter().fold(1.0, |m, r| m.min(r.cosine))
    }

    pub fn median_cosine(&self) -> f64 {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.cosine).collect();
        v.sort_by(|a, b| a.partial_cmp(b).expect("finite cosines"));
        if v.is_empty() {
            return f64::NAN;
        }
        let mid = v.len() / 2;
        if v.len() % 2 == 0 {
            0.5 * (v[mid - 1] + v[mid])
        } else {
            v[mid]
        }
    }
}

pub fn cosine_report(a: &GradientSet, b: &GradientSet) -> Result<CosineReport> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "gradient sets have {} vs {} tensors",
            a.len(),
            b.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.len());
    for (name, ta) in a.iter() {
        let tb = b
            .get(name)
            .ok_or_else(|| Error::Usage(format!("gradient sets disagree on key {name}")))?;
        let na = ta.l2();
        let nb = tb.l2();
        let cosine = if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            ta.dot(tb)? / (na * nb)
        };
        let rel_l2 = ta.sub(tb)?.l2() / na.max(nb).max(1e-30);
        rows.push(CosineRow {
            param_path: name.clone(),
            cosine,
            rel_l2,
        });
    }
    Ok(CosineReport { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

pub enum Report<'a> {
    Trace(&'a GduTrace),
    Cosine(&'a CosineReport),
}

pub const TRACE_CSV_HEADER: &str = "block,layer,param_path,entry,t,g_ep,g_id";
pub const COSINE_CSV_HEADER: &str = "param_path,cosine,rel_l2";

/// Serializes a report to the given path. CSV rows follow the documented
/// column schemas; JSON mirrors the in-memory structure. Ordering is
/// deterministic (tracked-entry order, then time).
pub fn emit_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_report(report, format)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn render_report(report: &Report, format: ReportFormat) -> Result<String> {
    let mut out = String::new();
    match (report, format) {
        (Report::Trace(trace), ReportFormat::Csv) => {
            out.push_str(TRACE_CSV_HEADER);
            out.push('\n');
            for (i, e) in trace.entries.iter().enumerate() {
                for t in 0..trace.ep[i].len() {
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        e.block, e.layer, e.param_path, e.entry, t, trace.ep[i][t], trace.id[i][t]
                    ));
                }
            }
        }
        (Report::Trace(trace), ReportFormat::Json) => {
            out = serde_json::to_string_pretty(trace)?;
        }
        (Report::Cosine(report), ReportFormat::Csv) => {
            out.push_str(COSINE_CSV_HEADER);
            out.push('\n');
            for r in &report.rows {
                out.push_str(&format!("{},{},{}\n", r.param_path, r.cosine, r.rel_l2));
            }
        }
        (Report::Cosine(report), ReportFormat::Json) => {
            out = serde_json::to_string_pretty(report)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engines::{ep_gradients_implicit, id_gradients};
    use crate::model::build_model;
    use crate::presets::{oracle_toy_config, push_states_interior, seeded_batch};

    fn traced_toy() -> (Model, Tensor, Vec<usize>) {
        let cfg = oracle_toy_config(0);
        let (_, mut model) = build_model(&cfg).unwrap();
        push_states_interior(&mut model, cfg.seed ^ 0x5eed);
        let (x, y) = seeded_batch(&cfg.input, 2, cfg.readout_classes, 91);
        (model, x, y)
    }

    #[test]
    fn trace_endpoints_equal_full_engines_bitwise() {
        let (model, x, y) = traced_toy();
        let beta = model.config.beta;
        let t_block = 40;
        let trace = gdu_traces(&model, &x, &y, beta, t_block, None).unwrap();

        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let mut settings = EngineSettings {
            beta,
            t_free: model.config.t_free,
            t_nudge: t_block,
            engine: EngineKind::Ep,
        };
        let (ep, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
        settings.engine = EngineKind::Id;
        let id = id_gradients(&model, &record, &y, &settings).unwrap();

        for (i, e) in trace.entries.iter().enumerate() {
            let ep_end = *trace.ep[i].last().unwrap();
            let id_end = *trace.id[i].last().unwrap();
            assert_eq!(
                ep_end,
                ep.get(&e.param_path).unwrap().data()[e.entry],
                "EP endpoint mismatch at {}[{}]",
                e.param_path,
                e.entry
            );
            assert_eq!(
                id_end,
                id.get(&e.param_path).unwrap().data()[e.entry],
                "ID endpoint mismatch at {}[{}]",
                e.param_path,
                e.entry
            );
            assert_eq!(trace.ep[i][0], 0.0);
            assert_eq!(trace.id[i][0], 0.0);
        }
    }

    #[test]
    fn gdu_property_holds_on_interior_toy() {
        let (model, x, y) = traced_toy();
        let trace = gdu_traces(&model, &x, &y, 0.01, 30, None).unwrap();
        let mut ok = 0usize;
        for i in 0..trace.entries.len() {
            let max_id = trace.id[i].iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let max_diff = trace.ep[i]
                .iter()
                .zip(&trace.id[i])
                .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
            if max_diff <= 0.05 * max_id.max(1e-12) {
                ok += 1;
            }
        }
        let frac = ok as f64 / trace.entries.len() as f64;
        assert!(frac >= 0.95, "GDU match fraction {frac}");
    }

    #[test]
    fn id_series_is_a_prefix_sum() {
        // Rerunning with a shorter truncation reproduces the series prefix.
        // Only the last block sees the same cotangent seed in both runs
        // (earlier blocks receive carries with different truncation tails),
        // so the cross-check is restricted to its segment.
        let (model, x, y) = traced_toy();
        let n = model.blocks.len();
        let entries: Vec<TrackedEntry> = default_tracked_entries(&model, 7)
            .into_iter()
            .filter(|e| e.block == n - 1)
            .collect();
        assert!(!entries.is_empty());
        let full = gdu_traces(&model, &x, &y, 0.01, 20, Some(entries.clone())).unwrap();
        let shorter = gdu_traces(&model, &x, &y, 0.01, 10, Some(entries)).unwrap();
        for i in 0..full.entries.len() {
            for j in 1..=10usize {
                let a = full.id[i][j];
                let b = shorter.id[i][j];
                assert!(
                    (a - b).abs() <= 1e-4 * a.abs().max(1e-3),
                    "entry {i} step {j}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn cosine_report_basics() {
        let mut a = GradientSet::new();
        a.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut b = GradientSet::new();
        b.insert("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let r = cosine_report(&a, &b).unwrap();
        assert!((r.rows[0].cosine - 1.0).abs() <= 1e-12);

        let mut c = GradientSet::new();
        c.insert("w", Tensor::from_vec(&[2], vec![-1.0, -2.0]).unwrap());
        let r = cosine_report(&a, &c).unwrap();
        assert!((r.rows[0].cosine + 1.0).abs() <= 1e-12);

        // zero-norm pairs
        let mut z1 = GradientSet::new();
        z1.insert("w", Tensor::zeros(&[2]));
        let mut z2 = GradientSet::new();
        z2.insert("w", Tensor::zeros(&[2]));
        assert_eq!(cosine_report(&z1, &z2).unwrap().rows[0].cosine, 1.0);
        assert_eq!(cosine_report(&z1, &a).unwrap().rows[0].cosine, 0.0);

        // key mismatch
        let mut other = GradientSet::new();
        other.insert("v", Tensor::zeros(&[2]));
        assert!(matches!(cosine_report(&a, &other), Err(Error::Usage(_))));
    }

    #[test]
    fn reports_round_trip_and_match_schema() {
        let (model, x, y) = traced_toy();
        let entries = vec![TrackedEntry {
            block: 0,
            layer: 1,
            param_path: "block0.eb.theta0".into(),
            entry: 2,
        }];
        let trace = gdu_traces(&model, &x, &y, 0.01, 5, Some(entries)).unwrap();
        let csv = render_report(&Report::Trace(&trace), ReportFormat::Csv).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_CSV_HEADER);
        let first = lines.next().unwrap();
        assert!(first.starts_with("0,1,block0.eb.theta0,2,0,"));
        assert_eq!(csv.lines().count(), 1 + trace.series_len());

        // JSON round trip recovers identical values
        let json = render_report(&Report::Trace(&trace), ReportFormat::Json).unwrap();
        let back: GduTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back.ep, trace.ep);
        assert_eq!(back.id, trace.id);

        // CSV values round trip through parse
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 7);
            let t: usize = cols[4].parse().unwrap();
            let g_ep: f32 = cols[5].parse().unwrap();
            let g_id: f32 = cols[6].parse().unwrap();
            assert_eq!(g_ep, trace.ep[0][t]);
            assert_eq!(g_id, trace.id[0][t]);
        }
    }

    #[test]
    fn empty_trace_emits_header_only() {
        let trace = GduTrace {
            entries: vec![],
            ep: vec![],
            id: vec![],
            t_block: 0,
        };
        let csv = render_report(&Report::Trace(&trace), ReportFormat::Csv).unwrap();
        assert_eq!(csv, format!("{TRACE_CSV_HEADER}\n"));
    }
}
