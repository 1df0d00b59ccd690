use ffebm::data::{load_mnist_idx, Split};
use ffebm::engines::*;
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::mnist_split_config;
use ffebm::solver::residual;
use std::path::Path;

fn main() {
    let data = load_mnist_idx(Path::new("data/mnist"), Split::Train, &[], &[]).unwrap();
    let (batch, y) = data.batch(&(0..100).collect::<Vec<_>>()).unwrap();
    for split in [vec![6usize]] {
        let mut cfg = mnist_split_config(&split, 48, 1);
        cfg.goe_variance = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(1.0); cfg.t_free = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(70);
        let (_, model) = build_model(&cfg).unwrap();
        let batch = batch.reshape(&model.batch_input_shape(100)).unwrap();
        let rec = forward_inference(&model, &batch, Mode::Train).unwrap();
        println!("== split {split:?}");
        for (k, st) in rec.states.iter().enumerate() {
            let stds: Vec<String> = st
                .layers
                .iter()
                .map(|t| {
                    // per-sample variance across batch (signal content)
                    let n = t.len() / 100;
                    let mut cross = 0.0f64;
                    for u in 0..n.min(16) {
                        let col: Vec<f64> = (0..100).map(|b| t.data()[b * n + u] as f64).collect();
                        let m = col.iter().sum::<f64>() / 100.0;
                        cross += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 100.0;
                    }
                    format!("{:.4}", (cross / n.min(16) as f64).sqrt())
                })
                .collect();
            let res = residual(&model.blocks[k].1, st, &rec.x_stars[k], cfg.activation, None, 0.0).unwrap();
            println!("  block {k}: cross-sample std per layer {stds:?} residual {res:.2e}");
        }
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let (ep, _) = ep_gradients_implicit(&model, &rec, &y, &settings).unwrap();
        for (name, g) in ep.iter() {
            println!("  {name:24} |g|={:.3e}", g.l2());
        }
    }
}
