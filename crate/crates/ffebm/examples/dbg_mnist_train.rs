use ffebm::data::{load_mnist_idx, Split};
use ffebm::engines::EngineKind;
use ffebm::model::build_model;
use ffebm::presets::mnist_split_config;
use ffebm::train::{train, AdamHyper, TrainRunConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let split: Vec<usize> = args.get(1).map(|s| s.split('-').map(|v| v.parse().unwrap()).collect()).unwrap_or(vec![2, 2, 2]);
    let v: f32 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f32 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2e-3);
    let engine = match args.get(5).map(|s| s.as_str()) {
        Some("id") => EngineKind::Id,
        _ => EngineKind::Ep,
    };

    let train_data = load_mnist_idx(Path::new("data/mnist"), Split::Train, &[], &[]).unwrap();
    let val_data = load_mnist_idx(Path::new("data/mnist"), Split::Test, &[], &[]).unwrap();
    let mut cfg = mnist_split_config(&split, 48, 1);
    cfg.goe_variance = v;
    cfg.t_free = 90;
    cfg.t_nudge = 18;
    if args.get(6).map(|s| s == "lab").unwrap_or(false) {
        cfg.activation = ffebm::energy::Activation::Laborieux;
    }
    if let Some(beta) = args.get(7) {
        cfg.beta = beta.parse().unwrap();
    }
    let (_, mut model) = build_model(&cfg).unwrap();
    if args.get(8).map(|s| s == "bias1").unwrap_or(false) {
        ffebm::presets::push_states_interior(&mut model, 42);
    }
    if let Some(bv) = args.get(8).and_then(|s| s.strip_prefix("bias=")) {
        let bv: f32 = bv.parse().unwrap();
        let paths: Vec<String> = model
            .parameter_store()
            .tensors()
            .filter(|(n, _)| n.contains(".eb.bias"))
            .map(|(n, _)| n.clone())
            .collect();
        for p in paths {
            for v in model.tensor_mut(&p).unwrap().data_mut() {
                *v = bv;
            }
        }
    }
    let bs: usize = args.get(9).map(|s| s.parse().unwrap()).unwrap_or(100);
    let run = TrainRunConfig {
        epochs,
        batch_size: bs,
        engine,
        lr_initial: lr,
        lr_final: lr / 20.0,
        adam: AdamHyper::default(),
        seed: 1,
        checkpoint_every: None,
        out_dir: None,
    };
    let started = Instant::now();
    let metrics = train(&mut model, &train_data, &val_data, &run, &Default::default()).unwrap();
    for m in &metrics {
        println!("epoch {}: loss {:.4} val_top1 {:.4} ({:.1}s)", m.epoch, m.train_loss, m.val_top1, m.seconds);
    }
    println!("total {:.1}s split {:?} v {} engine {:?}", started.elapsed().as_secs_f64(), split, v, engine);
}
