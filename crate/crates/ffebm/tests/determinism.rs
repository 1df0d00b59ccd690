//! Determinism guarantees: thread-count independence of the kernels and the
//! engines, and byte-identical training runs under a fixed seed.

use ffebm::data::synthetic_blobs;
use ffebm::engines::{ep_gradients_implicit, EngineKind, EngineSettings};
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::{blobs_config, oracle_toy_config, push_states_interior, seeded_batch};
use ffebm::threads::set_thread_cap;
use ffebm::train::{metrics_to_jsonl, train_with_clock, AdamHyper, TrainRunConfig};

#[test]
fn results_do_not_depend_on_the_thread_cap() {
    let cfg = oracle_toy_config(0);
    let (_, mut model) = build_model(&cfg).unwrap();
    push_states_interior(&mut model, cfg.seed ^ 0x5eed);
    let (x, y) = seeded_batch(&cfg.input, 4, cfg.readout_classes, 17);

    let run = |cap: usize| {
        set_thread_cap(cap);
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let settings = EngineSettings::from_model(&model, EngineKind::Ep);
        let (grads, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
        set_thread_cap(1);
        (record.logits, grads)
    };
    let (logits_1, grads_1) = run(1);
    let (logits_4, grads_4) = run(4);
    assert_eq!(logits_1, logits_4);
    for (name, g) in grads_1.iter() {
        assert_eq!(g, grads_4.get(name).unwrap(), "gradient {name} differs");
    }
}

#[test]
fn fixed_seed_training_is_byte_identical() {
    let cfg = blobs_config(6, 2, 31);
    let train_data = synthetic_blobs(64, 6, 2, 4.0, 41);
    let val_data = synthetic_blobs(32, 6, 2, 4.0, 42);
    let run = TrainRunConfig {
        epochs: 3,
        batch_size: 16,
        engine: EngineKind::Ep,
        lr_initial: 2e-3,
        lr_final: 1e-4,
        adam: AdamHyper::default(),
        seed: 13,
        checkpoint_every: None,
        out_dir: None,
    };
    let mut go = || {
        let (_, mut model) = build_model(&cfg).unwrap();
        let mut tick = 0u64;
        let metrics = train_with_clock(
            &mut model,
            &train_data,
            &val_data,
            &run,
            &Default::default(),
            &mut || {
                tick += 1;
                tick as f64
            },
        )
        .unwrap();
        (metrics_to_jsonl(&metrics), model.parameter_store())
    };
    let (log_a, store_a) = go();
    let (log_b, store_b) = go();
    assert_eq!(log_a.as_bytes(), log_b.as_bytes());
    assert_eq!(store_a, store_b);
}
