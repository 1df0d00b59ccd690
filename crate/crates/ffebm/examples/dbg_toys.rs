use ffebm::engines::*;
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::{push_states_interior, seeded_batch, toy_fc_config};

fn main() {
    for seed in [101u64, 404, 505, 606, 707, 808] {
        for v in [1.3f32, 1.5] {
            let mut cfg = toy_fc_config(&[&[5], &[4, 2]], 4, 3, seed);
            cfg.goe_variance = v;
            let (_, mut model) = build_model(&cfg).unwrap();
            push_states_interior(&mut model, cfg.seed ^ 0x5eed);
            let (x, y) = seeded_batch(&cfg.input, 2, 3, seed.wrapping_mul(31) + 7);
            let record = forward_inference(&model, &x, Mode::Train).unwrap();
            let settings = EngineSettings::from_model(&model, EngineKind::Ep);
            let (ep, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
            let id = id_gradients(&model, &record, &y, &settings).unwrap();
            let fd = finite_difference_gradients(&model, &x, &y, 1e-2, None).unwrap();
            println!(
                "seed {seed} v={v}: ep-id={:.2e} ep-fd={:.2e} id-fd={:.2e}",
                ep.max_rel_l2(&id).unwrap(),
                ep.max_rel_l2(&fd).unwrap(),
                id.max_rel_l2(&fd).unwrap()
            );
        }
    }
}
