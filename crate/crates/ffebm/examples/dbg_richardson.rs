use ffebm::engines::*;
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::{push_states_interior, toy_fc_config};
use ffebm::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    for (scale, label) in [(4.0f32, "x4"), (8.0, "x8")] {
        let cfg = toy_fc_config(&[&[5, 4]], 4, 3, 77);
        let (_, mut model) = build_model(&cfg).unwrap();
        push_states_interior(&mut model, 123);
        model.readout.weight = model.readout.weight.scale(scale);
        let mut rng = StdRng::seed_from_u64(5);
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = vec![1, 2];
        let record = forward_inference(&model, &x, Mode::Train).unwrap();
        let mut settings = EngineSettings::from_model(&model, EngineKind::Ep);
        settings.t_nudge = 300;
        let id = id_gradients(&model, &record, &y, &settings).unwrap();
        let fd = finite_difference_gradients(&model, &x, &y, 1e-2, None).unwrap();
        let err = |beta: f32| {
            let mut s = settings;
            s.beta = beta;
            let (g, _) = ep_gradients_implicit(&model, &record, &y, &s).unwrap();
            (g.max_rel_l2(&fd).unwrap(), g.max_rel_l2(&id).unwrap())
        };
        let (f2, i2) = err(0.02);
        let (f1, i1) = err(0.01);
        println!("readout {label}: id-vs-fd={:.3e}", id.max_rel_l2(&fd).unwrap());
        println!("  beta=0.02: ep-vs-fd={f2:.3e} ep-vs-id={i2:.3e}");
        println!("  beta=0.01: ep-vs-fd={f1:.3e} ep-vs-id={i1:.3e}  fd-ratio={:.2} id-ratio={:.2}", f2/f1, i2/i1);
    }
}
