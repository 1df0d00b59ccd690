use ffebm::engines::*;
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::{push_states_interior, toy_fc_config};
use ffebm::tensor::Tensor;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn main() {
    let cfg = toy_fc_config(&[&[4, 3], &[3, 2]], 5, 3, 11);
    let (_, mut model) = build_model(&cfg).unwrap();
    push_states_interior(&mut model, 11 ^ 0x5eed);
    let mut rng = StdRng::seed_from_u64(11u64.wrapping_mul(31) + 7);
    let x = Tensor::from_vec(&[2, 5], (0..10).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let y: Vec<usize> = (0..2).map(|_| rng.gen_range(0..3)).collect();
    let record = forward_inference(&model, &x, Mode::Train).unwrap();
    let settings = EngineSettings::from_model(&model, EngineKind::Ep);
    let (gi, _) = ep_gradients_implicit(&model, &record, &y, &settings).unwrap();
    let id = id_gradients(&model, &record, &y, &settings).unwrap();
    for eps in [1e-2f32, 2e-2] {
        let fd = finite_difference_gradients(&model, &x, &y, eps, None).unwrap();
        println!("-- eps {eps}");
        for (name, a) in gi.iter() {
            let i = id.get(name).unwrap();
            let f = fd.get(name).unwrap();
            let d_ii = a.sub(i).unwrap().l2() / a.l2().max(i.l2()).max(1e-12);
            let d_if = a.sub(f).unwrap().l2() / a.l2().max(f.l2()).max(1e-12);
            let d_df = i.sub(f).unwrap().l2() / i.l2().max(f.l2()).max(1e-12);
            println!("{name:24} |g|={:<10.3e} ep-vs-id={:<10.3e} ep-vs-fd={:<10.3e} id-vs-fd={:<10.3e}", a.l2(), d_ii, d_if, d_df);
        }
    }
}
