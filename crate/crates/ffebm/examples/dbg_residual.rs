use ffebm::data::{load_mnist_idx, Split};
use ffebm::model::{build_model, forward_inference, Mode};
use ffebm::presets::mnist_split_config;
use ffebm::solver::residual;
use std::path::Path;

fn main() {
    let data = load_mnist_idx(Path::new("data/mnist"), Split::Train, &[], &[]).unwrap();
    let (batch, _) = data.batch(&(0..100).collect::<Vec<_>>()).unwrap();
    for tf in [15usize, 25, 40] {
        for split in [vec![2, 2, 2], vec![6]] {
            let mut cfg = mnist_split_config(&split, 48, 1);
            cfg.goe_variance = 1.0;
            cfg.t_free = tf;
            let (_, model) = build_model(&cfg).unwrap();
            let batch = batch.reshape(&model.batch_input_shape(100)).unwrap();
            let rec = forward_inference(&model, &batch, Mode::Train).unwrap();
            let res: Vec<f32> = model
                .blocks
                .iter()
                .enumerate()
                .map(|(k, (_, eb))| {
                    residual(eb, &rec.states[k], &rec.x_stars[k], cfg.activation, None, 0.0).unwrap()
                })
                .collect();
            println!("t_free {tf} split {split:?}: residuals {res:?}");
        }
    }
}
