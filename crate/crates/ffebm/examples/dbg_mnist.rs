use ffebm::data::{load_mnist_idx, Split};
use std::path::Path;

fn main() {
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let ds = load_mnist_idx(Path::new("data/mnist"), split, &[], &[]).unwrap();
        let mut hist = [0usize; 10];
        for &l in &ds.labels {
            hist[l as usize] += 1;
        }
        let (lo, hi) = ds
            .sample(0)
            .iter()
            .chain(ds.sample(ds.len() - 1))
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!("{name}: {} samples, hist {hist:?}, sample range [{lo:.3},{hi:.3}]", ds.len());
    }
}
