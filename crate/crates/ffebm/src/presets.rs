//! Named desk-scale model configurations and toy builders shared by the
//! diagnostics, the benchmarks, and the test suites.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::energy::{Activation, LayerShape};
use crate::model::{
    BlockPairSpec, EnergyBlockSpec, EnergyLayerSpec, FeedforwardBlockSpec, Model, ModelConfig,
};
use crate::solver::Schedule;

/// GOE variance scale used by the paper's 6-layer architecture.
pub const GOE_V_6LAYER: f32 = 8.4e-4;

/// Fully connected ff-EBM: one linear tie plus one FC energy block per
/// entry of `widths_per_block`; biases enabled so toys can be pushed into
/// the interior of the activation range.
pub fn toy_fc_config(
    widths_per_block: &[&[usize]],
    input: usize,
    classes: usize,
    seed: u64,
) -> ModelConfig {
    let blocks = widths_per_block
        .iter()
        .map(|ws| BlockPairSpec {
            feedforward: FeedforwardBlockSpec::Linear { out: ws[0], batchnorm: false },
            energy: EnergyBlockSpec {
                layers: ws.iter().map(|&u| EnergyLayerSpec::Fc { units: u }).collect(),
                biases: true,
            },
        })
        .collect();
    ModelConfig {
        input: LayerShape::Fc { units: input },
        blocks,
        readout_classes: classes,
        activation: Activation::Laborieux,
        schedule: Schedule::Synchronous,
        t_free: 200,
        t_nudge: 100,
        beta: 0.01,
        // strong enough couplings that error signals survive the depth at
        // f32 precision
        goe_variance: 0.9,
        seed,
    }
}

/// Moves every layer's operating point toward the middle of the activation
/// range by giving each unit a positive bias near 1 (with a small seeded
/// jitter so no two units sit at exactly the same point). Keeps hard-clipped
/// states away from the kinks where finite differences are meaningless.
pub fn push_states_interior(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths: Vec<String> = model
        .parameter_store()
        .tensors()
        .filter(|(name, _)| name.contains(".eb.bias"))
        .map(|(name, _)| name.clone())
        .collect();
    for path in paths {
        let t = model.tensor_mut(&path).expect("bias path exists");
        for v in t.data_mut() {
            *v = rng.gen_range(0.85..1.15);
        }
    }
}

/// Three seeded FC toys used to anchor every gradient engine against the
/// finite-difference oracle. Couplings are strong enough that no error
/// signal falls below what single-precision finite differences resolve.
pub fn oracle_toy_config(idx: usize) -> ModelConfig {
    match idx {
        0 => {
            let mut cfg = toy_fc_config(&[&[4, 3], &[3, 2]], 5, 3, 11);
            cfg.goe_variance = 1.5;
            cfg
        }
        1 => {
            let mut cfg = toy_fc_config(&[&[5], &[4, 2]], 4, 3, 606);
            cfg.goe_variance = 1.3;
            cfg
        }
        _ => {
            let mut cfg = toy_fc_config(&[&[4, 4], &[4]], 6, 2, 303);
            cfg.goe_variance = 1.4;
            cfg
        }
    }
}

/// Deterministic random batch for gradient checking: inputs uniform in
/// (0, 1), labels uniform over the classes.
pub fn seeded_batch(
    input: &LayerShape,
    batch: usize,
    classes: usize,
    seed: u64,
) -> (crate::tensor::Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = input.batched(batch);
    let n: usize = shape.iter().product();
    let x = crate::tensor::Tensor::from_vec(
        &shape,
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .expect("shape/data agree");
    let y = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    (x, y)
}

/// The static gradient-analysis model: 6 FC blocks, 15 layers in total
/// (block sizes alternating 3 and 2), desk widths.
pub fn static_analysis_config(seed: u64) -> ModelConfig {
    let w = 24usize;
    let sizes: [usize; 6] = [3, 2, 3, 2, 3, 2];
    let blocks = sizes
        .iter()
        .map(|&n| BlockPairSpec {
            feedforward: FeedforwardBlockSpec::Linear { out: w, batchnorm: false },
            energy: EnergyBlockSpec {
                layers: (0..n).map(|_| EnergyLayerSpec::Fc { units: w }).collect(),
                biases: true,
            },
        })
        .collect();
    ModelConfig {
        input: LayerShape::Fc { units: 32 },
        blocks,
        readout_classes: 10,
        activation: Activation::Laborieux,
        schedule: Schedule::Asynchronous,
        t_free: 60,
        t_nudge: 20,
        beta: 0.05,
        goe_variance: 0.2,
        seed,
    }
}

/// MNIST-scale FC model with the 6 energy layers partitioned into blocks by
/// `split` (for example `[6]`, `[3, 3]`, `[2, 2, 2]`). Batchnorm on each
/// linear tie keeps the drive into every block at unit scale regardless of
/// depth.
pub fn mnist_split_config(split: &[usize], width: usize, seed: u64) -> ModelConfig {
    let blocks = split
        .iter()
        .map(|&n| BlockPairSpec {
            feedforward: FeedforwardBlockSpec::Linear { out: width, batchnorm: true },
            energy: EnergyBlockSpec {
                layers: (0..n).map(|_| EnergyLayerSpec::Fc { units: width }).collect(),
                biases: true,
            },
        })
        .collect();
    ModelConfig {
        input: LayerShape::Fc { units: 784 },
        blocks,
        readout_classes: 10,
        activation: Activation::Laborieux,
        schedule: Schedule::Asynchronous,
        t_free: 30,
        t_nudge: 10,
        beta: 0.2,
        goe_variance: 0.6,
        seed,
    }
}

/// Reduced-width conv architecture in the style of the 6-layer model:
/// conv tie with pooling and batchnorm, conv energy blocks, widths divided
/// by four, for 1x28x28 or 3x32x32 inputs.
pub fn desk_conv_config(input: LayerShape, seed: u64) -> ModelConfig {
    let blocks = vec![
        BlockPairSpec {
            feedforward: FeedforwardBlockSpec::Conv {
                out_channels: 32,
                stride: 1,
                pad: 1,
                pool: true,
                batchnorm: true,
            },
            energy: EnergyBlockSpec {
                layers: vec![
                    EnergyLayerSpec::Conv { channels: 32, pool: false },
                    EnergyLayerSpec::Conv { channels: 64, pool: false },
                    EnergyLayerSpec::Conv { channels: 64, pool: false },
                ],
                biases: true,
            },
        },
        BlockPairSpec {
            feedforward: FeedforwardBlockSpec::Conv {
                out_channels: 128,
                stride: 1,
                pad: 1,
                pool: true,
                batchnorm: true,
            },
            energy: EnergyBlockSpec {
                layers: vec![
                    EnergyLayerSpec::Conv { channels: 128, pool: false },
                    EnergyLayerSpec::Fc { units: 64 },
                ],
                biases: true,
            },
        },
    ];
    ModelConfig {
        input,
        blocks,
        readout_classes: 10,
        activation: Activation::Ernoult,
        schedule: Schedule::Asynchronous,
        t_free: 60,
        t_nudge: 20,
        beta: 0.2,
        goe_variance: GOE_V_6LAYER,
        seed,
    }
}

/// Two-block FC model for the synthetic-blob sanity task.
pub fn blobs_config(input: usize, classes: usize, seed: u64) -> ModelConfig {
    let mut cfg = toy_fc_config(&[&[16, 16], &[8, 8]], input, classes, seed);
    cfg.schedule = Schedule::Asynchronous;
    cfg.t_free = 30;
    cfg.t_nudge = 10;
    cfg.beta = 0.2;
    cfg.goe_variance = 0.1;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn six_layer_goe_scale_is_pinned() {
        assert_eq!(GOE_V_6LAYER, 8.4e-4);
        let cfg = desk_conv_config(LayerShape::Conv { channels: 1, height: 28, width: 28 }, 1);
        assert_eq!(cfg.goe_variance, GOE_V_6LAYER);
    }

    #[test]
    fn static_analysis_model_has_six_blocks_fifteen_layers() {
        let cfg = static_analysis_config(3);
        let (_, model) = build_model(&cfg).unwrap();
        assert_eq!(model.blocks.len(), 6);
        let total: usize = model.blocks.iter().map(|(_, eb)| eb.layers.len()).sum();
        assert_eq!(total, 15);
    }

    #[test]
    fn mnist_splits_share_layer_totals() {
        for split in [&[6][..], &[3, 3][..], &[2, 2, 2][..]] {
            let cfg = mnist_split_config(split, 48, 5);
            let (_, model) = build_model(&cfg).unwrap();
            let total: usize = model.blocks.iter().map(|(_, eb)| eb.layers.len()).sum();
            assert_eq!(total, 6);
        }
    }

    #[test]
    fn desk_conv_config_builds() {
        let cfg = desk_conv_config(LayerShape::Conv { channels: 1, height: 28, width: 28 }, 2);
        let (store, _) = build_model(&cfg).unwrap();
        assert!(store.len() > 10);
    }
}
