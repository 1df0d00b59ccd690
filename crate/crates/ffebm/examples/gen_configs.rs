//! Regenerates the JSON run specs in configs/.

use ffebm::data::Split;
use ffebm::presets::*;
use serde_json::json;

fn main() {
    let out = std::path::Path::new("configs");
    std::fs::create_dir_all(out).unwrap();

    // gradient-check toy
    let toy = oracle_toy_config(0);
    let spec = json!({
        "model": toy,
        "gradcheck": { "batch": 2, "fd_eps": 1e-2, "data_seed": 348, "interior_bias_seed": 24316 }
    });
    std::fs::write(out.join("toy_fc.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    // GDU trace model (6 blocks, 15 layers)
    let gdu = static_analysis_config(42);
    let spec = json!({
        "model": gdu,
        "gdu": { "batch": 4, "data_seed": 7, "t_block": 20, "interior_bias_seed": 9 }
    });
    std::fs::write(out.join("gdu_trace.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    // MNIST training, block size 2
    let mnist = mnist_split_config(&[2, 2, 2], 48, 1);
    let spec = json!({
        "model": mnist,
        "dataset": {
            "source": "mnist_idx",
            "root": "data/mnist",
            "split": "train",
            "limit": 5000
        },
        "train": {
            "epochs": 5,
            "batch_size": 100,
            "engine": "ep",
            "lr_initial": 3e-3,
            "lr_final": 3e-4,
            "seed": 1
        }
    });
    std::fs::write(out.join("mnist_bs2.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    // splitting benchmark
    let template = mnist_split_config(&[6], 48, 1);
    let spec = json!({
        "model": template,
        "dataset": {
            "source": "mnist_idx",
            "root": "data/mnist",
            "split": "train",
            "limit": 5000
        },
        "split_bench": {
            "splits": [[6], [3, 3], [2, 2, 2]],
            "width": 48,
            "seeds": [1, 2, 3],
            "engines": ["ep", "id"]
        },
        "train": {
            "epochs": 5,
            "batch_size": 100,
            "engine": "ep",
            "lr_initial": 3e-3,
            "lr_final": 3e-4,
            "seed": 1
        }
    });
    std::fs::write(out.join("mnist_split_bench.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    // synthetic blobs sanity task
    let blobs = blobs_config(8, 2, 5);
    let spec = json!({
        "model": blobs,
        "dataset": {
            "source": "synthetic_blobs",
            "samples": 256,
            "dim": 8,
            "classes": 2,
            "separation": 4.0,
            "split": "train"
        },
        "train": {
            "epochs": 20,
            "batch_size": 32,
            "engine": "ep",
            "lr_initial": 5e-3,
            "lr_final": 1e-4,
            "seed": 5
        }
    });
    std::fs::write(out.join("blobs.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    // desk-scale conv model for MNIST-shaped input
    let conv = desk_conv_config(
        ffebm::energy::LayerShape::Conv { channels: 1, height: 28, width: 28 },
        3,
    );
    let spec = json!({
        "model": conv,
        "dataset": {
            "source": "mnist_idx",
            "root": "data/mnist",
            "split": "train",
            "limit": 2000
        },
        "train": {
            "epochs": 2,
            "batch_size": 50,
            "engine": "ep",
            "lr_initial": 1e-3,
            "lr_final": 1e-4,
            "seed": 3
        }
    });
    std::fs::write(out.join("mnist_conv.json"), serde_json::to_string_pretty(&spec).unwrap()).unwrap();

    let _ = Split::Train;
    println!("configs written");
}
