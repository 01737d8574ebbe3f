//! Hand-written models and synthetic datasets used by tests, examples and the
//! desk benchmark. Everything here is a pure function of its seed.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::Dataset;
use crate::model::{GraphBuilder, ModelGraph};
use crate::tensor::Tensor;

/// `input[1,5,5] → conv(1→2, K=3) → output`.
pub fn single_conv(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("single_conv", [1, 5, 5], 2, seed);
    b.conv("conv", "input", 2, 3, 1, 0, false);
    b.finish("conv").expect("single_conv")
}

/// `conv1 → bn1 → relu1 → conv2 → bn2 → relu2 → gap → fc`.
pub fn chain_cnn(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("chain_cnn", [3, 8, 8], 4, seed);
    b.conv("conv1", "input", 8, 3, 1, 1, true);
    b.bn("bn1", "conv1");
    b.relu("relu1", "bn1");
    b.conv("conv2", "relu1", 16, 3, 1, 1, true);
    b.bn("bn2", "conv2");
    b.relu("relu2", "bn2");
    b.gap("gap", "relu2");
    b.linear("fc", "gap", 4, true);
    b.finish("fc").expect("chain_cnn")
}

/// VGG-style: two conv/bn/relu/pool stages, flatten, two-layer classifier.
pub fn vgg_cnn(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("vgg_cnn", [3, 8, 8], 4, seed);
    b.conv("conv1", "input", 8, 3, 1, 1, true);
    b.bn("bn1", "conv1");
    b.relu("relu1", "bn1");
    b.maxpool("pool1", "relu1", 2, 2);
    b.conv("conv2", "pool1", 16, 3, 1, 1, true);
    b.bn("bn2", "conv2");
    b.relu("relu2", "bn2");
    b.maxpool("pool2", "relu2", 2, 2);
    b.flatten("flatten", "pool2");
    b.linear("fc1", "flatten", 32, true);
    b.relu("relu3", "fc1");
    b.linear("fc2", "relu3", 4, true);
    b.finish("fc2").expect("vgg_cnn")
}

/// Stem plus two basic residual blocks; the second downsamples with a 1×1
/// strided projection on the shortcut.
pub fn residual_cnn(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("residual_cnn", [3, 8, 8], 4, seed);
    b.conv("conv0", "input", 8, 3, 1, 1, false);
    b.bn("bn0", "conv0");
    b.relu("relu0", "bn0");

    b.conv("conv1a", "relu0", 8, 3, 1, 1, false);
    b.bn("bn1a", "conv1a");
    b.relu("relu1a", "bn1a");
    b.conv("conv1b", "relu1a", 8, 3, 1, 1, false);
    b.bn("bn1b", "conv1b");
    b.add("add1", "bn1b", "relu0");
    b.relu("relu1", "add1");

    b.conv("conv2a", "relu1", 16, 3, 2, 1, false);
    b.bn("bn2a", "conv2a");
    b.relu("relu2a", "bn2a");
    b.conv("conv2b", "relu2a", 16, 3, 1, 1, false);
    b.bn("bn2b", "conv2b");
    b.conv("conv2d", "relu1", 16, 1, 2, 0, false);
    b.bn("bn2d", "conv2d");
    b.add("add2", "bn2b", "bn2d");
    b.relu("relu2", "add2");

    b.gap("gap", "relu2");
    b.linear("fc", "gap", 4, true);
    b.finish("fc").expect("residual_cnn")
}

/// Two parallel conv branches on the raw input summed, then average pooling
/// and a flattened classifier.
pub fn twin_branch(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("twin_branch", [2, 6, 6], 3, seed);
    b.conv("conv_a", "input", 6, 3, 1, 1, true);
    b.bn("bn_a", "conv_a");
    b.conv("conv_b", "input", 6, 1, 1, 0, true);
    b.bn("bn_b", "conv_b");
    b.add("add", "bn_a", "bn_b");
    b.relu("relu", "add");
    b.avgpool("pool", "relu", 2, 2);
    b.conv("conv_c", "pool", 5, 3, 1, 1, false);
    b.relu("relu_c", "conv_c");
    b.flatten("flatten", "relu_c");
    b.linear("fc", "flatten", 3, true);
    b.finish("fc").expect("twin_branch")
}

/// Plain multilayer perceptron on a flattened image.
pub fn mlp(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("mlp", [1, 4, 4], 3, seed);
    b.flatten("flatten", "input");
    b.linear("fc1", "flatten", 12, true);
    b.relu("relu1", "fc1");
    b.linear("fc2", "relu1", 8, true);
    b.relu("relu2", "fc2");
    b.linear("fc3", "relu2", 3, true);
    b.loss("loss", "fc3");
    b.finish("loss").expect("mlp")
}

/// Chain CNN whose middle 20-filter conv has 19 near-zero filters, so a
/// global threshold empties that group long before any other.
pub fn bottleneck_cnn(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("bottleneck_cnn", [3, 8, 8], 4, seed);
    b.conv_bn_relu("conv1", "input", 16, 3, 1);
    b.conv_bn_relu("conv2", "relu_conv1", 20, 3, 1);
    b.conv_bn_relu("conv3", "relu_conv2", 16, 3, 1);
    b.gap("gap", "relu_conv3");
    b.linear("fc", "gap", 4, true);
    let m = b.finish("fc").expect("bottleneck_cnn");

    let mut conv2 = m.node("conv2").unwrap().clone();
    let w = conv2.params.get_mut("weight").unwrap();
    let per_filter = w.numel() / 20;
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if i / per_filter != 7 {
            *v *= 1e-3;
        }
    }
    m.with_node(conv2)
}

/// The desk benchmark CNN: five conv/bn/relu stages on 3×16×16 inputs and a
/// flattened linear classifier, about 95k parameters and 2M MACs.
pub fn desk_cnn(seed: u64) -> ModelGraph {
    let mut b = GraphBuilder::new("desk_cnn", [3, 16, 16], 10, seed);
    b.conv_bn_relu("conv1", "input", 16, 3, 1);
    b.maxpool("pool1", "relu_conv1", 2, 2);
    b.conv_bn_relu("conv2", "pool1", 32, 3, 1);
    b.conv_bn_relu("conv3", "relu_conv2", 32, 3, 1);
    b.maxpool("pool3", "relu_conv3", 2, 2);
    b.conv_bn_relu("conv4", "pool3", 64, 3, 1);
    b.conv_bn_relu("conv5", "relu_conv4", 80, 3, 1);
    b.flatten("flatten", "relu_conv5");
    b.linear("fc", "flatten", 10, true);
    b.finish("fc").expect("desk_cnn")
}

/// Every multi-layer architecture above, for corpus-wide property tests.
pub fn corpus(seed: u64) -> Vec<ModelGraph> {
    vec![
        chain_cnn(seed),
        vgg_cnn(seed),
        residual_cnn(seed),
        twin_branch(seed),
        mlp(seed),
        bottleneck_cnn(seed),
        desk_cnn(seed),
    ]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Class-prototype images: each class owns a smooth random pattern; samples
/// are that pattern circularly shifted by up to `max_shift` pixels plus
/// Gaussian noise of standard deviation `noise`. Classes are balanced.
pub fn prototype_dataset(
    shape: [usize; 3],
    num_classes: usize,
    n: usize,
    noise: f32,
    max_shift: usize,
    seed: u64,
) -> Dataset {
    let [c, h, w] = shape;
    // Prototypes depend only on the class structure, not on the sample seed,
    // so train/val splits drawn with different seeds share them.
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + num_classes as u64);
    let protos: Vec<Vec<f32>> = (0..num_classes)
        .map(|_| {
            // Sum of a few random low-frequency plane waves per channel.
            let waves: Vec<(usize, f32, f32, f32, f32)> = (0..c * 3)
                .map(|i| {
                    (
                        i % c,
                        proto_rng.random_range(0.2f32..1.4),
                        proto_rng.random_range(0.2f32..1.4),
                        proto_rng.random_range(0.0..std::f32::consts::TAU),
                        proto_rng.random_range(0.6f32..1.2),
                    )
                })
                .collect();
            let mut img = vec![0f32; c * h * w];
            for &(ch, fy, fx, phase, amp) in &waves {
                for y in 0..h {
                    for x in 0..w {
                        img[(ch * h + y) * w + x] +=
                            amp * (fy * y as f32 + fx * x as f32 + phase).sin();
                    }
                }
            }
            img
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let dy = rng.random_range(0..=2 * max_shift);
        let dx = rng.random_range(0..=2 * max_shift);
        let p = &protos[label];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = (y + h + dy - max_shift) % h;
                    let sx = (x + w + dx - max_shift) % w;
                    inputs.push(p[(ch * h + sy) * w + sx] + noise * gaussian(&mut rng));
                }
            }
        }
        labels.push(label as u32);
    }
    Dataset::new(
        Tensor::new(vec![n, c, h, w], inputs).expect("dataset shape"),
        labels,
        num_classes,
    )
    .expect("dataset")
}

/// Train/validation split for the desk benchmark.
pub fn desk_data(seed: u64) -> (Dataset, Dataset) {
    let train = prototype_dataset([3, 16, 16], 10, 600, 1.0, 2, seed);
    let val = prototype_dataset([3, 16, 16], 10, 300, 1.0, 2, seed.wrapping_add(1_000_003));
    (train, val)
}
