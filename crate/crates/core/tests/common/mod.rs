#![allow(dead_code)]

use crq_core::nn::{backward, forward, Batch, Gradients, Network};
use crq_core::numeric::{DenseArray, Rng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Relative error with an absolute floor so that near-zero entries are
/// compared on an absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Weight,
    Bias,
}

fn perturbed(net: &Network, ordinal: usize, which: Param, index: usize, delta: f64) -> Network {
    let mut n = net.clone();
    match which {
        Param::Weight => n.weights_mut(ordinal)[index] += delta,
        Param::Bias => n.bias_mut(ordinal).expect("layer has a bias")[index] += delta,
    }
    n
}

/// Central-difference derivative of `f` with respect to every entry of one
/// parameter tensor.
pub fn numeric_gradient(
    net: &Network,
    ordinal: usize,
    which: Param,
    f: &dyn Fn(&Network) -> f64,
) -> Vec<f64> {
    let len = match which {
        Param::Weight => net.weights(ordinal).len(),
        Param::Bias => net.bias(ordinal).map_or(0, <[f64]>::len),
    };
    (0..len)
        .map(|i| {
            let up = f(&perturbed(net, ordinal, which, i, FD_STEP));
            let down = f(&perturbed(net, ordinal, which, i, -FD_STEP));
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn batch_loss(net: &Network, batch: &Batch) -> f64 {
    forward(net, batch).expect("forward").0
}

pub fn analytic_gradients(net: &Network, batch: &Batch) -> Gradients {
    let (_, cache) = forward(net, batch).expect("forward");
    backward(net, &cache).expect("backward")
}

/// Worst relative error between `analytic` and finite differences of the
/// batch loss over every weight and bias of `net`.
pub fn worst_loss_gradient_error(net: &Network, batch: &Batch) -> f64 {
    let grads = analytic_gradients(net, batch);
    let f = |n: &Network| batch_loss(n, batch);
    let mut worst: f64 = 0.0;
    for (o, g) in grads.layers.iter().enumerate() {
        let numeric = numeric_gradient(net, o, Param::Weight, &f);
        for (a, n) in g.weight.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
        if let Some(gb) = &g.bias {
            let numeric = numeric_gradient(net, o, Param::Bias, &f);
            for (a, n) in gb.data().iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
    }
    worst
}

/// Network with Normal(0, 0.5) weights and biases so that every ReLU sees
/// both signs.
pub fn random_network(arch: crq_core::Architecture, rng: &mut Rng) -> Network {
    let mut net = Network::init(arch, rng).expect("init");
    for o in 0..net.num_param_layers() {
        for w in net.weights_mut(o) {
            *w = rng.normal(0.0, 0.5);
        }
        if let Some(b) = net.bias_mut(o) {
            for v in b {
                *v = rng.normal(0.0, 0.5);
            }
        }
    }
    net
}

pub fn random_batch(sample_shape: &[usize], n: usize, classes: usize, rng: &mut Rng) -> Batch {
    let per: usize = sample_shape.iter().product();
    let data = (0..n * per).map(|_| rng.normal(0.0, 1.0)).collect();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    let labels = (0..n).map(|_| rng.below(classes)).collect();
    Batch::new(DenseArray::new(shape, data).expect("inputs"), labels).expect("batch")
}

/// One small network per layer kind, each with a matching random batch.
pub fn layer_kind_cases(seed: u64) -> Vec<(&'static str, Network, Batch)> {
    use crq_core::nn::{LayerSpec, Padding};
    use crq_core::Architecture;
    let mut rng = Rng::new(seed);
    let conv = |in_channels, out_channels, padding| LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: [3, 3],
        padding,
        bias: true,
    };
    let dense = |inputs, outputs| LayerSpec::Dense {
        inputs,
        outputs,
        bias: true,
    };
    let archs = vec![
        ("dense+relu 2-16-3", Architecture::mlp(&[2, 16, 3]).unwrap()),
        (
            "dense without bias",
            Architecture {
                input_shape: vec![3],
                layers: vec![
                    LayerSpec::Dense {
                        inputs: 3,
                        outputs: 4,
                        bias: false,
                    },
                    LayerSpec::Relu,
                    dense(4, 2),
                ],
            },
        ),
        (
            "conv same+relu+flatten",
            Architecture {
                input_shape: vec![2, 5, 5],
                layers: vec![conv(2, 3, Padding::Same), LayerSpec::Relu, LayerSpec::Flatten, dense(75, 3)],
            },
        ),
        (
            "conv valid+flatten",
            Architecture {
                input_shape: vec![1, 6, 4],
                layers: vec![conv(1, 2, Padding::Valid), LayerSpec::Flatten, dense(16, 2)],
            },
        ),
        ("toy cnn", Architecture::toy_cnn(1, 6, [2, 3], 5, 3).unwrap()),
    ];
    archs
        .into_iter()
        .map(|(name, arch)| {
            let classes = arch.num_classes();
            let shape = arch.input_shape.clone();
            let net = random_network(arch, &mut rng);
            let batch = random_batch(&shape, 4, classes, &mut rng);
            (name, net, batch)
        })
        .collect()
}
