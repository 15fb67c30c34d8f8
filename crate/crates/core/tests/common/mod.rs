#![allow(dead_code)]

use std::path::PathBuf;

use holoprop::trainer::{load_mnist, synth_dataset, Dataset};
use holoprop::{Activation, LayerSpec, Network, NetworkSpec, Params, PoolSpec, RealTensor};

pub fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist() -> Dataset {
    load_mnist(&mnist_dir()).expect("MNIST files under data/mnist")
}

/// First `n_train` training images and the last 10,000 as validation.
pub fn mnist_split(n_train: usize) -> (Dataset, Dataset) {
    let (tr, va) = mnist().split(10_000);
    (tr.subset(0..n_train.min(tr.len())), va)
}

/// 6-4-4-4 shifted-sigmoid MLP with one fixed input.
pub fn small_mlp() -> (Network, Params, RealTensor, Vec<usize>) {
    let net = Network::new(NetworkSpec::mlp(&[6, 4, 4, 4], Activation::ShiftedSigmoid)).unwrap();
    let params = net.init_params(1.0, 42);
    let x = RealTensor::from_vec(&[6, 1], vec![0.3, -1.2, 0.8, 0.05, -0.4, 1.5]).unwrap();
    (net, params, x, vec![2])
}

pub fn mnist_mlp() -> Network {
    Network::new(NetworkSpec::mlp(&[784, 256, 256, 10], Activation::ShiftedSigmoid)).unwrap()
}

/// Two conv layers with softmax pooling, then two dense layers, dSiLU.
pub fn small_cnn() -> Network {
    Network::new(NetworkSpec {
        input: vec![1, 12, 12],
        layers: vec![
            LayerSpec::Conv { channels: 4, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
            LayerSpec::Conv { channels: 8, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
            LayerSpec::Dense { units: 32 },
            LayerSpec::Dense { units: 10 },
        ],
        activation: Activation::Dsilu,
        tau: 1.0,
    })
    .unwrap()
}

pub fn synthetic_images() -> Dataset {
    synth_dataset(10, &[1, 12, 12], 10, 7).unwrap()
}
