//! Fixtures shared by the benchmarks.

use holoprop::trainer::synth_dataset;
use holoprop::{Activation, LayerSpec, Network, NetworkSpec, Params, PoolSpec, RealTensor};

pub struct Fixture {
    pub net: Network,
    pub params: Params,
    pub x: RealTensor,
    pub labels: Vec<usize>,
}

fn build(spec: NetworkSpec, batch: usize) -> Fixture {
    let net = Network::new(spec).expect("valid fixture network");
    let params = net.init_params(1.0, 0);
    let input = net.spec.input.clone();
    let data = synth_dataset(batch, &input, net.n_classes(), 1).expect("synthetic batch");
    let idx: Vec<usize> = (0..batch).collect();
    let (x, labels) = data.batch(&idx);
    Fixture { net, params, x, labels }
}

/// 784-256-256-10 shifted-sigmoid MLP with a batch of 20.
pub fn mnist_mlp(batch: usize) -> Fixture {
    build(NetworkSpec::mlp(&[784, 256, 256, 10], Activation::ShiftedSigmoid), batch)
}

/// Two conv layers with softmax pooling on 28x28 inputs, dSiLU.
pub fn small_cnn(batch: usize) -> Fixture {
    let spec = NetworkSpec {
        input: vec![1, 28, 28],
        layers: vec![
            LayerSpec::Conv { channels: 8, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
            LayerSpec::Conv { channels: 16, kernel: 3, stride: 1, padding: 1, pool: Some(PoolSpec { window: 2, stride: 2 }) },
            LayerSpec::Dense { units: 10 },
        ],
        activation: Activation::Dsilu,
        tau: 1.0,
    };
    build(spec, batch)
}
