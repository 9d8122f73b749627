#![allow(dead_code)]

use dwcaps::conv::{ConvMode, ConvSpec, ConvWeights, Padding};
use dwcaps::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn maybe_bias(rng: &mut ChaCha8Rng, len: usize) -> Option<Tensor> {
    rng.gen_bool(0.5).then(|| uniform(rng, &[len]))
}

/// A random valid layer of `mode` with input, covering both strides and paddings.
pub fn random_conv_case(rng: &mut ChaCha8Rng, mode: ConvMode) -> (ConvSpec, ConvWeights, Tensor) {
    let k = if mode == ConvMode::Pointwise { 1 } else { [1, 3, 5][rng.gen_range(0..3)] };
    let m = rng.gen_range(1..=5);
    let n = if mode == ConvMode::Depthwise { m } else { rng.gen_range(1..=5) };
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let stride = rng.gen_range(1..=2);
    let spec = ConvSpec::new(mode, k, m, n).unwrap().with_stride(stride).unwrap().with_padding(padding);
    let batch = rng.gen_range(1..=2);
    let h = rng.gen_range(k.max(2)..=8);
    let w = rng.gen_range(k.max(2)..=8);
    let input = uniform(rng, &[batch, h, w, m]);
    let weights = match mode {
        ConvMode::Standard => ConvWeights::Standard { kernel: uniform(rng, &[k, k, m, n]), bias: maybe_bias(rng, n) },
        ConvMode::Depthwise => ConvWeights::Depthwise { kernel: uniform(rng, &[k, k, m]), bias: maybe_bias(rng, m) },
        ConvMode::Pointwise => ConvWeights::Pointwise { kernel: uniform(rng, &[1, 1, m, n]), bias: maybe_bias(rng, n) },
        ConvMode::Separable => ConvWeights::Separable {
            depthwise: uniform(rng, &[k, k, m]),
            depthwise_bias: maybe_bias(rng, m),
            pointwise: uniform(rng, &[1, 1, m, n]),
            bias: maybe_bias(rng, n),
        },
    };
    (spec, weights, input)
}
