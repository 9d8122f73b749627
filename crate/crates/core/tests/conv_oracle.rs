mod common;

use dwcaps::conv::{conv_layer_forward, naive_conv_oracle, ConvMode, ConvSpec, ConvWeights, Padding};
use dwcaps::cost::{conv_macs, mac_standard};
use dwcaps::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fast_paths_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for mode in [ConvMode::Standard, ConvMode::Depthwise, ConvMode::Pointwise, ConvMode::Separable] {
        for case in 0..40 {
            let (spec, weights, input) = common::random_conv_case(&mut rng, mode);
            let fast = conv_layer_forward(&input, &weights, &spec).unwrap();
            let slow = naive_conv_oracle(&input, &weights, &spec).unwrap();
            assert_eq!(fast.shape(), slow.shape(), "{mode:?} {spec:?} {:?}", input.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{mode:?} case {case}: {spec:?}");
        }
    }
}

#[test]
fn separable_equals_standard_with_factored_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in [1, 3, 5] {
        let (m, n) = (3, 4);
        let dw = common::uniform(&mut rng, &[k, k, m]);
        let pw = common::uniform(&mut rng, &[1, 1, m, n]);
        let mut full = Tensor::zeros(&[k, k, m, n]).unwrap();
        for i in 0..k {
            for j in 0..k {
                for c in 0..m {
                    for o in 0..n {
                        full.set(&[i, j, c, o], dw.get(&[i, j, c]) * pw.get(&[0, 0, c, o]));
                    }
                }
            }
        }
        let input = common::uniform(&mut rng, &[2, 7, 6, m]);
        let sep_spec = ConvSpec::new(ConvMode::Separable, k, m, n).unwrap();
        let std_spec = ConvSpec::new(ConvMode::Standard, k, m, n).unwrap();
        let sep = ConvWeights::Separable { depthwise: dw, depthwise_bias: None, pointwise: pw, bias: None };
        let std = ConvWeights::Standard { kernel: full, bias: None };
        let a = conv_layer_forward(&input, &sep, &sep_spec).unwrap();
        let b = conv_layer_forward(&input, &std, &std_spec).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "k={k}");
    }
}

#[test]
fn mac_formula_matches_counted_multiplies() {
    for (k, m, n, d) in [(3, 2, 4, 5), (5, 3, 1, 7), (1, 4, 4, 6)] {
        let spec = ConvSpec::new(ConvMode::Standard, k, m, n).unwrap().with_padding(Padding::Same);
        let mut counted = 0u64;
        for _y in 0..d {
            for _x in 0..d {
                for _o in 0..n {
                    for _tap in 0..k * k * m {
                        counted += 1;
                    }
                }
            }
        }
        assert_eq!(mac_standard(k as u64, m as u64, n as u64, d as u64).unwrap(), counted);
        assert_eq!(conv_macs(&spec, d as u64).unwrap(), counted);
    }
}
