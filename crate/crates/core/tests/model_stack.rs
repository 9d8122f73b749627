use dwcaps::capsule::{norm, CapsuleConfig};
use dwcaps::model::{
    build_variant, compare_variant, count_parameters, gradient_check_model, ArchitectureVariant, ModelOptions,
    VariantBase, KERNEL_SWEEP, REFERENCE_COMPARISONS,
};
use dwcaps::tensor::Tensor;

fn v(s: &str) -> ArchitectureVariant {
    s.parse().unwrap()
}

#[test]
fn full_stack_gradients_on_small_input() {
    let caps = CapsuleConfig { num_classes: 3, primary_capsule_dim: 4, class_capsule_dim: 4, routing_iterations: 3 };
    let opts = ModelOptions { filters: 4, input_size: Some(8), capsule_grid: 4, ..Default::default() };
    for name in ["32-v1-2-2-k3", "32-v2-2-1-k3", "32-v1-1-1-k5"] {
        let model = build_variant(v(name), caps, opts).unwrap();
        let params = model.init_params(5).unwrap();
        let images = Tensor::random_uniform(&[2, 8, 8, 3], 6, 0.0, 1.0).unwrap();
        let (err, worst) = gradient_check_model(&model, &params, &images, &[0, 2], 1e-5).unwrap();
        assert!(err < 1e-4, "{name}: {err} in {worst}");
    }
}

#[test]
fn every_variant_builds_and_forwards_at_reduced_width() {
    let caps = CapsuleConfig::default();
    let opts = ModelOptions { filters: 8, ..Default::default() };
    for base in VariantBase::all() {
        let model = build_variant(base.with_kernel(3).unwrap(), caps, opts).unwrap();
        let params = model.init_params(1).unwrap();
        let s = model.input_extent();
        let images = Tensor::random_uniform(&[2, s, s, 3], 2, 0.0, 1.0).unwrap();
        let out = model.predict(&params, &images).unwrap();
        assert_eq!(out.shape(), &[2, 29, 16], "{base}");
        assert!(out.data().chunks(16).all(|c| norm(c) < 1.0));
    }
}

#[test]
fn parameter_totals_match_tensor_walk() {
    for with_bias in [true, false] {
        let opts = ModelOptions { with_bias, ..Default::default() };
        for base in VariantBase::all() {
            for k in KERNEL_SWEEP {
                let model = build_variant(base.with_kernel(k).unwrap(), CapsuleConfig::default(), opts).unwrap();
                let walked: usize = model.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
                let report = count_parameters(&model).unwrap();
                assert_eq!(report.total_params, walked as u64, "{}", model.name());
                assert_eq!(report.layers.iter().map(|l| l.params).sum::<u64>(), report.total_params);
            }
        }
    }
}

#[test]
fn reference_reductions_are_reported() {
    for r in REFERENCE_COMPARISONS {
        let c = compare_variant(r.variant.parse().unwrap(), CapsuleConfig::default(), ModelOptions::default()).unwrap();
        println!("{}: {:.2}% (published {}%)", r.label, c.reduction_pct, r.published_pct);
        assert!(c.reduction_pct > 0.0 && c.reduction_pct < 100.0);
        assert!(c.separable_params < c.standard_params);
    }
}
