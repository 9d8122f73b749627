//! Named architecture variants, model construction, and cost analysis.
//!
//! A variant is written `<input>-<v1|v2>-<convs>-<pool>-k<kernel>`, e.g.
//! `32-v1-2-2-k3`: 32x32 input, v1 (depthwise separable second conv), two
//! convs, max-pooled (`2`; `1` means no pooling), 3x3 kernels.
//!
//! Reference configuration (all analysis numbers in this crate use it):
//!
//! * every conv has stride 1, same padding, a bias, and a ReLU; both convs
//!   use the variant's kernel size;
//! * conv 1 is standard, 3 -> `filters` (512); conv 2 is `filters -> filters`,
//!   depthwise separable for v1 and standard for v2;
//! * pool flag 2 adds a 2x2/2 max pool after conv 2;
//! * before capsule formation the map is halved with further 2x2/2 max pools
//!   until its extent is at most `capsule_grid` (8);
//! * primary capsules group 8 consecutive channels per pixel; class capsules
//!   are `num_classes x 16` with a transform matrix for every
//!   (primary, class) pair, combined by 3 routing iterations.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{gradient_check, route, Graph, Var};
use crate::capsule::CapsuleConfig;
use crate::conv::{ConvMode, ConvSpec, Geometry, Padding};
use crate::cost::{self, CostReport, LayerCost};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL_SWEEP: [usize; 4] = [9, 7, 5, 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvType {
    /// Depthwise separable second conv.
    V1,
    /// Standard second conv.
    V2,
}

/// A variant without its kernel size, e.g. `32-v1-2-2`; the unit of a kernel sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VariantBase {
    pub input_size: usize,
    pub conv_type: ConvType,
    pub num_convs: usize,
    pub pooled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureVariant {
    pub base: VariantBase,
    pub kernel_size: usize,
}

pub const VARIANT_GRAMMAR: &str =
    "<32|64>-<v1|v2>-<1|2>-<1|2>-k<9|7|5|3> (pool flag 2 requires 2 convs), e.g. 32-v1-2-2-k3";

impl VariantBase {
    pub fn new(input_size: usize, conv_type: ConvType, num_convs: usize, pooled: bool) -> Result<Self> {
        let base = VariantBase { input_size, conv_type, num_convs, pooled };
        base.validate()?;
        Ok(base)
    }

    fn validate(&self) -> Result<()> {
        if self.input_size != 32 && self.input_size != 64 {
            return Err(Error::Usage(format!("input size must be 32 or 64; grammar: {VARIANT_GRAMMAR}")));
        }
        if self.num_convs != 1 && self.num_convs != 2 {
            return Err(Error::Usage(format!("conv count must be 1 or 2; grammar: {VARIANT_GRAMMAR}")));
        }
        if self.pooled && self.num_convs != 2 {
            return Err(Error::Usage(format!("max pooling follows the second conv; grammar: {VARIANT_GRAMMAR}")));
        }
        Ok(())
    }

    pub fn with_kernel(self, kernel_size: usize) -> Result<ArchitectureVariant> {
        let v = ArchitectureVariant { base: self, kernel_size };
        v.validate()?;
        Ok(v)
    }

    pub fn twin(self) -> Self {
        let conv_type = match self.conv_type {
            ConvType::V1 => ConvType::V2,
            ConvType::V2 => ConvType::V1,
        };
        VariantBase { conv_type, ..self }
    }

    /// Mini: 32x32 input, two convs, pooled.
    pub fn is_mini(&self) -> bool {
        self.input_size == 32 && self.num_convs == 2 && self.pooled
    }

    /// Max: 64x64 input, two convs, pooled.
    pub fn is_max(&self) -> bool {
        self.input_size == 64 && self.num_convs == 2 && self.pooled
    }

    /// Every valid base in the naming scheme.
    pub fn all() -> Vec<VariantBase> {
        let mut out = Vec::new();
        for input_size in [32, 64] {
            for conv_type in [ConvType::V1, ConvType::V2] {
                for (num_convs, pooled) in [(1, false), (2, false), (2, true)] {
                    out.push(VariantBase { input_size, conv_type, num_convs, pooled });
                }
            }
        }
        out
    }
}

impl ArchitectureVariant {
    fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !KERNEL_SWEEP.contains(&self.kernel_size) {
            return Err(Error::Usage(format!("kernel must be 9, 7, 5 or 3; grammar: {VARIANT_GRAMMAR}")));
        }
        Ok(())
    }

    pub fn twin(&self) -> Self {
        ArchitectureVariant { base: self.base.twin(), ..*self }
    }
}

impl fmt::Display for VariantBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = match self.conv_type {
            ConvType::V1 => "v1",
            ConvType::V2 => "v2",
        };
        write!(f, "{}-{t}-{}-{}", self.input_size, self.num_convs, if self.pooled { 2 } else { 1 })
    }
}

impl fmt::Display for ArchitectureVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-k{}", self.base, self.kernel_size)
    }
}

fn usage(name: &str) -> Error {
    Error::Usage(format!("unknown variant '{name}'; expected {VARIANT_GRAMMAR}"))
}

impl FromStr for VariantBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let [input, t, convs, pool] = parts[..] else { return Err(usage(s)) };
        let conv_type = match t {
            "v1" => ConvType::V1,
            "v2" => ConvType::V2,
            _ => return Err(usage(s)),
        };
        let num = |x: &str| x.parse::<usize>().map_err(|_| usage(s));
        let pooled = match pool {
            "1" => false,
            "2" => true,
            _ => return Err(usage(s)),
        };
        VariantBase::new(num(input)?, conv_type, num(convs)?, pooled)
    }
}

impl FromStr for ArchitectureVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (base, kernel) = s.rsplit_once("-k").ok_or_else(|| usage(s))?;
        let kernel = kernel.parse::<usize>().map_err(|_| usage(s))?;
        base.parse::<VariantBase>()?.with_kernel(kernel)
    }
}

/// Knobs outside the naming scheme. Defaults give the reference configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOptions {
    /// Filters of both convs.
    pub filters: usize,
    /// Overrides the variant's input extent (small-input tests).
    pub input_size: Option<usize>,
    /// Largest spatial extent handed to capsule formation.
    pub capsule_grid: usize,
    pub with_bias: bool,
    /// Routing logit updates do not propagate gradients.
    pub detach_routing: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { filters: 512, input_size: None, capsule_grid: 8, with_bias: true, detach_routing: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRole {
    /// The variant's pool after the second conv.
    Variant,
    /// A halving step before capsule formation.
    CapsuleStride,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        spec: ConvSpec,
        extent: usize,
    },
    Pool {
        name: String,
        window: usize,
        stride: usize,
        extent: usize,
        out_extent: usize,
        channels: usize,
        role: PoolRole,
    },
    PrimaryCapsules {
        extent: usize,
        channels: usize,
        dim: usize,
        count: usize,
    },
    ClassCapsules {
        num_in: usize,
        num_out: usize,
        in_dim: usize,
        out_dim: usize,
        iterations: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub variant: ArchitectureVariant,
    pub options: ModelOptions,
    pub caps: CapsuleConfig,
    pub layers: Vec<Layer>,
}

/// Named weight tensors in the order [`ModelGraph::forward`] consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: Vec<(String, Tensor)>,
}

impl Params {
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Builds the layer stack of a variant and checks that consecutive shapes fit.
pub fn build_variant(variant: ArchitectureVariant, caps: CapsuleConfig, options: ModelOptions) -> Result<ModelGraph> {
    variant.validate()?;
    caps.validate()?;
    if options.filters == 0 || options.capsule_grid == 0 {
        return Err(Error::Build("filters and capsule grid must be positive".into()));
    }
    let k = variant.kernel_size;
    let f = options.filters;
    let mut extent = options.input_size.unwrap_or(variant.base.input_size);
    let fits = |extent: usize, what: &str| -> Result<()> {
        if k > extent {
            return Err(Error::Build(format!("{k}x{k} kernel of {what} exceeds the {extent}x{extent} feature map")));
        }
        Ok(())
    };
    let mut layers = Vec::new();
    fits(extent, "conv1")?;
    layers.push(Layer::Conv { name: "conv1".into(), spec: ConvSpec::new(ConvMode::Standard, k, 3, f)?, extent });
    if variant.base.num_convs == 2 {
        fits(extent, "conv2")?;
        let mode = match variant.base.conv_type {
            ConvType::V1 => ConvMode::Separable,
            ConvType::V2 => ConvMode::Standard,
        };
        layers.push(Layer::Conv { name: "conv2".into(), spec: ConvSpec::new(mode, k, f, f)?, extent });
    }
    let mut pool = |extent: &mut usize, name: String, role: PoolRole| -> Result<()> {
        if *extent < 2 {
            return Err(Error::Build(format!("cannot pool a {e}x{e} feature map", e = *extent)));
        }
        let out = (*extent - 2) / 2 + 1;
        layers.push(Layer::Pool { name, window: 2, stride: 2, extent: *extent, out_extent: out, channels: f, role });
        *extent = out;
        Ok(())
    };
    if variant.base.pooled {
        pool(&mut extent, "pool".into(), PoolRole::Variant)?;
    }
    let mut step = 0;
    while extent > options.capsule_grid {
        step += 1;
        pool(&mut extent, format!("caps_stride{step}"), PoolRole::CapsuleStride)?;
    }
    let dim = caps.primary_capsule_dim;
    if !f.is_multiple_of(dim) {
        return Err(Error::Build(format!("{f} filters are not divisible by capsule dim {dim}")));
    }
    let count = extent * extent * f / dim;
    layers.push(Layer::PrimaryCapsules { extent, channels: f, dim, count });
    layers.push(Layer::ClassCapsules {
        num_in: count,
        num_out: caps.num_classes,
        in_dim: dim,
        out_dim: caps.class_capsule_dim,
        iterations: caps.routing_iterations,
    });
    Ok(ModelGraph { variant, options, caps, layers })
}

impl ModelGraph {
    pub fn name(&self) -> String {
        self.variant.to_string()
    }

    pub fn input_extent(&self) -> usize {
        self.options.input_size.unwrap_or(self.variant.base.input_size)
    }

    /// Names and shapes of every weight tensor, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let bias = self.options.with_bias;
        for layer in &self.layers {
            match layer {
                Layer::Conv { name, spec, .. } => {
                    let (k, m, n) = (spec.kernel_size, spec.in_channels, spec.out_channels);
                    match spec.mode {
                        ConvMode::Separable => {
                            out.push((format!("{name}.depthwise"), vec![k, k, m]));
                            if bias {
                                out.push((format!("{name}.depthwise_bias"), vec![m]));
                            }
                            out.push((format!("{name}.pointwise"), vec![1, 1, m, n]));
                        }
                        _ => out.push((format!("{name}.kernel"), vec![k, k, m, n])),
                    }
                    if bias {
                        out.push((format!("{name}.bias"), vec![n]));
                    }
                }
                Layer::ClassCapsules { num_in, num_out, in_dim, out_dim, .. } => {
                    out.push(("class_caps.transform".into(), vec![*num_in, *num_out, *in_dim, *out_dim]));
                }
                Layer::Pool { .. } | Layer::PrimaryCapsules { .. } => {}
            }
        }
        out
    }

    /// Symmetric-uniform weights, zero biases; each tensor draws from its own seeded stream.
    pub fn init_params(&self, seed: u64) -> Result<Params> {
        let mut tensors = Vec::new();
        for (idx, (name, shape)) in self.param_shapes().into_iter().enumerate() {
            let stream = seed ^ (idx as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let t = if name.ends_with("bias") {
                Tensor::zeros(&shape)?
            } else {
                let (fan_in, fan_out) = match shape[..] {
                    [k1, k2, _] => (k1 * k2, k1 * k2),
                    [1, 1, m, n] => (m, n),
                    [k1, k2, m, n] if name.starts_with("conv") => (k1 * k2 * m, k1 * k2 * n),
                    [_, _, d, e] => (d, e),
                    _ => unreachable!("unexpected weight shape {shape:?}"),
                };
                Tensor::glorot_uniform(&shape, fan_in, fan_out, stream)?
            };
            tensors.push((name, t));
        }
        Ok(Params { tensors })
    }

    /// Class capsules `[B, num_classes, class_dim]` for a batch `[B, S, S, 3]`.
    pub fn forward<'g>(&self, params: &[Var<'g>], input: Var<'g>) -> Result<Var<'g>> {
        let s = self.input_extent();
        let shape = input.shape();
        let [batch, h, w, 3] = shape[..] else {
            return Err(Error::Shape(format!("model input must be [B,{s},{s},3], got {shape:?}")));
        };
        if h != s || w != s {
            return Err(Error::Shape(format!("model input must be [B,{s},{s},3], got {shape:?}")));
        }
        let expected = self.param_shapes().len();
        if params.len() != expected {
            return Err(Error::Contract(format!("model needs {expected} weight tensors, got {}", params.len())));
        }
        let mut next = params.iter();
        let mut take = || *next.next().expect("parameter count checked above");
        let bias = self.options.with_bias;
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv { spec, .. } => {
                    let geom = spec.geometry();
                    let y = match spec.mode {
                        ConvMode::Separable => {
                            let mut y = x.depthwise_conv2d(&take(), geom)?;
                            if bias {
                                y = y.bias_add(&take())?;
                            }
                            y.conv2d(&take(), Geometry { kernel: 1, stride: 1, padding: Padding::Same })?
                        }
                        _ => x.conv2d(&take(), geom)?,
                    };
                    let y = if bias { y.bias_add(&take())? } else { y };
                    y.relu()
                }
                Layer::Pool { window, stride, .. } => x.maxpool2d(*window, *stride)?,
                Layer::PrimaryCapsules { count, dim, .. } => x.reshape(&[batch, *count, *dim])?.squash(),
                Layer::ClassCapsules { iterations, .. } => {
                    let votes = x.votes(&take())?;
                    route(&votes, *iterations, self.options.detach_routing)?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, params: &Params, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let out = self.forward(&vars, g.constant(images.clone()))?;
        let v = out.value().clone();
        Ok(v)
    }

    /// The second conv, if the model has one.
    pub fn substituted_layer(&self) -> Option<(&ConvSpec, usize)> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv { name, spec, extent } if name == "conv2" => Some((spec, *extent)),
            _ => None,
        })
    }
}

/// Exact per-layer parameters and MACs.
///
/// Class-capsule MACs count the vote transforms plus every coupled sum and
/// every agreement update of routing; pooling and squash are not MACs.
pub fn count_parameters(model: &ModelGraph) -> Result<CostReport> {
    let bias = model.options.with_bias;
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for layer in &model.layers {
        rows.push(match layer {
            Layer::Conv { name, spec, extent } => LayerCost {
                layer: name.clone(),
                kind: format!(
                    "{}-conv k{} {}->{}",
                    match spec.mode {
                        ConvMode::Standard => "standard",
                        ConvMode::Separable => "separable",
                        ConvMode::Depthwise => "depthwise",
                        ConvMode::Pointwise => "pointwise",
                    },
                    spec.kernel_size,
                    spec.in_channels,
                    spec.out_channels
                ),
                params: cost::param_count(spec, bias)?,
                macs: cost::conv_macs(spec, *extent as u64)?,
            },
            Layer::Pool { name, extent, out_extent, role, .. } => {
                if *role == PoolRole::CapsuleStride {
                    notes.push(format!("capsule stride step {name}: {extent}x{extent} -> {out_extent}x{out_extent}"));
                }
                LayerCost {
                    layer: name.clone(),
                    kind: format!("maxpool 2x2/2 {extent}->{out_extent}"),
                    params: 0,
                    macs: 0,
                }
            }
            Layer::PrimaryCapsules { extent, channels, dim, count } => LayerCost {
                layer: "primary_caps".into(),
                kind: format!("{count} caps of dim {dim} ({extent}x{extent}x{channels})"),
                params: 0,
                macs: 0,
            },
            Layer::ClassCapsules { num_in, num_out, in_dim, out_dim, iterations } => {
                let (i, j, d, e, r) =
                    (*num_in as u64, *num_out as u64, *in_dim as u64, *out_dim as u64, *iterations as u64);
                LayerCost {
                    layer: "class_caps".into(),
                    kind: format!("{num_out} caps of dim {out_dim}, {iterations} routing iters"),
                    params: i * j * d * e,
                    macs: i * j * d * e + (2 * r - 1) * i * j * e,
                }
            }
        });
    }
    let mut report = CostReport::new(model.name(), rows);
    report.notes = notes;
    if let Some((spec, extent)) = model.substituted_layer() {
        let (k, m, n, d) = (spec.kernel_size as u64, spec.in_channels as u64, spec.out_channels as u64, extent as u64);
        report.separable_over_standard_macs =
            Some(cost::mac_separable(k, m, n, d)? as f64 / cost::mac_standard(k, m, n, d)? as f64);
        let sep = ConvSpec { mode: ConvMode::Separable, ..*spec };
        let std = ConvSpec { mode: ConvMode::Standard, ..*spec };
        report.separable_over_standard_params =
            Some(cost::param_count(&sep, bias)? as f64 / cost::param_count(&std, bias)? as f64);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub separable: String,
    pub standard: String,
    pub separable_params: u64,
    pub standard_params: u64,
    /// `100 * (1 - separable / standard)` over whole models.
    pub reduction_pct: f64,
    /// The same reduction restricted to the substituted conv.
    pub layer_reduction_pct: Option<f64>,
}

/// Total-parameter reduction of a v1 model against its v2 twin.
pub fn compare_dw_vs_sc(v1: &ModelGraph, v2: &ModelGraph) -> Result<Comparison> {
    let twins = v1.variant.base.conv_type == ConvType::V1
        && v2.variant.base.conv_type == ConvType::V2
        && v1.variant.twin() == v2.variant
        && v1.options == v2.options
        && v1.caps == v2.caps;
    if !twins {
        return Err(Error::Contract(format!("{} and {} are not v1/v2 twins", v1.name(), v2.name())));
    }
    let (r1, r2) = (count_parameters(v1)?, count_parameters(v2)?);
    let layer = |r: &CostReport| r.layers.iter().find(|l| l.layer == "conv2").map(|l| l.params);
    let layer_reduction_pct = match (layer(&r1), layer(&r2)) {
        (Some(a), Some(b)) => Some(100.0 * (1.0 - a as f64 / b as f64)),
        _ => None,
    };
    Ok(Comparison {
        separable: v1.name(),
        standard: v2.name(),
        separable_params: r1.total_params,
        standard_params: r2.total_params,
        reduction_pct: 100.0 * (1.0 - r1.total_params as f64 / r2.total_params as f64),
        layer_reduction_pct,
    })
}

pub struct SweepEntry {
    pub kernel_size: usize,
    pub result: Result<(ModelGraph, CostReport)>,
}

/// One model and report per kernel size in 9, 7, 5, 3. Failures are kept per entry.
pub fn kernel_sweep(base: VariantBase, caps: CapsuleConfig, options: ModelOptions) -> Vec<SweepEntry> {
    KERNEL_SWEEP
        .iter()
        .map(|&k| SweepEntry {
            kernel_size: k,
            result: base
                .with_kernel(k)
                .and_then(|v| build_variant(v, caps, options))
                .and_then(|m| count_parameters(&m).map(|r| (m, r))),
        })
        .collect()
}

/// A named DW-vs-SC comparison with its published reduction.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceComparison {
    pub label: &'static str,
    /// The v1 member of the twin pair.
    pub variant: &'static str,
    pub published_pct: f64,
}

/// Twin pairs whose published reductions the reference configuration is checked against.
pub const REFERENCE_COMPARISONS: [ReferenceComparison; 3] = [
    ReferenceComparison { label: "Capsule 32 DW Mini", variant: "32-v1-2-2-k5", published_pct: 21.0 },
    ReferenceComparison { label: "Capsule 64 DW Max", variant: "64-v1-2-2-k5", published_pct: 25.0 },
    ReferenceComparison { label: "Capsule 32 DW", variant: "32-v1-2-1-k7", published_pct: 40.0 },
];

/// Builds both twins of `variant` (v1 first) and compares them.
pub fn compare_variant(variant: ArchitectureVariant, caps: CapsuleConfig, options: ModelOptions) -> Result<Comparison> {
    let (v1, v2) = match variant.base.conv_type {
        ConvType::V1 => (variant, variant.twin()),
        ConvType::V2 => (variant.twin(), variant),
    };
    compare_dw_vs_sc(&build_variant(v1, caps, options)?, &build_variant(v2, caps, options)?)
}

/// Central-difference check of the batch margin loss with respect to every
/// weight tensor and the input. Returns the worst relative error and the name
/// of the tensor it occurred in (`"input"` for the images).
pub fn gradient_check_model(
    model: &ModelGraph,
    params: &Params,
    images: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<(f64, String)> {
    let mut worst = (0.0, String::new());
    for k in 0..=params.tensors.len() {
        let (name, x) = match params.tensors.get(k) {
            Some((name, t)) => (name.clone(), t),
            None => ("input".to_string(), images),
        };
        let err = gradient_check(
            |g, leaf| {
                let mut vars: Vec<Var<'_>> = params.tensors.iter().map(|(_, t)| g.constant(t.clone())).collect();
                let input = if k < vars.len() {
                    vars[k] = leaf;
                    g.constant(images.clone())
                } else {
                    leaf
                };
                model.forward(&vars, input)?.margin_loss(labels)
            },
            x,
            h,
        )?;
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &str) -> ArchitectureVariant {
        s.parse().unwrap()
    }

    #[test]
    fn names_round_trip() {
        for base in VariantBase::all() {
            for k in KERNEL_SWEEP {
                let var = base.with_kernel(k).unwrap();
                assert_eq!(var.to_string().parse::<ArchitectureVariant>().unwrap(), var);
            }
        }
        assert_eq!(v("32-v1-2-2-k3").to_string(), "32-v1-2-2-k3");
        assert!(v("64-v2-2-2-k9").base.is_max());
        assert!(v("32-v1-2-2-k9").base.is_mini());
    }

    #[test]
    fn bad_names_are_usage_errors() {
        for bad in ["32-v1-1-2-k3", "48-v1-2-2-k3", "32-v3-2-2-k3", "32-v1-2-2-k4", "32-v1-2-2", "junk", "32-v1-3-1-k3"]
        {
            assert!(matches!(bad.parse::<ArchitectureVariant>(), Err(Error::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn single_conv_sc_variant() {
        let m = build_variant(v("32-v2-1-1-k9"), CapsuleConfig::default(), ModelOptions::default()).unwrap();
        let Layer::Conv { spec, .. } = &m.layers[0] else { panic!() };
        assert_eq!((spec.mode, spec.kernel_size, spec.in_channels, spec.out_channels), (ConvMode::Standard, 9, 3, 512));
        assert!(matches!(m.layers.last(), Some(Layer::ClassCapsules { num_out: 29, out_dim: 16, .. })));
        assert_eq!(m.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count(), 1);
    }

    #[test]
    fn mini_twins_second_conv() {
        let caps = CapsuleConfig::default();
        let opts = ModelOptions::default();
        let dw = count_parameters(&build_variant(v("32-v1-2-2-k3"), caps, opts).unwrap()).unwrap();
        let sc = count_parameters(&build_variant(v("32-v2-2-2-k3"), caps, opts).unwrap()).unwrap();
        assert_eq!(dw.layers[1].params, 9 * 512 + 512 * 512 + 512 + 512);
        assert_eq!(sc.layers[1].params, 9 * 512 * 512 + 512);
        let ratio = dw.layers[1].params as f64 / sc.layers[1].params as f64;
        assert_eq!(ratio, 267_776.0 / 2_359_808.0);
        assert!((ratio - 0.1126).abs() < 1e-3, "{ratio}");
        for (a, b) in dw.layers.iter().zip(&sc.layers) {
            if a.layer != "conv2" {
                assert_eq!(a.params, b.params);
            }
        }
        assert_eq!(sc.total_params - dw.total_params, sc.layers[1].params - dw.layers[1].params);
    }

    #[test]
    fn first_layer_params() {
        let m = build_variant(v("32-v1-2-2-k3"), CapsuleConfig::default(), ModelOptions::default()).unwrap();
        assert_eq!(count_parameters(&m).unwrap().layers[0].params, 14_336);
    }

    #[test]
    fn twin_check() {
        let caps = CapsuleConfig::default();
        let opts = ModelOptions::default();
        let a = build_variant(v("32-v1-2-2-k3"), caps, opts).unwrap();
        let b = build_variant(v("32-v2-2-2-k5"), caps, opts).unwrap();
        assert!(matches!(compare_dw_vs_sc(&a, &b), Err(Error::Contract(_))));
        assert!(matches!(compare_dw_vs_sc(&a, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn geometry_failure_is_build_error() {
        let opts = ModelOptions { input_size: Some(8), filters: 8, ..Default::default() };
        assert!(matches!(build_variant(v("32-v1-2-2-k9"), CapsuleConfig::default(), opts), Err(Error::Build(_))));
        assert!(VariantBase::new(32, ConvType::V1, 0, false).is_err());
        assert!(build_variant(v("32-v1-2-2-k7"), CapsuleConfig::default(), opts).is_ok());
    }

    #[test]
    fn capsule_stride_steps() {
        let m = build_variant(v("64-v1-2-2-k3"), CapsuleConfig::default(), ModelOptions::default()).unwrap();
        let steps = m.layers.iter().filter(|l| matches!(l, Layer::Pool { role: PoolRole::CapsuleStride, .. })).count();
        assert_eq!(steps, 2);
        assert!(matches!(
            m.layers.iter().find(|l| matches!(l, Layer::PrimaryCapsules { .. })),
            Some(Layer::PrimaryCapsules { extent: 8, count: 4096, .. })
        ));
        let report = count_parameters(&m).unwrap();
        assert_eq!(report.notes.len(), 2);
    }

    #[test]
    fn param_shapes_match_init() {
        let opts = ModelOptions { filters: 16, ..Default::default() };
        let caps = CapsuleConfig { num_classes: 3, ..Default::default() };
        for name in ["32-v1-2-2-k3", "32-v2-2-1-k5", "64-v1-1-1-k7"] {
            let m = build_variant(v(name), caps, opts).unwrap();
            let p = m.init_params(1).unwrap();
            assert_eq!(p.total_elements() as u64, count_parameters(&m).unwrap().total_params);
        }
    }

    #[test]
    fn no_bias_toggle() {
        let opts = ModelOptions { with_bias: false, ..Default::default() };
        let m = build_variant(v("32-v1-2-2-k3"), CapsuleConfig::default(), opts).unwrap();
        let r = count_parameters(&m).unwrap();
        assert_eq!(r.layers[0].params, 27 * 512);
        assert_eq!(r.layers[1].params, 9 * 512 + 512 * 512);
    }

    #[test]
    fn sweep_has_four_monotone_entries() {
        let base: VariantBase = "32-v1-2-2".parse().unwrap();
        let sweep = kernel_sweep(base, CapsuleConfig::default(), ModelOptions::default());
        assert_eq!(sweep.iter().map(|e| e.kernel_size).collect::<Vec<_>>(), vec![9, 7, 5, 3]);
        let totals: Vec<u64> = sweep.iter().map(|e| e.result.as_ref().unwrap().1.total_params).collect();
        assert!(totals.windows(2).all(|w| w[0] >= w[1]));
        let direct =
            build_variant(base.with_kernel(3).unwrap(), CapsuleConfig::default(), ModelOptions::default()).unwrap();
        assert_eq!(sweep[3].result.as_ref().unwrap().0, direct);
    }

    #[test]
    fn sweep_reports_failures_per_entry() {
        let base: VariantBase = "32-v1-2-2".parse().unwrap();
        let opts = ModelOptions { input_size: Some(6), filters: 8, ..Default::default() };
        let sweep = kernel_sweep(base, CapsuleConfig::default(), opts);
        assert_eq!(sweep.len(), 4);
        assert!(sweep[0].result.is_err() && sweep[1].result.is_err());
        assert!(sweep[2].result.is_ok() && sweep[3].result.is_ok());
    }
}
