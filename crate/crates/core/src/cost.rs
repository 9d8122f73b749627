//! Closed-form parameter and multiply-accumulate counts for convolutions.

use std::fmt;

use crate::conv::{ConvMode, ConvSpec};
use crate::error::{Error, Result};

fn positive(args: &[(&str, u64)]) -> Result<()> {
    for (name, v) in args {
        if *v == 0 {
            return Err(Error::Domain(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

/// `D_K * D_K * M * N * D_F * D_F`
pub fn mac_standard(kernel: u64, in_ch: u64, out_ch: u64, extent: u64) -> Result<u64> {
    positive(&[("D_K", kernel), ("M", in_ch), ("N", out_ch), ("D_F", extent)])?;
    Ok(kernel * kernel * in_ch * out_ch * extent * extent)
}

/// `D_K * D_K * M * D_F * D_F`
pub fn mac_depthwise(kernel: u64, in_ch: u64, extent: u64) -> Result<u64> {
    positive(&[("D_K", kernel), ("M", in_ch), ("D_F", extent)])?;
    Ok(kernel * kernel * in_ch * extent * extent)
}

/// Depthwise stage plus the `M * N * D_F * D_F` pointwise stage.
pub fn mac_separable(kernel: u64, in_ch: u64, out_ch: u64, extent: u64) -> Result<u64> {
    positive(&[("N", out_ch)])?;
    Ok(mac_depthwise(kernel, in_ch, extent)? + in_ch * out_ch * extent * extent)
}

/// Separable-over-standard cost: `1/N + 1/D_K^2`.
pub fn cost_ratio(kernel: u64, out_ch: u64) -> Result<f64> {
    positive(&[("D_K", kernel), ("N", out_ch)])?;
    Ok(1.0 / out_ch as f64 + 1.0 / (kernel * kernel) as f64)
}

/// The same ratio as an exact fraction `(numerator, denominator)`.
pub fn cost_ratio_exact(kernel: u64, out_ch: u64) -> Result<(u64, u64)> {
    positive(&[("D_K", kernel), ("N", out_ch)])?;
    Ok((kernel * kernel + out_ch, out_ch * kernel * kernel))
}

/// Trainable parameters of one conv layer. Separable layers carry a bias per
/// stage (M after the depthwise stage, N after the pointwise stage).
pub fn param_count(spec: &ConvSpec, with_bias: bool) -> Result<u64> {
    spec.validate()?;
    let (k, m, n) = (spec.kernel_size as u64, spec.in_channels as u64, spec.out_channels as u64);
    let b = with_bias as u64;
    Ok(match spec.mode {
        ConvMode::Standard | ConvMode::Pointwise => k * k * m * n + b * n,
        ConvMode::Depthwise => k * k * m + b * m,
        ConvMode::Separable => k * k * m + m * n + b * (m + n),
    })
}

/// MACs of one conv layer evaluated on a `D_F x D_F` input (stride 1).
pub fn conv_macs(spec: &ConvSpec, extent: u64) -> Result<u64> {
    spec.validate()?;
    let (k, m, n) = (spec.kernel_size as u64, spec.in_channels as u64, spec.out_channels as u64);
    match spec.mode {
        ConvMode::Standard | ConvMode::Pointwise => mac_standard(k, m, n, extent),
        ConvMode::Depthwise => mac_depthwise(k, m, extent),
        ConvMode::Separable => mac_separable(k, m, n, extent),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Separable-over-standard ratios for the substituted layer, when the model has one.
    pub separable_over_standard_macs: Option<f64>,
    pub separable_over_standard_params: Option<f64>,
    pub notes: Vec<String>,
}

impl CostReport {
    pub fn new(model: impl Into<String>, layers: Vec<LayerCost>) -> Self {
        let total_params = layers.iter().map(|l| l.params).sum();
        let total_macs = layers.iter().map(|l| l.macs).sum();
        CostReport {
            model: model.into(),
            layers,
            total_params,
            total_macs,
            separable_over_standard_macs: None,
            separable_over_standard_params: None,
            notes: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,macs\n");
        for l in &self.layers {
            s.push_str(&format!("{},{},{},{}\n", l.layer, l.kind, l.params, l.macs));
        }
        s.push_str(&format!("total,,{},{}\n", self.total_params, self.total_macs));
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {}", self.model)?;
        writeln!(f, "{:<16} {:<22} {:>14} {:>16}", "layer", "kind", "params", "macs")?;
        for l in &self.layers {
            writeln!(f, "{:<16} {:<22} {:>14} {:>16}", l.layer, l.kind, l.params, l.macs)?;
        }
        writeln!(f, "{:<16} {:<22} {:>14} {:>16}", "total", "", self.total_params, self.total_macs)?;
        if let (Some(m), Some(p)) = (self.separable_over_standard_macs, self.separable_over_standard_params) {
            writeln!(f, "separable/standard (substituted layer): macs {m:.6}, params {p:.6}")?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}
