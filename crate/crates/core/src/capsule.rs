//! Capsule layer: squash, primary capsules, vote prediction, routing by
//! agreement, margin loss and class prediction.
//!
//! These are plain value-level functions on [`Tensor`]s. The differentiable
//! counterparts used during training live on [`crate::autograd::Var`] and
//! share the arithmetic helpers defined here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MARGIN_POS: f64 = 0.9;
pub const MARGIN_NEG: f64 = 0.1;
pub const DOWN_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapsuleConfig {
    pub primary_capsule_dim: usize,
    pub class_capsule_dim: usize,
    pub num_classes: usize,
    pub routing_iterations: usize,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        CapsuleConfig { primary_capsule_dim: 8, class_capsule_dim: 16, num_classes: 29, routing_iterations: 3 }
    }
}

impl CapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.primary_capsule_dim == 0
            || self.class_capsule_dim == 0
            || self.num_classes == 0
            || self.routing_iterations == 0
        {
            return Err(Error::Contract(format!("capsule config fields must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Scale applied by squash to a vector of squared norm `n2`: `sqrt(n2) / (1 + n2)`.
pub(crate) fn squash_scale(n2: f64) -> f64 {
    if n2 == 0.0 {
        0.0
    } else {
        n2.sqrt() / (1.0 + n2)
    }
}

/// Vector-Jacobian product of squash at input `s` for upstream gradient `gv`.
pub(crate) fn squash_vjp(s: &[f64], gv: &[f64], out: &mut [f64]) {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        out.fill(0.0);
        return;
    }
    let g = squash_scale(n2);
    let dot: f64 = s.iter().zip(gv).map(|(a, b)| a * b).sum();
    let coef = dot * (1.0 - n2) / (n2.sqrt() * (1.0 + n2) * (1.0 + n2));
    for ((o, &si), &gi) in out.iter_mut().zip(s).zip(gv) {
        *o = g * gi + coef * si;
    }
}

/// `v * |v|^2 / (1 + |v|^2) / |v|`; the zero vector maps to zero.
pub fn squash(v: &[f64]) -> Vec<f64> {
    let n2: f64 = v.iter().map(|x| x * x).sum();
    let s = squash_scale(n2);
    v.iter().map(|x| x * s).collect()
}

/// Squash applied independently to every vector along the last axis.
pub fn squash_last(t: &Tensor) -> Tensor {
    let d = *t.shape().last().unwrap();
    let mut out = t.clone();
    for v in out.data_mut().chunks_mut(d) {
        let s = squash_scale(v.iter().map(|x| x * x).sum());
        v.iter_mut().for_each(|x| *x *= s);
    }
    out
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Groups consecutive runs of `dim` channels at each pixel into capsules and
/// squashes them. `[H,W,C]` gives `[H*W*C/dim, dim]`; a batch `[B,H,W,C]`
/// gives `[B, H*W*C/dim, dim]`.
pub fn primary_capsules(feature_map: &Tensor, dim: usize) -> Result<Tensor> {
    let shape = primary_capsule_shape(feature_map.shape(), dim)?;
    Ok(squash_last(&feature_map.reshape(&shape)?))
}

pub(crate) fn primary_capsule_shape(shape: &[usize], dim: usize) -> Result<Vec<usize>> {
    let (batch, h, w, c) = match *shape {
        [h, w, c] => (None, h, w, c),
        [b, h, w, c] => (Some(b), h, w, c),
        _ => return Err(Error::Shape(format!("primary capsules need [H,W,C] or [B,H,W,C], got {shape:?}"))),
    };
    if dim == 0 || c % dim != 0 {
        return Err(Error::Shape(format!("{c} channels are not divisible by capsule dim {dim}")));
    }
    let caps = h * w * c / dim;
    Ok(match batch {
        Some(b) => vec![b, caps, dim],
        None => vec![caps, dim],
    })
}

/// Shape checks for the vote transform; returns `(batch, in, out, in_dim, out_dim)`.
pub(crate) fn vote_dims(poses: &[usize], weights: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, i, d) = match *poses {
        [i, d] => (1, i, d),
        [b, i, d] => (b, i, d),
        _ => return Err(Error::Shape(format!("poses must be [I,D] or [B,I,D], got {poses:?}"))),
    };
    match *weights {
        [wi, j, wd, e] if wi == i && wd == d => Ok((b, i, j, d, e)),
        _ => Err(Error::Shape(format!("transform {weights:?} does not match poses {poses:?}"))),
    }
}

/// `votes[b,i,j,e] = sum_d poses[b,i,d] * w[i,j,d,e]`.
pub(crate) fn votes_raw(u: &[f64], w: &[f64], b: usize, i: usize, j: usize, d: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * i * j * e];
    for bi in 0..b {
        for ii in 0..i {
            let pose = &u[(bi * i + ii) * d..][..d];
            for jj in 0..j {
                let o = &mut out[((bi * i + ii) * j + jj) * e..][..e];
                let mat = &w[(ii * j + jj) * d * e..][..d * e];
                for (dd, &p) in pose.iter().enumerate() {
                    for (ov, wv) in o.iter_mut().zip(&mat[dd * e..][..e]) {
                        *ov += p * wv;
                    }
                }
            }
        }
    }
    out
}

/// Prediction vectors `u_hat[i,j] = W[i,j]^T u_i` for every input/output pair.
pub fn predict_votes(poses: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (b, i, j, d, e) = vote_dims(poses.shape(), weights.shape())?;
    let data = votes_raw(poses.data(), weights.data(), b, i, j, d, e);
    let shape: Vec<usize> = if poses.rank() == 2 { vec![i, j, e] } else { vec![b, i, j, e] };
    Tensor::new(&shape, data)
}

/// Coupling coefficients and outputs of every routing iteration.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    /// `couplings[t]` is `[I, J]` (or `[B, I, J]`) at iteration `t`.
    pub couplings: Vec<Tensor>,
    pub outputs: Tensor,
}

/// Routing by agreement. Logits start at zero; each iteration takes a softmax
/// over outputs, forms the coupled sum, squashes it, and adds the agreement
/// `u_hat . v` to the logits.
pub fn dynamic_routing(votes: &Tensor, iterations: usize) -> Result<Tensor> {
    dynamic_routing_traced(votes, iterations).map(|t| t.outputs)
}

pub fn dynamic_routing_traced(votes: &Tensor, iterations: usize) -> Result<RoutingTrace> {
    if iterations < 1 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let single = votes.rank() == 3;
    let (b, i, j, e) = match *votes.shape() {
        [i, j, e] => (1, i, j, e),
        [b, i, j, e] => (b, i, j, e),
        _ => return Err(Error::Shape(format!("votes must be [I,J,E] or [B,I,J,E], got {:?}", votes.shape()))),
    };
    let u = votes.data();
    let mut logits = Tensor::zeros(&[b, i, j])?;
    let mut couplings = Vec::with_capacity(iterations);
    let mut v = vec![0.0; b * j * e];
    for t in 0..iterations {
        let c = logits.softmax(2)?;
        v = routing_sum_raw(c.data(), u, b, i, j, e);
        for s in v.chunks_mut(e) {
            let k = squash_scale(s.iter().map(|x| x * x).sum());
            s.iter_mut().for_each(|x| *x *= k);
        }
        if t + 1 < iterations {
            let agree = agreement_raw(u, &v, b, i, j, e);
            for (l, a) in logits.data_mut().iter_mut().zip(agree) {
                *l += a;
            }
        }
        couplings.push(if single { c.reshape(&[i, j])? } else { c });
    }
    let out_shape: Vec<usize> = if single { vec![j, e] } else { vec![b, j, e] };
    Ok(RoutingTrace { couplings, outputs: Tensor::new(&out_shape, v)? })
}

/// `s[b,j,:] = sum_i c[b,i,j] * u[b,i,j,:]`
pub(crate) fn routing_sum_raw(c: &[f64], u: &[f64], b: usize, i: usize, j: usize, e: usize) -> Vec<f64> {
    let mut s = vec![0.0; b * j * e];
    for bi in 0..b {
        for ii in 0..i {
            for jj in 0..j {
                let cv = c[(bi * i + ii) * j + jj];
                let src = &u[((bi * i + ii) * j + jj) * e..][..e];
                for (o, x) in s[(bi * j + jj) * e..][..e].iter_mut().zip(src) {
                    *o += cv * x;
                }
            }
        }
    }
    s
}

/// `a[b,i,j] = u[b,i,j,:] . v[b,j,:]`
pub(crate) fn agreement_raw(u: &[f64], v: &[f64], b: usize, i: usize, j: usize, e: usize) -> Vec<f64> {
    let mut a = vec![0.0; b * i * j];
    for bi in 0..b {
        for ii in 0..i {
            for jj in 0..j {
                let x = &u[((bi * i + ii) * j + jj) * e..][..e];
                let y = &v[(bi * j + jj) * e..][..e];
                a[(bi * i + ii) * j + jj] = x.iter().zip(y).map(|(p, q)| p * q).sum();
            }
        }
    }
    a
}

/// Margin loss of one item: capsules `[J, D]`, label `< J`.
pub fn margin_loss(capsules: &Tensor, label: usize) -> Result<f64> {
    let (j, d) = match *capsules.shape() {
        [j, d] => (j, d),
        _ => return Err(Error::Shape(format!("capsules must be [J,D], got {:?}", capsules.shape()))),
    };
    if label >= j {
        return Err(Error::Label { label, num_classes: j });
    }
    Ok(capsules.data().chunks(d).enumerate().map(|(k, v)| margin_term(norm(v), k == label)).sum())
}

pub(crate) fn margin_term(n: f64, present: bool) -> f64 {
    if present {
        (MARGIN_POS - n).max(0.0).powi(2)
    } else {
        DOWN_WEIGHT * (n - MARGIN_NEG).max(0.0).powi(2)
    }
}

/// d(term)/d(norm).
pub(crate) fn margin_term_grad(n: f64, present: bool) -> f64 {
    if present {
        -2.0 * (MARGIN_POS - n).max(0.0)
    } else {
        2.0 * DOWN_WEIGHT * (n - MARGIN_NEG).max(0.0)
    }
}

/// Index of the longest capsule; ties go to the lowest index.
pub fn class_prediction(capsules: &Tensor) -> usize {
    let d = *capsules.shape().last().unwrap();
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in capsules.data().chunks(d).enumerate() {
        let n = norm(v);
        if n > best.1 {
            best = (k, n);
        }
    }
    best.0
}

/// Per-item predictions for a batch of class capsules `[B, J, D]`.
pub fn batch_predictions(capsules: &Tensor) -> Vec<usize> {
    let (j, d) = (capsules.shape()[1], capsules.shape()[2]);
    capsules.data().chunks(j * d).map(|item| class_prediction(&Tensor::new(&[j, d], item.to_vec()).unwrap())).collect()
}
